//! Published hyperparameter rows for the reference experiments.

/// Training hyperparameters of one dataset/network configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct HyperparameterPreset {
    pub name: &'static str,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Weight of the ILP loss.
    pub lambda: f64,
    /// Isotropic resampling target in mm.
    pub spacing_mm: f64,
    pub patch_size: [usize; 3],
    pub batch_size: usize,
}

pub const SBCT_UNET: HyperparameterPreset = HyperparameterPreset {
    name: "sbct",
    learning_rate: 3e-4,
    weight_decay: 5e-4,
    lambda: 1.0,
    spacing_mm: 1.0,
    patch_size: [224, 224, 224],
    batch_size: 1,
};

pub const KITS21_UNET: HyperparameterPreset = HyperparameterPreset {
    name: "kits21",
    learning_rate: 1e-3,
    weight_decay: 5e-4,
    lambda: 0.1,
    spacing_mm: 2.0,
    patch_size: [112, 112, 112],
    batch_size: 1,
};

pub const LNDB_UNET: HyperparameterPreset = HyperparameterPreset {
    name: "lndb",
    learning_rate: 3e-5,
    weight_decay: 5e-4,
    lambda: 0.01,
    spacing_mm: 1.0,
    patch_size: [224, 224, 224],
    batch_size: 1,
};

pub const KITS21_NNUNET: HyperparameterPreset = HyperparameterPreset {
    name: "kits21-nnunet",
    learning_rate: 1e-2,
    weight_decay: 3e-5,
    lambda: 0.1,
    spacing_mm: 1.0,
    patch_size: [160, 112, 128],
    batch_size: 2,
};

pub const LNDB_NNUNET: HyperparameterPreset = HyperparameterPreset {
    name: "lndb-nnunet",
    learning_rate: 1e-3,
    weight_decay: 3e-5,
    lambda: 0.003,
    spacing_mm: 1.0,
    patch_size: [128, 128, 128],
    batch_size: 2,
};

/// Detection network (ILP added to an FPN detector).
pub const KITS21_DETECTION: HyperparameterPreset = HyperparameterPreset {
    name: "kits21-detection",
    learning_rate: 1e-4,
    weight_decay: 0.0,
    lambda: 0.003,
    spacing_mm: 2.0,
    patch_size: [96, 96, 64],
    batch_size: 8,
};

pub const ALL: [HyperparameterPreset; 6] =
    [SBCT_UNET, KITS21_UNET, LNDB_UNET, KITS21_NNUNET, LNDB_NNUNET, KITS21_DETECTION];

pub fn by_name(name: &str) -> Option<HyperparameterPreset> {
    ALL.iter().copied().find(|p| p.name.eq_ignore_ascii_case(name))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup() {
        assert_eq!(by_name("KiTS21").unwrap().lambda, 0.1);
        assert_eq!(by_name("lndb").unwrap().lambda, 0.01);
        assert_eq!(by_name("sbct").unwrap().learning_rate, 3e-4);
        assert!(by_name("unknown").is_none());
    }
}

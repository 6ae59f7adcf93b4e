//! Segmentation and ILP losses with analytic gradients.
//!
//! Every loss takes flat probability arrays and returns its value together
//! with the gradient with respect to the predicted probabilities.

use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Loss weighting and numerical guards.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct LossConfig {
    /// Weight of the ILP term.
    pub lambda: f64,
    pub epsilon: f64,
    pub prob_clamp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda: 0.1, epsilon: 1e-6, prob_clamp: 1e-7 }
    }
}

impl LossConfig {
    pub fn with_lambda(lambda: f64) -> Self {
        LossConfig { lambda, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidParameter("lambda must be >= 0".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidParameter("epsilon must be > 0".into()));
        }
        if !(self.prob_clamp > 0.0 && self.prob_clamp < 0.5) {
            return Err(Error::InvalidParameter("prob_clamp must lie in (0, 0.5)".into()));
        }
        Ok(())
    }
}

/// Loss value with its gradient w.r.t. the prediction it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub gradient: Vec<f64>,
}

fn check_shapes(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::ShapeMismatch { expected: pred.len(), actual: target.len() });
    }
    if pred.is_empty() {
        return Err(Error::ShapeMismatch { expected: 1, actual: 0 });
    }
    Ok(())
}

fn check_unit(values: &[f64], what: &'static str) -> Result<()> {
    if values.iter().all(|v| (0.0..=1.0).contains(v)) {
        Ok(())
    } else {
        Err(Error::InvalidValue(what))
    }
}

/// Generalized Dice loss over the {foreground, background} pair.
///
/// With `w_c = 1 / ((Σ g_c)² + ε)`, `N = Σ_c w_c Σ p_c g_c` and
/// `D = Σ_c w_c Σ (p_c + g_c)`, the loss is `1 - (2N + ε) / (D + ε)`.
/// Background probabilities are `1 - pred`.
pub fn generalized_dice_loss(pred: &[f64], gt: &[f64], epsilon: f64) -> Result<LossValue> {
    check_shapes(pred, gt)?;
    check_unit(pred, "prediction outside [0, 1]")?;
    if gt.iter().any(|&g| g != 0.0 && g != 1.0) {
        return Err(Error::InvalidValue("ground truth must be binary"));
    }
    let n = pred.len() as f64;
    let fg_gt: f64 = gt.iter().sum();
    let bg_gt = n - fg_gt;
    let w_fg = 1.0 / (fg_gt * fg_gt + epsilon);
    let w_bg = 1.0 / (bg_gt * bg_gt + epsilon);

    let mut inter_fg = 0.0;
    let mut inter_bg = 0.0;
    let mut pred_fg = 0.0;
    for (&p, &g) in pred.iter().zip(gt) {
        inter_fg += p * g;
        inter_bg += (1.0 - p) * (1.0 - g);
        pred_fg += p;
    }
    let pred_bg = n - pred_fg;
    let num = w_fg * inter_fg + w_bg * inter_bg;
    let den = w_fg * (pred_fg + fg_gt) + w_bg * (pred_bg + bg_gt);
    let ratio_den = den + epsilon;
    let value = 1.0 - (2.0 * num + epsilon) / ratio_den;

    // dN/dp_i = w_fg g_i - w_bg (1 - g_i);  dD/dp_i = w_fg - w_bg
    let d_den = w_fg - w_bg;
    let scale = 1.0 / (ratio_den * ratio_den);
    let gradient = gt
        .iter()
        .map(|&g| {
            let d_num = w_fg * g - w_bg * (1.0 - g);
            -(2.0 * d_num * ratio_den - (2.0 * num + epsilon) * d_den) * scale
        })
        .collect();
    Ok(LossValue { value, gradient })
}

/// Mean binary cross-entropy against a soft target, probabilities clamped
/// to `[prob_clamp, 1 - prob_clamp]` (zero gradient where clamped).
pub fn soft_bce_loss(pred: &[f64], target: &[f64], prob_clamp: f64) -> Result<LossValue> {
    check_shapes(pred, target)?;
    check_unit(pred, "prediction outside [0, 1]")?;
    check_unit(target, "target outside [0, 1]")?;
    let n = pred.len() as f64;
    let lo = prob_clamp;
    let hi = 1.0 - prob_clamp;
    let mut total = 0.0;
    let mut gradient = Vec::with_capacity(pred.len());
    for (&p, &y) in pred.iter().zip(target) {
        let q = p.clamp(lo, hi);
        total -= y * libm::log(q) + (1.0 - y) * libm::log(1.0 - q);
        let g = if p < lo || p > hi { 0.0 } else { (q - y) / (q * (1.0 - q) * n) };
        gradient.push(g);
    }
    Ok(LossValue { value: total / n, gradient })
}

/// Segmentation objective `GDL + λ BCE`.
///
/// The gradient is the seg-head gradient followed by the λ-scaled ILP-head
/// gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedLoss {
    pub value: f64,
    pub seg: LossValue,
    pub ilp: LossValue,
    pub lambda: f64,
}

impl CombinedLoss {
    pub fn gradient(&self) -> Vec<f64> {
        let mut g = self.seg.gradient.clone();
        g.extend(self.ilp.gradient.iter().map(|d| self.lambda * d));
        g
    }

    pub fn into_loss_value(self) -> LossValue {
        let gradient = self.gradient();
        LossValue { value: self.value, gradient }
    }
}

pub fn combined_seg_loss(
    seg_pred: &[f64],
    seg_gt: &[f64],
    ilp_pred: &[f64],
    ilp_target: &[f64],
    config: &LossConfig,
) -> Result<CombinedLoss> {
    config.validate()?;
    let seg = generalized_dice_loss(seg_pred, seg_gt, config.epsilon)?;
    let ilp = soft_bce_loss(ilp_pred, ilp_target, config.prob_clamp)?;
    let value = if config.lambda == 0.0 { seg.value } else { seg.value + config.lambda * ilp.value };
    Ok(CombinedLoss { value, seg, ilp, lambda: config.lambda })
}

/// Detection objective `L_det + λ BCE`; the detection gradient passes through.
pub fn combined_det_loss(
    det_loss: &LossValue,
    ilp_pred: &[f64],
    ilp_target: &[f64],
    config: &LossConfig,
) -> Result<LossValue> {
    config.validate()?;
    let ilp = soft_bce_loss(ilp_pred, ilp_target, config.prob_clamp)?;
    let value = if config.lambda == 0.0 { det_loss.value } else { det_loss.value + config.lambda * ilp.value };
    let mut gradient = det_loss.gradient.clone();
    gradient.extend(ilp.gradient.iter().map(|d| config.lambda * d));
    Ok(LossValue { value, gradient })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_case(seed: u64, n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
        let gt = (0..n).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
        let soft = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        (pred, gt, soft)
    }

    fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, step: f64) -> f64 {
        let mut plus = x.to_vec();
        let mut minus = x.to_vec();
        plus[i] += step;
        minus[i] -= step;
        (f(&plus) - f(&minus)) / (2.0 * step)
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()) + 1e-10
    }

    #[test]
    fn gdl_perfect_and_total_miss() {
        let gt = vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        assert!(generalized_dice_loss(&gt, &gt, 1e-6).unwrap().value <= 1e-5);
        let inv: Vec<f64> = gt.iter().map(|g| 1.0 - g).collect();
        assert!(generalized_dice_loss(&inv, &gt, 1e-6).unwrap().value >= 1.0 - 1e-3);
    }

    #[test]
    fn gdl_two_by_two_by_hand() {
        // w_fg = w_bg = 1/(4 + ε); N = w (1.4 + 1.7); D = w (3.7 + 4.3)
        let eps = 1e-6;
        let w = 1.0 / (4.0 + eps);
        let expected = 1.0 - (2.0 * w * 3.1 + eps) / (w * 8.0 + eps);
        let v = generalized_dice_loss(&[0.8, 0.2, 0.6, 0.1], &[1.0, 0.0, 1.0, 0.0], eps).unwrap().value;
        assert!((v - expected).abs() < 1e-7);
        assert!((v - 0.2249998875000282).abs() < 1e-7);
    }

    #[test]
    fn gdl_input_errors() {
        assert!(matches!(generalized_dice_loss(&[0.5], &[1.0, 0.0], 1e-6), Err(Error::ShapeMismatch { .. })));
        assert!(generalized_dice_loss(&[1.5, 0.0], &[1.0, 0.0], 1e-6).is_err());
        assert!(generalized_dice_loss(&[0.5, 0.0], &[0.5, 0.0], 1e-6).is_err());
    }

    #[test]
    fn bce_analytic_values() {
        let half = vec![0.5; 9];
        let v = soft_bce_loss(&half, &half, 1e-7).unwrap().value;
        assert!((v - core::f64::consts::LN_2).abs() < 1e-9);
        let hard = vec![0.0, 1.0, 1.0, 0.0];
        let v = soft_bce_loss(&hard, &hard, 1e-7).unwrap().value;
        assert!(v <= -(1.0f64 - 1e-7).ln() + 1e-12);
        assert!(soft_bce_loss(&[0.5, 0.5], &[0.5], 1e-7).is_err());
    }

    #[test]
    fn bce_matches_elementwise_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pred: Vec<f64> = (0..9).map(|_| rng.random_range(0.0..1.0)).collect();
        let target: Vec<f64> = (0..9).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut expected = 0.0;
        for i in 0..9 {
            let p = pred[i].clamp(1e-7, 1.0 - 1e-7);
            expected += -(target[i] * p.ln() + (1.0 - target[i]) * (1.0 - p).ln());
        }
        expected /= 9.0;
        assert!((soft_bce_loss(&pred, &target, 1e-7).unwrap().value - expected).abs() < 1e-9);
    }

    #[test]
    fn combined_seg_composition() {
        let (pred, gt, soft) = random_case(5, 30);
        let ilp_pred: Vec<f64> = pred.iter().rev().copied().collect();
        let gdl = generalized_dice_loss(&pred, &gt, 1e-6).unwrap();
        let bce = soft_bce_loss(&ilp_pred, &soft, 1e-7).unwrap();

        let zero = combined_seg_loss(&pred, &gt, &ilp_pred, &soft, &LossConfig::with_lambda(0.0)).unwrap();
        assert_eq!(zero.value, gdl.value);

        let one = combined_seg_loss(&pred, &gt, &ilp_pred, &soft, &LossConfig::with_lambda(1.0)).unwrap();
        assert!((one.value - (gdl.value + bce.value)).abs() < 1e-12);

        let cfg = LossConfig::with_lambda(crate::presets::KITS21_UNET.lambda);
        let c = combined_seg_loss(&pred, &gt, &ilp_pred, &soft, &cfg).unwrap();
        assert!((c.value - (gdl.value + 0.1 * bce.value)).abs() < 1e-12);
        let grad = c.gradient();
        assert_eq!(grad.len(), 60);
        assert_eq!(&grad[..30], &gdl.gradient[..]);
        for i in 0..30 {
            assert_eq!(grad[30 + i], 0.1 * bce.gradient[i]);
        }
    }

    #[test]
    fn combined_det_composition() {
        let (pred, _, soft) = random_case(6, 12);
        let det = LossValue { value: 0.75, gradient: vec![0.1, -0.2, 0.3] };
        let zero = combined_det_loss(&det, &pred, &soft, &LossConfig::with_lambda(0.0)).unwrap();
        assert_eq!(zero.value, det.value);
        assert_eq!(&zero.gradient[..3], &det.gradient[..]);

        let bce = soft_bce_loss(&pred, &soft, 1e-7).unwrap();
        let none = LossValue { value: 0.0, gradient: vec![] };
        let lambda = crate::presets::LNDB_NNUNET.lambda;
        let v = combined_det_loss(&none, &pred, &soft, &LossConfig::with_lambda(lambda)).unwrap();
        assert_eq!(v.value, 0.003 * bce.value);

        let v = combined_det_loss(&det, &pred, &soft, &LossConfig::with_lambda(0.003)).unwrap();
        assert!((v.value - (0.75 + 0.003 * bce.value)).abs() < 1e-12);
        for i in 0..12 {
            assert_eq!(v.gradient[3 + i], 0.003 * bce.gradient[i]);
        }
        assert!(combined_det_loss(&det, &pred, &soft[..3], &LossConfig::default()).is_err());
    }

    #[test]
    fn invalid_config() {
        for cfg in [
            LossConfig { lambda: -1.0, ..Default::default() },
            LossConfig { epsilon: 0.0, ..Default::default() },
            LossConfig { prob_clamp: 0.5, ..Default::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }

    proptest! {
        #[test]
        fn gdl_gradient_matches_finite_differences(seed in 0u64..300, n in 2usize..24) {
            let (pred, gt, _) = random_case(seed, n);
            let analytic = generalized_dice_loss(&pred, &gt, 1e-6).unwrap().gradient;
            let f = |p: &[f64]| generalized_dice_loss(p, &gt, 1e-6).unwrap().value;
            for i in 0..n {
                let numeric = central_difference(f, &pred, i, 1e-4);
                prop_assert!(rel_close(analytic[i], numeric, 1e-4), "i={} a={} n={}", i, analytic[i], numeric);
            }
        }

        #[test]
        fn bce_gradient_matches_finite_differences(seed in 0u64..300, n in 1usize..24) {
            let (pred, _, soft) = random_case(seed, n);
            let analytic = soft_bce_loss(&pred, &soft, 1e-7).unwrap().gradient;
            let f = |p: &[f64]| soft_bce_loss(p, &soft, 1e-7).unwrap().value;
            let h = 1e-4;
            for i in 0..n {
                let numeric = central_difference(f, &pred, i, h);
                // the central difference itself is off by up to h^2/6 |f'''|,
                // which only matters where the gradient is close to zero
                let (p, y) = (pred[i], soft[i]);
                let third = (2.0 * y / (p - h).powi(3) + 2.0 * (1.0 - y) / (1.0 - p - h).powi(3)) / n as f64;
                let truncation = h * h / 6.0 * third;
                prop_assert!(
                    (analytic[i] - numeric).abs() <= 1e-4 * analytic[i].abs().max(numeric.abs()) + truncation + 1e-10,
                    "i={} a={} n={}", i, analytic[i], numeric
                );
            }
        }

        #[test]
        fn ranges_and_permutation_invariance(seed in 0u64..300, n in 2usize..30, rot in 0usize..30) {
            let (pred, gt, soft) = random_case(seed, n);
            let gdl = generalized_dice_loss(&pred, &gt, 1e-6).unwrap().value;
            prop_assert!((0.0..=1.0 + 1e-6).contains(&gdl));
            let bce = soft_bce_loss(&pred, &soft, 1e-7).unwrap().value;
            prop_assert!(bce >= 0.0);
            let k = rot % n;
            let rotate = |v: &[f64]| { let mut r = v.to_vec(); r.rotate_left(k); r };
            let gdl_r = generalized_dice_loss(&rotate(&pred), &rotate(&gt), 1e-6).unwrap().value;
            let bce_r = soft_bce_loss(&rotate(&pred), &rotate(&soft), 1e-7).unwrap().value;
            prop_assert!((gdl - gdl_r).abs() < 1e-12);
            prop_assert!((bce - bce_r).abs() < 1e-12);
        }

        #[test]
        fn lambda_scales_only_ilp_gradient(seed in 0u64..300, lambda in 0.0f64..5.0) {
            let (pred, gt, soft) = random_case(seed, 16);
            let unit = combined_seg_loss(&pred, &gt, &pred, &soft, &LossConfig::with_lambda(1.0)).unwrap().gradient();
            let scaled = combined_seg_loss(&pred, &gt, &pred, &soft, &LossConfig::with_lambda(lambda)).unwrap().gradient();
            prop_assert_eq!(&unit[..16], &scaled[..16]);
            for i in 16..32 {
                prop_assert_eq!(scaled[i], lambda * unit[i]);
            }
        }
    }
}

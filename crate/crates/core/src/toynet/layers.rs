//! Same-padded 2D convolution with explicit backward pass.

use alloc::vec;
use alloc::vec::Vec;

/// Channel-major stack of 2D maps, `data[c][y][x]` flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Copy of the window `[y0, y0 + h) x [x0, x0 + w)`; outside pixels take
    /// the per-channel pad value.
    pub fn window(&self, y0: i64, x0: i64, h: usize, w: usize, pad: &[f64]) -> FeatureMap {
        let mut out = FeatureMap::zeros(self.channels, h, w);
        for c in 0..self.channels {
            let src = self.channel(c);
            let dst = out.channel_mut(c);
            for y in 0..h {
                let sy = y0 + y as i64;
                for x in 0..w {
                    let sx = x0 + x as i64;
                    dst[y * w + x] = if sy >= 0 && sx >= 0 && (sy as usize) < self.height && (sx as usize) < self.width {
                        src[sy as usize * self.width + sx as usize]
                    } else {
                        pad[c]
                    };
                }
            }
        }
        out
    }

    /// Mirror along x (`horizontal`) or y.
    pub fn flipped(&self, horizontal: bool) -> FeatureMap {
        let mut out = FeatureMap::zeros(self.channels, self.height, self.width);
        let (h, w) = (self.height, self.width);
        for c in 0..self.channels {
            let src = self.channel(c);
            let dst = out.channel_mut(c);
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = if horizontal { (y, w - 1 - x) } else { (h - 1 - y, x) };
                    dst[y * w + x] = src[sy * w + sx];
                }
            }
        }
        out
    }
}

/// Convolution weights `[out][in][ky][kx]` and biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn zeros(out_channels: usize, in_channels: usize, kernel: usize) -> Self {
        ConvLayer {
            out_channels,
            in_channels,
            kernel,
            weights: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    #[inline]
    fn w_index(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + i) * self.kernel + ky) * self.kernel + kx
    }

    /// Zero-padded, stride-1 convolution; output has the input's size.
    pub fn forward(&self, input: &FeatureMap) -> FeatureMap {
        debug_assert_eq!(input.channels, self.in_channels);
        let (h, w) = (input.height, input.width);
        let pad = (self.kernel / 2) as i64;
        let mut out = FeatureMap::zeros(self.out_channels, h, w);
        for o in 0..self.out_channels {
            let dst = out.channel_mut(o);
            dst.iter_mut().for_each(|v| *v = self.bias[o]);
            for i in 0..self.in_channels {
                let src = input.channel(i);
                for ky in 0..self.kernel {
                    let dy = ky as i64 - pad;
                    let (y_lo, y_hi) = valid_range(h, dy);
                    for kx in 0..self.kernel {
                        let dx = kx as i64 - pad;
                        let (x_lo, x_hi) = valid_range(w, dx);
                        let wt = self.weights[self.w_index(o, i, ky, kx)];
                        if wt == 0.0 {
                            continue;
                        }
                        for y in y_lo..y_hi {
                            let sy = (y as i64 + dy) as usize;
                            let d_row = &mut dst[y * w + x_lo..y * w + x_hi];
                            let s_start = (sy * w) as i64 + x_lo as i64 + dx;
                            let s_row = &src[s_start as usize..s_start as usize + (x_hi - x_lo)];
                            for (d, s) in d_row.iter_mut().zip(s_row) {
                                *d += wt * s;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates weight/bias gradients into `grad` (same layout as
    /// `weights` followed by `bias`) and returns the input gradient when
    /// `need_input_grad` is set.
    pub fn backward(
        &self,
        input: &FeatureMap,
        grad_out: &FeatureMap,
        grad: &mut [f64],
        need_input_grad: bool,
    ) -> Option<FeatureMap> {
        let (h, w) = (input.height, input.width);
        let pad = (self.kernel / 2) as i64;
        let nw = self.weights.len();
        let mut grad_in = need_input_grad.then(|| FeatureMap::zeros(self.in_channels, h, w));
        for o in 0..self.out_channels {
            let g_out = grad_out.channel(o);
            grad[nw + o] += g_out.iter().sum::<f64>();
            for i in 0..self.in_channels {
                let src = input.channel(i);
                for ky in 0..self.kernel {
                    let dy = ky as i64 - pad;
                    let (y_lo, y_hi) = valid_range(h, dy);
                    for kx in 0..self.kernel {
                        let dx = kx as i64 - pad;
                        let (x_lo, x_hi) = valid_range(w, dx);
                        let widx = self.w_index(o, i, ky, kx);
                        let wt = self.weights[widx];
                        let mut acc = 0.0;
                        for y in y_lo..y_hi {
                            let sy = (y as i64 + dy) as usize;
                            let g_row = &g_out[y * w + x_lo..y * w + x_hi];
                            let s_start = ((sy * w) as i64 + x_lo as i64 + dx) as usize;
                            let s_row = &src[s_start..s_start + (x_hi - x_lo)];
                            acc += g_row.iter().zip(s_row).map(|(g, s)| g * s).sum::<f64>();
                            if let Some(gi) = grad_in.as_mut() {
                                let gi_row = &mut gi.channel_mut(i)[s_start..s_start + (x_hi - x_lo)];
                                for (d, g) in gi_row.iter_mut().zip(g_row) {
                                    *d += wt * g;
                                }
                            }
                        }
                        grad[widx] += acc;
                    }
                }
            }
        }
        grad_in
    }
}

/// Output rows/cols whose source `y + d` stays inside `[0, n)`.
#[inline]
fn valid_range(n: usize, d: i64) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as i64 - d.max(0)).max(0) as usize;
    (lo.min(n), hi.max(lo.min(n)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_ranges() {
        assert_eq!(valid_range(5, 0), (0, 5));
        assert_eq!(valid_range(5, 1), (0, 4));
        assert_eq!(valid_range(5, -2), (2, 5));
        assert_eq!(valid_range(1, 1), (0, 0));
    }

    #[test]
    fn forward_matches_direct_sum() {
        let mut layer = ConvLayer::zeros(2, 2, 3);
        for (k, w) in layer.weights.iter_mut().enumerate() {
            *w = (k as f64 * 0.37).sin();
        }
        layer.bias = vec![0.1, -0.2];
        let mut input = FeatureMap::zeros(2, 4, 5);
        for (k, v) in input.data.iter_mut().enumerate() {
            *v = (k as f64 * 0.11).cos();
        }
        let out = layer.forward(&input);
        for o in 0..2 {
            for y in 0..4i64 {
                for x in 0..5i64 {
                    let mut s = layer.bias[o];
                    for i in 0..2 {
                        for ky in 0..3i64 {
                            for kx in 0..3i64 {
                                let (sy, sx) = (y + ky - 1, x + kx - 1);
                                if (0..4).contains(&sy) && (0..5).contains(&sx) {
                                    s += layer.weights[layer.w_index(o, i, ky as usize, kx as usize)]
                                        * input.channel(i)[(sy * 5 + sx) as usize];
                                }
                            }
                        }
                    }
                    assert!((out.channel(o)[(y * 5 + x) as usize] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn window_and_flip() {
        let mut m = FeatureMap::zeros(1, 2, 3);
        m.data = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let win = m.window(-1, 1, 2, 3, &[-9.0]);
        assert_eq!(win.data, vec![-9.0, -9.0, -9.0, 2.0, 3.0, -9.0]);
        assert_eq!(m.flipped(true).data, vec![3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
        assert_eq!(m.flipped(false).data, vec![4.0, 5.0, 6.0, 1.0, 2.0, 3.0]);
    }
}

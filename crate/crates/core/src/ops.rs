//! Dense forward and adjoint kernels for the primitive layers.
//!
//! Functions here operate on row-major slices with explicit dimensions; shape
//! validation and gradient wiring live in `tape`. All loops run in a fixed
//! order so results are deterministic.

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Output spatial size of a 3x3 convolution with padding 1: ceil(d / stride).
pub(crate) fn conv_out_dim(d: usize, stride: usize) -> usize {
    (d + stride - 1) / stride
}

/// 3x3 cross-correlation with zero padding 1. Output is [n, kout, oh, ow].
pub(crate) fn conv2d_fwd(
    inp: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    ker: &[f64],
    kout: usize,
    bias: &[f64],
    stride: usize,
) -> Vec<f64> {
    let oh = conv_out_dim(h, stride);
    let ow = conv_out_dim(w, stride);
    let mut out = vec![0.0; n * kout * oh * ow];
    for bn in 0..n {
        for k in 0..kout {
            let obase = (bn * kout + k) * oh * ow;
            out[obase..obase + oh * ow].fill(bias[k]);
            for c in 0..cin {
                let ibase = (bn * cin + c) * h * w;
                let kbase = (k * cin + c) * 9;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let kv = ker[kbase + ky * 3 + kx];
                        if kv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = ox_range(w, ow, kx, stride);
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let irow = ibase + iy as usize * w;
                            let orow = obase + oy * ow;
                            for ox in ox_lo..ox_hi {
                                let ix = ox * stride + kx - 1;
                                out[orow + ox] += kv * inp[irow + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Range of output columns whose input column ox*stride + kx - 1 is in bounds.
fn ox_range(w: usize, ow: usize, kx: usize, stride: usize) -> (usize, usize) {
    let lo = if kx == 0 { 1 } else { 0 };
    // ox*stride + kx - 1 <= w - 1  =>  ox <= (w - kx) / stride
    let hi = if kx > w { 0 } else { ((w - kx) / stride + 1).min(ow) };
    (lo.min(hi), hi)
}

pub(crate) struct Conv2dGrads {
    pub d_in: Option<Vec<f64>>,
    pub d_ker: Option<Vec<f64>>,
    pub d_bias: Option<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_bwd(
    d_out: &[f64],
    inp: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    ker: &[f64],
    kout: usize,
    stride: usize,
    need_in: bool,
    need_ker: bool,
    need_bias: bool,
) -> Conv2dGrads {
    let oh = conv_out_dim(h, stride);
    let ow = conv_out_dim(w, stride);
    let mut d_in = if need_in { Some(vec![0.0; n * cin * h * w]) } else { None };
    let mut d_ker = if need_ker { Some(vec![0.0; kout * cin * 9]) } else { None };
    let mut d_bias = if need_bias { Some(vec![0.0; kout]) } else { None };

    if let Some(db) = d_bias.as_mut() {
        for bn in 0..n {
            for k in 0..kout {
                let obase = (bn * kout + k) * oh * ow;
                let mut acc = 0.0;
                for v in &d_out[obase..obase + oh * ow] {
                    acc += v;
                }
                db[k] += acc;
            }
        }
    }
    if !need_in && !need_ker {
        return Conv2dGrads { d_in, d_ker, d_bias };
    }
    for bn in 0..n {
        for k in 0..kout {
            let obase = (bn * kout + k) * oh * ow;
            for c in 0..cin {
                let ibase = (bn * cin + c) * h * w;
                let kbase = (k * cin + c) * 9;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let kv = ker[kbase + ky * 3 + kx];
                        let (ox_lo, ox_hi) = ox_range(w, ow, kx, stride);
                        let mut kacc = 0.0;
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let irow = ibase + iy as usize * w;
                            let orow = obase + oy * ow;
                            if let Some(di) = d_in.as_mut() {
                                for ox in ox_lo..ox_hi {
                                    let ix = ox * stride + kx - 1;
                                    di[irow + ix] += kv * d_out[orow + ox];
                                }
                            }
                            if need_ker {
                                for ox in ox_lo..ox_hi {
                                    let ix = ox * stride + kx - 1;
                                    kacc += d_out[orow + ox] * inp[irow + ix];
                                }
                            }
                        }
                        if let Some(dk) = d_ker.as_mut() {
                            dk[kbase + ky * 3 + kx] += kacc;
                        }
                    }
                }
            }
        }
    }
    Conv2dGrads { d_in, d_ker, d_bias }
}

/// Per-pixel linear map across channels. Output is [n, kout, h, w].
pub(crate) fn conv1x1_fwd(
    inp: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    ker: &[f64],
    kout: usize,
    bias: &[f64],
) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; n * kout * hw];
    for bn in 0..n {
        for k in 0..kout {
            let obase = (bn * kout + k) * hw;
            out[obase..obase + hw].fill(bias[k]);
            for c in 0..cin {
                let kv = ker[k * cin + c];
                if kv == 0.0 {
                    continue;
                }
                let ibase = (bn * cin + c) * hw;
                for i in 0..hw {
                    out[obase + i] += kv * inp[ibase + i];
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1x1_bwd(
    d_out: &[f64],
    inp: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    ker: &[f64],
    kout: usize,
    need_in: bool,
    need_ker: bool,
    need_bias: bool,
) -> Conv2dGrads {
    let hw = h * w;
    let mut d_in = if need_in { Some(vec![0.0; n * cin * hw]) } else { None };
    let mut d_ker = if need_ker { Some(vec![0.0; kout * cin]) } else { None };
    let mut d_bias = if need_bias { Some(vec![0.0; kout]) } else { None };
    for bn in 0..n {
        for k in 0..kout {
            let obase = (bn * kout + k) * hw;
            if let Some(db) = d_bias.as_mut() {
                let mut acc = 0.0;
                for v in &d_out[obase..obase + hw] {
                    acc += v;
                }
                db[k] += acc;
            }
            for c in 0..cin {
                let ibase = (bn * cin + c) * hw;
                let kv = ker[k * cin + c];
                if let Some(di) = d_in.as_mut() {
                    for i in 0..hw {
                        di[ibase + i] += kv * d_out[obase + i];
                    }
                }
                if let Some(dk) = d_ker.as_mut() {
                    let mut acc = 0.0;
                    for i in 0..hw {
                        acc += d_out[obase + i] * inp[ibase + i];
                    }
                    dk[k * cin + c] += acc;
                }
            }
        }
    }
    Conv2dGrads { d_in, d_ker, d_bias }
}

/// 2x2 average pooling, stride 2. Odd trailing rows/columns are replicated
/// (edge padding) so the output is ceil(h/2) x ceil(w/2).
pub(crate) fn avgpool_fwd(inp: &[f64], n: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let oh = conv_out_dim(h, 2);
    let ow = conv_out_dim(w, 2);
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        let ibase = plane * h * w;
        let obase = plane * oh * ow;
        for oy in 0..oh {
            let y0 = 2 * oy;
            let y1 = (2 * oy + 1).min(h - 1);
            for ox in 0..ow {
                let x0 = 2 * ox;
                let x1 = (2 * ox + 1).min(w - 1);
                let s = inp[ibase + y0 * w + x0]
                    + inp[ibase + y0 * w + x1]
                    + inp[ibase + y1 * w + x0]
                    + inp[ibase + y1 * w + x1];
                out[obase + oy * ow + ox] = s * 0.25;
            }
        }
    }
    out
}

pub(crate) fn avgpool_bwd(d_out: &[f64], n: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let oh = conv_out_dim(h, 2);
    let ow = conv_out_dim(w, 2);
    let mut d_in = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let ibase = plane * h * w;
        let obase = plane * oh * ow;
        for oy in 0..oh {
            let y0 = 2 * oy;
            let y1 = (2 * oy + 1).min(h - 1);
            for ox in 0..ow {
                let x0 = 2 * ox;
                let x1 = (2 * ox + 1).min(w - 1);
                let g = d_out[obase + oy * ow + ox] * 0.25;
                d_in[ibase + y0 * w + x0] += g;
                d_in[ibase + y0 * w + x1] += g;
                d_in[ibase + y1 * w + x0] += g;
                d_in[ibase + y1 * w + x1] += g;
            }
        }
    }
    d_in
}

/// 2x2 max pooling, stride 2, edge replication for odd dims. Returns the
/// pooled values and, per output element, the flat input index of the source
/// maximum (first in window row-major order on ties).
pub(crate) fn maxpool_fwd(
    inp: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> (Vec<f64>, Vec<usize>) {
    let oh = conv_out_dim(h, 2);
    let ow = conv_out_dim(w, 2);
    let mut out = vec![0.0; n * c * oh * ow];
    let mut argmax = vec![0usize; n * c * oh * ow];
    for plane in 0..n * c {
        let ibase = plane * h * w;
        let obase = plane * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let y = (2 * oy + dy).min(h - 1);
                        let x = (2 * ox + dx).min(w - 1);
                        let idx = ibase + y * w + x;
                        if inp[idx] > best {
                            best = inp[idx];
                            best_idx = idx;
                        }
                    }
                }
                out[obase + oy * ow + ox] = best;
                argmax[obase + oy * ow + ox] = best_idx;
            }
        }
    }
    (out, argmax)
}

pub(crate) fn maxpool_bwd(d_out: &[f64], argmax: &[usize], in_len: usize) -> Vec<f64> {
    let mut d_in = vec![0.0; in_len];
    for (g, &idx) in d_out.iter().zip(argmax) {
        d_in[idx] += g;
    }
    d_in
}

pub(crate) struct BnForward {
    pub out: Vec<f64>,
    /// Normalized activations, needed by the backward pass.
    pub xhat: Vec<f64>,
    /// Per-channel 1/sqrt(var + eps) actually used for normalization.
    pub inv_std: Vec<f64>,
    /// Per-channel batch mean / biased batch variance (train mode only).
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

/// Train-mode batch normalization over the (n, h, w) axes of each channel.
pub(crate) fn bn_fwd_train(
    inp: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    scale: &[f64],
    shift: &[f64],
) -> BnForward {
    let hw = h * w;
    let m = (n * hw) as f64;
    let mut out = vec![0.0; inp.len()];
    let mut xhat = vec![0.0; inp.len()];
    let mut batch_mean = vec![0.0; c];
    let mut batch_var = vec![0.0; c];
    let mut inv_std = vec![0.0; c];
    for ch in 0..c {
        let mut sum = 0.0;
        for bn in 0..n {
            let base = (bn * c + ch) * hw;
            for v in &inp[base..base + hw] {
                sum += v;
            }
        }
        let mean = sum / m;
        let mut var_sum = 0.0;
        for bn in 0..n {
            let base = (bn * c + ch) * hw;
            for v in &inp[base..base + hw] {
                let d = v - mean;
                var_sum += d * d;
            }
        }
        let var = var_sum / m;
        let istd = 1.0 / (var + BN_EPS).sqrt();
        batch_mean[ch] = mean;
        batch_var[ch] = var;
        inv_std[ch] = istd;
        for bn in 0..n {
            let base = (bn * c + ch) * hw;
            for i in base..base + hw {
                let xh = (inp[i] - mean) * istd;
                xhat[i] = xh;
                out[i] = scale[ch] * xh + shift[ch];
            }
        }
    }
    BnForward { out, xhat, inv_std, batch_mean, batch_var }
}

/// Inference-mode batch normalization using running statistics.
pub(crate) fn bn_fwd_infer(
    inp: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    scale: &[f64],
    shift: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
) -> BnForward {
    let hw = h * w;
    let mut out = vec![0.0; inp.len()];
    let mut xhat = vec![0.0; inp.len()];
    let mut inv_std = vec![0.0; c];
    for ch in 0..c {
        let istd = 1.0 / (running_var[ch] + BN_EPS).sqrt();
        inv_std[ch] = istd;
        let mean = running_mean[ch];
        for bn in 0..n {
            let base = (bn * c + ch) * hw;
            for i in base..base + hw {
                let xh = (inp[i] - mean) * istd;
                xhat[i] = xh;
                out[i] = scale[ch] * xh + shift[ch];
            }
        }
    }
    BnForward { out, xhat, inv_std, batch_mean: Vec::new(), batch_var: Vec::new() }
}

pub(crate) struct BnGrads {
    pub d_in: Option<Vec<f64>>,
    pub d_scale: Option<Vec<f64>>,
    pub d_shift: Option<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_bwd(
    d_out: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    scale: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    train: bool,
    need_in: bool,
    need_scale: bool,
    need_shift: bool,
) -> BnGrads {
    let hw = h * w;
    let m = (n * hw) as f64;
    let mut d_in = if need_in { Some(vec![0.0; d_out.len()]) } else { None };
    let mut d_scale = if need_scale { Some(vec![0.0; c]) } else { None };
    let mut d_shift = if need_shift { Some(vec![0.0; c]) } else { None };
    for ch in 0..c {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for bn in 0..n {
            let base = (bn * c + ch) * hw;
            for i in base..base + hw {
                sum_dy += d_out[i];
                sum_dy_xhat += d_out[i] * xhat[i];
            }
        }
        if let Some(ds) = d_scale.as_mut() {
            ds[ch] += sum_dy_xhat;
        }
        if let Some(ds) = d_shift.as_mut() {
            ds[ch] += sum_dy;
        }
        if let Some(di) = d_in.as_mut() {
            let g = scale[ch];
            let istd = inv_std[ch];
            if train {
                // dxhat = dy * scale; dx = istd/m * (m*dxhat - sum(dxhat)
                //         - xhat * sum(dxhat * xhat)); the sums factor out scale.
                let k1 = g * istd;
                let s_dy = sum_dy;
                let s_dyx = sum_dy_xhat;
                for bn in 0..n {
                    let base = (bn * c + ch) * hw;
                    for i in base..base + hw {
                        di[i] += k1 * (d_out[i] - (s_dy + xhat[i] * s_dyx) / m);
                    }
                }
            } else {
                let k1 = g * istd;
                for bn in 0..n {
                    let base = (bn * c + ch) * hw;
                    for i in base..base + hw {
                        di[i] += k1 * d_out[i];
                    }
                }
            }
        }
    }
    BnGrads { d_in, d_scale, d_shift }
}

/// Exponential-moving-average update of running statistics:
/// new = momentum * old + (1 - momentum) * batch.
pub(crate) fn bn_update_running(
    running_mean: &[f64],
    running_var: &[f64],
    batch_mean: &[f64],
    batch_var: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let rm = running_mean
        .iter()
        .zip(batch_mean)
        .map(|(&o, &b)| BN_MOMENTUM * o + (1.0 - BN_MOMENTUM) * b)
        .collect();
    let rv = running_var
        .iter()
        .zip(batch_var)
        .map(|(&o, &b)| BN_MOMENTUM * o + (1.0 - BN_MOMENTUM) * b)
        .collect();
    (rm, rv)
}

/// ELU with alpha = 1: x for x > 0, exp(x) - 1 otherwise.
pub(crate) fn elu_fwd(inp: &[f64]) -> Vec<f64> {
    inp.iter().map(|&x| if x > 0.0 { x } else { x.exp() - 1.0 }).collect()
}

pub(crate) fn elu_bwd(d_out: &[f64], inp: &[f64], out: &[f64]) -> Vec<f64> {
    d_out
        .iter()
        .zip(inp.iter().zip(out))
        .map(|(&g, (&x, &y))| if x > 0.0 { g } else { g * (y + 1.0) })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_out_dims_are_ceil() {
        assert_eq!(conv_out_dim(28, 1), 28);
        assert_eq!(conv_out_dim(28, 2), 14);
        assert_eq!(conv_out_dim(7, 2), 4);
        assert_eq!(conv_out_dim(1, 2), 1);
    }

    #[test]
    fn avgpool_window_mean() {
        let out = avgpool_fwd(&[1.0, 2.0, 3.0, 4.0], 1, 1, 2, 2);
        assert_eq!(out, vec![2.5]);
    }

    #[test]
    fn maxpool_window_max_and_argmax() {
        let (out, arg) = maxpool_fwd(&[1.0, 2.0, 3.0, 4.0], 1, 1, 2, 2);
        assert_eq!(out, vec![4.0]);
        assert_eq!(arg, vec![3]);
    }

    #[test]
    fn maxpool_tie_routes_to_first_row_major() {
        let (out, arg) = maxpool_fwd(&[5.0, 5.0, 5.0, 5.0], 1, 1, 2, 2);
        assert_eq!(out, vec![5.0]);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn odd_dims_replicate_edges() {
        // 3x3 input pools to 2x2; bottom-right window is the corner replicated 4x.
        let inp: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let out = avgpool_fwd(&inp, 1, 1, 3, 3);
        assert_eq!(out.len(), 4);
        assert_eq!(out[0], (1.0 + 2.0 + 4.0 + 5.0) / 4.0);
        assert_eq!(out[1], (3.0 + 3.0 + 6.0 + 6.0) / 4.0);
        assert_eq!(out[2], (7.0 + 8.0 + 7.0 + 8.0) / 4.0);
        assert_eq!(out[3], 9.0);
    }

    #[test]
    fn avgpool_preserves_mean_for_even_dims() {
        let inp: Vec<f64> = (0..36).map(|v| (v as f64).sin()).collect();
        let out = avgpool_fwd(&inp, 1, 1, 6, 6);
        let mean_in: f64 = inp.iter().sum::<f64>() / 36.0;
        let mean_out: f64 = out.iter().sum::<f64>() / 9.0;
        assert!((mean_in - mean_out).abs() < 1e-12);
    }

    #[test]
    fn elu_values() {
        let out = elu_fwd(&[0.0, 1.0, -20.0]);
        assert_eq!(out[0], 0.0);
        assert_eq!(out[1], 1.0);
        assert!((out[2] + 1.0).abs() < 1e-8);
    }

    #[test]
    fn bn_train_matches_scalar_formula() {
        let inp = vec![0.3, -1.2, 2.0, 0.7, -0.4, 1.1];
        let scale = [1.7];
        let shift = [-0.3];
        let f = bn_fwd_train(&inp, 1, 1, 2, 3, &scale, &shift);
        let mean: f64 = inp.iter().sum::<f64>() / 6.0;
        let var: f64 = inp.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 6.0;
        for (i, &x) in inp.iter().enumerate() {
            let expect = (x - mean) / (var + BN_EPS).sqrt() * scale[0] + shift[0];
            assert!((f.out[i] - expect).abs() < 1e-12);
        }
    }
}

use crate::error::{Error, Result};
use crate::net::tensor::Tensor;

/// 2D convolution, NCHW input, weights (F, C, k, k), stride `stride`,
/// zero padding `pad` on all sides. Output spatial side:
/// (side + 2*pad - k) / stride + 1 (floor).
pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let [n, c, h, w] = dims4(input, "conv input")?;
    let [f, wc, kh, kw] = dims4(weight, "conv weight")?;
    if wc != c {
        return Err(Error::config(format!(
            "conv weight expects {wc} input channels, input has {c}"
        )));
    }
    if kh != kw {
        return Err(Error::config("conv kernel must be square"));
    }
    if bias.shape() != [f] {
        return Err(Error::config(format!(
            "conv bias shape {:?} does not match {f} filters",
            bias.shape()
        )));
    }
    let (oh, ow) = conv_out_side(h, w, kh, stride, pad)?;
    let mut out = Tensor::zeros(&[n, f, oh, ow]);
    let x = input.data();
    let wt = weight.data();
    let b = bias.data();
    let o = out.data_mut();
    for ni in 0..n {
        for fi in 0..f {
            let bias_v = b[fi];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias_v;
                    let iy0 = (oy * stride) as isize - pad as isize;
                    let ix0 = (ox * stride) as isize - pad as isize;
                    for ci in 0..c {
                        let x_base = (ni * c + ci) * h * w;
                        let w_base = ((fi * c + ci) * kh) * kw;
                        for ky in 0..kh {
                            let iy = iy0 + ky as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = x_base + iy as usize * w;
                            let wrow = w_base + ky * kw;
                            for kx in 0..kw {
                                let ix = ix0 + kx as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += wt[wrow + kx] * x[row + ix as usize];
                            }
                        }
                    }
                    o[((ni * f + fi) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of conv2d w.r.t. input, weight and bias given the gradient at
/// the output.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    pad: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let [n, c, h, w] = dims4(input, "conv input")?;
    let [f, _, kh, kw] = dims4(weight, "conv weight")?;
    let [gn, gf, oh, ow] = dims4(grad_out, "conv output gradient")?;
    if gn != n || gf != f {
        return Err(Error::config("conv gradient shape mismatch"));
    }
    let mut gin = Tensor::zeros(&[n, c, h, w]);
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(&[f]);
    let x = input.data();
    let wt = weight.data();
    let go = grad_out.data();
    let gid = gin.data_mut();
    let gwd = gw.data_mut();
    let gbd = gb.data_mut();
    for ni in 0..n {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = go[((ni * f + fi) * oh + oy) * ow + ox];
                    if g == 0.0 {
                        continue;
                    }
                    gbd[fi] += g;
                    let iy0 = (oy * stride) as isize - pad as isize;
                    let ix0 = (ox * stride) as isize - pad as isize;
                    for ci in 0..c {
                        let x_base = (ni * c + ci) * h * w;
                        let w_base = ((fi * c + ci) * kh) * kw;
                        for ky in 0..kh {
                            let iy = iy0 + ky as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = x_base + iy as usize * w;
                            let wrow = w_base + ky * kw;
                            for kx in 0..kw {
                                let ix = ix0 + kx as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                gwd[wrow + kx] += g * x[row + ix as usize];
                                gid[row + ix as usize] += g * wt[wrow + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((gin, gw, gb))
}

fn conv_out_side(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::config("conv stride must be positive"));
    }
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::config(format!(
            "conv kernel {k} larger than padded input {h}x{w} (pad {pad})"
        )));
    }
    Ok(((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1))
}

fn dims4(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    match t.shape() {
        &[a, b, c, d] => Ok([a, b, c, d]),
        s => Err(Error::config(format!("{what} must be 4-dimensional, got {s:?}"))),
    }
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Gradient through ReLU: passes where the pre-activation was positive.
/// The subgradient at exactly zero is taken as zero.
pub fn relu_backward(pre_activation: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if pre_activation.shape() != grad_out.shape() {
        return Err(Error::config("relu gradient shape mismatch"));
    }
    let mut gin = grad_out.clone();
    for (g, &x) in gin.data_mut().iter_mut().zip(pre_activation.data()) {
        if x <= 0.0 {
            *g = 0.0;
        }
    }
    Ok(gin)
}

/// Non-overlapping max pooling with square window = stride. Trailing rows
/// and columns that do not fill a window are dropped. Also returns the flat
/// input index of each selected maximum (first occurrence wins ties) for
/// the backward pass.
pub fn maxpool_forward(x: &Tensor, window: usize) -> Result<(Tensor, Vec<usize>)> {
    let [n, c, h, w] = dims4(x, "pool input")?;
    if window == 0 {
        return Err(Error::config("pool window must be positive"));
    }
    let oh = h / window;
    let ow = w / window;
    if oh == 0 || ow == 0 {
        return Err(Error::config(format!(
            "pool window {window} larger than input {h}x{w}"
        )));
    }
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0usize; n * c * oh * ow];
    let xd = x.data();
    let od = out.data_mut();
    for nc in 0..n * c {
        let base = nc * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + (oy * window) * w + ox * window;
                let mut best = xd[best_idx];
                for ky in 0..window {
                    let row = base + (oy * window + ky) * w + ox * window;
                    for kx in 0..window {
                        let idx = row + kx;
                        if xd[idx] > best {
                            best = xd[idx];
                            best_idx = idx;
                        }
                    }
                }
                let oidx = nc * oh * ow + oy * ow + ox;
                od[oidx] = best;
                argmax[oidx] = best_idx;
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool_backward(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor,
) -> Result<Tensor> {
    if grad_out.len() != argmax.len() {
        return Err(Error::config("pool gradient shape mismatch"));
    }
    let mut gin = Tensor::zeros(input_shape);
    let gd = gin.data_mut();
    for (i, &g) in grad_out.data().iter().enumerate() {
        gd[argmax[i]] += g;
    }
    Ok(gin)
}

/// Fully connected layer: x (N, in) with weight (out, in) and bias (out)
/// produces (N, out).
pub fn fc_forward(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, din) = dims2(x, "fc input")?;
    let (dout, win) = dims2(weight, "fc weight")?;
    if win != din {
        return Err(Error::config(format!(
            "fc weight expects {win} inputs, got {din}"
        )));
    }
    if bias.shape() != [dout] {
        return Err(Error::config("fc bias shape mismatch"));
    }
    let mut out = Tensor::zeros(&[n, dout]);
    let xd = x.data();
    let wd = weight.data();
    let bd = bias.data();
    let od = out.data_mut();
    for ni in 0..n {
        let xrow = &xd[ni * din..(ni + 1) * din];
        for oi in 0..dout {
            let wrow = &wd[oi * din..(oi + 1) * din];
            let mut acc = bd[oi];
            for (xi, wi) in xrow.iter().zip(wrow) {
                acc += xi * wi;
            }
            od[ni * dout + oi] = acc;
        }
    }
    Ok(out)
}

pub fn fc_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, din) = dims2(x, "fc input")?;
    let (dout, _) = dims2(weight, "fc weight")?;
    let (gn, gout) = dims2(grad_out, "fc output gradient")?;
    if gn != n || gout != dout {
        return Err(Error::config("fc gradient shape mismatch"));
    }
    let mut gin = Tensor::zeros(&[n, din]);
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(&[dout]);
    let xd = x.data();
    let wd = weight.data();
    let god = grad_out.data();
    let gid = gin.data_mut();
    let gwd = gw.data_mut();
    let gbd = gb.data_mut();
    for ni in 0..n {
        let xrow = &xd[ni * din..(ni + 1) * din];
        let girow = &mut gid[ni * din..(ni + 1) * din];
        for oi in 0..dout {
            let g = god[ni * dout + oi];
            if g == 0.0 {
                continue;
            }
            gbd[oi] += g;
            let wrow = &wd[oi * din..(oi + 1) * din];
            let gwrow = &mut gwd[oi * din..(oi + 1) * din];
            for k in 0..din {
                gwrow[k] += g * xrow[k];
                girow[k] += g * wrow[k];
            }
        }
    }
    Ok((gin, gw, gb))
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        &[a, b] => Ok((a, b)),
        s => Err(Error::config(format!("{what} must be 2-dimensional, got {s:?}"))),
    }
}

/// Mean softmax cross-entropy over the batch. Returns the scalar loss and
/// the gradient w.r.t. the logits ((softmax - onehot) / batch).
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k) = dims2(logits, "logits")?;
    if labels.len() != n {
        return Err(Error::config(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::config(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let mut grad = Tensor::zeros(&[n, k]);
    let ld = logits.data();
    let gd = grad.data_mut();
    let mut loss = 0.0f64;
    for ni in 0..n {
        let row = &ld[ni * k..(ni + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &z in row {
            sum += (z - m).exp();
        }
        let lse = m + sum.ln();
        loss += lse - row[labels[ni]];
        let grow = &mut gd[ni * k..(ni + 1) * k];
        for (j, &z) in row.iter().enumerate() {
            grow[j] = ((z - m).exp() / sum) / n as f64;
        }
        grow[labels[ni]] -= 1.0 / n as f64;
    }
    Ok((loss / n as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randt(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap()
    }

    /// Central finite difference of a scalar-valued function w.r.t. one
    /// perturbed tensor entry.
    fn fd(mut f: impl FnMut(&Tensor) -> f64, at: &Tensor, idx: usize, h: f64) -> f64 {
        let mut plus = at.clone();
        plus.data_mut()[idx] += h;
        let mut minus = at.clone();
        minus.data_mut()[idx] -= h;
        (f(&plus) - f(&minus)) / (2.0 * h)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
    }

    #[test]
    fn conv_known_values() {
        // 1x1x3x3 input, single 3x3 filter of ones, pad 1: center output is
        // the sum of all inputs
        let x = Tensor::from_vec(&[1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let w = Tensor::from_vec(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let b = Tensor::from_vec(&[1], vec![0.5]).unwrap();
        let y = conv2d_forward(&x, &w, &b, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data()[4], 45.0 + 0.5);
        // corner (0,0) sees the 2x2 top-left block
        assert_eq!(y.data()[0], (1 + 2 + 4 + 5) as f64 + 0.5);
    }

    #[test]
    fn conv_stride_two_shape() {
        let x = randt(1, &[2, 3, 8, 8]);
        let w = randt(2, &[4, 3, 3, 3]);
        let b = randt(3, &[4]);
        let y = conv2d_forward(&x, &w, &b, 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 4, 4, 4]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = randt(1, &[1, 3, 8, 8]);
        let w = randt(2, &[4, 2, 3, 3]);
        let b = randt(3, &[4]);
        assert!(conv2d_forward(&x, &w, &b, 1, 1).is_err());
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let x = randt(10, &[2, 2, 6, 6]);
        let w = randt(11, &[3, 2, 3, 3]);
        let b = randt(12, &[3]);
        // scalar objective: sum of outputs weighted by a fixed random mask
        let mask = randt(13, &[2, 3, 6, 6]);
        let obj = |xx: &Tensor, ww: &Tensor, bb: &Tensor| {
            let y = conv2d_forward(xx, ww, bb, 1, 1).unwrap();
            y.data().iter().zip(mask.data()).map(|(a, m)| a * m).sum::<f64>()
        };
        let y = conv2d_forward(&x, &w, &b, 1, 1).unwrap();
        assert_eq!(y.shape(), mask.shape());
        let (gx, gw, gb) = conv2d_backward(&x, &w, 1, 1, &mask).unwrap();
        for idx in [0usize, 7, 31, 71] {
            let n = fd(|t| obj(t, &w, &b), &x, idx, 1e-6);
            assert!(rel_err(gx.data()[idx], n) < 1e-6, "input grad at {idx}");
        }
        for idx in [0usize, 5, 17, 53] {
            let n = fd(|t| obj(&x, t, &b), &w, idx, 1e-6);
            assert!(rel_err(gw.data()[idx], n) < 1e-6, "weight grad at {idx}");
        }
        for idx in 0..3 {
            let n = fd(|t| obj(&x, &w, t), &b, idx, 1e-6);
            assert!(rel_err(gb.data()[idx], n) < 1e-6, "bias grad at {idx}");
        }
    }

    #[test]
    fn conv_stride_gradients_match_finite_differences() {
        let x = randt(20, &[1, 2, 6, 6]);
        let w = randt(21, &[2, 2, 3, 3]);
        let b = randt(22, &[2]);
        let mask = randt(23, &[1, 2, 3, 3]);
        let obj = |xx: &Tensor, ww: &Tensor| {
            let y = conv2d_forward(xx, ww, &b, 2, 1).unwrap();
            y.data().iter().zip(mask.data()).map(|(a, m)| a * m).sum::<f64>()
        };
        let (gx, gw, _) = conv2d_backward(&x, &w, 2, 1, &mask).unwrap();
        for idx in [3usize, 20, 50] {
            let n = fd(|t| obj(t, &w), &x, idx, 1e-6);
            assert!(rel_err(gx.data()[idx], n) < 1e-6);
        }
        for idx in [1usize, 9, 30] {
            let n = fd(|t| obj(&x, t), &w, idx, 1e-6);
            assert!(rel_err(gw.data()[idx], n) < 1e-6);
        }
    }

    #[test]
    fn relu_clamps_and_gates() {
        let x = Tensor::from_vec(&[1, 4], vec![-1.0, 0.0, 0.5, 2.0]).unwrap();
        let y = relu_forward(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 0.5, 2.0]);
        let g = Tensor::from_vec(&[1, 4], vec![1.0; 4]).unwrap();
        let gx = relu_backward(&x, &g).unwrap();
        assert_eq!(gx.data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn maxpool_selects_and_routes() {
        let x = Tensor::from_vec(
            &[1, 1, 4, 4],
            vec![
                1.0, 2.0, 5.0, 6.0, //
                3.0, 4.0, 8.0, 7.0, //
                9.0, 1.0, 1.0, 2.0, //
                2.0, 6.0, 4.0, 3.0,
            ],
        )
        .unwrap();
        let (y, arg) = maxpool_forward(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[4.0, 8.0, 9.0, 4.0]);
        let g = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let gx = maxpool_backward(&[1, 1, 4, 4], &arg, &g).unwrap();
        assert_eq!(gx.data()[5], 1.0); // the 4.0 at (1,1)
        assert_eq!(gx.data()[6], 2.0); // the 8.0 at (1,2)
        assert_eq!(gx.data()[8], 3.0); // the 9.0 at (2,0)
        assert_eq!(gx.data()[14], 4.0); // the 4.0 at (3,2)
        assert_eq!(gx.data().iter().filter(|&&v| v != 0.0).count(), 4);
    }

    #[test]
    fn maxpool_tie_takes_first() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![7.0, 7.0, 7.0, 7.0]).unwrap();
        let (_, arg) = maxpool_forward(&x, 2).unwrap();
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn fc_matches_manual_product() {
        let x = Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let w = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.5]).unwrap();
        let b = Tensor::from_vec(&[2], vec![10.0, -10.0]).unwrap();
        let y = fc_forward(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[1.0 - 3.0 + 10.0, 3.0 - 10.0]);
    }

    #[test]
    fn fc_gradients_match_finite_differences() {
        let x = randt(30, &[3, 5]);
        let w = randt(31, &[4, 5]);
        let b = randt(32, &[4]);
        let mask = randt(33, &[3, 4]);
        let obj = |xx: &Tensor, ww: &Tensor, bb: &Tensor| {
            let y = fc_forward(xx, ww, bb).unwrap();
            y.data().iter().zip(mask.data()).map(|(a, m)| a * m).sum::<f64>()
        };
        let (gx, gw, gb) = fc_backward(&x, &w, &mask).unwrap();
        for idx in 0..x.len() {
            let n = fd(|t| obj(t, &w, &b), &x, idx, 1e-6);
            assert!(rel_err(gx.data()[idx], n) < 1e-6);
        }
        for idx in 0..w.len() {
            let n = fd(|t| obj(&x, t, &b), &w, idx, 1e-6);
            assert!(rel_err(gw.data()[idx], n) < 1e-6);
        }
        for idx in 0..b.len() {
            let n = fd(|t| obj(&x, &w, t), &b, idx, 1e-6);
            assert!(rel_err(gb.data()[idx], n) < 1e-6);
        }
    }

    #[test]
    fn softmax_ce_uniform_logits() {
        let logits = Tensor::zeros(&[2, 4]);
        let (loss, grad) = softmax_cross_entropy(&logits, &[0, 3]).unwrap();
        assert!((loss - (4.0f64).ln()).abs() < 1e-12);
        // gradient rows sum to zero
        for ni in 0..2 {
            let s: f64 = grad.data()[ni * 4..(ni + 1) * 4].iter().sum();
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_ce_gradient_matches_finite_differences() {
        let logits = randt(40, &[4, 3]);
        let labels = vec![0usize, 2, 1, 1];
        let (_, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
        for idx in 0..logits.len() {
            let n = fd(
                |t| softmax_cross_entropy(t, &labels).unwrap().0,
                &logits,
                idx,
                1e-6,
            );
            assert!(rel_err(grad.data()[idx], n) < 1e-5);
        }
    }

    #[test]
    fn softmax_ce_rejects_bad_labels() {
        let logits = Tensor::zeros(&[2, 3]);
        assert!(softmax_cross_entropy(&logits, &[0, 3]).is_err());
        assert!(softmax_cross_entropy(&logits, &[0]).is_err());
    }

    #[test]
    fn softmax_ce_is_stable_for_large_logits() {
        let logits = Tensor::from_vec(&[1, 2], vec![1000.0, -1000.0]).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grad.data().iter().all(|v| v.is_finite()));
    }
}

//! Reverse-mode kernels. These favour plain loops over speed; they only run on gradient-check
//! sized problems.

use super::ops::{conv_geom, sigmoid, ConvParams};
use super::{Scalar, Tensor};
use crate::error::{config_err, shape_err, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Vec<T>,
    pub bias: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_raw<T: Scalar>(
    input: &Tensor<T>,
    weight: &[T],
    wshape: [usize; 4],
    has_bias: bool,
    stride: usize,
    pad: usize,
    groups: usize,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let xs = input.shape();
    let g = conv_geom(xs, wshape, stride, pad, groups)?;
    let want = [xs.n, g.c_out, g.ho, g.wo];
    if grad_out.dims() != want {
        return shape_err(format!(
            "upstream gradient is {}, conv output is {}x{}x{}x{}",
            grad_out.shape(),
            want[0],
            want[1],
            want[2],
            want[3]
        ));
    }
    let k = g.k;
    let mut gi = Tensor::zeros(xs.n, xs.c, xs.h, xs.w)?;
    let mut gw = vec![T::zero(); weight.len()];
    let mut gb = has_bias.then(|| vec![T::zero(); g.c_out]);
    for b in 0..xs.n {
        for oc in 0..g.c_out {
            let ci0 = (oc / g.cout_g) * g.cin_g;
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let go = grad_out.get(b, oc, oy, ox);
                    if let Some(gb) = gb.as_mut() {
                        gb[oc] = gb[oc] + go;
                    }
                    for cig in 0..g.cin_g {
                        for ky in 0..k {
                            let iy = (oy * g.s + ky) as isize - g.p as isize;
                            if iy < 0 || iy >= xs.h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * g.s + kx) as isize - g.p as isize;
                                if ix < 0 || ix >= xs.w as isize {
                                    continue;
                                }
                                let (iy, ix) = (iy as usize, ix as usize);
                                let wi = ((oc * g.cin_g + cig) * k + ky) * k + kx;
                                let ci = ci0 + cig;
                                gw[wi] = gw[wi] + go * input.get(b, ci, iy, ix);
                                let cur = gi.get(b, ci, iy, ix);
                                gi.set(b, ci, iy, ix, cur + go * weight[wi]);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: gi,
        weight: gw,
        bias: gb,
    })
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    conv2d_backward_raw(
        input,
        &p.weight,
        p.wshape,
        p.bias.is_some(),
        p.stride,
        p.padding,
        p.groups,
        grad_out,
    )
}

/// Returns `(grad_input, grad_gamma, grad_beta)`; running statistics are constants.
pub fn batchnorm_backward<T: Scalar>(
    input: &Tensor<T>,
    gamma: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    if input.shape() != grad_out.shape() {
        return shape_err(format!(
            "batchnorm gradient {} vs input {}",
            grad_out.shape(),
            input.shape()
        ));
    }
    let c = input.c();
    if gamma.len() != c || mean.len() != c || var.len() != c {
        return shape_err("channel axis: batchnorm parameter length mismatch");
    }
    let plane = input.shape().plane();
    let mut gi = grad_out.clone();
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    for (j, chunk) in gi.data_mut().chunks_mut(plane).enumerate() {
        let ch = j % c;
        let inv = T::one() / (var[ch] + eps).sqrt();
        let xin = &input.data()[j * plane..(j + 1) * plane];
        for (g, &x) in chunk.iter_mut().zip(xin) {
            gg[ch] = gg[ch] + *g * (x - mean[ch]) * inv;
            gb[ch] = gb[ch] + *g;
            *g = *g * gamma[ch] * inv;
        }
    }
    Ok((gi, gg, gb))
}

pub fn silu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != grad_out.shape() {
        return shape_err(format!("silu gradient {} vs input {}", grad_out.shape(), input.shape()));
    }
    let mut gi = grad_out.clone();
    for (g, &x) in gi.data_mut().iter_mut().zip(input.data()) {
        let s = sigmoid(x);
        *g = *g * s * (T::one() + x * (T::one() - s));
    }
    Ok(gi)
}

pub fn add_backward<T: Scalar>(grad_out: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    (grad_out.clone(), grad_out.clone())
}

/// Sums each `s x s` block of the upstream gradient back onto its source pixel.
pub fn upsample_nearest_backward<T: Scalar>(grad_out: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    if s < 2 {
        return config_err(format!("upsample factor must be >= 2, got {s}"));
    }
    let gs = grad_out.shape();
    if gs.h % s != 0 || gs.w % s != 0 {
        return shape_err(format!("upsample gradient {gs} is not divisible by {s}"));
    }
    let mut gi = Tensor::zeros(gs.n, gs.c, gs.h / s, gs.w / s)?;
    for b in 0..gs.n {
        for c in 0..gs.c {
            for y in 0..gs.h {
                for x in 0..gs.w {
                    let cur = gi.get(b, c, y / s, x / s);
                    gi.set(b, c, y / s, x / s, cur + grad_out.get(b, c, y, x));
                }
            }
        }
    }
    Ok(gi)
}

/// Splits the upstream gradient of a concat back into per-input pieces.
pub fn concat_backward<T: Scalar>(grad_out: &Tensor<T>, channels: &[usize]) -> Result<Vec<Tensor<T>>> {
    if channels.iter().sum::<usize>() != grad_out.c() {
        return shape_err(format!(
            "concat gradient has {} channels, inputs sum to {}",
            grad_out.c(),
            channels.iter().sum::<usize>()
        ));
    }
    let mut start = 0;
    let mut parts = Vec::with_capacity(channels.len());
    for &c in channels {
        parts.push(grad_out.channel_slice(start, c)?);
        start += c;
    }
    Ok(parts)
}

/// Routes each output gradient to the first maximal element of its window in scan order.
pub fn maxpool2d_backward<T: Scalar>(
    input: &Tensor<T>,
    k: usize,
    s: usize,
    p: usize,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let fwd = super::ops::maxpool2d(input, k, s, p)?;
    if fwd.shape() != grad_out.shape() {
        return shape_err(format!("maxpool gradient {} vs output {}", grad_out.shape(), fwd.shape()));
    }
    let xs = input.shape();
    let mut gi = Tensor::zeros(xs.n, xs.c, xs.h, xs.w)?;
    for b in 0..xs.n {
        for c in 0..xs.c {
            for oy in 0..fwd.h() {
                for ox in 0..fwd.w() {
                    let mut best: Option<(usize, usize, T)> = None;
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= xs.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix < 0 || ix >= xs.w as isize {
                                continue;
                            }
                            let v = input.get(b, c, iy as usize, ix as usize);
                            if best.map_or(true, |(_, _, m)| v > m) {
                                best = Some((iy as usize, ix as usize, v));
                            }
                        }
                    }
                    if let Some((iy, ix, _)) = best {
                        let cur = gi.get(b, c, iy, ix);
                        gi.set(b, c, iy, ix, cur + grad_out.get(b, c, oy, ox));
                    }
                }
            }
        }
    }
    Ok(gi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::conv2d_raw;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    #[test]
    fn scalar_linear_map() {
        let x = Tensor::from_vec(1, 1, 1, 1, vec![5.0f64]).unwrap();
        let go = Tensor::from_vec(1, 1, 1, 1, vec![1.0f64]).unwrap();
        let g = conv2d_backward_raw(&x, &[2.0], [1, 1, 1, 1], true, 1, 0, 1, &go).unwrap();
        assert_eq!(g.weight, vec![5.0]);
        assert_eq!(g.input.data(), &[2.0]);
        assert_eq!(g.bias, Some(vec![1.0]));
    }

    #[test]
    fn zero_upstream_gives_zero() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(4);
        let x = Tensor::<f64>::random(1, 2, 4, 4, -1.0, 1.0, &mut rng).unwrap();
        let w: Vec<f64> = (0..36).map(|i| i as f64 * 0.1).collect();
        let go = Tensor::<f64>::zeros(1, 2, 4, 4).unwrap();
        let g = conv2d_backward_raw(&x, &w, [2, 2, 3, 3], true, 1, 1, 1, &go).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert!(g.weight.iter().all(|&v| v == 0.0));
        assert!(g.bias.unwrap().iter().all(|&v| v == 0.0));
    }

    /// Central differences of `L = sum(r * conv(x))` against the analytic gradients.
    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(9);
        let x = Tensor::<f64>::random(1, 3, 5, 5, -1.0, 1.0, &mut rng).unwrap();
        let ws = [4, 3, 3, 3];
        let w = Tensor::<f64>::random(4, 3, 3, 3, -1.0, 1.0, &mut rng).unwrap().into_data();
        let bias = vec![0.1, -0.3, 0.2, 0.05];
        let r = Tensor::<f64>::random(1, 4, 5, 5, -1.0, 1.0, &mut rng).unwrap();
        let loss = |x: &Tensor<f64>, w: &[f64], b: &[f64]| -> f64 {
            let y = conv2d_raw(x, w, ws, Some(b), 1, 1, 1).unwrap();
            y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let g = conv2d_backward_raw(&x, &w, ws, true, 1, 1, 1, &r).unwrap();
        let h = 1e-3;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += h;
            xm.data_mut()[i] -= h;
            let num = (loss(&xp, &w, &bias) - loss(&xm, &w, &bias)) / (2.0 * h);
            assert!(rel(g.input.data()[i], num) < 1e-4);
        }
        for i in 0..w.len() {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[i] += h;
            wm[i] -= h;
            let num = (loss(&x, &wp, &bias) - loss(&x, &wm, &bias)) / (2.0 * h);
            assert!(rel(g.weight[i], num) < 1e-4);
        }
        let gb = g.bias.unwrap();
        for i in 0..bias.len() {
            let (mut bp, mut bm) = (bias.clone(), bias.clone());
            bp[i] += h;
            bm[i] -= h;
            let num = (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * h);
            assert!(rel(gb[i], num) < 1e-4);
        }
    }

    #[test]
    fn upsample_backward_sums_blocks() {
        let go = Tensor::from_fn(1, 1, 4, 4, |_, _, y, x| (y * 4 + x) as f64).unwrap();
        let gi = upsample_nearest_backward(&go, 2).unwrap();
        assert_eq!(gi.data(), &[10.0, 18.0, 42.0, 50.0]);
    }
}

use rayon::prelude::*;

use super::{Scalar, Shape, Tensor};
use crate::error::{config_err, shape_err, Result};

/// Output length of a windowed op along one axis: `floor((len + 2p - k) / s) + 1`.
pub fn conv_output_len(len: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    if s == 0 || k == 0 || len + 2 * p < k {
        return None;
    }
    Some((len + 2 * p - k) / s + 1)
}

/// Range of output positions `o` with `o*s + tap - p` inside `[0, len)`.
#[inline]
fn valid_range(out_len: usize, len: usize, s: usize, tap: usize, p: usize) -> (usize, usize) {
    let lo = if tap >= p { 0 } else { (p - tap).div_ceil(s) };
    if len + p <= tap {
        return (0, 0);
    }
    let hi = ((len - 1 + p - tap) / s + 1).min(out_len);
    (lo.min(hi), hi)
}

/// Geometry of a convolution after validation.
#[derive(Debug, Clone, Copy)]
pub(super) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub cin_g: usize,
    pub cout_g: usize,
    pub k: usize,
    pub s: usize,
    pub p: usize,
    pub ho: usize,
    pub wo: usize,
}

pub(super) fn conv_geom(
    x: Shape,
    wshape: [usize; 4],
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<ConvGeom> {
    let [c_out, cin_g, kh, kw] = wshape;
    if groups == 0 {
        return config_err("groups must be >= 1");
    }
    if stride == 0 {
        return config_err("stride must be >= 1");
    }
    if kh != kw || kh == 0 {
        return shape_err(format!("kernel axis: expected square k >= 1, got {kh}x{kw}"));
    }
    if x.c % groups != 0 {
        return config_err(format!("groups {groups} do not divide input channels {}", x.c));
    }
    if c_out % groups != 0 {
        return config_err(format!("groups {groups} do not divide output channels {c_out}"));
    }
    if x.c / groups != cin_g {
        return shape_err(format!(
            "channel axis: input has {} channels, weight expects {} (= {cin_g} x {groups} groups)",
            x.c,
            cin_g * groups
        ));
    }
    let ho = conv_output_len(x.h, kh, stride, pad)
        .ok_or_else(|| crate::Error::Shape(format!("height axis: {} too small for k={kh}, p={pad}", x.h)))?;
    let wo = conv_output_len(x.w, kw, stride, pad)
        .ok_or_else(|| crate::Error::Shape(format!("width axis: {} too small for k={kw}, p={pad}", x.w)))?;
    Ok(ConvGeom {
        c_in: x.c,
        c_out,
        cin_g,
        cout_g: c_out / groups,
        k: kh,
        s: stride,
        p: pad,
        ho,
        wo,
    })
}

/// Cross-correlation with zero padding.
///
/// Each output element accumulates its taps in `(ci, ky, kx)` order and adds the bias last,
/// the same order as a textbook six-loop implementation, so both agree bit for bit.
pub fn conv2d_raw<T: Scalar>(
    input: &Tensor<T>,
    weight: &[T],
    wshape: [usize; 4],
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let xs = input.shape();
    let g = conv_geom(xs, wshape, stride, pad, groups)?;
    if weight.len() != wshape.iter().product::<usize>() {
        return shape_err(format!(
            "weight length {} does not match {:?}",
            weight.len(),
            wshape
        ));
    }
    if let Some(b) = bias {
        if b.len() != g.c_out {
            return shape_err(format!(
                "bias axis: {} entries for {} output channels",
                b.len(),
                g.c_out
            ));
        }
    }
    let (h, w) = (xs.h, xs.w);
    let plane_out = g.ho * g.wo;
    let mut out = vec![T::zero(); xs.n * g.c_out * plane_out];
    let xdata = input.data();
    let k = g.k;

    out.par_chunks_mut(plane_out)
        .enumerate()
        .for_each(|(j, oplane)| {
            let b = j / g.c_out;
            let oc = j % g.c_out;
            let ci0 = (oc / g.cout_g) * g.cin_g;
            for cig in 0..g.cin_g {
                let base = (b * g.c_in + ci0 + cig) * h * w;
                let xin = &xdata[base..base + h * w];
                if k == 1 && g.s == 1 && g.p == 0 {
                    let wv = weight[oc * g.cin_g + cig];
                    for (o, &v) in oplane.iter_mut().zip(xin) {
                        *o = *o + wv * v;
                    }
                    continue;
                }
                for ky in 0..k {
                    let (oy_lo, oy_hi) = valid_range(g.ho, h, g.s, ky, g.p);
                    for kx in 0..k {
                        let wv = weight[((oc * g.cin_g + cig) * k + ky) * k + kx];
                        let (ox_lo, ox_hi) = valid_range(g.wo, w, g.s, kx, g.p);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.s + ky - g.p;
                            let orow = &mut oplane[oy * g.wo + ox_lo..oy * g.wo + ox_hi];
                            let row = &xin[iy * w..(iy + 1) * w];
                            if g.s == 1 {
                                let ix0 = ox_lo + kx - g.p;
                                for (o, &v) in orow.iter_mut().zip(&row[ix0..]) {
                                    *o = *o + wv * v;
                                }
                            } else {
                                for (jx, o) in orow.iter_mut().enumerate() {
                                    let ix = (ox_lo + jx) * g.s + kx - g.p;
                                    *o = *o + wv * row[ix];
                                }
                            }
                        }
                    }
                }
            }
            if let Some(bias) = bias {
                let bv = bias[oc];
                for o in oplane.iter_mut() {
                    *o = *o + bv;
                }
            }
        });

    Tensor::from_vec(xs.n, g.c_out, g.ho, g.wo, out)
}

/// Convolution parameters with owned weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T = f32> {
    pub weight: Vec<T>,
    /// `[c_out, c_in / groups, k, k]`
    pub wshape: [usize; 4],
    pub bias: Option<Vec<T>>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

pub fn conv2d<T: Scalar>(input: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    conv2d_raw(
        input,
        &p.weight,
        p.wshape,
        p.bias.as_deref(),
        p.stride,
        p.padding,
        p.groups,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnParams<T = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub eps: T,
}

impl<T: Scalar> BnParams<T> {
    pub fn identity(c: usize, eps: T) -> Self {
        BnParams {
            gamma: vec![T::one(); c],
            beta: vec![T::zero(); c],
            mean: vec![T::zero(); c],
            var: vec![T::one(); c],
            eps,
        }
    }
}

/// Per-channel inference affine `gamma * (x - mean) / sqrt(var + eps) + beta`.
pub fn batchnorm_raw<T: Scalar>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
) -> Result<Tensor<T>> {
    let c = input.c();
    for (name, arr) in [("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)] {
        if arr.len() != c {
            return shape_err(format!(
                "channel axis: batchnorm {name} has {} entries, input has {c} channels",
                arr.len()
            ));
        }
    }
    let plane = input.shape().plane();
    let mut out = input.clone();
    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(j, chunk)| {
            let ch = j % c;
            let scale = gamma[ch] / (var[ch] + eps).sqrt();
            let (m, b) = (mean[ch], beta[ch]);
            for v in chunk.iter_mut() {
                *v = scale * (*v - m) + b;
            }
        });
    Ok(out)
}

pub fn batchnorm_infer<T: Scalar>(input: &Tensor<T>, bn: &BnParams<T>) -> Result<Tensor<T>> {
    batchnorm_raw(input, &bn.gamma, &bn.beta, &bn.mean, &bn.var, bn.eps)
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn silu_scalar<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

pub fn silu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let mut out = input.clone();
    out.data_mut()
        .par_chunks_mut(4096)
        .for_each(|c| c.iter_mut().for_each(|v| *v = silu_scalar(*v)));
    out
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return shape_err(format!("add: {} vs {}", a.shape(), b.shape()));
    }
    let mut out = a.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o = *o + v;
    }
    Ok(out)
}

/// Nearest-neighbour upsampling: `out(y, x) = in(y / s, x / s)`.
pub fn upsample_nearest<T: Scalar>(input: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    if s < 2 {
        return config_err(format!("upsample factor must be >= 2, got {s}"));
    }
    let xs = input.shape();
    let (ho, wo) = (xs.h * s, xs.w * s);
    let mut out = vec![T::zero(); xs.n * xs.c * ho * wo];
    out.par_chunks_mut(ho * wo)
        .zip(input.data().par_chunks(xs.h * xs.w))
        .for_each(|(o, i)| {
            for y in 0..ho {
                let src = &i[(y / s) * xs.w..(y / s + 1) * xs.w];
                let row = &mut o[y * wo..(y + 1) * wo];
                for (x, v) in row.iter_mut().enumerate() {
                    *v = src[x / s];
                }
            }
        });
    Tensor::from_vec(xs.n, xs.c, ho, wo, out)
}

/// Channel concatenation of any number of inputs, in order.
pub fn concat<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let Some(first) = inputs.first() else {
        return config_err("concat needs at least one input");
    };
    let s0 = first.shape();
    for t in &inputs[1..] {
        let s = t.shape();
        if !s.same_spatial(&s0) {
            return shape_err(format!("concat: {s0} vs {s} differ outside the channel axis"));
        }
    }
    let c: usize = inputs.iter().map(|t| t.c()).sum();
    let plane = s0.plane();
    let mut data = Vec::with_capacity(s0.n * c * plane);
    for b in 0..s0.n {
        for t in inputs {
            let len = t.c() * plane;
            data.extend_from_slice(&t.data()[b * len..(b + 1) * len]);
        }
    }
    Tensor::from_vec(s0.n, c, s0.h, s0.w, data)
}

pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    concat(&[a, b])
}

/// Windowed maximum; padded positions never win.
pub fn maxpool2d<T: Scalar>(input: &Tensor<T>, k: usize, s: usize, p: usize) -> Result<Tensor<T>> {
    if k == 0 || s == 0 {
        return config_err("maxpool needs k >= 1 and s >= 1");
    }
    if 2 * p > k {
        return config_err(format!("maxpool padding {p} exceeds half the window {k}"));
    }
    let xs = input.shape();
    let ho = conv_output_len(xs.h, k, s, p)
        .ok_or_else(|| crate::Error::Shape(format!("height axis: {} too small for maxpool", xs.h)))?;
    let wo = conv_output_len(xs.w, k, s, p)
        .ok_or_else(|| crate::Error::Shape(format!("width axis: {} too small for maxpool", xs.w)))?;
    let mut out = vec![T::zero(); xs.n * xs.c * ho * wo];
    out.par_chunks_mut(ho * wo)
        .zip(input.data().par_chunks(xs.h * xs.w))
        .for_each(|(o, i)| {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut m = T::neg_infinity();
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
                            let v = i[iy as usize * xs.w + ix as usize];
                            if v > m {
                                m = v;
                            }
                        }
                    }
                    o[oy * wo + ox] = m;
                }
            }
        });
    Tensor::from_vec(xs.n, xs.c, ho, wo, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn naive_conv(
        x: &Tensor<f32>,
        w: &[f32],
        ws: [usize; 4],
        bias: Option<&[f32]>,
        s: usize,
        p: usize,
        g: usize,
    ) -> Tensor<f32> {
        let [co, cig, k, _] = ws;
        let cog = co / g;
        let ho = (x.h() + 2 * p - k) / s + 1;
        let wo = (x.w() + 2 * p - k) / s + 1;
        Tensor::from_fn(x.n(), co, ho, wo, |b, oc, oy, ox| {
            let mut acc = 0.0f32;
            for ci in 0..cig {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * s + ky) as isize - p as isize;
                        let ix = (ox * s + kx) as isize - p as isize;
                        if iy < 0 || ix < 0 || iy >= x.h() as isize || ix >= x.w() as isize {
                            continue;
                        }
                        let cin = (oc / cog) * cig + ci;
                        acc += w[((oc * cig + ci) * k + ky) * k + kx]
                            * x.get(b, cin, iy as usize, ix as usize);
                    }
                }
            }
            if let Some(bias) = bias {
                acc += bias[oc];
            }
            acc
        })
        .unwrap()
    }

    #[test]
    fn single_multiply_add() {
        let x = Tensor::from_vec(1, 1, 1, 1, vec![5.0f32]).unwrap();
        let y = conv2d_raw(&x, &[2.0], [1, 1, 1, 1], Some(&[3.0]), 1, 0, 1).unwrap();
        assert_eq!(y.data(), &[13.0]);
    }

    #[test]
    fn centered_delta_is_identity() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
        let x = Tensor::<f32>::random(1, 4, 6, 5, -1.0, 1.0, &mut rng).unwrap();
        let mut w = vec![0.0f32; 4 * 9];
        for c in 0..4 {
            w[c * 9 + 4] = 1.0;
        }
        let y = conv2d_raw(&x, &w, [4, 1, 3, 3], None, 1, 1, 4).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn strided_conv_matches_naive_loops() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(7);
        let x = Tensor::<f32>::random(1, 2, 4, 4, -1.0, 1.0, &mut rng).unwrap();
        let w: Vec<f32> = Tensor::<f32>::random(3, 2, 3, 3, -1.0, 1.0, &mut rng)
            .unwrap()
            .into_data();
        let b = [0.1f32, -0.2, 0.3];
        let fast = conv2d_raw(&x, &w, [3, 2, 3, 3], Some(&b), 2, 1, 1).unwrap();
        let slow = naive_conv(&x, &w, [3, 2, 3, 3], Some(&b), 2, 1, 1);
        assert_eq!(fast.dims(), [1, 3, 2, 2]);
        assert_eq!(fast, slow);
    }

    #[test]
    fn conv_errors() {
        let x = Tensor::<f32>::zeros(1, 3, 4, 4).unwrap();
        let e = conv2d_raw(&x, &[0.0; 16], [4, 4, 1, 1], None, 1, 0, 1).unwrap_err();
        assert!(matches!(e, crate::Error::Shape(m) if m.contains("channel")));
        let e = conv2d_raw(&x, &[0.0; 6], [3, 1, 1, 1], None, 1, 0, 2).unwrap_err();
        assert!(matches!(e, crate::Error::Config(_)));
    }

    #[test]
    fn batchnorm_cases() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
        let x = Tensor::<f32>::random(2, 3, 4, 4, -2.0, 2.0, &mut rng).unwrap();
        let id = BnParams::identity(3, 0.0);
        assert_eq!(batchnorm_infer(&x, &id).unwrap(), x);

        let c = BnParams {
            gamma: vec![0.0; 3],
            beta: vec![1.5, -2.0, 0.25],
            mean: vec![0.3; 3],
            var: vec![2.0; 3],
            eps: 1e-3,
        };
        let y = batchnorm_infer(&x, &c).unwrap();
        for ch in 0..3 {
            assert!(y.plane(1, ch).iter().all(|&v| v == c.beta[ch]));
        }

        let bn = BnParams {
            gamma: vec![0.5, 1.2, -0.7],
            beta: vec![0.1, 0.0, -0.3],
            mean: vec![0.2, -0.1, 0.05],
            var: vec![0.9, 1.7, 0.3],
            eps: 1e-3,
        };
        let y = batchnorm_infer(&x, &bn).unwrap();
        for b in 0..2 {
            for ch in 0..3 {
                for yy in 0..4 {
                    for xx in 0..4 {
                        let want = bn.gamma[ch] * (x.get(b, ch, yy, xx) - bn.mean[ch])
                            / (bn.var[ch] + bn.eps).sqrt()
                            + bn.beta[ch];
                        let got = y.get(b, ch, yy, xx);
                        assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0));
                    }
                }
            }
        }
        let short = BnParams::<f32>::identity(2, 0.0);
        assert!(matches!(batchnorm_infer(&x, &short), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn silu_values() {
        assert_eq!(silu_scalar(0.0f32), 0.0);
        let v = silu_scalar(20.0f64);
        assert!(v > 19.99999 && v < 20.0);
        // 20 - 4e-8 is not representable in single precision
        let v = silu_scalar(20.0f32);
        assert!(v > 19.99999 && v <= 20.0);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(5);
        let x = Tensor::<f32>::random(1, 2, 3, 3, -8.0, 8.0, &mut rng).unwrap();
        let y = silu(&x);
        for (a, b) in x.data().iter().zip(y.data()) {
            let want = *a as f64 / (1.0 + (-*a as f64).exp());
            assert!((*b as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn upsample_examples() {
        let x = Tensor::from_vec(1, 1, 1, 1, vec![7.0f32]).unwrap();
        assert_eq!(upsample_nearest(&x, 2).unwrap().data(), &[7.0; 4]);
        let x = Tensor::from_vec(1, 1, 2, 2, vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let y = upsample_nearest(&x, 2).unwrap();
        assert_eq!(
            y.data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
        assert!(matches!(upsample_nearest(&x, 1), Err(crate::Error::Config(_))));
    }

    #[test]
    fn upsample_index_formula_80() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(11);
        let x = Tensor::<f32>::random(1, 4, 80, 80, -1.0, 1.0, &mut rng).unwrap();
        let y = upsample_nearest(&x, 2).unwrap();
        assert_eq!(y.dims(), [1, 4, 160, 160]);
        for c in 0..4 {
            for yy in 0..160 {
                for xx in 0..160 {
                    assert_eq!(y.get(0, c, yy, xx), x.get(0, c, yy / 2, xx / 2));
                }
            }
        }
    }

    #[test]
    fn concat_examples() {
        let a = Tensor::from_fn(1, 2, 2, 2, |_, c, y, x| (c * 4 + y * 2 + x) as f32).unwrap();
        let b = Tensor::from_fn(1, 3, 2, 2, |_, c, y, x| 100.0 + (c * 4 + y * 2 + x) as f32).unwrap();
        let y = concat_channels(&a, &b).unwrap();
        assert_eq!(y.dims(), [1, 5, 2, 2]);
        assert_eq!(y.channel_slice(0, 2).unwrap(), a);
        assert_eq!(y.channel_slice(2, 3).unwrap(), b);
        assert!(matches!(
            Tensor::<f32>::zeros(1, 0, 2, 2),
            Err(crate::Error::Config(_))
        ));
        let c = Tensor::<f32>::zeros(1, 1, 3, 2).unwrap();
        assert!(matches!(concat_channels(&a, &c), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn add_and_maxpool() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(2);
        let x = Tensor::<f32>::random(1, 2, 5, 5, -1.0, 1.0, &mut rng).unwrap();
        let z = Tensor::<f32>::zeros(1, 2, 5, 5).unwrap();
        assert_eq!(add(&x, &z).unwrap(), x);
        let k = Tensor::<f32>::filled(1, 3, 7, 7, 0.625).unwrap();
        assert_eq!(maxpool2d(&k, 5, 1, 2).unwrap(), k);
    }
}

//! Slow reference implementations used as test oracles.
//!
//! Written for obviousness, not speed: every output element is computed straight from its
//! defining formula.

use crate::detect::{iou, rank, Detection};
use crate::tensor::{Scalar, Tensor};

/// Six-loop grouped cross-correlation with zero padding; bias added after the taps.
#[allow(clippy::too_many_arguments)]
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &[T],
    wshape: [usize; 4],
    bias: Option<&[T]>,
    s: usize,
    p: usize,
    groups: usize,
) -> Tensor<T> {
    let [n, c, h, wd] = x.dims();
    let [co, cig, k, _] = wshape;
    let ho = (h + 2 * p - k) / s + 1;
    let wo = (wd + 2 * p - k) / s + 1;
    let cog = co / groups;
    let mut out = Tensor::zeros(n, co, ho, wo).expect("positive dims");
    assert_eq!(c, cig * groups);
    for b in 0..n {
        for oc in 0..co {
            let grp = oc / cog;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = T::zero();
                    for ci in 0..cig {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * s + ky) as isize - p as isize;
                                let ix = (ox * s + kx) as isize - p as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let wv = w[((oc * cig + ci) * k + ky) * k + kx];
                                acc = acc + wv * x.get(b, grp * cig + ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    if let Some(bv) = bias {
                        acc = acc + bv[oc];
                    }
                    out.set(b, oc, oy, ox, acc);
                }
            }
        }
    }
    out
}

/// Window scan; out-of-bounds taps are ignored.
pub fn maxpool2d<T: Scalar>(x: &Tensor<T>, k: usize, s: usize, p: usize) -> Tensor<T> {
    let [n, c, h, w] = x.dims();
    let ho = (h + 2 * p - k) / s + 1;
    let wo = (w + 2 * p - k) / s + 1;
    let mut out = Tensor::zeros(n, c, ho, wo).expect("positive dims");
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut m: Option<T> = None;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * s + ky) as isize - p as isize;
                            let ix = (ox * s + kx) as isize - p as isize;
                            if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                                let v = x.get(b, ch, iy as usize, ix as usize);
                                m = Some(match m {
                                    Some(cur) if cur >= v => cur,
                                    _ => v,
                                });
                            }
                        }
                    }
                    out.set(b, ch, oy, ox, m.expect("window overlaps the input"));
                }
            }
        }
    }
    out
}

/// `out[y][x] = in[y / f][x / f]`.
pub fn upsample_nearest<T: Scalar>(x: &Tensor<T>, f: usize) -> Tensor<T> {
    let [n, c, h, w] = x.dims();
    Tensor::from_fn(n, c, h * f, w * f, |b, ch, y, xx| x.get(b, ch, y / f, xx / f)).expect("positive dims")
}

pub fn concat<T: Scalar>(xs: &[&Tensor<T>]) -> Tensor<T> {
    let [n, _, h, w] = xs[0].dims();
    let total: usize = xs.iter().map(|t| t.c()).sum();
    Tensor::from_fn(n, total, h, w, |b, ch, y, x| {
        let mut ch = ch;
        for t in xs {
            if ch < t.c() {
                return t.get(b, ch, y, x);
            }
            ch -= t.c();
        }
        unreachable!()
    })
    .expect("positive dims")
}

/// Suppression-flag formulation of greedy NMS, quadratic in the candidate count.
pub fn nms(candidates: &[Detection], iou_thresh: f32) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| rank(&candidates[a], &candidates[b]));
    let mut suppressed = vec![false; candidates.len()];
    let mut kept = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[pos] {
            continue;
        }
        kept.push(candidates[i]);
        for (later, &j) in order.iter().enumerate().skip(pos + 1) {
            if candidates[j].class_id == candidates[i].class_id && iou(&candidates[i], &candidates[j]) > iou_thresh {
                suppressed[later] = true;
            }
        }
    }
    kept
}

/// Distance in units in the last place between two finite f32 values.
pub fn ulp_diff(a: f32, b: f32) -> u32 {
    fn key(v: f32) -> i64 {
        let bits = v.to_bits() as i32 as i64;
        if bits < 0 {
            i32::MIN as i64 - bits
        } else {
            bits
        }
    }
    (key(a) - key(b)).unsigned_abs().min(u32::MAX as u64) as u32
}

//! Interpreters for block descriptions.
//!
//! Blocks describe their computation once against [`Exec`]. [`ShapeInfer`] walks it for shapes,
//! parameter slots and FLOPs; [`Eval`] computes values from a [`WeightStore`]; [`Tape`] records a
//! 64-bit trace that can be differentiated in reverse.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{self, Scalar, Shape, Tensor};
use crate::weights::{ParamRole, ParamSlot, WeightStore};

/// Batch-norm epsilon used by every conv block.
pub const BN_EPS: f64 = 1e-3;

/// A convolution with same padding `k / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub s: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(c_in: usize, c_out: usize, k: usize, s: usize) -> Self {
        ConvSpec {
            c_in,
            c_out,
            k,
            s,
            groups: 1,
            bias: false,
        }
    }

    pub fn depthwise(c: usize, k: usize, s: usize) -> Self {
        ConvSpec {
            groups: c,
            ..ConvSpec::new(c, c, k, s)
        }
    }

    pub fn with_bias(self) -> Self {
        ConvSpec { bias: true, ..self }
    }

    pub fn pad(&self) -> usize {
        self.k / 2
    }

    pub fn wshape(&self) -> [usize; 4] {
        [self.c_out, self.c_in / self.groups, self.k, self.k]
    }

    pub fn fan_in(&self) -> usize {
        self.c_in / self.groups * self.k * self.k
    }

    pub fn output_shape(&self, x: Shape) -> Result<Shape> {
        if self.groups == 0 || self.c_in % self.groups != 0 || self.c_out % self.groups != 0 {
            return Err(Error::Config(format!(
                "groups {} must divide {} input and {} output channels",
                self.groups, self.c_in, self.c_out
            )));
        }
        if x.c != self.c_in {
            return Err(Error::Shape(format!(
                "channel axis: conv expects {} input channels, got {}",
                self.c_in, x.c
            )));
        }
        let h = tensor::conv_output_len(x.h, self.k, self.s, self.pad())
            .ok_or_else(|| Error::Shape(format!("height axis: {} too small for k={}", x.h, self.k)))?;
        let w = tensor::conv_output_len(x.w, self.k, self.s, self.pad())
            .ok_or_else(|| Error::Shape(format!("width axis: {} too small for k={}", x.w, self.k)))?;
        Ok(Shape::new(x.n, self.c_out, h, w))
    }

    /// Multiply-accumulates for an input of shape `x`.
    pub fn macs(&self, x: Shape) -> Result<u64> {
        let o = self.output_shape(x)?;
        Ok((self.c_in / self.groups * self.c_out * self.k * self.k) as u64 * (o.h * o.w * o.n) as u64)
    }

    pub fn param_count(&self) -> u64 {
        (self.wshape().iter().product::<usize>() + if self.bias { self.c_out } else { 0 }) as u64
    }
}

pub trait Exec {
    type Value: Clone;

    fn conv(&mut self, x: &Self::Value, spec: &ConvSpec, name: &str) -> Result<Self::Value>;
    fn batchnorm(&mut self, x: &Self::Value, c: usize, name: &str) -> Result<Self::Value>;
    fn silu(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn concat(&mut self, xs: &[&Self::Value]) -> Result<Self::Value>;
    fn slice(&mut self, x: &Self::Value, start: usize, len: usize) -> Result<Self::Value>;
    fn upsample(&mut self, x: &Self::Value, factor: usize) -> Result<Self::Value>;
    fn maxpool(&mut self, x: &Self::Value, k: usize, s: usize, p: usize) -> Result<Self::Value>;

    /// Identity whose gradient is cut. Only the tape distinguishes it.
    fn detach(&mut self, x: &Self::Value) -> Result<Self::Value> {
        Ok(x.clone())
    }
}

/// Shape inference plus parameter and FLOP bookkeeping.
#[derive(Debug, Default)]
pub struct ShapeInfer {
    pub slots: Vec<ParamSlot>,
    pub flops: u64,
    pub macs: u64,
}

impl ShapeInfer {
    pub fn new() -> Self {
        Self::default()
    }

    fn slot(&mut self, name: String, dims: Vec<usize>, trainable: bool, role: ParamRole) {
        self.slots.push(ParamSlot {
            name,
            dims,
            trainable,
            role,
        });
    }

    pub fn trainable_params(&self) -> u64 {
        self.slots
            .iter()
            .filter(|s| s.trainable)
            .map(|s| s.numel() as u64)
            .sum()
    }
}

impl Exec for ShapeInfer {
    type Value = Shape;

    fn conv(&mut self, x: &Shape, spec: &ConvSpec, name: &str) -> Result<Shape> {
        let out = spec.output_shape(*x)?;
        let macs = spec.macs(*x)?;
        self.macs += macs;
        self.flops += 2 * macs;
        self.slot(
            format!("{name}.weight"),
            spec.wshape().to_vec(),
            true,
            ParamRole::Weight {
                fan_in: spec.fan_in(),
            },
        );
        if spec.bias {
            self.slot(format!("{name}.bias"), vec![spec.c_out], true, ParamRole::Bias);
        }
        Ok(out)
    }

    fn batchnorm(&mut self, x: &Shape, c: usize, name: &str) -> Result<Shape> {
        if x.c != c {
            return Err(Error::Shape(format!(
                "channel axis: batchnorm over {c} channels, input has {}",
                x.c
            )));
        }
        self.flops += 2 * x.numel() as u64;
        for (s, role, t) in [
            ("gamma", ParamRole::Gamma, true),
            ("beta", ParamRole::Beta, true),
            ("mean", ParamRole::Mean, false),
            ("var", ParamRole::Var, false),
        ] {
            self.slot(format!("{name}.{s}"), vec![c], t, role);
        }
        Ok(*x)
    }

    fn silu(&mut self, x: &Shape) -> Result<Shape> {
        self.flops += x.numel() as u64;
        Ok(*x)
    }

    fn add(&mut self, a: &Shape, b: &Shape) -> Result<Shape> {
        if a != b {
            return Err(Error::Shape(format!("add: {a} vs {b}")));
        }
        self.flops += a.numel() as u64;
        Ok(*a)
    }

    fn concat(&mut self, xs: &[&Shape]) -> Result<Shape> {
        let first = **xs
            .first()
            .ok_or_else(|| Error::Config("concat needs at least one input".into()))?;
        for s in &xs[1..] {
            if !s.same_spatial(&first) {
                return Err(Error::Shape(format!("concat: {first} vs {s}")));
            }
        }
        Ok(first.with_channels(xs.iter().map(|s| s.c).sum()))
    }

    fn slice(&mut self, x: &Shape, start: usize, len: usize) -> Result<Shape> {
        if len == 0 || start + len > x.c {
            return Err(Error::Shape(format!(
                "channel slice [{start}, {}) out of range for {}",
                start + len,
                x
            )));
        }
        Ok(x.with_channels(len))
    }

    fn upsample(&mut self, x: &Shape, factor: usize) -> Result<Shape> {
        if factor < 2 {
            return Err(Error::Config(format!("upsample factor must be >= 2, got {factor}")));
        }
        Ok(Shape::new(x.n, x.c, x.h * factor, x.w * factor))
    }

    fn maxpool(&mut self, x: &Shape, k: usize, s: usize, p: usize) -> Result<Shape> {
        let h = tensor::conv_output_len(x.h, k, s, p)
            .ok_or_else(|| Error::Shape(format!("height axis: {} too small for maxpool", x.h)))?;
        let w = tensor::conv_output_len(x.w, k, s, p)
            .ok_or_else(|| Error::Shape(format!("width axis: {} too small for maxpool", x.w)))?;
        Ok(Shape::new(x.n, x.c, h, w))
    }
}

/// Forward evaluation against a weight store.
pub struct Eval<'a, T: Scalar = f32> {
    pub store: &'a WeightStore<T>,
}

impl<'a, T: Scalar> Eval<'a, T> {
    pub fn new(store: &'a WeightStore<T>) -> Self {
        Eval { store }
    }
}

fn bn_arrays<'s, T: Scalar>(store: &'s WeightStore<T>, name: &str, c: usize) -> Result<[&'s [T]; 4]> {
    Ok([
        store.require(&format!("{name}.gamma"), &[c])?,
        store.require(&format!("{name}.beta"), &[c])?,
        store.require(&format!("{name}.mean"), &[c])?,
        store.require(&format!("{name}.var"), &[c])?,
    ])
}

impl<'a, T: Scalar> Exec for Eval<'a, T> {
    type Value = Tensor<T>;

    fn conv(&mut self, x: &Tensor<T>, spec: &ConvSpec, name: &str) -> Result<Tensor<T>> {
        let ws = spec.wshape();
        let w = self.store.require(&format!("{name}.weight"), &ws)?;
        let b = if spec.bias {
            Some(self.store.require(&format!("{name}.bias"), &[spec.c_out])?)
        } else {
            None
        };
        tensor::conv2d_raw(x, w, ws, b, spec.s, spec.pad(), spec.groups)
    }

    fn batchnorm(&mut self, x: &Tensor<T>, c: usize, name: &str) -> Result<Tensor<T>> {
        let [g, b, m, v] = bn_arrays(self.store, name, c)?;
        tensor::batchnorm_raw(x, g, b, m, v, T::from(BN_EPS).unwrap())
    }

    fn silu(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(tensor::silu(x))
    }

    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::add(a, b)
    }

    fn concat(&mut self, xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        tensor::concat(xs)
    }

    fn slice(&mut self, x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
        x.channel_slice(start, len)
    }

    fn upsample(&mut self, x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
        tensor::upsample_nearest(x, factor)
    }

    fn maxpool(&mut self, x: &Tensor<T>, k: usize, s: usize, p: usize) -> Result<Tensor<T>> {
        tensor::maxpool2d(x, k, s, p)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv { x: usize, spec: ConvSpec, name: String },
    Bn { x: usize, c: usize, name: String },
    Silu { x: usize },
    Add { a: usize, b: usize },
    Concat { xs: Vec<usize> },
    Slice { x: usize, start: usize, len: usize },
    Upsample { x: usize, factor: usize },
    Maxpool { x: usize, k: usize, s: usize, p: usize },
    Detach,
}

/// Recorded 64-bit forward trace.
pub struct Tape<'a> {
    params: &'a WeightStore<f64>,
    values: Vec<Tensor<f64>>,
    ops: Vec<Op>,
}

/// Gradients from one reverse sweep.
#[derive(Debug, Clone, Default)]
pub struct Grads {
    pub values: Vec<Option<Tensor<f64>>>,
    pub params: HashMap<String, Vec<f64>>,
}

impl Grads {
    pub fn value(&self, id: usize) -> Option<&Tensor<f64>> {
        self.values.get(id).and_then(|v| v.as_ref())
    }

    pub fn param(&self, name: &str) -> Option<&[f64]> {
        self.params.get(name).map(|v| v.as_slice())
    }
}

fn accumulate(slot: &mut Option<Tensor<f64>>, g: Tensor<f64>) -> Result<()> {
    match slot {
        None => *slot = Some(g),
        Some(cur) => *cur = tensor::add(cur, &g)?,
    }
    Ok(())
}

fn accumulate_param(map: &mut HashMap<String, Vec<f64>>, name: String, g: Vec<f64>) {
    match map.get_mut(&name) {
        None => {
            map.insert(name, g);
        }
        Some(cur) => cur.iter_mut().zip(g).for_each(|(a, b)| *a += b),
    }
}

impl<'a> Tape<'a> {
    pub fn new(params: &'a WeightStore<f64>) -> Self {
        Tape {
            params,
            values: Vec::new(),
            ops: Vec::new(),
        }
    }

    fn push(&mut self, v: Tensor<f64>, op: Op) -> usize {
        self.values.push(v);
        self.ops.push(op);
        self.values.len() - 1
    }

    pub fn leaf(&mut self, t: Tensor<f64>) -> usize {
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, id: usize) -> &Tensor<f64> {
        &self.values[id]
    }

    /// Reverse sweep seeded with `dL/d(value)` for each listed output.
    pub fn backward(&self, seeds: &[(usize, Tensor<f64>)]) -> Result<Grads> {
        let mut gv: Vec<Option<Tensor<f64>>> = vec![None; self.values.len()];
        let mut gp = HashMap::new();
        for (id, g) in seeds {
            if g.shape() != self.values[*id].shape() {
                return Err(Error::Shape(format!(
                    "seed {} vs value {}",
                    g.shape(),
                    self.values[*id].shape()
                )));
            }
            accumulate(&mut gv[*id], g.clone())?;
        }
        for id in (0..self.values.len()).rev() {
            let Some(g) = gv[id].take() else { continue };
            match &self.ops[id] {
                Op::Leaf | Op::Detach => {}
                Op::Conv { x, spec, name } => {
                    let w = self.params.require(&format!("{name}.weight"), &spec.wshape())?;
                    let r = tensor::conv2d_backward_raw(
                        &self.values[*x],
                        w,
                        spec.wshape(),
                        spec.bias,
                        spec.s,
                        spec.pad(),
                        spec.groups,
                        &g,
                    )?;
                    accumulate(&mut gv[*x], r.input)?;
                    accumulate_param(&mut gp, format!("{name}.weight"), r.weight);
                    if let Some(b) = r.bias {
                        accumulate_param(&mut gp, format!("{name}.bias"), b);
                    }
                }
                Op::Bn { x, c, name } => {
                    let [gamma, _, mean, var] = bn_arrays(self.params, name, *c)?;
                    let (gi, gg, gb) =
                        tensor::batchnorm_backward(&self.values[*x], gamma, mean, var, BN_EPS, &g)?;
                    accumulate(&mut gv[*x], gi)?;
                    accumulate_param(&mut gp, format!("{name}.gamma"), gg);
                    accumulate_param(&mut gp, format!("{name}.beta"), gb);
                }
                Op::Silu { x } => {
                    let gi = tensor::silu_backward(&self.values[*x], &g)?;
                    accumulate(&mut gv[*x], gi)?;
                }
                Op::Add { a, b } => {
                    accumulate(&mut gv[*a], g.clone())?;
                    accumulate(&mut gv[*b], g.clone())?;
                }
                Op::Concat { xs } => {
                    let chans: Vec<usize> = xs.iter().map(|&i| self.values[i].c()).collect();
                    let parts = tensor::concat_backward(&g, &chans)?;
                    for (&i, p) in xs.iter().zip(parts) {
                        accumulate(&mut gv[i], p)?;
                    }
                }
                Op::Slice { x, start, len } => {
                    let src = &self.values[*x];
                    let mut full = Tensor::zeros(src.n(), src.c(), src.h(), src.w())?;
                    let plane = src.shape().plane();
                    for b in 0..src.n() {
                        let dst = (b * src.c() + start) * plane;
                        let from = b * len * plane;
                        full.data_mut()[dst..dst + len * plane]
                            .copy_from_slice(&g.data()[from..from + len * plane]);
                    }
                    accumulate(&mut gv[*x], full)?;
                }
                Op::Upsample { x, factor } => {
                    let gi = tensor::upsample_nearest_backward(&g, *factor)?;
                    accumulate(&mut gv[*x], gi)?;
                }
                Op::Maxpool { x, k, s, p } => {
                    let gi = tensor::maxpool2d_backward(&self.values[*x], *k, *s, *p, &g)?;
                    accumulate(&mut gv[*x], gi)?;
                }
            }
            gv[id] = Some(g);
        }
        Ok(Grads {
            values: gv,
            params: gp,
        })
    }
}

impl<'a> Exec for Tape<'a> {
    type Value = usize;

    fn conv(&mut self, x: &usize, spec: &ConvSpec, name: &str) -> Result<usize> {
        let y = Eval::new(self.params).conv(&self.values[*x], spec, name)?;
        Ok(self.push(
            y,
            Op::Conv {
                x: *x,
                spec: *spec,
                name: name.to_string(),
            },
        ))
    }

    fn batchnorm(&mut self, x: &usize, c: usize, name: &str) -> Result<usize> {
        let y = Eval::new(self.params).batchnorm(&self.values[*x], c, name)?;
        Ok(self.push(
            y,
            Op::Bn {
                x: *x,
                c,
                name: name.to_string(),
            },
        ))
    }

    fn silu(&mut self, x: &usize) -> Result<usize> {
        let y = tensor::silu(&self.values[*x]);
        Ok(self.push(y, Op::Silu { x: *x }))
    }

    fn add(&mut self, a: &usize, b: &usize) -> Result<usize> {
        let y = tensor::add(&self.values[*a], &self.values[*b])?;
        Ok(self.push(y, Op::Add { a: *a, b: *b }))
    }

    fn concat(&mut self, xs: &[&usize]) -> Result<usize> {
        let refs: Vec<&Tensor<f64>> = xs.iter().map(|&&i| &self.values[i]).collect();
        let y = tensor::concat(&refs)?;
        Ok(self.push(
            y,
            Op::Concat {
                xs: xs.iter().map(|&&i| i).collect(),
            },
        ))
    }

    fn slice(&mut self, x: &usize, start: usize, len: usize) -> Result<usize> {
        let y = self.values[*x].channel_slice(start, len)?;
        Ok(self.push(y, Op::Slice { x: *x, start, len }))
    }

    fn upsample(&mut self, x: &usize, factor: usize) -> Result<usize> {
        let y = tensor::upsample_nearest(&self.values[*x], factor)?;
        Ok(self.push(y, Op::Upsample { x: *x, factor }))
    }

    fn maxpool(&mut self, x: &usize, k: usize, s: usize, p: usize) -> Result<usize> {
        let y = tensor::maxpool2d(&self.values[*x], k, s, p)?;
        Ok(self.push(y, Op::Maxpool { x: *x, k, s, p }))
    }

    fn detach(&mut self, x: &usize) -> Result<usize> {
        let y = self.values[*x].clone();
        Ok(self.push(y, Op::Detach))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_spec_costs() {
        let s = ConvSpec::new(64, 128, 1, 1);
        let x = Shape::new(1, 64, 80, 80);
        assert_eq!(2 * s.macs(x).unwrap(), 104_857_600);
        let dw = ConvSpec::depthwise(128, 3, 1);
        let x = Shape::new(1, 128, 80, 80);
        assert_eq!(2 * dw.macs(x).unwrap(), 14_745_600);
        let full = ConvSpec::new(128, 128, 3, 1);
        assert_eq!(full.macs(x).unwrap(), 128 * dw.macs(x).unwrap());
    }

    #[test]
    fn shape_infer_registers_slots() {
        let mut e = ShapeInfer::new();
        let x = Shape::new(1, 3, 640, 640);
        let y = e.conv(&x, &ConvSpec::new(3, 16, 3, 2), "node0.conv").unwrap();
        let y = e.batchnorm(&y, 16, "node0.conv").unwrap();
        let y = e.silu(&y).unwrap();
        assert_eq!(y, Shape::new(1, 16, 320, 320));
        assert_eq!(e.trainable_params(), 464);
        let names: Vec<_> = e.slots.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "node0.conv.weight",
                "node0.conv.gamma",
                "node0.conv.beta",
                "node0.conv.mean",
                "node0.conv.var"
            ]
        );
    }
}

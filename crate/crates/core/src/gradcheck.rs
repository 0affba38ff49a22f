//! Analytic-versus-numeric gradient checks in 64-bit arithmetic.
//!
//! Each check draws a random input, a random cotangent `r` and perturbed BN statistics, then
//! compares the tape gradient of `L = sum(r * out)` with central differences at sampled
//! coordinates of the input and of every trainable parameter.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::blocks::{build_hfcc, build_irdcb, build_ldown, Block, ConvBn, HfccConfig, IrdcbConfig, LDownConfig};
use crate::dsl::parse_model_relaxed;
use crate::error::{Error, Result};
use crate::exec::{ConvSpec, Eval, Exec, ShapeInfer, Tape};
use crate::graph::{compile, Graph, RunOptions};
use crate::tensor::{Shape, Tensor};
use crate::weights::{init_from_slots, ParamRole, ParamSlot, WeightStore};

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;
/// Coordinates sampled per tensor.
const SAMPLES: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    pub pass: bool,
    /// Worst error per parameter group, in registration order.
    pub groups: Vec<(String, f64)>,
}

impl GradCheckReport {
    fn new(op: &str, groups: Vec<(String, f64)>, tol: f64) -> Self {
        let max_rel_error = groups.iter().map(|g| g.1).fold(0.0, f64::max);
        GradCheckReport {
            op: op.to_string(),
            max_rel_error,
            pass: max_rel_error < tol,
            groups,
        }
    }
}

/// Discrepancy relative to the gradient's scale: `scale` is the largest analytic magnitude in
/// the entry's parameter group, so near-zero entries are judged against the group rather than
/// against themselves.
pub fn rel_error(analytic: f64, numeric: f64, scale: f64) -> f64 {
    let denom = scale.max(analytic.abs()).max(numeric.abs());
    if denom == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Registered checks with the CLI group each belongs to.
pub const REGISTRY: [(&str, &str); 9] = [
    ("conv", "conv"),
    ("conv-dw", "conv"),
    ("conv-chain", "conv"),
    ("hfcc", "hfcc"),
    ("ldown", "ldown"),
    ("irdcb", "irdcb"),
    ("irdcb-proj", "irdcb"),
    ("upsample", "upsample"),
    ("fanout", "fanout"),
];

enum Step {
    Block(Block),
    /// Bare convolution with bias, no norm or activation.
    Conv(ConvSpec),
}

impl Step {
    fn forward<E: Exec>(&self, e: &mut E, name: &str, x: &E::Value) -> Result<E::Value> {
        match self {
            Step::Block(b) => Ok(b.forward(e, name, &[x])?.remove(0)),
            Step::Conv(spec) => e.conv(x, spec, name),
        }
    }
}

struct Subject {
    steps: Vec<Step>,
    input: Shape,
    tol: f64,
    /// Use an all-ones cotangent (`L = sum(out)`).
    ones: bool,
}

impl Subject {
    fn run<E: Exec>(&self, e: &mut E, x: E::Value) -> Result<E::Value> {
        let mut v = x;
        for (i, s) in self.steps.iter().enumerate() {
            v = s.forward(e, &format!("s{i}"), &v)?;
        }
        Ok(v)
    }
}

fn subject(id: &str) -> Result<Subject> {
    let block = |b: Block, input: Shape| Subject {
        steps: vec![Step::Block(b)],
        input,
        tol: TOLERANCE,
        ones: false,
    };
    Ok(match id {
        "conv" => block(Block::Conv(ConvBn::new(3, 8, 3, 2)), Shape::new(1, 3, 9, 9)),
        "conv-dw" => block(
            Block::Conv(ConvBn {
                spec: ConvSpec::depthwise(8, 3, 1),
                act: true,
            }),
            Shape::new(1, 8, 7, 7),
        ),
        "conv-chain" => Subject {
            steps: vec![
                Step::Conv(ConvSpec::new(6, 4, 1, 1).with_bias()),
                Step::Conv(ConvSpec::new(4, 5, 1, 1).with_bias()),
            ],
            input: Shape::new(2, 6, 4, 4),
            tol: 1e-10,
            ones: true,
        },
        "hfcc" => block(
            Block::Hfcc(build_hfcc(HfccConfig { c_in: 16, c_out: 8 })?),
            Shape::new(1, 16, 6, 6),
        ),
        "ldown" => block(
            Block::LDown(build_ldown(LDownConfig { c1: 8, c2: 16, k: 3, s: 2 })?),
            Shape::new(1, 8, 8, 8),
        ),
        "irdcb" => block(
            Block::Irdcb(build_irdcb(IrdcbConfig { c1: 16, c2: 16, t: 2.0, n: 2 })?),
            Shape::new(1, 16, 6, 6),
        ),
        "irdcb-proj" => block(
            Block::Irdcb(build_irdcb(IrdcbConfig { c1: 8, c2: 16, t: 2.0, n: 2 })?),
            Shape::new(1, 8, 6, 6),
        ),
        "upsample" => Subject {
            steps: vec![
                Step::Block(Block::Conv(ConvBn::new(4, 4, 1, 1))),
                Step::Block(Block::Upsample { factor: 2 }),
                Step::Block(Block::Conv(ConvBn::new(4, 4, 3, 1))),
            ],
            input: Shape::new(1, 4, 5, 5),
            tol: TOLERANCE,
            ones: false,
        },
        other => {
            return Err(Error::Lookup(format!(
                "unknown gradcheck block '{other}' (known: {})",
                REGISTRY.iter().map(|r| r.0).collect::<Vec<_>>().join(", ")
            )))
        }
    })
}

/// Seeded f64 store with non-trivial BN statistics so every term of the backward pass matters.
fn make_store(slots: &[ParamSlot], rng: &mut Xoshiro256PlusPlus) -> Result<WeightStore<f64>> {
    let mut store = init_from_slots(slots, rng.gen())?.cast::<f64>();
    for (entry, slot) in store.iter_mut().zip(slots) {
        let range = match slot.role {
            ParamRole::Gamma | ParamRole::Var => 0.5..1.5,
            ParamRole::Beta | ParamRole::Mean | ParamRole::Bias => -0.2..0.2,
            ParamRole::Weight { .. } => continue,
        };
        for v in &mut entry.data {
            *v = rng.gen_range(range.clone());
        }
    }
    Ok(store)
}

fn random_tensor(s: Shape, rng: &mut Xoshiro256PlusPlus) -> Result<Tensor<f64>> {
    Tensor::from_fn(s.n, s.c, s.h, s.w, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn picks(len: usize, rng: &mut Xoshiro256PlusPlus) -> Vec<usize> {
    if len <= SAMPLES {
        (0..len).collect()
    } else {
        let mut v = sample(rng, len, SAMPLES).into_vec();
        v.sort_unstable();
        v
    }
}

fn cell<'a>(s: &'a mut WeightStore<f64>, name: &str, i: usize) -> &'a mut f64 {
    &mut s.get_mut(name).expect("slot registered").data[i]
}

/// Runs one registered check by exact id.
pub fn gradcheck(id: &str, seed: u64) -> Result<GradCheckReport> {
    if id == "fanout" {
        return fanout(seed);
    }
    let sub = subject(id)?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);

    let mut si = ShapeInfer::new();
    let out_shape = sub.run(&mut si, sub.input)?;
    let slots = si.slots;
    let mut store = make_store(&slots, &mut rng)?;
    let mut x = random_tensor(sub.input, &mut rng)?;
    let r = if sub.ones {
        Tensor::filled(out_shape.n, out_shape.c, out_shape.h, out_shape.w, 1.0)?
    } else {
        random_tensor(out_shape, &mut rng)?
    };

    let grads = {
        let mut tape = Tape::new(&store);
        let xi = tape.leaf(x.clone());
        let out = sub.run(&mut tape, xi)?;
        let g = tape.backward(&[(out, r.clone())])?;
        let gx = g
            .value(xi)
            .cloned()
            .ok_or_else(|| Error::Consistency(format!("{id}: no gradient reached the input")))?;
        (gx, g.params)
    };

    let objective = |store: &WeightStore<f64>, x: &Tensor<f64>| -> Result<f64> {
        let mut e = Eval::new(store);
        Ok(dot(&sub.run(&mut e, x.clone())?, &r))
    };

    let mut groups = Vec::new();
    let scale = max_abs(grads.0.data());
    let mut worst = 0.0f64;
    for i in picks(x.len(), &mut rng) {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + STEP;
        let up = objective(&store, &x)?;
        x.data_mut()[i] = orig - STEP;
        let down = objective(&store, &x)?;
        x.data_mut()[i] = orig;
        worst = worst.max(rel_error(grads.0.data()[i], (up - down) / (2.0 * STEP), scale));
    }
    groups.push(("input".to_string(), worst));

    for slot in slots.iter().filter(|s| s.trainable) {
        let analytic = grads
            .1
            .get(&slot.name)
            .cloned()
            .ok_or_else(|| Error::Consistency(format!("{id}: no gradient for {}", slot.name)))?;
        let scale = max_abs(&analytic);
        let mut worst = 0.0f64;
        for i in picks(slot.numel(), &mut rng) {
            let orig = *cell(&mut store, &slot.name, i);
            *cell(&mut store, &slot.name, i) = orig + STEP;
            let up = objective(&store, &x)?;
            *cell(&mut store, &slot.name, i) = orig - STEP;
            let down = objective(&store, &x)?;
            *cell(&mut store, &slot.name, i) = orig;
            worst = worst.max(rel_error(analytic[i], (up - down) / (2.0 * STEP), scale));
        }
        let short = slot.name.split_once('.').map(|p| p.1).unwrap_or(&slot.name);
        groups.push((short.to_string(), worst));
    }
    Ok(GradCheckReport::new(id, groups, sub.tol))
}

/// Small HEPAN-like fragment: HFCC feature node 1 feeds two fusion paths (nodes 4 and 6).
pub const FANOUT_MODEL: &str = "\
model fanout
layer 0 from=-1 Conv out=8 k=3 s=1
layer 1 from=0 HFCC out=8
layer 2 from=0 Conv out=8 k=3 s=2
layer 3 from=2 Upsample
layer 4 from=3,1 Concat
layer 5 from=4 IRDCB out=8 t=2 n=1
layer 6 from=1 LDown out=8 k=3 s=2
layer 7 from=6,2 Concat
layer 8 from=7 Upsample
layer 9 from=8,5 Concat
";

const SHARED: usize = 1;
const CONSUMERS: [usize; 2] = [4, 6];

fn fanout_grad(
    g: &Graph,
    store: &WeightStore<f64>,
    x: &Tensor<f64>,
    r: &Tensor<f64>,
    detach: &[(usize, usize)],
) -> Result<Tensor<f64>> {
    let mut tape = Tape::new(store);
    let xi = tape.leaf(x.clone());
    let mut opts = RunOptions {
        detach: detach.iter().copied().collect(),
        keep_all: true,
        ..Default::default()
    };
    let out = g.evaluate(&mut tape, xi, &mut opts)?;
    let shared = out.nodes[SHARED].as_ref().expect("kept")[0];
    let grads = tape.backward(&[(out.taps["out"], r.clone())])?;
    let s = tape.value(shared).shape();
    Ok(grads
        .value(shared)
        .cloned()
        .unwrap_or(Tensor::zeros(s.n, s.c, s.h, s.w)?))
}

/// Gradient at a feature with two consumers equals the sum of the single-path gradients, and
/// the full gradient agrees with central differences applied to that feature.
fn fanout(seed: u64) -> Result<GradCheckReport> {
    let spec = parse_model_relaxed(FANOUT_MODEL)?;
    let g = compile(&spec, 8)?;
    let consumers: Vec<usize> = g
        .nodes
        .iter()
        .filter(|n| n.inputs.contains(&Some(SHARED)))
        .map(|n| n.index)
        .collect();
    if consumers != CONSUMERS {
        return Err(Error::Consistency(format!("fan-out fixture consumers {consumers:?}")));
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let store = make_store(&g.slots, &mut rng)?;
    let x = random_tensor(g.input, &mut rng)?;
    let r = random_tensor(g.taps[0].shape, &mut rng)?;

    let full = fanout_grad(&g, &store, &x, &r, &[])?;
    let only_a = fanout_grad(&g, &store, &x, &r, &[(SHARED, CONSUMERS[1])])?;
    let only_b = fanout_grad(&g, &store, &x, &r, &[(SHARED, CONSUMERS[0])])?;
    let scale = max_abs(full.data());
    let mut sum_err = 0.0f64;
    for i in 0..full.len() {
        let path_sum = only_a.data()[i] + only_b.data()[i];
        sum_err = sum_err.max(rel_error(full.data()[i], path_sum, scale));
    }
    let path_norm = |t: &Tensor<f64>| t.data().iter().map(|v| v.abs()).sum::<f64>();
    if path_norm(&only_a) == 0.0 || path_norm(&only_b) == 0.0 {
        return Err(Error::Consistency("a fan-out path carries no gradient".into()));
    }

    // perturb the shared feature itself through the evaluation hook
    let objective = |i: usize, delta: f64| -> Result<f64> {
        let mut e = Eval::new(&store);
        let mut hook = |node: usize, outs: &mut Vec<Tensor<f64>>| {
            if node == SHARED {
                outs[0].data_mut()[i] += delta;
            }
        };
        let mut opts = RunOptions {
            hook: Some(&mut hook),
            ..Default::default()
        };
        let out = g.evaluate(&mut e, x.clone(), &mut opts)?;
        Ok(dot(&out.taps["out"], &r))
    };
    let mut fd_err = 0.0f64;
    for i in picks(full.len(), &mut rng) {
        let numeric = (objective(i, STEP)? - objective(i, -STEP)?) / (2.0 * STEP);
        fd_err = fd_err.max(rel_error(full.data()[i], numeric, scale));
    }
    Ok(GradCheckReport::new(
        "fanout",
        vec![("path-sum".into(), sum_err), ("shared-feature".into(), fd_err)],
        TOLERANCE,
    ))
}

/// Runs every check whose id or group matches `selector`; `all` runs the whole registry.
pub fn gradcheck_suite(selector: &str, seed: u64) -> Result<Vec<GradCheckReport>> {
    let ids: Vec<&str> = REGISTRY
        .iter()
        .filter(|(id, group)| selector == "all" || selector == *id || selector == *group)
        .map(|r| r.0)
        .collect();
    if ids.is_empty() {
        return Err(Error::Lookup(format!(
            "unknown gradcheck block '{selector}' (expected all, conv, hfcc, ldown, irdcb, upsample or fanout)"
        )));
    }
    ids.into_iter().map(|id| gradcheck(id, seed)).collect()
}

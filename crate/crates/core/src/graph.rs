//! Compiled DAG: resolved blocks, inferred shapes, parameter slots and output taps.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::blocks::{
    build_baseline, build_hfcc, build_irdcb, build_ldown, BaselineArgs, Block, ConvBn, DetectHead,
    HfccConfig, IrdcbConfig, LDownConfig,
};
use crate::dsl::{Kind, ModelSpec, NodeSpec};
use crate::error::{Error, Result};
use crate::exec::{Eval, Exec, ShapeInfer};
use crate::tensor::{Shape, Tensor};
use crate::weights::{ParamSlot, WeightStore};

#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode {
    pub index: usize,
    pub kind: Kind,
    /// Producer node per input; `None` is the image.
    pub inputs: Vec<Option<usize>>,
    pub block: Block,
    pub out_shapes: Vec<Shape>,
    pub params: u64,
    pub flops: u64,
    /// Range of this node's entries in [`Graph::slots`].
    pub slots: std::ops::Range<usize>,
}

/// A named graph output: one output of one node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tap {
    pub name: String,
    pub node: usize,
    pub output: usize,
    pub stride: usize,
    pub shape: Shape,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub name: String,
    pub input: Shape,
    pub nodes: Vec<GraphNode>,
    pub slots: Vec<ParamSlot>,
    pub taps: Vec<Tap>,
    pub classes: usize,
    pub reg_max: usize,
    /// The resolved spec this graph was compiled from.
    pub spec: ModelSpec,
}

fn cerr<T>(node: &NodeSpec, msg: impl std::fmt::Display) -> Result<T> {
    Err(Error::Compile(format!("node {} ({}): {msg}", node.index, node.kind)))
}

fn level_name(stride: usize) -> String {
    if stride.is_power_of_two() {
        format!("p{}", stride.trailing_zeros())
    } else {
        format!("s{stride}")
    }
}

fn build_block(n: &NodeSpec, ins: &[Shape]) -> Result<Block> {
    let c1 = ins[0].c;
    let out = || n.arg_usize("out");
    let b = match n.kind {
        Kind::Conv => {
            let (k, s) = (n.arg_usize("k")?, n.arg_usize("s")?);
            if k == 0 || s == 0 {
                return Err(Error::Config("Conv needs k >= 1 and s >= 1".into()));
            }
            Block::Conv(ConvBn::new(c1, out()?, k, s))
        }
        Kind::C2f | Kind::C3 | Kind::Sppf => build_baseline(
            n.kind.as_str(),
            BaselineArgs {
                c1,
                c2: out()?,
                k: if n.kind == Kind::Sppf { n.arg_usize("k")? } else { 1 },
                s: 1,
                n: if n.kind == Kind::Sppf { 1 } else { n.arg_usize("n")? },
                shortcut: n.arg("shortcut").unwrap_or(0.0) != 0.0,
            },
        )?,
        Kind::Irdcb => Block::Irdcb(build_irdcb(IrdcbConfig {
            c1,
            c2: out()?,
            t: n.arg("t").unwrap_or(2.0),
            n: n.arg_usize("n")?,
        })?),
        Kind::LDown => Block::LDown(build_ldown(LDownConfig {
            c1,
            c2: out()?,
            k: n.arg_usize("k")?,
            s: n.arg_usize("s")?,
        })?),
        Kind::Hfcc => Block::Hfcc(build_hfcc(HfccConfig { c_in: c1, c_out: out()? })?),
        Kind::Upsample => Block::Upsample {
            factor: n.arg_usize("factor")?,
        },
        Kind::Concat => Block::Concat,
        Kind::Detect => Block::Detect(DetectHead {
            chs: ins.iter().map(|s| s.c).collect(),
            nc: n.arg_usize("classes")?,
            reg_max: n.arg_usize("reg_max")?,
        }),
    };
    Ok(b)
}

/// Compiles a scale-resolved spec for a square `imgsz` input.
pub fn compile(spec: &ModelSpec, imgsz: usize) -> Result<Graph> {
    compile_hw(spec, imgsz, imgsz)
}

pub fn compile_hw(spec: &ModelSpec, h: usize, w: usize) -> Result<Graph> {
    if h == 0 || w == 0 {
        return Err(Error::Config(format!("input size must be positive, got {h}x{w}")));
    }
    let input = Shape::new(1, 3, h, w);
    let mut nodes: Vec<GraphNode> = Vec::with_capacity(spec.layers.len());
    let mut slots = Vec::new();
    let mut taps = Vec::new();
    let mut consumed = vec![false; spec.layers.len()];
    let (mut classes, mut reg_max) = (spec.classes(), 16);

    for (i, n) in spec.layers.iter().enumerate() {
        if n.index != i {
            return cerr(n, format!("out of order, expected index {i}"));
        }
        let inputs = n.inputs();
        let mut in_shapes = Vec::with_capacity(inputs.len());
        for src in &inputs {
            match src {
                None => in_shapes.push(input),
                Some(j) => {
                    let p = &nodes[*j];
                    if p.out_shapes.len() != 1 {
                        return cerr(n, format!("cannot consume the multi-output {} node {j}", p.kind));
                    }
                    consumed[*j] = true;
                    in_shapes.push(p.out_shapes[0]);
                }
            }
        }
        let name_of = |src: &Option<usize>| match src {
            None => "input".to_string(),
            Some(j) => format!("node {j}"),
        };
        if n.kind == Kind::Concat {
            for (k, s) in in_shapes.iter().enumerate().skip(1) {
                if !s.same_spatial(&in_shapes[0]) {
                    return cerr(
                        n,
                        format!(
                            "cannot concatenate {} ({}) with {} ({})",
                            name_of(&inputs[0]),
                            in_shapes[0],
                            name_of(&inputs[k]),
                            s
                        ),
                    );
                }
            }
        }
        if n.kind == Kind::Detect {
            let mut prev = 0;
            for (k, s) in in_shapes.iter().enumerate() {
                let stride = h / s.h;
                if s.h * stride != h || s.w * stride != w || w / s.w != stride {
                    return cerr(
                        n,
                        format!("{} ({s}) is not an integer stride of the {h}x{w} input", name_of(&inputs[k])),
                    );
                }
                if stride <= prev {
                    return cerr(n, format!("level strides must ascend, {} follows {prev}", stride));
                }
                prev = stride;
            }
        }
        let block = build_block(n, &in_shapes).or_else(|e| cerr(n, e))?;
        if let Block::Detect(d) = &block {
            classes = d.nc;
            reg_max = d.reg_max;
        }
        let mut si = ShapeInfer::new();
        let refs: Vec<&Shape> = in_shapes.iter().collect();
        let outs = block
            .forward(&mut si, &format!("node{i}"), &refs)
            .or_else(|e| cerr(n, e))?;
        let params = si.trainable_params();
        let start = slots.len();
        slots.extend(si.slots);
        if n.kind == Kind::Detect {
            for (k, (src, s)) in inputs.iter().zip(&in_shapes).enumerate() {
                let stride = h / s.h;
                let lvl = level_name(stride);
                taps.push(Tap {
                    name: lvl.clone(),
                    node: src.expect("detect inputs are nodes"),
                    output: 0,
                    stride,
                    shape: *s,
                });
                taps.push(Tap {
                    name: format!("head_{lvl}"),
                    node: i,
                    output: k,
                    stride,
                    shape: outs[k],
                });
            }
        }
        nodes.push(GraphNode {
            index: i,
            kind: n.kind,
            inputs,
            block,
            out_shapes: outs,
            params,
            flops: si.flops,
            slots: start..slots.len(),
        });
    }

    if taps.is_empty() {
        if let Some(last) = nodes.last() {
            taps.push(Tap {
                name: "out".into(),
                node: last.index,
                output: 0,
                stride: h / last.out_shapes[0].h.max(1),
                shape: last.out_shapes[0],
            });
        }
    }
    for t in &taps {
        consumed[t.node] = true;
    }
    if let Some(n) = nodes.iter().find(|n| !consumed[n.index] && n.kind != Kind::Detect) {
        return Err(Error::Compile(format!(
            "node {} ({}) output is never consumed",
            n.index, n.kind
        )));
    }
    Ok(Graph {
        name: spec.name.clone(),
        input,
        nodes,
        slots,
        taps,
        classes,
        reg_max,
        spec: spec.clone(),
    })
}

/// Per-evaluation knobs.
pub struct RunOptions<'a, V> {
    /// Evaluation order; must be a permutation of node indices respecting every edge.
    pub order: Option<Vec<usize>>,
    /// `(producer, consumer)` edges whose gradient is cut.
    pub detach: BTreeSet<(usize, usize)>,
    /// Called with each node's outputs right after it runs; may overwrite them.
    pub hook: Option<&'a mut dyn FnMut(usize, &mut Vec<V>)>,
    /// Keep every node's outputs instead of freeing them after their last consumer.
    pub keep_all: bool,
}

impl<'a, V> Default for RunOptions<'a, V> {
    fn default() -> Self {
        RunOptions {
            order: None,
            detach: BTreeSet::new(),
            hook: None,
            keep_all: false,
        }
    }
}

pub struct RunOutput<V> {
    pub taps: BTreeMap<String, V>,
    /// Populated only with `keep_all`.
    pub nodes: Vec<Option<Vec<V>>>,
}

impl Graph {
    pub fn total_params(&self) -> u64 {
        self.nodes.iter().map(|n| n.params).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.nodes.iter().map(|n| n.flops).sum()
    }

    pub fn tap(&self, name: &str) -> Option<&Tap> {
        self.taps.iter().find(|t| t.name == name)
    }

    /// Raw prediction taps in ascending stride order.
    pub fn head_taps(&self) -> Vec<&Tap> {
        let mut v: Vec<&Tap> = self.taps.iter().filter(|t| t.name.starts_with("head_")).collect();
        v.sort_by_key(|t| t.stride);
        v
    }

    fn check_order(&self, order: &[usize]) -> Result<()> {
        let mut pos = vec![usize::MAX; self.nodes.len()];
        for (p, &i) in order.iter().enumerate() {
            if i >= self.nodes.len() || pos[i] != usize::MAX {
                return Err(Error::Config(format!("evaluation order repeats or overflows at {i}")));
            }
            pos[i] = p;
        }
        if order.len() != self.nodes.len() {
            return Err(Error::Config("evaluation order must list every node once".into()));
        }
        for n in &self.nodes {
            for j in n.inputs.iter().flatten() {
                if pos[*j] > pos[n.index] {
                    return Err(Error::Config(format!(
                        "evaluation order runs node {} before its input {j}",
                        n.index
                    )));
                }
            }
        }
        Ok(())
    }

    /// Interprets the graph with any executor.
    pub fn evaluate<E: Exec>(
        &self,
        e: &mut E,
        input: E::Value,
        opts: &mut RunOptions<'_, E::Value>,
    ) -> Result<RunOutput<E::Value>> {
        let order: Vec<usize> = match &opts.order {
            Some(o) => {
                self.check_order(o)?;
                o.clone()
            }
            None => (0..self.nodes.len()).collect(),
        };
        let mut remaining = vec![0usize; self.nodes.len()];
        for n in &self.nodes {
            for j in n.inputs.iter().flatten() {
                remaining[*j] += 1;
            }
        }
        let mut pinned = vec![false; self.nodes.len()];
        for t in &self.taps {
            pinned[t.node] = true;
        }
        let mut vals: Vec<Option<Vec<E::Value>>> = vec![None; self.nodes.len()];
        for &i in &order {
            let node = &self.nodes[i];
            let mut ins = Vec::with_capacity(node.inputs.len());
            for src in &node.inputs {
                let v = match src {
                    None => input.clone(),
                    Some(j) => vals[*j]
                        .as_ref()
                        .map(|o| o[0].clone())
                        .ok_or_else(|| Error::Consistency(format!("node {j} not evaluated before node {i}")))?,
                };
                let v = match src {
                    Some(j) if opts.detach.contains(&(*j, i)) => e.detach(&v)?,
                    _ => v,
                };
                ins.push(v);
            }
            let refs: Vec<&E::Value> = ins.iter().collect();
            let mut outs = node.block.forward(e, &format!("node{i}"), &refs)?;
            if let Some(h) = opts.hook.as_mut() {
                h(i, &mut outs);
            }
            vals[i] = Some(outs);
            if !opts.keep_all {
                for j in node.inputs.iter().flatten() {
                    remaining[*j] -= 1;
                    if remaining[*j] == 0 && !pinned[*j] {
                        vals[*j] = None;
                    }
                }
            }
        }
        let mut taps = BTreeMap::new();
        for t in &self.taps {
            let v = vals[t.node]
                .as_ref()
                .and_then(|o| o.get(t.output))
                .cloned()
                .ok_or_else(|| Error::Consistency(format!("tap {} missing", t.name)))?;
            taps.insert(t.name.clone(), v);
        }
        Ok(RunOutput {
            taps,
            nodes: if opts.keep_all { vals } else { Vec::new() },
        })
    }

    fn check_input(&self, x: Shape) -> Result<()> {
        if x.c != self.input.c || x.h != self.input.h || x.w != self.input.w {
            return Err(Error::Shape(format!(
                "input {x} does not match the compiled {}x{}x{} size",
                self.input.c, self.input.h, self.input.w
            )));
        }
        Ok(())
    }

    /// Forward pass returning every tap.
    pub fn forward(&self, store: &WeightStore<f32>, input: &Tensor<f32>) -> Result<BTreeMap<String, Tensor<f32>>> {
        self.run(store, input, &mut RunOptions::default())
    }

    pub fn run(
        &self,
        store: &WeightStore<f32>,
        input: &Tensor<f32>,
        opts: &mut RunOptions<'_, Tensor<f32>>,
    ) -> Result<BTreeMap<String, Tensor<f32>>> {
        store.validate_against(&self.slots)?;
        self.check_input(input.shape())?;
        let mut e = Eval::new(store);
        Ok(self.evaluate(&mut e, input.clone(), opts)?.taps)
    }

    /// Graphviz text: one vertex per node, one edge per node-to-node input.
    pub fn dump_dot(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "digraph \"{}\" {{", self.name.replace('"', "'"));
        let _ = writeln!(s, "  rankdir=TB;");
        let _ = writeln!(s, "  node [shape=box, fontname=\"monospace\"];");
        for n in &self.nodes {
            let shapes: Vec<String> = n.out_shapes.iter().map(|s| s.to_string()).collect();
            let _ = writeln!(
                s,
                "  n{} [label=\"{} {}\\n{}\"];",
                n.index,
                n.index,
                n.kind,
                shapes.join("\\n")
            );
        }
        for n in &self.nodes {
            for j in n.inputs.iter().flatten() {
                let _ = writeln!(s, "  n{j} -> n{};", n.index);
            }
        }
        s.push_str("}\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse_model_relaxed;

    #[test]
    fn single_conv() {
        let spec = parse_model_relaxed("model t\nlayer 0 from=-1 Conv out=16 k=3 s=2\n").unwrap();
        let g = compile(&spec, 640).unwrap();
        assert_eq!(g.nodes.len(), 1);
        assert_eq!(g.taps[0].name, "out");
        assert_eq!(g.taps[0].shape, Shape::new(1, 16, 320, 320));
        assert_eq!(g.total_params(), 464);
    }

    #[test]
    fn concat_mismatch_names_both_nodes() {
        let spec = parse_model_relaxed(
            "model t\nlayer 0 from=-1 Conv out=8 k=3 s=8\nlayer 1 from=0 Conv out=8 k=3 s=2\nlayer 2 from=1,0 Concat\n",
        )
        .unwrap();
        match compile(&spec, 640) {
            Err(Error::Compile(m)) => {
                assert!(m.contains("node 1") && m.contains("node 0"), "{m}");
                assert!(m.contains("40x40") && m.contains("80x80"), "{m}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unconsumed_node_rejected() {
        let spec = parse_model_relaxed(
            "model t\nlayer 0 from=-1 Conv out=8 k=3 s=2\nlayer 1 from=0 Conv out=8\nlayer 2 from=0 Conv out=8\n",
        )
        .unwrap();
        assert!(matches!(compile(&spec, 64), Err(Error::Compile(m)) if m.contains("node 1")));
    }

    #[test]
    fn dot_for_toy_graph() {
        let spec = parse_model_relaxed("model t\nlayer 0 from=-1 Conv out=16 k=3 s=2\nlayer 1 from=0 Detect classes=10\n").unwrap();
        let g = compile(&spec, 64).unwrap();
        let d = g.dump_dot();
        assert_eq!(d.matches(" [label=").count(), 2);
        assert_eq!(d.matches(" -> ").count(), 1);
        assert_eq!(d, g.dump_dot());
        assert_eq!(g.tap("head_p1").unwrap().shape, Shape::new(1, 74, 32, 32));
        assert_eq!(g.tap("p1").unwrap().node, 0);
    }
}

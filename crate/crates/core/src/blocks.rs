//! Composite blocks: the lightweight IRDCB, LDown and HFCC blocks plus the baseline
//! Conv/C2f/C3/SPPF blocks and the decoupled detection head.
//!
//! Every block is a plain description; [`Block::forward`] spells out its computation against an
//! [`Exec`] so one definition serves shape inference, evaluation and differentiation.

use crate::error::{config_err, Error, Result};
use crate::exec::{ConvSpec, Exec};

/// Conv followed by batch norm and optionally SiLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvBn {
    pub spec: ConvSpec,
    pub act: bool,
}

impl ConvBn {
    pub fn new(c_in: usize, c_out: usize, k: usize, s: usize) -> Self {
        ConvBn {
            spec: ConvSpec::new(c_in, c_out, k, s),
            act: true,
        }
    }

    pub fn linear(self) -> Self {
        ConvBn { act: false, ..self }
    }

    pub fn forward<E: Exec>(&self, e: &mut E, name: &str, x: &E::Value) -> Result<E::Value> {
        let y = e.conv(x, &self.spec, name)?;
        let y = e.batchnorm(&y, self.spec.c_out, name)?;
        if self.act {
            e.silu(&y)
        } else {
            Ok(y)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bottleneck {
    pub cv1: ConvBn,
    pub cv2: ConvBn,
    pub residual: bool,
}

impl Bottleneck {
    fn new(c1: usize, c2: usize, shortcut: bool, k: (usize, usize)) -> Self {
        Bottleneck {
            cv1: ConvBn::new(c1, c2, k.0, 1),
            cv2: ConvBn::new(c2, c2, k.1, 1),
            residual: shortcut && c1 == c2,
        }
    }

    fn forward<E: Exec>(&self, e: &mut E, name: &str, x: &E::Value) -> Result<E::Value> {
        let h = self.cv1.forward(e, &format!("{name}.cv1"), x)?;
        let h = self.cv2.forward(e, &format!("{name}.cv2"), &h)?;
        if self.residual {
            e.add(x, &h)
        } else {
            Ok(h)
        }
    }
}

/// Split-transform-concat block with `n` bottlenecks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct C2f {
    pub c1: usize,
    pub c2: usize,
    pub n: usize,
    pub shortcut: bool,
}

impl C2f {
    fn hidden(&self) -> usize {
        self.c2 / 2
    }

    fn forward<E: Exec>(&self, e: &mut E, p: &str, x: &E::Value) -> Result<E::Value> {
        let c = self.hidden();
        let y = ConvBn::new(self.c1, 2 * c, 1, 1).forward(e, &format!("{p}.cv1"), x)?;
        let mut ys = vec![e.slice(&y, 0, c)?, e.slice(&y, c, c)?];
        for i in 0..self.n {
            let m = Bottleneck::new(c, c, self.shortcut, (3, 3));
            let next = m.forward(e, &format!("{p}.m{i}"), ys.last().unwrap())?;
            ys.push(next);
        }
        let refs: Vec<&E::Value> = ys.iter().collect();
        let cat = e.concat(&refs)?;
        ConvBn::new((2 + self.n) * c, self.c2, 1, 1).forward(e, &format!("{p}.cv2"), &cat)
    }
}

/// CSP block with three convs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct C3 {
    pub c1: usize,
    pub c2: usize,
    pub n: usize,
    pub shortcut: bool,
}

impl C3 {
    fn forward<E: Exec>(&self, e: &mut E, p: &str, x: &E::Value) -> Result<E::Value> {
        let c = self.c2 / 2;
        let mut a = ConvBn::new(self.c1, c, 1, 1).forward(e, &format!("{p}.cv1"), x)?;
        for i in 0..self.n {
            a = Bottleneck::new(c, c, self.shortcut, (1, 3)).forward(e, &format!("{p}.m{i}"), &a)?;
        }
        let b = ConvBn::new(self.c1, c, 1, 1).forward(e, &format!("{p}.cv2"), x)?;
        let cat = e.concat(&[&a, &b])?;
        ConvBn::new(2 * c, self.c2, 1, 1).forward(e, &format!("{p}.cv3"), &cat)
    }
}

/// Spatial pyramid pooling with three chained max pools.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sppf {
    pub c1: usize,
    pub c2: usize,
    pub k: usize,
}

impl Sppf {
    fn forward<E: Exec>(&self, e: &mut E, p: &str, x: &E::Value) -> Result<E::Value> {
        let c = self.c1 / 2;
        let y0 = ConvBn::new(self.c1, c, 1, 1).forward(e, &format!("{p}.cv1"), x)?;
        let pad = self.k / 2;
        let y1 = e.maxpool(&y0, self.k, 1, pad)?;
        let y2 = e.maxpool(&y1, self.k, 1, pad)?;
        let y3 = e.maxpool(&y2, self.k, 1, pad)?;
        let cat = e.concat(&[&y0, &y1, &y2, &y3])?;
        ConvBn::new(4 * c, self.c2, 1, 1).forward(e, &format!("{p}.cv2"), &cat)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IrdcbConfig {
    pub c1: usize,
    pub c2: usize,
    pub t: f64,
    pub n: usize,
}

/// Expand (1x1) then `n` depthwise 3x3 filters then a linear compress (1x1), with an identity
/// shortcut when input and output widths agree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Irdcb {
    pub c1: usize,
    pub c2: usize,
    pub c_star: usize,
    pub n: usize,
}

impl Irdcb {
    pub fn has_residual(&self) -> bool {
        self.c1 == self.c2
    }

    fn forward<E: Exec>(&self, e: &mut E, p: &str, x: &E::Value) -> Result<E::Value> {
        let mut y = ConvBn::new(self.c1, self.c_star, 1, 1).forward(e, &format!("{p}.expand"), x)?;
        for i in 0..self.n {
            let dw = ConvBn {
                spec: ConvSpec::depthwise(self.c_star, 3, 1),
                act: true,
            };
            y = dw.forward(e, &format!("{p}.dw{i}"), &y)?;
        }
        let y = ConvBn::new(self.c_star, self.c2, 1, 1)
            .linear()
            .forward(e, &format!("{p}.compress"), &y)?;
        if self.has_residual() {
            e.add(x, &y)
        } else {
            Ok(y)
        }
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(&self) -> u64 {
        let (c1, c2, cs, n) = (self.c1 as u64, self.c2 as u64, self.c_star as u64, self.n as u64);
        c1 * cs + 2 * cs + n * (9 * cs + 2 * cs) + cs * c2 + 2 * c2
    }
}

pub fn build_irdcb(cfg: IrdcbConfig) -> Result<Irdcb> {
    if !(cfg.t >= 1.0) || !cfg.t.is_finite() {
        return config_err(format!("IRDCB expansion factor must be >= 1, got {}", cfg.t));
    }
    if cfg.n == 0 {
        return config_err("IRDCB needs at least one depthwise layer");
    }
    if cfg.c1 == 0 || cfg.c2 == 0 {
        return config_err("IRDCB channel counts must be >= 1");
    }
    let c_star = (cfg.c1 as f64 * cfg.t).floor() as usize;
    if c_star == 0 {
        return config_err(format!("IRDCB expansion width floor({} * {}) is 0", cfg.c1, cfg.t));
    }
    Ok(Irdcb {
        c1: cfg.c1,
        c2: cfg.c2,
        c_star,
        n: cfg.n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LDownConfig {
    pub c1: usize,
    pub c2: usize,
    pub k: usize,
    pub s: usize,
}

/// Depthwise strided conv (BN, no activation) then a 1x1 channel mix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LDown {
    pub c1: usize,
    pub c2: usize,
    pub k: usize,
    pub s: usize,
}

impl LDown {
    fn forward<E: Exec>(&self, e: &mut E, p: &str, x: &E::Value) -> Result<E::Value> {
        let dw = ConvBn {
            spec: ConvSpec::depthwise(self.c1, self.k, self.s),
            act: false,
        };
        let y = dw.forward(e, &format!("{p}.dw"), x)?;
        ConvBn::new(self.c1, self.c2, 1, 1).forward(e, &format!("{p}.pw"), &y)
    }
}

pub fn build_ldown(cfg: LDownConfig) -> Result<LDown> {
    if cfg.s < 2 {
        return config_err(format!("LDown stride must be >= 2, got {}", cfg.s));
    }
    if cfg.k < 2 {
        return config_err(format!("LDown kernel must be >= 2, got {}", cfg.k));
    }
    if cfg.c1 == 0 || cfg.c2 == 0 {
        return config_err("LDown channel counts must be >= 1");
    }
    Ok(LDown {
        c1: cfg.c1,
        c2: cfg.c2,
        k: cfg.k,
        s: cfg.s,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HfccConfig {
    pub c_in: usize,
    pub c_out: usize,
}

pub fn build_hfcc(cfg: HfccConfig) -> Result<ConvBn> {
    if cfg.c_out > cfg.c_in {
        return config_err(format!(
            "HFCC must compress: {} output channels exceed {} inputs",
            cfg.c_out, cfg.c_in
        ));
    }
    if cfg.c_out == 0 {
        return config_err("HFCC output channels must be >= 1");
    }
    Ok(ConvBn::new(cfg.c_in, cfg.c_out, 1, 1))
}

/// Decoupled box/class head, one branch pair per pyramid level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectHead {
    pub chs: Vec<usize>,
    pub nc: usize,
    pub reg_max: usize,
}

impl DetectHead {
    pub fn box_width(&self) -> usize {
        (self.chs[0] / 4).max(16).max(4 * self.reg_max)
    }

    pub fn cls_width(&self) -> usize {
        self.chs[0].max(self.nc.min(100))
    }

    pub fn out_channels(&self) -> usize {
        4 * self.reg_max + self.nc
    }

    fn forward<E: Exec>(&self, e: &mut E, p: &str, xs: &[&E::Value]) -> Result<Vec<E::Value>> {
        let (c2, c3) = (self.box_width(), self.cls_width());
        let mut outs = Vec::with_capacity(xs.len());
        for (l, (&x, &ch)) in xs.iter().zip(&self.chs).enumerate() {
            let b = ConvBn::new(ch, c2, 3, 1).forward(e, &format!("{p}.box{l}.0"), x)?;
            let b = ConvBn::new(c2, c2, 3, 1).forward(e, &format!("{p}.box{l}.1"), &b)?;
            let b = e.conv(
                &b,
                &ConvSpec::new(c2, 4 * self.reg_max, 1, 1).with_bias(),
                &format!("{p}.box{l}.2"),
            )?;
            let c = ConvBn::new(ch, c3, 3, 1).forward(e, &format!("{p}.cls{l}.0"), x)?;
            let c = ConvBn::new(c3, c3, 3, 1).forward(e, &format!("{p}.cls{l}.1"), &c)?;
            let c = e.conv(
                &c,
                &ConvSpec::new(c3, self.nc, 1, 1).with_bias(),
                &format!("{p}.cls{l}.2"),
            )?;
            outs.push(e.concat(&[&b, &c])?);
        }
        Ok(outs)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Block {
    Conv(ConvBn),
    C2f(C2f),
    C3(C3),
    Sppf(Sppf),
    Irdcb(Irdcb),
    LDown(LDown),
    Hfcc(ConvBn),
    Upsample { factor: usize },
    Concat,
    Detect(DetectHead),
}

impl Block {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Block::Conv(_) => "Conv",
            Block::C2f(_) => "C2f",
            Block::C3(_) => "C3",
            Block::Sppf(_) => "SPPF",
            Block::Irdcb(_) => "IRDCB",
            Block::LDown(_) => "LDown",
            Block::Hfcc(_) => "HFCC",
            Block::Upsample { .. } => "Upsample",
            Block::Concat => "Concat",
            Block::Detect(_) => "Detect",
        }
    }

    /// Runs the block. Every kind yields one value except Detect, which yields one per level.
    pub fn forward<E: Exec>(&self, e: &mut E, prefix: &str, xs: &[&E::Value]) -> Result<Vec<E::Value>> {
        let one = |xs: &[&E::Value]| -> Result<()> {
            if xs.len() != 1 {
                return Err(Error::Shape(format!(
                    "{} takes one input, got {}",
                    self.kind_name(),
                    xs.len()
                )));
            }
            Ok(())
        };
        let single = match self {
            Block::Concat => return Ok(vec![e.concat(xs)?]),
            Block::Detect(d) => {
                if xs.len() != d.chs.len() {
                    return Err(Error::Shape(format!(
                        "Detect built for {} levels, got {} inputs",
                        d.chs.len(),
                        xs.len()
                    )));
                }
                return d.forward(e, prefix, xs);
            }
            _ => {
                one(xs)?;
                xs[0]
            }
        };
        let y = match self {
            Block::Conv(c) | Block::Hfcc(c) => c.forward(e, &format!("{prefix}.conv"), single)?,
            Block::C2f(b) => b.forward(e, prefix, single)?,
            Block::C3(b) => b.forward(e, prefix, single)?,
            Block::Sppf(b) => b.forward(e, prefix, single)?,
            Block::Irdcb(b) => b.forward(e, prefix, single)?,
            Block::LDown(b) => b.forward(e, prefix, single)?,
            Block::Upsample { factor } => e.upsample(single, *factor)?,
            Block::Concat | Block::Detect(_) => unreachable!(),
        };
        Ok(vec![y])
    }
}

/// Baseline block kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BaselineArgs {
    pub c1: usize,
    pub c2: usize,
    pub k: usize,
    pub s: usize,
    pub n: usize,
    pub shortcut: bool,
}

pub fn build_baseline(kind: &str, a: BaselineArgs) -> Result<Block> {
    if a.c1 == 0 || a.c2 == 0 {
        return config_err(format!("{kind}: channel counts must be >= 1"));
    }
    match kind {
        "Conv" => {
            if a.k == 0 || a.s == 0 {
                return config_err("Conv needs k >= 1 and s >= 1");
            }
            Ok(Block::Conv(ConvBn::new(a.c1, a.c2, a.k, a.s)))
        }
        "C2f" | "C3" => {
            if a.c2 < 2 {
                return config_err(format!("{kind} needs at least 2 output channels"));
            }
            if a.n == 0 {
                return config_err(format!("{kind} needs n >= 1"));
            }
            Ok(if kind == "C2f" {
                Block::C2f(C2f {
                    c1: a.c1,
                    c2: a.c2,
                    n: a.n,
                    shortcut: a.shortcut,
                })
            } else {
                Block::C3(C3 {
                    c1: a.c1,
                    c2: a.c2,
                    n: a.n,
                    shortcut: a.shortcut,
                })
            })
        }
        "SPPF" => {
            if a.c1 < 2 {
                return config_err("SPPF needs at least 2 input channels");
            }
            Ok(Block::Sppf(Sppf {
                c1: a.c1,
                c2: a.c2,
                k: a.k,
            }))
        }
        other => config_err(format!("unknown baseline block '{other}'")),
    }
}

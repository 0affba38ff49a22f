//! Line-oriented architecture description format.
//!
//! ```text
//! model hierlight
//! scale s depth=0.33 width=0.5 max_channels=1024
//! layer 0 from=-1 Conv out=64 k=3 s=2
//! layer 1 from=0 Detect classes=10
//! ```
//!
//! `#` starts a comment. `from=-1` means the previous layer (the image for layer 0).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{config_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Kind {
    Conv,
    C2f,
    C3,
    Sppf,
    Irdcb,
    LDown,
    Hfcc,
    Upsample,
    Concat,
    Detect,
}

impl Kind {
    pub const ALL: [Kind; 10] = [
        Kind::Conv,
        Kind::C2f,
        Kind::C3,
        Kind::Sppf,
        Kind::Irdcb,
        Kind::LDown,
        Kind::Hfcc,
        Kind::Upsample,
        Kind::Concat,
        Kind::Detect,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Kind::Conv => "Conv",
            Kind::C2f => "C2f",
            Kind::C3 => "C3",
            Kind::Sppf => "SPPF",
            Kind::Irdcb => "IRDCB",
            Kind::LDown => "LDown",
            Kind::Hfcc => "HFCC",
            Kind::Upsample => "Upsample",
            Kind::Concat => "Concat",
            Kind::Detect => "Detect",
        }
    }

    /// Accepted argument keys with their defaults; `None` marks a required key.
    pub fn keys(&self) -> &'static [(&'static str, Option<f64>)] {
        match self {
            Kind::Conv => &[("out", None), ("k", Some(1.0)), ("s", Some(1.0))],
            Kind::C2f | Kind::C3 => &[("out", None), ("n", Some(1.0)), ("shortcut", Some(0.0))],
            Kind::Sppf => &[("out", None), ("k", Some(5.0))],
            Kind::Irdcb => &[("out", None), ("t", Some(2.0)), ("n", Some(1.0))],
            Kind::LDown => &[("out", None), ("k", Some(3.0)), ("s", Some(2.0))],
            Kind::Hfcc => &[("out", None)],
            Kind::Upsample => &[("factor", Some(2.0))],
            Kind::Concat => &[],
            Kind::Detect => &[("classes", Some(10.0)), ("reg_max", Some(16.0))],
        }
    }

    /// Whether the repeat count `n` follows the depth multiplier.
    pub fn depth_scaled(&self) -> bool {
        matches!(self, Kind::C2f | Kind::C3 | Kind::Irdcb)
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Kind {
    type Err = ();
    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        Kind::ALL.iter().copied().find(|k| k.as_str() == s).ok_or(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeSpec {
    pub index: usize,
    pub from: Vec<i64>,
    pub kind: Kind,
    pub args: BTreeMap<String, f64>,
}

impl NodeSpec {
    /// Argument value, falling back to the kind's default.
    pub fn arg(&self, key: &str) -> Option<f64> {
        self.args.get(key).copied().or_else(|| {
            self.kind
                .keys()
                .iter()
                .find(|(k, _)| *k == key)
                .and_then(|(_, d)| *d)
        })
    }

    pub fn arg_usize(&self, key: &str) -> Result<usize> {
        let v = self
            .arg(key)
            .ok_or_else(|| Error::Config(format!("layer {} ({}) lacks '{key}'", self.index, self.kind)))?;
        if v < 0.0 || v.fract() != 0.0 {
            return config_err(format!(
                "layer {} ({}): '{key}' must be a non-negative integer, got {v}",
                self.index, self.kind
            ));
        }
        Ok(v as usize)
    }

    /// Producer indices, `None` for the network input.
    pub fn inputs(&self) -> Vec<Option<usize>> {
        self.from
            .iter()
            .map(|&f| {
                if f < 0 {
                    self.index.checked_sub(1)
                } else {
                    Some(f as usize)
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleSpec {
    pub name: String,
    pub depth: f64,
    pub width: f64,
    pub max_channels: usize,
}

impl ScaleSpec {
    pub fn identity() -> Self {
        ScaleSpec {
            name: "identity".into(),
            depth: 1.0,
            width: 1.0,
            max_channels: usize::MAX - usize::MAX % 8,
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if !(self.depth > 0.0 && self.depth <= 1.0) {
            return Err(format!("depth must be in (0, 1], got {}", self.depth));
        }
        if !(self.width > 0.0 && self.width <= 1.0) {
            return Err(format!("width must be in (0, 1], got {}", self.width));
        }
        if self.max_channels == 0 || self.max_channels % 8 != 0 {
            return Err(format!(
                "max_channels must be a positive multiple of 8, got {}",
                self.max_channels
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    pub scales: Vec<ScaleSpec>,
    pub layers: Vec<NodeSpec>,
}

impl ModelSpec {
    pub fn scale(&self, name: &str) -> Result<&ScaleSpec> {
        self.scales.iter().find(|s| s.name == name).ok_or_else(|| {
            let known: Vec<&str> = self.scales.iter().map(|s| s.name.as_str()).collect();
            Error::Lookup(format!(
                "model '{}' has no scale '{name}' (available: {})",
                self.name,
                if known.is_empty() { "none".to_string() } else { known.join(", ") }
            ))
        })
    }

    pub fn detect_node(&self) -> Option<&NodeSpec> {
        self.layers.iter().find(|l| l.kind == Kind::Detect)
    }

    /// Class count of the detection head, 10 when absent.
    pub fn classes(&self) -> usize {
        self.detect_node()
            .and_then(|d| d.arg("classes"))
            .map(|v| v as usize)
            .unwrap_or(10)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Strict,
    Relaxed,
}

struct Tok<'a> {
    text: &'a str,
    col: usize,
}

fn tokens(line: &str) -> Vec<Tok<'_>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in line.char_indices() {
        if ch.is_whitespace() {
            if let Some(s) = start.take() {
                out.push(Tok {
                    text: &line[s..i],
                    col: line[..s].chars().count() + 1,
                });
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push(Tok {
            text: &line[s..],
            col: line[..s].chars().count() + 1,
        });
    }
    out
}

fn perr<T>(line: usize, col: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Parse {
        line,
        col,
        msg: msg.into(),
    })
}

fn key_value<'a>(t: &Tok<'a>, line: usize) -> Result<(&'a str, &'a str)> {
    match t.text.split_once('=') {
        Some((k, v)) if !k.is_empty() && !v.is_empty() => Ok((k, v)),
        _ => perr(line, t.col, format!("expected key=value, found '{}'", t.text)),
    }
}

fn ident_ok(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
}

/// Strict parse: one Detect node taking three or four levels.
pub fn parse_model(text: &str) -> Result<ModelSpec> {
    parse(text, Mode::Strict)
}

/// Parse for small fixtures: Detect may take any number of levels and may be absent.
pub fn parse_model_relaxed(text: &str) -> Result<ModelSpec> {
    parse(text, Mode::Relaxed)
}

fn parse(text: &str, mode: Mode) -> Result<ModelSpec> {
    let mut name: Option<String> = None;
    let mut scales: Vec<ScaleSpec> = Vec::new();
    let mut layers: Vec<NodeSpec> = Vec::new();
    let mut last_line = 0;

    for (ln0, raw) in text.lines().enumerate() {
        let ln = ln0 + 1;
        last_line = ln;
        let body = raw.split('#').next().unwrap_or("");
        let toks = tokens(body);
        let Some(head) = toks.first() else { continue };
        match head.text {
            "model" => {
                if name.is_some() {
                    return perr(ln, head.col, "duplicate model header");
                }
                if toks.len() != 2 || !ident_ok(toks[1].text) {
                    return perr(ln, head.col, "expected 'model NAME'");
                }
                name = Some(toks[1].text.to_string());
            }
            "scale" => {
                if name.is_none() {
                    return perr(ln, head.col, "scale before model header");
                }
                if !layers.is_empty() {
                    return perr(ln, head.col, "scale lines must precede layers");
                }
                scales.push(parse_scale(&toks, ln, &scales)?);
            }
            "layer" => {
                if name.is_none() {
                    return perr(ln, head.col, "layer before model header");
                }
                let node = parse_layer(&toks, ln, &layers, mode)?;
                layers.push(node);
            }
            other => return perr(ln, head.col, format!("unknown directive '{other}'")),
        }
    }

    let Some(name) = name else {
        return perr(1, 1, "missing 'model NAME' header");
    };
    if layers.is_empty() {
        return perr(last_line.max(1), 1, "model has no layers");
    }
    let detects = layers.iter().filter(|l| l.kind == Kind::Detect).count();
    if mode == Mode::Strict && detects != 1 {
        return perr(
            last_line.max(1),
            1,
            format!("model must contain exactly one Detect layer, found {detects}"),
        );
    }
    if detects > 1 {
        return perr(last_line.max(1), 1, format!("found {detects} Detect layers"));
    }
    Ok(ModelSpec {
        name,
        scales,
        layers,
    })
}

fn parse_scale(toks: &[Tok<'_>], ln: usize, prior: &[ScaleSpec]) -> Result<ScaleSpec> {
    if toks.len() != 5 {
        return perr(
            ln,
            toks[0].col,
            "expected 'scale NAME depth=F width=F max_channels=N'",
        );
    }
    let sname = toks[1].text;
    if !matches!(sname, "n" | "s" | "m") {
        return perr(ln, toks[1].col, format!("scale name must be n, s or m, got '{sname}'"));
    }
    if prior.iter().any(|s| s.name == sname) {
        return perr(ln, toks[1].col, format!("duplicate scale '{sname}'"));
    }
    let mut vals = [0.0f64; 3];
    for (i, key) in ["depth", "width", "max_channels"].iter().enumerate() {
        let t = &toks[2 + i];
        let (k, v) = key_value(t, ln)?;
        if k != *key {
            return perr(ln, t.col, format!("expected '{key}=', found '{k}='"));
        }
        vals[i] = match v.parse::<f64>() {
            Ok(x) if x.is_finite() => x,
            _ => return perr(ln, t.col + k.len() + 1, format!("'{v}' is not a number")),
        };
    }
    if vals[2].fract() != 0.0 || vals[2] < 0.0 {
        return perr(ln, toks[4].col, "max_channels must be an integer");
    }
    let s = ScaleSpec {
        name: sname.to_string(),
        depth: vals[0],
        width: vals[1],
        max_channels: vals[2] as usize,
    };
    if let Err(m) = s.validate() {
        return perr(ln, toks[0].col, m);
    }
    Ok(s)
}

fn parse_layer(toks: &[Tok<'_>], ln: usize, prior: &[NodeSpec], mode: Mode) -> Result<NodeSpec> {
    if toks.len() < 4 {
        return perr(ln, toks[0].col, "expected 'layer INDEX from=LIST KIND [key=value ...]'");
    }
    let idx_tok = &toks[1];
    let index: usize = match idx_tok.text.parse() {
        Ok(i) => i,
        Err(_) => return perr(ln, idx_tok.col, format!("'{}' is not a layer index", idx_tok.text)),
    };
    if prior.iter().any(|l| l.index == index) {
        return perr(ln, idx_tok.col, format!("duplicate layer index {index}"));
    }
    if index != prior.len() {
        return perr(
            ln,
            idx_tok.col,
            format!("layer index {index} out of sequence, expected {}", prior.len()),
        );
    }

    let ft = &toks[2];
    let (k, v) = key_value(ft, ln)?;
    if k != "from" {
        return perr(ln, ft.col, format!("expected 'from=', found '{k}='"));
    }
    let mut from = Vec::new();
    let mut col = ft.col + 5;
    for part in v.split(',') {
        let f: i64 = match part.parse() {
            Ok(f) => f,
            Err(_) => return perr(ln, col, format!("'{part}' is not a layer index")),
        };
        if f < -1 {
            return perr(ln, col, format!("only -1 may be negative, got {f}"));
        }
        if f >= index as i64 {
            return perr(
                ln,
                col,
                format!("forward reference: layer {index} reads from layer {f}"),
            );
        }
        if f == -1 && index > 0 && from.contains(&((index - 1) as i64)) {
            return perr(ln, col, "duplicate input");
        }
        from.push(f);
        col += part.chars().count() + 1;
    }

    let kt = &toks[3];
    let kind: Kind = match kt.text.parse() {
        Ok(k) => k,
        Err(()) => return perr(ln, kt.col, format!("unknown layer kind '{}'", kt.text)),
    };
    let arity_ok = match kind {
        Kind::Concat => from.len() >= 2,
        Kind::Detect => match mode {
            Mode::Strict => from.len() == 3 || from.len() == 4,
            Mode::Relaxed => !from.is_empty(),
        },
        _ => from.len() == 1,
    };
    if !arity_ok {
        let want = match kind {
            Kind::Concat => "at least 2",
            Kind::Detect if mode == Mode::Strict => "3 or 4",
            Kind::Detect => "at least 1",
            _ => "exactly 1",
        };
        return perr(ln, ft.col, format!("{kind} takes {want} inputs, got {}", from.len()));
    }
    if index == 0 && from != [-1] {
        return perr(ln, ft.col, "layer 0 must read from=-1 (the image)");
    }

    let allowed = kind.keys();
    let mut args = BTreeMap::new();
    for t in &toks[4..] {
        let (k, v) = key_value(t, ln)?;
        if !allowed.iter().any(|(a, _)| *a == k) {
            return perr(ln, t.col, format!("{kind} does not accept '{k}'"));
        }
        if args.contains_key(k) {
            return perr(ln, t.col, format!("duplicate key '{k}'"));
        }
        let vcol = t.col + k.chars().count() + 1;
        let num = if k == "t" {
            match v.parse::<f64>() {
                Ok(x) if x.is_finite() && x > 0.0 => x,
                _ => return perr(ln, vcol, format!("'{v}' is not a positive number")),
            }
        } else {
            match v.parse::<u64>() {
                Ok(x) => x as f64,
                Err(_) => return perr(ln, vcol, format!("'{v}' is not a non-negative integer")),
            }
        };
        args.insert(k.to_string(), num);
    }
    for (key, default) in allowed {
        if default.is_none() && !args.contains_key(*key) {
            return perr(ln, kt.col, format!("{kind} requires '{key}='"));
        }
    }
    Ok(NodeSpec {
        index,
        from,
        kind,
        args,
    })
}

/// Canonical text: one directive per line, keys sorted, LF endings.
pub fn serialize_model(spec: &ModelSpec) -> String {
    let mut out = format!("model {}\n", spec.name);
    for s in &spec.scales {
        out.push_str(&format!(
            "scale {} depth={} width={} max_channels={}\n",
            s.name, s.depth, s.width, s.max_channels
        ));
    }
    for l in &spec.layers {
        let from: Vec<String> = l.from.iter().map(|f| f.to_string()).collect();
        out.push_str(&format!("layer {} from={} {}", l.index, from.join(","), l.kind));
        for (k, v) in &l.args {
            out.push_str(&format!(" {k}={v}"));
        }
        out.push('\n');
    }
    out
}

/// Nearest multiple of 8, ties rounding up.
pub fn round8(x: f64) -> usize {
    ((x / 8.0 + 0.5).floor() as usize) * 8
}

pub fn scale_channels(out: usize, scale: &ScaleSpec) -> usize {
    round8(out.min(scale.max_channels) as f64 * scale.width)
}

pub fn scale_depth(n: usize, depth: f64) -> usize {
    ((n as f64 * depth).round() as usize).max(1)
}

/// Resolves width and depth multipliers into concrete channel and repeat counts.
pub fn apply_scale(spec: &ModelSpec, scale: &ScaleSpec) -> Result<ModelSpec> {
    scale.validate().map_err(Error::Config)?;
    let mut out = spec.clone();
    for l in &mut out.layers {
        if let Some(&c) = l.args.get("out") {
            let c2 = scale_channels(c as usize, scale);
            if c2 == 0 {
                return config_err(format!(
                    "layer {} ({}): out={} scales to 0 channels at width {}",
                    l.index, l.kind, c, scale.width
                ));
            }
            l.args.insert("out".into(), c2 as f64);
        }
        if l.kind.depth_scaled() {
            let n = l.arg("n").unwrap_or(1.0) as usize;
            l.args.insert("n".into(), scale_depth(n, scale.depth) as f64);
        }
    }
    Ok(out)
}

/// Overrides `(n, t)` on every IRDCB layer of an already resolved spec.
pub fn override_irdcb(spec: &ModelSpec, n: usize, t: f64) -> ModelSpec {
    let mut out = spec.clone();
    for l in out.layers.iter_mut().filter(|l| l.kind == Kind::Irdcb) {
        l.args.insert("n".into(), n as f64);
        l.args.insert("t".into(), t);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "model t\nscale s depth=0.33 width=0.5 max_channels=1024\nlayer 0 from=-1 Conv out=16 k=3 s=2\nlayer 1 from=0 Detect classes=10\n";

    #[test]
    fn minimal_fixture() {
        let m = parse_model_relaxed(MINIMAL).unwrap();
        assert_eq!(m.layers.len(), 2);
        assert_eq!(m.layers[1].inputs(), vec![Some(0)]);
        assert_eq!(m.layers[0].inputs(), vec![None]);
        assert!(matches!(parse_model(MINIMAL), Err(Error::Parse { line: 4, .. })));
        let again = parse_model_relaxed(&serialize_model(&m)).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn forward_reference_located() {
        let t = "model t\nlayer 0 from=-1 Conv out=8\nlayer 1 from=0 Conv out=8\nlayer 2 from=5 Conv out=8\n";
        match parse_model_relaxed(t) {
            Err(Error::Parse { line, col, msg }) => {
                assert_eq!(line, 4);
                assert_eq!(col, 14);
                assert!(msg.contains("forward"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn diagnostics() {
        let cases = [
            ("model t\nlayer 0 from=-1 Bogus out=8\n", 2, 17, "unknown layer kind"),
            ("model t\nlayer 0 from=-1 Conv out=8\nlayer 0 from=-1 Conv out=8\n", 3, 7, "duplicate"),
            ("model t\nlayer 0 from=-1 Conv out\n", 2, 22, "key=value"),
            ("model t\nlayer 0 from=-1 Conv out=8 q=1\n", 2, 28, "does not accept"),
            ("model t\nlayer 0 from=-1 Conv k=3\n", 2, 17, "requires 'out='"),
            ("model t\nlayer 0 from=-1 Conv out=x\n", 2, 26, "integer"),
            ("model t\nlayer 0 from=-1 Conv out=8\nlayer 1 from=0 Concat\n", 3, 9, "at least 2"),
            ("model t\nlayer 0 from=-1 Conv out=8\nlayer 1 from=-2 Conv out=8\n", 3, 14, "negative"),
            ("model t\nscale x depth=1 width=1 max_channels=8\nlayer 0 from=-1 Conv out=8\n", 2, 7, "n, s or m"),
            ("model t\nscale s depth=1 width=1 max_channels=12\nlayer 0 from=-1 Conv out=8\n", 2, 1, "multiple of 8"),
        ];
        for (text, l, c, frag) in cases {
            match parse_model_relaxed(text) {
                Err(Error::Parse { line, col, msg }) => {
                    assert_eq!((line, col), (l, c), "{text:?}: {msg}");
                    assert!(msg.contains(frag), "{msg}");
                }
                other => panic!("{text:?} gave {other:?}"),
            }
        }
    }

    #[test]
    fn comments_and_blank_lines() {
        let t = "# header\nmodel t   # name\n\n  layer 0 from=-1 Conv out=8 # stem\n";
        let m = parse_model_relaxed(t).unwrap();
        assert_eq!(m.layers[0].arg("out"), Some(8.0));
        assert_eq!(m.layers[0].arg("k"), Some(1.0));
    }

    #[test]
    fn serialize_sorts_keys() {
        let a = parse_model_relaxed("model t\nlayer 0 from=-1 Conv s=2 out=8 k=3\n").unwrap();
        let b = parse_model_relaxed("model t\nlayer 0 from=-1 Conv k=3 s=2 out=8\n").unwrap();
        assert_eq!(serialize_model(&a), serialize_model(&b));
        assert_eq!(serialize_model(&a), "model t\nlayer 0 from=-1 Conv k=3 out=8 s=2\n");
    }

    #[test]
    fn scale_arithmetic() {
        let s = ScaleSpec { name: "s".into(), depth: 0.33, width: 0.5, max_channels: 1024 };
        assert_eq!(scale_channels(1024, &s), 512);
        let n = ScaleSpec { name: "n".into(), depth: 0.33, width: 0.25, max_channels: 1024 };
        assert_eq!(scale_channels(64, &n), 16);
        assert_eq!(scale_depth(3, 0.33), 1);
        assert_eq!(scale_depth(6, 0.33), 2);
        assert_eq!(scale_depth(3, 0.67), 2);
        let m = ScaleSpec { name: "m".into(), depth: 0.67, width: 0.75, max_channels: 768 };
        assert_eq!(scale_channels(1024, &m), 576);

        let spec = parse_model_relaxed("model t\nlayer 0 from=-1 Conv out=8 k=3\nlayer 1 from=0 C2f out=8 n=3\n").unwrap();
        assert_eq!(apply_scale(&spec, &ScaleSpec::identity()).unwrap(), spec);
        let tiny = ScaleSpec { name: "n".into(), depth: 1.0, width: 0.25, max_channels: 1024 };
        assert!(matches!(apply_scale(&spec, &tiny), Err(Error::Config(_))));
    }
}

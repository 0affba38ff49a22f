//! Parameter and FLOP accounting over compiled graphs.
//!
//! FLOPs count a multiply-accumulate as two operations. Batch norm adds 2 per output element,
//! SiLU and residual adds 1, while pooling, upsampling, slicing and concatenation are free.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{compile_hw, Graph};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostRow {
    pub node: usize,
    pub kind: String,
    pub out_shape: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub model: String,
    pub scale: Option<String>,
    pub input: [usize; 2],
    pub rows: Vec<CostRow>,
    pub total_params: u64,
    pub total_flops: u64,
}

/// `count / unit` rounded half-up to one decimal, computed exactly in integers.
pub fn round_tenths(count: u64, unit: u64) -> f64 {
    let tenth = unit / 10;
    ((count + tenth / 2) / tenth) as f64 / 10.0
}

impl CostReport {
    pub fn params_m(&self) -> f64 {
        round_tenths(self.total_params, 1_000_000)
    }

    pub fn gflops(&self) -> f64 {
        round_tenths(self.total_flops, 1_000_000_000)
    }

    pub fn with_scale(mut self, scale: impl Into<String>) -> Self {
        self.scale = Some(scale.into());
        self
    }

    fn from_rows(model: &str, input: [usize; 2], rows: Vec<CostRow>) -> Self {
        CostReport {
            model: model.to_string(),
            scale: None,
            input,
            total_params: rows.iter().map(|r| r.params).sum(),
            total_flops: rows.iter().map(|r| r.flops).sum(),
            rows,
        }
    }
}

fn rows(g: &Graph, flops: bool, params: bool) -> Vec<CostRow> {
    g.nodes
        .iter()
        .map(|n| CostRow {
            node: n.index,
            kind: n.kind.to_string(),
            out_shape: n
                .out_shapes
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(";"),
            params: if params { n.params } else { 0 },
            flops: if flops { n.flops } else { 0 },
        })
        .collect()
}

/// Trainable parameters per node: conv weights and biases plus BN affine terms.
pub fn count_params(g: &Graph) -> CostReport {
    CostReport::from_rows(&g.name, [g.input.h, g.input.w], rows(g, false, true))
}

/// FLOPs per node at a square input size, recompiling when it differs from the graph's.
pub fn count_flops(g: &Graph, imgsz: usize) -> Result<CostReport> {
    if imgsz == g.input.h && imgsz == g.input.w {
        return Ok(CostReport::from_rows(&g.name, [imgsz, imgsz], rows(g, true, false)));
    }
    let g2 = compile_hw(&g.spec, imgsz, imgsz)?;
    Ok(CostReport::from_rows(&g2.name, [imgsz, imgsz], rows(&g2, true, false)))
}

/// Parameters and FLOPs at the graph's compiled size.
pub fn analyze(g: &Graph) -> CostReport {
    CostReport::from_rows(&g.name, [g.input.h, g.input.w], rows(g, true, true))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(ReportFormat::Text),
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::Config(format!(
                "unknown report format '{other}' (expected text, csv or json)"
            ))),
        }
    }
}

pub fn render_report(r: &CostReport, format: &str) -> Result<String> {
    Ok(render(r, format.parse()?))
}

pub fn render(r: &CostReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => {
            let mut s = String::from("node,kind,out_shape,params,flops\n");
            for row in &r.rows {
                let _ = writeln!(s, "{},{},{},{},{}", row.node, row.kind, row.out_shape, row.params, row.flops);
            }
            s
        }
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(r).expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::Text => {
            let mut s = String::new();
            let _ = write!(s, "model {}", r.model);
            if let Some(sc) = &r.scale {
                let _ = write!(s, "  scale {sc}");
            }
            let _ = writeln!(s, "  input {}x{}", r.input[0], r.input[1]);
            let shape_w = r.rows.iter().map(|x| x.out_shape.len()).max().unwrap_or(0).max(9);
            let _ = writeln!(
                s,
                "{:>5}  {:<8}  {:<shape_w$}  {:>12}  {:>15}",
                "node", "kind", "out_shape", "params", "flops"
            );
            for row in &r.rows {
                let _ = writeln!(
                    s,
                    "{:>5}  {:<8}  {:<shape_w$}  {:>12}  {:>15}",
                    row.node, row.kind, row.out_shape, row.params, row.flops
                );
            }
            let _ = writeln!(
                s,
                "{:>5}  {:<8}  {:<shape_w$}  {:>12}  {:>15}",
                "total", "", "", r.total_params, r.total_flops
            );
            let _ = writeln!(s, "params {:.1}M  flops {:.1}G", r.params_m(), r.gflops());
            s
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse_model_relaxed;
    use crate::graph::compile;

    #[test]
    fn half_up_rounding() {
        assert_eq!(round_tenths(7_850_000, 1_000_000), 7.9);
        assert_eq!(round_tenths(7_849_999, 1_000_000), 7.8);
        assert_eq!(round_tenths(33_750_000_000, 1_000_000_000), 33.8);
        assert_eq!(round_tenths(0, 1_000_000), 0.0);
    }

    #[test]
    fn single_conv_costs() {
        let spec = parse_model_relaxed("model t\nlayer 0 from=-1 Conv out=16 k=3 s=2\n").unwrap();
        let g = compile(&spec, 640).unwrap();
        let r = count_params(&g);
        assert_eq!(r.total_params, 432 + 32);
        let f = count_flops(&g, 640).unwrap();
        // 2 * 27 MACs per output element, BN 2, SiLU 1
        assert_eq!(f.total_flops, (2 * 27 * 16 + 3 * 16) * 320 * 320);
        let f2 = count_flops(&g, 320).unwrap();
        assert_eq!(f2.total_flops * 4, f.total_flops);
    }

    #[test]
    fn empty_report_renders() {
        let r = CostReport::from_rows("empty", [640, 640], vec![]);
        assert_eq!(r.total_params, 0);
        assert_eq!(render_report(&r, "csv").unwrap(), "node,kind,out_shape,params,flops\n");
        assert!(render_report(&r, "text").unwrap().contains("total"));
        let j = render_report(&r, "json").unwrap();
        let back: CostReport = serde_json::from_str(&j).unwrap();
        assert_eq!(back, r);
        assert!(matches!(render_report(&r, "xml"), Err(Error::Config(_))));
    }
}

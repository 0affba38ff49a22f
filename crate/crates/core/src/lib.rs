//! CPU inference engine and cost analyzer for the HierLight-YOLO detector family.

pub mod blocks;
pub mod cost;
pub mod detect;
pub mod dsl;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod graph;
pub mod image;
pub mod reference;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor, Tensor4};

use std::path::Path;

/// Reads a model file and resolves it at the named scale. Without a scale name the file's
/// `s` profile is used when present, otherwise the widths are taken literally.
pub fn load_model(path: impl AsRef<Path>, scale: Option<&str>) -> Result<dsl::ModelSpec> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Input(format!("cannot open {}: {e}", path.display())))?;
    resolve(&dsl::parse_model(&text)?, scale)
}

pub fn resolve(spec: &dsl::ModelSpec, scale: Option<&str>) -> Result<dsl::ModelSpec> {
    match scale {
        Some(name) => dsl::apply_scale(spec, spec.scale(name)?),
        None if spec.scales.iter().any(|s| s.name == "s") => dsl::apply_scale(spec, spec.scale("s")?),
        None => Ok(spec.clone()),
    }
}

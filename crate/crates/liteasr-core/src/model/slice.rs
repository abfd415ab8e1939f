//! Layer-slice initialization: build a shallower model whose block `i` is a
//! bit-exact copy of a chosen source block, reusing the source frontend and
//! classifier where shapes allow.

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SliceReport {
    /// Parameters copied bit-exactly from the source.
    pub copied: Vec<String>,
    /// Parameters kept at the target's fresh initialization (shape mismatch
    /// or missing in the source).
    pub fresh: Vec<String>,
}

/// Copy source block `layer_indices[i]` into target block `i` for every
/// target layer. Frontend and classifier parameters are copied when their
/// shapes match and left freshly initialized otherwise; the report records
/// both sets.
pub fn init_from_slice<E: Scalar>(
    target: &mut Model<E>,
    source: &Model<E>,
    layer_indices: &[usize],
) -> Result<SliceReport> {
    if layer_indices.len() != target.config.n_layers {
        return Err(Error::Config(format!(
            "{} layer indices given for a {}-layer target",
            layer_indices.len(),
            target.config.n_layers
        )));
    }
    if let Some(&bad) = layer_indices.iter().find(|&&i| i >= source.config.n_layers) {
        return Err(Error::Config(format!(
            "layer index {bad} out of range for a {}-layer source",
            source.config.n_layers
        )));
    }
    if target.config.d_model != source.config.d_model
        || target.config.ff_dim != source.config.ff_dim
        || target.config.n_heads != source.config.n_heads
        || target.config.conv_kernel_width != source.config.conv_kernel_width
    {
        return Err(Error::Config(format!(
            "block dimensions differ: target d_model/ff {} / {}, source {} / {}",
            target.config.d_model, target.config.ff_dim,
            source.config.d_model, source.config.ff_dim
        )));
    }

    let mut report = SliceReport::default();
    for (ti, &si) in layer_indices.iter().enumerate() {
        let target_names = target.block_param_names(ti);
        let target_prefix = format!("blocks.{ti}.");
        let source_prefix = format!("blocks.{si}.");
        for name in target_names {
            let source_name = format!("{source_prefix}{}", &name[target_prefix.len()..]);
            let src = source.params.by_name(&source_name).ok_or_else(|| {
                Error::Config(format!("source has no parameter `{source_name}`"))
            })?;
            let value = src.value.clone();
            let dst = target
                .params
                .by_name_mut(&name)
                .expect("target name from its own listing");
            if dst.value.shape() != value.shape() {
                return Err(Error::Config(format!(
                    "shape mismatch copying `{source_name}` -> `{name}`"
                )));
            }
            dst.value = value;
            report.copied.push(name);
        }
    }

    // everything outside blocks.*: copy on exact name+shape match
    let outside: Vec<String> = target
        .params
        .iter()
        .filter(|p| !p.name.starts_with("blocks."))
        .map(|p| p.name.clone())
        .collect();
    for name in outside {
        match source.params.by_name(&name) {
            Some(src) if src.value.shape() == target.params.by_name(&name).unwrap().value.shape() => {
                target.params.by_name_mut(&name).unwrap().value = src.value.clone();
                report.copied.push(name);
            }
            _ => report.fresh.push(name),
        }
    }
    Ok(report)
}

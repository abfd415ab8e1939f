//! One-shot global magnitude pruning. Weight matrices and convolution
//! kernels are eligible; biases and layer-norm parameters are exempt.

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Scalar;

#[derive(Debug, Clone)]
pub struct PruneReport {
    pub fraction: f64,
    pub exclude_conv: bool,
    pub n_eligible: usize,
    pub n_zeroed: usize,
    /// (parameter name, zeroed count) for every weight/kernel tensor,
    /// including those protected by `exclude_conv`.
    pub per_tensor: Vec<(String, usize)>,
}

impl PruneReport {
    pub fn zeroed_in(&self, name: &str) -> Option<usize> {
        self.per_tensor
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, c)| *c)
    }
}

fn is_weight_like(name: &str) -> bool {
    name.ends_with(".weight") || name.ends_with(".kernel")
}

fn is_conv_module(name: &str) -> bool {
    name.contains(".conv.") || name.contains(".dw.")
}

/// Zero exactly floor(fraction * n_eligible) smallest-|w| entries across all
/// eligible tensors, ties broken by (tensor order, element index). With
/// `exclude_conv`, convolution-module parameters are protected.
pub fn magnitude_prune<E: Scalar>(
    model: &mut Model<E>,
    fraction: f64,
    exclude_conv: bool,
) -> Result<PruneReport> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!(
            "prune fraction must be in [0, 1), got {fraction}"
        )));
    }

    let eligible: Vec<usize> = model
        .params
        .iter()
        .enumerate()
        .filter(|(_, p)| is_weight_like(&p.name) && !(exclude_conv && is_conv_module(&p.name)))
        .map(|(i, _)| i)
        .collect();

    let mut entries: Vec<(u64, u32, u32)> = Vec::new();
    for (order, &pi) in eligible.iter().enumerate() {
        let p = model.params.iter().nth(pi).unwrap();
        for (ei, &v) in p.value.data().iter().enumerate() {
            // |w| is finite and non-negative, so the bit pattern orders it
            entries.push((v.abs().to_f64c().to_bits(), order as u32, ei as u32));
        }
    }
    let n_eligible = entries.len();
    let n_zeroed = (fraction * n_eligible as f64).floor() as usize;
    entries.sort_unstable();

    let mut zero_counts = vec![0usize; eligible.len()];
    for &(_, order, ei) in entries.iter().take(n_zeroed) {
        let pi = eligible[order as usize];
        let p = model.params.iter_mut().nth(pi).unwrap();
        p.value.data_mut()[ei as usize] = E::zero();
        zero_counts[order as usize] += 1;
    }

    let mut per_tensor = Vec::new();
    {
        let counts_by_index: std::collections::HashMap<usize, usize> = eligible
            .iter()
            .enumerate()
            .map(|(order, &pi)| (pi, zero_counts[order]))
            .collect();
        for (i, p) in model.params.iter().enumerate() {
            if is_weight_like(&p.name) {
                per_tensor.push((p.name.clone(), counts_by_index.get(&i).copied().unwrap_or(0)));
            }
        }
    }

    Ok(PruneReport {
        fraction,
        exclude_conv,
        n_eligible,
        n_zeroed,
        per_tensor,
    })
}

//! Finite-difference verification of reverse-mode gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Smallest gradient magnitude errors are measured against; keeps
/// identically-zero gradients from dividing difference noise by itself.
pub const SCALE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    /// `max|analytic - numeric| / max(max|analytic|, max|numeric|, SCALE_FLOOR)` over the tensor.
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| !e.passed)
            .map(|e| e.name.as_str())
            .collect()
    }
}

/// Compare reverse-mode gradients of `f` against central differences.
///
/// `f` builds a scalar from the leaves it is handed; it is evaluated twice up
/// front and must agree with itself bit for bit.
pub fn check_gradients<F>(
    f: F,
    inputs: &[(&str, Tensor)],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = tensors.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if v.numel() != 1 {
            return Err(Error::Usage(format!(
                "gradient check needs a scalar function, got shape {:?}",
                v.shape()
            )));
        }
        Ok(v.item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| g.param(t)).collect();
    let out = f(&mut g, &vars)?;
    let recorded = g.value(out).item();
    g.backward(out)?;

    let mut tensors: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let first = eval(&tensors)?;
    let second = eval(&tensors)?;
    if first.to_bits() != second.to_bits() || first.to_bits() != recorded.to_bits() {
        return Err(Error::GradCheck(format!(
            "function is not deterministic: {recorded:e}, {first:e}, {second:e}"
        )));
    }

    let mut entries = Vec::with_capacity(inputs.len());
    for (idx, (name, _)) in inputs.iter().enumerate() {
        let numel = tensors[idx].numel();
        let analytic: Vec<f64> = g.grad(vars[idx]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; numel]);
        let mut numeric = vec![0.0; numel];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = tensors[idx].data()[j];
            tensors[idx].data_mut()[j] = orig + step;
            let plus = eval(&tensors)?;
            tensors[idx].data_mut()[j] = orig - step;
            let minus = eval(&tensors)?;
            tensors[idx].data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * step);
        }
        let diff = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max);
        let scale = analytic
            .iter()
            .chain(&numeric)
            .map(|v| v.abs())
            .fold(0.0, f64::max);
        let max_rel_error = diff / scale.max(SCALE_FLOOR);
        entries.push(GradCheckEntry {
            name: (*name).to_string(),
            max_rel_error,
            passed: max_rel_error <= tolerance,
        });
    }
    Ok(GradCheckReport { entries, tolerance })
}

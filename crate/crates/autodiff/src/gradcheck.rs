//! Central finite-difference gradient checking at f64.

use std::fmt;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Worst-case agreement between autodiff and finite differences for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub numel: usize,
    /// `max |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)` over elements.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub eps: f64,
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| !e.passed)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "eps={:e} tolerance={:e}", self.eps, self.tolerance)?;
        for e in &self.entries {
            writeln!(
                f,
                "  {:<40} n={:<6} rel={:.3e} abs={:.3e} {}",
                e.name,
                e.numel,
                e.max_rel_error,
                e.max_abs_error,
                if e.passed { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

fn eval_loss<L>(inputs: &[(String, Tensor<f64>)], loss_fn: &mut L) -> Result<f64>
where
    L: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| g.constant(t.clone())).collect();
    let loss = loss_fn(&mut g, &vars)?;
    let v = g.value(loss);
    if v.numel() != 1 {
        return Err(TensorError::NotScalar(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares reverse-mode gradients of `loss_fn` against central differences
/// `(f(x + eps) - f(x - eps)) / 2eps` for every element of every input.
///
/// Per input the relative error is `max|g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)`
/// with magnitudes taken as the largest element of the tensor, so elements
/// whose true gradient is near zero do not turn rounding noise into failures.
///
/// Failures are reported as entries, never as errors; an `Err` means the
/// loss function itself could not be evaluated.
pub fn grad_check<L>(
    inputs: &[(String, Tensor<f64>)],
    eps: f64,
    tolerance: f64,
    mut loss_fn: L,
) -> Result<GradCheckReport>
where
    L: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| g.param(t.clone())).collect();
    let loss = loss_fn(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut probe: Vec<(String, Tensor<f64>)> = inputs.to_vec();
    let mut entries = Vec::with_capacity(inputs.len());
    for (idx, (name, t)) in inputs.iter().enumerate() {
        let zeros = Tensor::zeros(t.shape());
        let analytic = grads.get(vars[idx]).unwrap_or(&zeros);
        let mut max_abs: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for e in 0..t.numel() {
            let orig = t.data()[e];
            probe[idx].1.data_mut()[e] = orig + eps;
            let up = eval_loss(&probe, &mut loss_fn)?;
            probe[idx].1.data_mut()[e] = orig - eps;
            let down = eval_loss(&probe, &mut loss_fn)?;
            probe[idx].1.data_mut()[e] = orig;
            let fd = (up - down) / (2.0 * eps);
            let ad = analytic.data()[e];
            max_abs = max_abs.max((ad - fd).abs());
            scale = scale.max(ad.abs()).max(fd.abs());
        }
        let max_rel = max_abs / scale.max(1e-8);
        entries.push(GradCheckEntry {
            name: name.clone(),
            numel: t.numel(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            passed: max_rel <= tolerance,
        });
    }
    Ok(GradCheckReport {
        eps,
        tolerance,
        entries,
    })
}

/// Runs [`grad_check`] once per step size.
pub fn grad_check_sweep<L>(
    inputs: &[(String, Tensor<f64>)],
    eps_values: &[f64],
    tolerance: f64,
    mut loss_fn: L,
) -> Result<Vec<GradCheckReport>>
where
    L: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    eps_values
        .iter()
        .map(|&eps| grad_check(inputs, eps, tolerance, &mut loss_fn))
        .collect()
}

/// Reduces any tensor to a scalar with fixed, non-uniform weights so that
/// every output element contributes a distinct amount to the probe loss.
pub fn probe_loss(graph: &mut Graph<f64>, y: Var) -> Result<Var> {
    let shape = graph.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| (0.7 * i as f64 + 0.3).sin() + 0.25).collect();
    let w = graph.constant(Tensor::new(shape, w)?);
    let prod = graph.mul(y, w)?;
    Ok(graph.sum(prod))
}

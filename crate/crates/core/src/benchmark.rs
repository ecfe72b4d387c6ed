//! Accuracy and cost of the quadrature size near the optimum.
//!
//! For each `Q` a single Newton iteration is taken from the supplied
//! parameters; the table records its cost, the log-likelihood, and how much
//! the updated parameters and standard errors move relative to the previous
//! `Q`.

use std::time::Instant;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::fit::{newton_step, standard_errors};
use crate::kernel::Derivs;
use crate::marginal::Evaluator;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub q: usize,
    /// `Q^d` adapted points per series.
    pub grid_points: usize,
    /// Fastest wall time of one likelihood-with-derivatives evaluation plus the Newton solve.
    pub seconds: f64,
    pub loglik: f64,
    /// Largest relative change (%) of the updated parameters against the previous row.
    pub param_change_pct: f64,
    /// Largest relative change (%) of the standard errors against the previous row.
    pub se_change_pct: f64,
    pub integrals: usize,
    pub max_inner_iterations: usize,
    pub params: DVector<f64>,
    pub se: DVector<f64>,
}

impl BenchRow {
    pub fn minutes(&self) -> f64 {
        self.seconds / 60.0
    }
}

fn max_pct_change(new: &DVector<f64>, old: &DVector<f64>) -> f64 {
    new.iter()
        .zip(old.iter())
        .filter(|(_, o)| **o != 0.0)
        .map(|(n, o)| 100.0 * ((n - o) / o).abs())
        .fold(0.0, f64::max)
}

/// One Newton iteration at `psi` for every `Q` in `q_list`, timed as the minimum over `repeats`.
pub fn benchmark_q(eval: &Evaluator<'_>, psi: &DVector<f64>, q_list: &[usize], repeats: usize) -> Result<Vec<BenchRow>> {
    let d = eval.spec().random_dim() as u32;
    let names = eval.spec().param_names();
    let mut rows: Vec<BenchRow> = Vec::with_capacity(q_list.len());
    for &q in q_list {
        let mut best = f64::INFINITY;
        let mut last = None;
        for _ in 0..repeats.max(1) {
            let start = Instant::now();
            let pe = eval.panel(psi, q, Derivs::Hessian)?;
            let (step, _) = newton_step(pe.hess.as_ref().unwrap(), pe.grad.as_ref().unwrap(), 1e-4)
                .ok_or_else(|| Error::InnerFailure(format!("Newton system at Q = {q} could not be regularized")))?;
            best = best.min(start.elapsed().as_secs_f64());
            last = Some((pe, step));
        }
        let (pe, step) = last.expect("at least one repeat");
        let params = psi + step;
        let se = standard_errors(pe.hess.as_ref().unwrap(), &names)
            .map(|(se, _)| se)
            .unwrap_or_else(|_| DVector::from_element(psi.len(), f64::NAN));
        let (param_change_pct, se_change_pct) = match rows.last() {
            Some(prev) => (max_pct_change(&params, &prev.params), max_pct_change(&se, &prev.se)),
            None => (f64::NAN, f64::NAN),
        };
        rows.push(BenchRow {
            q,
            grid_points: (q as u64).pow(d) as usize,
            seconds: best,
            loglik: pe.loglik,
            param_change_pct,
            se_change_pct,
            integrals: pe.integrals,
            max_inner_iterations: pe.max_inner_iterations,
            params,
            se,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percent_change_skips_zero_reference() {
        let a = DVector::from_vec(vec![1.01, 5.0, 3.0]);
        let b = DVector::from_vec(vec![1.0, 0.0, 3.0]);
        assert!((max_pct_change(&a, &b) - 1.0).abs() < 1e-9);
    }
}

//! Finite-difference verification of analytic gradients.
//!
//! The checker re-evaluates the loss with each parameter entry nudged up and
//! down by `step` and compares the central difference against the gradient
//! the tape produced. The loss closure must be deterministic: fix every
//! stochastic choice (dropout masks, shuffles) before calling.

use std::collections::HashMap;

use crate::error::Result;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step size.
    pub step: f64,
    /// Largest acceptable relative error.
    pub tolerance: f64,
    /// How many of the worst entries to keep in the report.
    pub keep_worst: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            keep_worst: 10,
        }
    }
}

/// One compared gradient entry.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// Worst entries, sorted by descending relative error.
    pub worst: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "gradcheck: {} entries, max rel err {:.3e} (tolerance {:.1e}): {}",
            self.checked,
            self.max_rel_err,
            self.tolerance,
            if self.passed() { "pass" } else { "FAIL" }
        )?;
        for e in &self.worst {
            writeln!(
                f,
                "  {}[{}]: analytic {:.6e} numeric {:.6e} rel {:.3e}",
                e.param, e.index, e.analytic, e.numeric, e.rel_err
            )?;
        }
        Ok(())
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares `analytic` gradients against central differences of `loss_fn`
/// over every entry of every parameter in `params`.
pub fn check_gradients<F>(
    params: &[(String, Vec<f64>)],
    analytic: &HashMap<String, Vec<f64>>,
    loss_fn: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&[(String, Vec<f64>)]) -> Result<f64> + Sync,
{
    let jobs: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, (_, v))| (0..v.len()).map(move |i| (pi, i)))
        .collect();

    let eval_one = |&(pi, i): &(usize, usize)| -> Result<GradCheckEntry> {
        let mut work = params.to_vec();
        let orig = work[pi].1[i];
        work[pi].1[i] = orig + opts.step;
        let up = loss_fn(&work)?;
        work[pi].1[i] = orig - opts.step;
        let down = loss_fn(&work)?;
        let numeric = (up - down) / (2.0 * opts.step);
        let name = &params[pi].0;
        let a = analytic.get(name).map_or(0.0, |g| g[i]);
        Ok(GradCheckEntry {
            param: name.clone(),
            index: i,
            analytic: a,
            numeric,
            rel_err: rel_err(a, numeric),
        })
    };

    #[cfg(feature = "parallel")]
    let mut entries: Vec<GradCheckEntry> = jobs.par_iter().map(eval_one).collect::<Result<_>>()?;
    #[cfg(not(feature = "parallel"))]
    let mut entries: Vec<GradCheckEntry> = jobs.iter().map(eval_one).collect::<Result<_>>()?;

    entries.sort_by(|a, b| b.rel_err.total_cmp(&a.rel_err));
    let max_rel_err = entries.first().map_or(0.0, |e| e.rel_err);
    let checked = entries.len();
    entries.truncate(opts.keep_worst);
    Ok(GradCheckReport {
        checked,
        max_rel_err,
        tolerance: opts.tolerance,
        worst: entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_passes() {
        let params = vec![("x".to_string(), vec![0.3, -1.2, 2.0])];
        let target = [1.0, 0.5, -0.5];
        let loss = |p: &[(String, Vec<f64>)]| {
            Ok(p[0].1.iter().zip(&target).map(|(x, t)| (x - t) * (x - t)).sum())
        };
        let grad: Vec<f64> = params[0].1.iter().zip(&target).map(|(x, t)| 2.0 * (x - t)).collect();
        let analytic = HashMap::from([("x".to_string(), grad)]);
        let report =
            check_gradients(&params, &analytic, loss, &GradCheckOptions::default()).unwrap();
        assert!(report.passed(), "{report}");
        assert_eq!(report.checked, 3);
    }

    #[test]
    fn wrong_gradient_fails() {
        let params = vec![("x".to_string(), vec![0.7])];
        let loss = |p: &[(String, Vec<f64>)]| Ok(p[0].1[0] * p[0].1[0]);
        let analytic = HashMap::from([("x".to_string(), vec![3.0])]);
        let report =
            check_gradients(&params, &analytic, loss, &GradCheckOptions::default()).unwrap();
        assert!(!report.passed());
    }
}

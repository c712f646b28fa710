//! Central-difference verification of tape gradients in 64-bit precision.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::error::{MugError, Result};
use crate::params::{Graph, ParamStore};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many entries per tensor (seeded subset); `None`
    /// checks every scalar.
    pub max_entries_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_entries_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst entry.
    pub worst_values: (f64, f64),
    pub entries_checked: usize,
}

/// `|a − n| / max(1e-12, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

/// Compares the analytic gradient of `loss` against central differences
/// `(L(θ+ε) − L(θ−ε)) / 2ε` for every (or a seeded subset of every) scalar
/// parameter in `params`.
pub fn grad_check<F>(params: &ParamStore<f64>, opts: &GradCheckOptions, mut loss: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<'_, f64>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(params);
        let l = loss(&mut g)?;
        let value = g.tape.scalar(l);
        if !value.is_finite() {
            return Err(MugError::Verification(format!("loss is non-finite ({value}) at the base point")));
        }
        g.backward(l)?
    };

    let mut work = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        entries_checked: 0,
    };
    for id in params.ids() {
        let n = params.get(id).numel();
        let entries: Vec<usize> = match opts.max_entries_per_tensor {
            Some(k) if k < n => {
                let mut e = sample(&mut rng, n, k).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..n).collect(),
        };
        for e in entries {
            let original = params.get(id).data()[e];
            let mut eval = |theta: f64| -> Result<f64> {
                work.get_mut(id).data_mut()[e] = theta;
                let mut g = Graph::new(&work);
                let l = loss(&mut g)?;
                let v = g.tape.scalar(l);
                if !v.is_finite() {
                    return Err(MugError::Verification(format!(
                        "loss is non-finite when perturbing {}[{e}]",
                        params.name(id)
                    )));
                }
                Ok(v)
            };
            let plus = eval(original + opts.eps)?;
            let minus = eval(original - opts.eps)?;
            work.get_mut(id).data_mut()[e] = original;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic.get(id).map_or(0.0, |t| t.data()[e]);
            let rel = relative_error(a, numeric);
            report.entries_checked += 1;
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(rel);
                report.worst = Some((params.name(id).to_string(), e));
                report.worst_values = (a, numeric);
            }
        }
    }
    Ok(report)
}

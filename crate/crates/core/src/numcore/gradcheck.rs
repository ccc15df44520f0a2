use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numcore::{Gradients, ParameterSet};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tolerance: f64,
    /// Entries checked per parameter; parameters with fewer entries are checked exhaustively.
    pub samples_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tolerance: 1e-4,
            samples_per_param: 50,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error < self.tolerance)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| p.max_rel_error >= self.tolerance)
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients against central finite differences.
///
/// `f` must be deterministic: it is evaluated once for the analytic gradient
/// and twice per sampled entry with that entry perturbed by `±eps`.
pub fn grad_check<S, F>(params: &ParameterSet<S>, mut f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    S: Scalar,
    F: FnMut(&ParameterSet<S>) -> Result<(S, Gradients<S>)>,
{
    if !(opts.eps > 0.0) {
        return Err(Error::Contract(format!(
            "finite-difference step must be positive, got {}",
            opts.eps
        )));
    }
    let (_, analytic) = f(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let eps = S::lit(opts.eps);
    let mut report = GradCheckReport {
        tolerance: opts.tolerance,
        params: Vec::new(),
    };

    for id in params.ids() {
        let n = params.get(id).len();
        let indices: Vec<usize> = if n <= opts.samples_per_param {
            (0..n).collect()
        } else {
            let mut idx = rand::seq::index::sample(&mut rng, n, opts.samples_per_param).into_vec();
            idx.sort_unstable();
            idx
        };
        let mut check = ParamCheck {
            name: params.name(id).to_string(),
            checked: indices.len(),
            max_rel_error: 0.0,
            worst_index: None,
        };
        for i in indices {
            let original = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = original + eps;
            let (plus, _) = f(&work)?;
            work.get_mut(id).data_mut()[i] = original - eps;
            let (minus, _) = f(&work)?;
            work.get_mut(id).data_mut()[i] = original;

            let numeric = (plus - minus).as_f64() / (2.0 * opts.eps);
            let err = relative_error(analytic.get(id).data()[i].as_f64(), numeric);
            if err > check.max_rel_error || check.worst_index.is_none() {
                check.max_rel_error = check.max_rel_error.max(err);
                check.worst_index = Some(i);
            }
        }
        report.params.push(check);
    }
    Ok(report)
}

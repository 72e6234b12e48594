//! Central finite-difference check of the analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{loss, loss_and_grads, Example};
use super::params::{FreezePolicy, ParamGroup};
use super::tape::Grads;
use super::{ModelError, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckConfig {
    pub samples_per_group: usize,
    pub h: f64,
    pub tol: f64,
    pub seed: u64,
    /// Multiplies the analytic gradient before comparison. Anything other
    /// than 1 is fault injection.
    pub analytic_scale: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { samples_per_group: 50, h: 1e-3, tol: 1e-4, seed: 0, analytic_scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub group: ParamGroup,
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Largest relative error seen in each group.
    pub per_group: Vec<(ParamGroup, f64)>,
    pub checked: usize,
    /// Entries above `tol`.
    pub failures: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

fn batch_loss(params: &ModelParams, batch: &[Example]) -> Result<f64, ModelError> {
    let mut s = 0.0;
    for ex in batch {
        s += loss(params, ex)?;
    }
    Ok(s / batch.len() as f64)
}

/// Compares analytic and central-difference gradients of the mean batch
/// loss on `samples_per_group` scalars drawn uniformly from every group.
/// Frozen flags are ignored: every group is checked.
pub fn finite_diff_check(params: &ModelParams, batch: &[Example], cfg: &GradCheckConfig) -> Result<GradCheckReport, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::InvalidTraining("gradient check needs at least one example".into()));
    }
    let mut work = params.clone();
    work.apply_policy(FreezePolicy::Finetune);
    let mut grads = Grads::default();
    for ex in batch {
        grads.accumulate(loss_and_grads(&work, ex)?.1);
    }
    grads.scale(1.0 / batch.len() as f64);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport { max_rel_err: 0.0, per_group: Vec::new(), checked: 0, failures: Vec::new() };
    for group in ParamGroup::ALL {
        let scalars: Vec<(usize, usize)> =
            work.ids_in(group).flat_map(|p| (0..work.tensors[p].len()).map(move |i| (p, i))).collect();
        if scalars.is_empty() {
            continue;
        }
        let n = cfg.samples_per_group.min(scalars.len());
        let mut picks: Vec<usize> = rand::seq::index::sample(&mut rng, scalars.len(), n).into_vec();
        picks.sort_unstable();
        let mut group_max: f64 = 0.0;
        for pick in picks {
            let (p, i) = scalars[pick];
            let analytic = grads.get(p).map_or(0.0, |g| g.data[i]) * cfg.analytic_scale;
            let orig = work.tensors[p].data[i];
            work.tensors[p].data[i] = orig + cfg.h;
            let up = batch_loss(&work, batch)?;
            work.tensors[p].data[i] = orig - cfg.h;
            let down = batch_loss(&work, batch)?;
            work.tensors[p].data[i] = orig;
            let numeric = (up - down) / (2.0 * cfg.h);
            let rel_err = relative_error(analytic, numeric);
            group_max = group_max.max(rel_err);
            report.checked += 1;
            if rel_err > cfg.tol || !rel_err.is_finite() {
                report.failures.push(GradCheckEntry {
                    group,
                    param: work.specs()[p].name.clone(),
                    index: i,
                    analytic,
                    numeric,
                    rel_err,
                });
            }
        }
        report.max_rel_err = report.max_rel_err.max(group_max);
        report.per_group.push((group, group_max));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_against_zero_is_exact() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.01) - 0.01 / 2.01).abs() < 1e-15);
    }
}

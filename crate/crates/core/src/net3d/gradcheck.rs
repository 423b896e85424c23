//! Central finite-difference verification of the analytic gradients of
//! loss∘forward.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::LossWeights;
use super::model::ModelState;
use crate::error::Result;
use crate::voxgrid::{PointPrompt, Volume};

/// Denominator floor of the relative error. Some gradients are exactly zero
/// (key-projection biases, since softmax ignores a per-row shift), and
/// central differences at step 1e-5 on an O(1) loss resolve only about
/// 1e-11, so a bare ratio there measures rounding noise.
pub const REL_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checks: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.checks.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    /// Worst relative error per parameter group (tensor name without its
    /// final component), sorted by group name.
    pub fn by_group(&self) -> Vec<(String, f64)> {
        let mut m = std::collections::BTreeMap::<String, f64>::new();
        for c in &self.checks {
            let group = c.name.rsplit_once('.').map_or(c.name.as_str(), |(g, _)| g);
            let e = m.entry(group.to_string()).or_insert(0.0);
            *e = e.max(c.rel_error);
        }
        m.into_iter().collect()
    }
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

#[allow(clippy::too_many_arguments)]
/// Checks, in every parameter tensor, the entry with the largest analytic
/// gradient plus `random_per_tensor` random entries.
pub fn check_gradients(
    model: &ModelState<f64>,
    patch: &Volume,
    local: &[PointPrompt],
    target: &[bool],
    w: LossWeights,
    step: f64,
    random_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, grads) = model.loss_and_grad(patch, local, target, w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = model.clone();
    let mut report = GradCheckReport::default();
    for (pi, entry) in model.params.entries().iter().enumerate() {
        let g = &grads[pi];
        let n = g.len();
        let argmax = (0..n)
            .max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs()))
            .expect("non-empty tensor");
        let mut idx = vec![argmax];
        idx.extend(
            sample(&mut rng, n, random_per_tensor.min(n))
                .into_iter()
                .filter(|&i| i != argmax),
        );
        for i in idx {
            let orig = entry.data[i];
            probe.params.entries_mut()[pi].data[i] = orig + step;
            let (up, _) = probe.loss_and_grad(patch, local, target, w)?;
            probe.params.entries_mut()[pi].data[i] = orig - step;
            let (down, _) = probe.loss_and_grad(patch, local, target, w)?;
            probe.params.entries_mut()[pi].data[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            report.checks.push(TensorCheck {
                name: entry.name.clone(),
                index: i,
                analytic: g[i],
                numeric,
                rel_error: rel_error(g[i], numeric),
            });
        }
    }
    Ok(report)
}

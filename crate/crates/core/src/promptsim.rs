//! Simulated clicking for training and evaluation.
//!
//! The first click is drawn uniformly from the ground-truth foreground.
//! Every later click is drawn from the error region of the previous
//! prediction: positive on a missed voxel, negative on a spurious one.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::voxgrid::{connected_components, dice, BinaryMask, ClickLabel, Connectivity, PointPrompt, Volume};

/// How corrective clicks are placed inside the error region.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClickStrategy {
    /// Uniform over every erroneous voxel.
    #[default]
    Uniform,
    /// The voxel of the largest error component nearest to its centroid.
    LargestErrorCenter,
}

fn sample_index<R: Rng + ?Sized>(rng: &mut R, n: usize) -> usize {
    rng.gen_range(0..n)
}

/// Uniform positive click on the ground-truth foreground.
pub fn first_click<R: Rng + ?Sized>(gt: &BinaryMask, rng: &mut R) -> Result<PointPrompt> {
    let fg: Vec<usize> = gt.foreground().collect();
    if fg.is_empty() {
        return Err(Error::EmptyTarget);
    }
    let i = fg[sample_index(rng, fg.len())];
    Ok(PointPrompt::positive(gt.dims.coord(i)))
}

/// Label a voxel of the error region should get.
pub fn error_label(gt: &BinaryMask, idx: usize) -> ClickLabel {
    if gt.voxels[idx] {
        ClickLabel::Positive
    } else {
        ClickLabel::Negative
    }
}

/// Corrective click, uniform over `gt ⊕ pred`.
pub fn next_click<R: Rng + ?Sized>(gt: &BinaryMask, pred: &BinaryMask, rng: &mut R) -> Result<PointPrompt> {
    next_click_with(gt, pred, &[], ClickStrategy::Uniform, rng)
}

/// Corrective click that skips voxels already clicked.
pub fn next_click_with<R: Rng + ?Sized>(
    gt: &BinaryMask,
    pred: &BinaryMask,
    clicked: &[PointPrompt],
    strategy: ClickStrategy,
    rng: &mut R,
) -> Result<PointPrompt> {
    if gt.dims != pred.dims {
        return Err(shape_err(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dims.0, gt.dims.0
        )));
    }
    if gt.voxels == pred.voxels {
        return Err(Error::Converged);
    }
    let dims = gt.dims;
    let mut taken = vec![false; dims.len()];
    for c in clicked {
        if dims.contains(c.coord) {
            taken[dims.index(c.coord)] = true;
        }
    }
    let idx = match strategy {
        ClickStrategy::Uniform => {
            let candidates: Vec<usize> = (0..dims.len())
                .filter(|&i| gt.voxels[i] != pred.voxels[i] && !taken[i])
                .collect();
            if candidates.is_empty() {
                return Err(Error::ClicksExhausted);
            }
            candidates[sample_index(rng, candidates.len())]
        }
        ClickStrategy::LargestErrorCenter => {
            let err = BinaryMask {
                dims,
                voxels: gt.voxels.iter().zip(&pred.voxels).map(|(a, b)| a != b).collect(),
            };
            let comps = connected_components(&err, Connectivity::TwentySix);
            let mut pick = None;
            for comp in &comps {
                let c = comp.centroid(dims);
                let best = comp.voxels.iter().copied().filter(|&i| !taken[i]).min_by(|&a, &b| {
                    let d = |i: usize| {
                        let p = dims.coord(i);
                        (0..3).map(|k| (p[k] as f64 - c[k]).powi(2)).sum::<f64>()
                    };
                    d(a).total_cmp(&d(b)).then(a.cmp(&b))
                });
                if best.is_some() {
                    pick = best;
                    break;
                }
            }
            pick.ok_or(Error::ClicksExhausted)?
        }
    };
    Ok(PointPrompt {
        coord: dims.coord(idx),
        label: error_label(gt, idx),
    })
}

/// One prediction round of a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionStep {
    /// Number of clicks the prediction was made with.
    pub clicks: usize,
    pub dice: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionOutcome {
    pub clicks: Vec<PointPrompt>,
    pub steps: Vec<SessionStep>,
    pub final_pred: BinaryMask,
    /// Why the session ended before the budget, if it did.
    pub stopped_early: Option<StopReason>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    ClicksExhausted,
}

impl SessionOutcome {
    /// Dice after `budget` clicks. Sessions that stopped early keep their
    /// last value.
    pub fn dice_at(&self, budget: usize) -> Option<f64> {
        if budget == 0 {
            return None;
        }
        self.steps
            .iter()
            .take_while(|s| s.clicks <= budget)
            .last()
            .map(|s| s.dice)
    }
}

/// Ground truth, click history and current prediction of one simulated
/// interaction.
#[derive(Debug, Clone)]
pub struct ClickSession {
    pub gt: BinaryMask,
    pub clicks: Vec<PointPrompt>,
    pub current_pred: Option<BinaryMask>,
    pub strategy: ClickStrategy,
}

impl ClickSession {
    pub fn new(gt: BinaryMask) -> Self {
        ClickSession {
            gt,
            clicks: Vec::new(),
            current_pred: None,
            strategy: ClickStrategy::Uniform,
        }
    }

    /// Produces and records the next click: the first from the foreground,
    /// later ones from the current error region.
    pub fn click<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<PointPrompt> {
        let c = match &self.current_pred {
            None if self.clicks.is_empty() => first_click(&self.gt, rng)?,
            None => return Err(Error::Config("a prediction is needed before the next click".into())),
            Some(pred) => next_click_with(&self.gt, pred, &self.clicks, self.strategy, rng)?,
        };
        self.clicks.push(c);
        Ok(c)
    }

    pub fn record(&mut self, pred: BinaryMask) -> Result<f64> {
        let d = dice(&pred, &self.gt)?;
        self.current_pred = Some(pred);
        Ok(d)
    }
}

/// Alternates predict and click for up to `budget` rounds. `forward` gets
/// the full accumulated click list every round.
pub fn run_session<F, R>(
    mut forward: F,
    volume: &Volume,
    gt: &BinaryMask,
    budget: usize,
    strategy: ClickStrategy,
    rng: &mut R,
) -> Result<SessionOutcome>
where
    F: FnMut(&Volume, &[PointPrompt]) -> Result<BinaryMask>,
    R: Rng + ?Sized,
{
    if budget == 0 {
        return Err(Error::Config("click budget must be at least 1".into()));
    }
    if gt.dims != volume.dims {
        return Err(shape_err("ground truth and volume dims differ"));
    }
    let mut session = ClickSession::new(gt.clone());
    session.strategy = strategy;
    let mut steps = Vec::with_capacity(budget);
    let mut stopped_early = None;
    for round in 0..budget {
        if round > 0 {
            match session.click(rng) {
                Ok(_) => {}
                Err(Error::Converged) => {
                    stopped_early = Some(StopReason::Converged);
                    break;
                }
                Err(Error::ClicksExhausted) => {
                    stopped_early = Some(StopReason::ClicksExhausted);
                    break;
                }
                Err(e) => return Err(e),
            }
        } else {
            session.click(rng)?;
        }
        let pred = forward(volume, &session.clicks)?;
        if pred.dims != gt.dims {
            return Err(shape_err("model returned a mask of the wrong dims"));
        }
        let d = session.record(pred)?;
        steps.push(SessionStep {
            clicks: session.clicks.len(),
            dice: d,
        });
    }
    Ok(SessionOutcome {
        clicks: session.clicks,
        steps,
        final_pred: session.current_pred.expect("at least one round ran"),
        stopped_early,
    })
}

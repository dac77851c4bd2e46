//! Direct gradient descent on a tensor field under the geometry loss.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::{geo_loss, LossWeights};
use crate::tensor::{Mask, TensorVolume};

/// Halvings allowed within one step before the search gives up.
const MAX_HALVINGS: usize = 60;
/// Step-size growth after an accepted step.
const GROWTH: f64 = 1.25;

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub field: TensorVolume,
    /// Loss before the first step and after every accepted step.
    pub trajectory: Vec<f64>,
    /// Step size after the last accepted step.
    pub final_lr: f64,
    /// True when the step search ran out of halvings before `steps` were taken.
    pub stalled: bool,
}

impl RefineOutcome {
    pub fn trajectory_csv(&self) -> String {
        let mut out = String::from("step,l_geo\n");
        for (i, l) in self.trajectory.iter().enumerate() {
            let _ = writeln!(out, "{i},{l:e}");
        }
        out
    }
}

/// Descends `L_Geo(field, gt)` from `init` for up to `steps` steps. A step
/// that would raise the loss is retried with half the step size, so the
/// recorded trajectory never increases. Each accepted step lets the next
/// one start 1.25× larger.
pub fn smoke_refine(
    init: &TensorVolume,
    gt: &TensorVolume,
    mask: &Mask,
    w: &LossWeights,
    steps: usize,
    lr: f64,
) -> Result<RefineOutcome> {
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be at least 1".into()));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }
    let mut field = init.clone();
    let mut report = geo_loss(&field, gt, mask, w)?;
    if !report.l_geo.is_finite() {
        return Err(Error::Diverged { step: 0 });
    }
    let mut trajectory = vec![report.l_geo];
    let mut lr = lr;
    let mut stalled = false;
    let idx = mask.indices();

    for _ in 1..=steps {
        if report.l_geo == 0.0 {
            break;
        }
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let mut candidate = field.clone();
            for &v in &idx {
                for k in 0..6 {
                    candidate.data[v].0[k] -= lr * report.grad[v][k];
                }
            }
            match geo_loss(&candidate, gt, mask, w) {
                Ok(next) if next.l_geo.is_finite() && next.l_geo <= report.l_geo => {
                    field = candidate;
                    report = next;
                    accepted = true;
                    lr *= GROWTH;
                    break;
                }
                Ok(_) | Err(Error::AllDegenerate) => lr *= 0.5,
                Err(e) => return Err(e),
            }
        }
        if !accepted {
            stalled = true;
            break;
        }
        trajectory.push(report.l_geo);
    }
    Ok(RefineOutcome { field, trajectory, final_lr: lr, stalled })
}

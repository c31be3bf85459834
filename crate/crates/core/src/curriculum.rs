//! Plateau feedback, the gradient switch, and the adversarial update of the
//! pseudo-image bank.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autograd::Tape;
use crate::episodic::{episode_vars, outer_loss_vars, sample_pseudo_episode, HyperParams, MetaState};
use crate::error::{Error, Result};
use crate::inversion::{inversion_loss_vars, DynamicDataset, InversionWeights};
use crate::zoo::ModelZoo;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Omega {
    Positive,
    Negative,
}

/// Which batch statistic the monitor watches. Accuracy improves upward,
/// loss downward.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeedbackMetric {
    Accuracy,
    Loss,
}

impl FromStr for FeedbackMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(Self::Accuracy),
            "loss" => Ok(Self::Loss),
            _ => Err(Error::Config(format!("unknown feedback metric `{s}`"))),
        }
    }
}

impl fmt::Display for FeedbackMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Accuracy => "accuracy",
            Self::Loss => "loss",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedbackMonitor {
    pub best_metric: Option<f64>,
    pub stall_count: usize,
    pub patience: usize,
    pub last_omega: Omega,
    pub metric: FeedbackMetric,
}

impl FeedbackMonitor {
    pub fn new(patience: usize, metric: FeedbackMetric) -> Self {
        Self {
            best_metric: None,
            stall_count: 0,
            patience,
            last_omega: Omega::Negative,
            metric,
        }
    }

    /// Records one batch value. A strict improvement resets the stall count;
    /// otherwise feedback turns positive once `patience` values in a row
    /// failed to improve, and stays positive until the next improvement.
    pub fn update(&mut self, value: f64) -> Omega {
        let improved = match self.best_metric {
            None => !value.is_nan(),
            Some(best) => match self.metric {
                FeedbackMetric::Accuracy => value > best,
                FeedbackMetric::Loss => value < best,
            },
        };
        if improved {
            self.best_metric = Some(value);
            self.stall_count = 0;
        } else {
            self.stall_count += 1;
        }
        self.last_omega = if self.stall_count >= self.patience {
            Omega::Positive
        } else {
            Omega::Negative
        };
        self.last_omega
    }
}

pub fn gradient_switch(omega: Omega, curriculum_active: bool) -> u8 {
    u8::from(omega == Omega::Positive && curriculum_active)
}

/// Losses observed during one bank update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EciLosses {
    pub inv_loss: f64,
    /// Outer loss of the sampled task before the update (switch on only).
    pub outer_loss: Option<f64>,
}

/// One Adam step of size `beta` on `L_inv − switch·λ·L_outer(T)`, with `T` a
/// freshly sampled pseudo task. The meta parameters only enter as constants
/// of the objective and are left untouched.
#[allow(clippy::too_many_arguments)]
pub fn eci_dataset_update<R: Rng + ?Sized>(
    dd: &mut DynamicDataset,
    zoo: &ModelZoo,
    state: &MetaState,
    hp: &HyperParams,
    weights: &InversionWeights,
    switch: u8,
    rng: &mut R,
) -> Result<EciLosses> {
    if switch > 1 {
        return Err(Error::Input(format!("switch must be 0 or 1, got {switch}")));
    }
    let tape = Tape::new();
    let bank = dd.leaf(&tape);
    let inv = inversion_loss_vars(zoo, dd, bank, weights, None)?.total;
    let mut objective = inv;
    let mut outer_value = None;
    if switch == 1 {
        let ep = sample_pseudo_episode(dd, hp.way, hp.shots, hp.queries, hp.within_model_tasks, rng)?;
        let params = state.theta.leaves(&tape);
        let (s, q) = episode_vars(&tape, &ep, Some(bank));
        let outer = outer_loss_vars(
            &state.theta,
            &params,
            s,
            &ep.support_labels,
            q,
            &ep.query_labels,
            hp.alpha_inner,
            hp.second_order,
        )?
        .loss;
        outer_value = Some(outer.item());
        objective = objective - outer * hp.lambda;
    }
    if !objective.item().is_finite() {
        return Err(Error::numeric("non-finite bank objective"));
    }
    let grad = tape.grad(objective, &[bank], false)[0].value();
    dd.step(&grad, hp.beta)?;
    Ok(EciLosses {
        inv_loss: inv.item(),
        outer_loss: outer_value,
    })
}

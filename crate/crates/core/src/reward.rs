//! Shaped reward: a progress term, a potential-based shaping term with the
//! IoU to the ground truth as potential, and a terminal reward for Trigger.

use serde::{Deserialize, Serialize};

use crate::environment::EnvState;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardParams {
    /// Penalty for a step that does not beat the best IoU so far.
    pub p: f64,
    /// IoU threshold for a successful trigger.
    pub tau: f64,
    /// Magnitude of the trigger reward.
    pub eta: f64,
    /// Discount, shared by the shaping term and return computation.
    pub gamma: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        Self {
            p: 0.05,
            tau: 0.5,
            eta: 1.0,
            gamma: 0.99,
        }
    }
}

impl RewardParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.p > 0.0
            && self.tau > 0.0
            && self.tau < 1.0
            && self.eta > 0.0
            && self.gamma > 0.0
            && self.gamma <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParam(format!(
                "reward params need p > 0, 0 < tau < 1, eta > 0, 0 < gamma <= 1, got {self:?}"
            )))
        }
    }
}

pub fn potential(state: &EnvState) -> f64 {
    state.iou()
}

/// Progress term: the new IoU if it strictly beats every IoU visited so far.
pub fn progress_reward(next_iou: f64, best_so_far: f64, params: &RewardParams) -> f64 {
    if next_iou > best_so_far {
        next_iou
    } else {
        -params.p
    }
}

pub fn shaping_term(prev_potential: f64, next_potential: f64, gamma: f64) -> f64 {
    -prev_potential + gamma * next_potential
}

/// Reward of a non-terminal step from `prev` to `next`.
pub fn step_reward(prev: &EnvState, next: &EnvState, params: &RewardParams) -> f64 {
    let next_iou = potential(next);
    progress_reward(next_iou, prev.best_iou_so_far(), params)
        + shaping_term(potential(prev), next_iou, params.gamma)
}

pub fn termination_reward(state: &EnvState, params: &RewardParams) -> f64 {
    terminal_value(potential(state), params)
}

/// `+eta` strictly above the threshold, `-eta` otherwise.
pub fn terminal_value(iou: f64, params: &RewardParams) -> f64 {
    if iou > params.tau {
        params.eta
    } else {
        -params.eta
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Straight transcription of the reward formulas over raw IoU values.
    fn oracle(prev_iou: f64, next_iou: f64, best: f64) -> f64 {
        let r_prime = if next_iou > best { next_iou } else { -0.05 };
        r_prime + (-prev_iou + 0.99 * next_iou)
    }

    #[test]
    fn worked_step_rewards() {
        let p = RewardParams::default();
        let new_best = progress_reward(0.5, 0.4, &p) + shaping_term(0.4, 0.5, p.gamma);
        assert!((new_best - 0.595).abs() < 1e-12);
        assert!((new_best - oracle(0.4, 0.5, 0.4)).abs() < 1e-15);

        let worse = progress_reward(0.3, 0.4, &p) + shaping_term(0.4, 0.3, p.gamma);
        assert!((worse - (-0.153)).abs() < 1e-12);
        assert!((worse - oracle(0.4, 0.3, 0.4)).abs() < 1e-15);

        let flat = progress_reward(0.0, 0.0, &p) + shaping_term(0.0, 0.0, p.gamma);
        assert_eq!(flat, -0.05);
    }

    #[test]
    fn tie_with_best_is_penalized() {
        let p = RewardParams::default();
        assert_eq!(progress_reward(0.4, 0.4, &p), -0.05);
    }

    #[test]
    fn terminal_threshold_is_strict() {
        let p = RewardParams::default();
        assert_eq!(terminal_value(0.6, &p), 1.0);
        assert_eq!(terminal_value(0.3, &p), -1.0);
        assert_eq!(terminal_value(0.5, &p), -1.0);
    }

    #[test]
    fn params_validation() {
        assert!(RewardParams::default().validate().is_ok());
        let bad = RewardParams {
            gamma: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}

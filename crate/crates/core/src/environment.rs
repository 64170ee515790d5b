//! Episode dynamics: the box starts on the whole image, every non-terminal
//! action reshapes it, and Trigger (or the step cap) ends the episode.

use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{apply_action, iou, Action, ActionParams, BoundingBox, ImageSize};
use crate::reward::{step_reward, termination_reward, RewardParams};

/// Number of past actions kept in the state.
pub const HISTORY_LEN: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingTask {
    pub task_id: String,
    pub image_size: ImageSize,
    pub ground_truth: BoundingBox,
    pub query_tokens: Vec<String>,
    /// Key the feature provider resolves to a feature map and query vector.
    pub feature_key: String,
}

impl GroundingTask {
    pub fn validate(&self) -> Result<()> {
        if !self.ground_truth.is_inside(self.image_size) {
            return Err(Error::TaskLoad {
                task_id: self.task_id.clone(),
                reason: "ground truth outside the image".into(),
            });
        }
        if self.query_tokens.is_empty() {
            return Err(Error::TaskLoad {
                task_id: self.task_id.clone(),
                reason: "empty query".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvParams {
    pub actions: ActionParams,
    pub reward: RewardParams,
    /// Number of non-terminal steps before termination is forced.
    pub t_max: usize,
}

impl Default for EnvParams {
    fn default() -> Self {
        Self {
            actions: ActionParams::default(),
            reward: RewardParams::default(),
            t_max: 100,
        }
    }
}

impl EnvParams {
    pub fn validate(&self) -> Result<()> {
        self.actions.validate()?;
        self.reward.validate()?;
        if self.t_max == 0 {
            return Err(Error::InvalidParam("t_max must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    task: Arc<GroundingTask>,
    bbox: BoundingBox,
    step_index: usize,
    best_iou_so_far: f64,
    /// Most recent first.
    history: VecDeque<Action>,
    terminated: bool,
}

impl EnvState {
    pub fn task(&self) -> &Arc<GroundingTask> {
        &self.task
    }
    pub fn bbox(&self) -> BoundingBox {
        self.bbox
    }
    pub fn step_index(&self) -> usize {
        self.step_index
    }
    pub fn best_iou_so_far(&self) -> f64 {
        self.best_iou_so_far
    }
    pub fn history(&self) -> &VecDeque<Action> {
        &self.history
    }
    pub fn is_terminated(&self) -> bool {
        self.terminated
    }

    pub fn iou(&self) -> f64 {
        iou(&self.bbox, &self.task.ground_truth)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state_before: EnvState,
    pub action: Action,
    pub reward: f64,
    pub done: bool,
    /// Termination was forced by the step cap rather than chosen.
    pub forced: bool,
}

pub fn reset(task: Arc<GroundingTask>) -> EnvState {
    let bbox = BoundingBox::full(task.image_size);
    let best = iou(&bbox, &task.ground_truth);
    EnvState {
        task,
        bbox,
        step_index: 0,
        best_iou_so_far: best,
        history: VecDeque::with_capacity(HISTORY_LEN),
        terminated: false,
    }
}

/// Advances one step. At `step_index == t_max` any action acts as Trigger.
pub fn step(state: &EnvState, act: Action, params: &EnvParams) -> Result<(Transition, EnvState)> {
    if state.terminated {
        return Err(Error::Usage(format!(
            "episode for task {} already terminated",
            state.task.task_id
        )));
    }
    let forced = !act.is_terminal() && state.step_index >= params.t_max;
    if act.is_terminal() || forced {
        let reward = termination_reward(state, &params.reward);
        let mut next = state.clone();
        next.step_index += 1;
        next.terminated = true;
        let tr = Transition {
            state_before: state.clone(),
            action: act,
            reward,
            done: true,
            forced,
        };
        return Ok((tr, next));
    }

    let bbox = apply_action(
        &state.bbox,
        act,
        state.task.image_size,
        &params.actions,
    )?;
    let mut next = EnvState {
        task: Arc::clone(&state.task),
        bbox,
        step_index: state.step_index + 1,
        best_iou_so_far: state.best_iou_so_far,
        history: state.history.clone(),
        terminated: false,
    };
    let reward = step_reward(state, &next, &params.reward);
    next.best_iou_so_far = next.best_iou_so_far.max(next.iou());
    next.history.push_front(act);
    next.history.truncate(HISTORY_LEN);
    let tr = Transition {
        state_before: state.clone(),
        action: act,
        reward,
        done: false,
        forced: false,
    };
    Ok((tr, next))
}

/// Stateful wrapper owning the current episode.
#[derive(Debug, Clone)]
pub struct Environment {
    params: EnvParams,
    state: EnvState,
}

impl Environment {
    pub fn new(task: Arc<GroundingTask>, params: EnvParams) -> Self {
        Self {
            params,
            state: reset(task),
        }
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn params(&self) -> &EnvParams {
        &self.params
    }

    pub fn is_done(&self) -> bool {
        self.state.terminated
    }

    pub fn step(&mut self, act: Action) -> Result<Transition> {
        let (tr, next) = step(&self.state, act, &self.params)?;
        self.state = next;
        Ok(tr)
    }
}

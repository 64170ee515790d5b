//! Greedy test-time rollouts and accuracy.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;

use crate::environment::{reset, step, EnvParams, GroundingTask};
use crate::error::{Error, Result};
use crate::geometry::{Action, BoundingBox};
use crate::network::NetworkParams;
use crate::observation::{EpisodeFeatures, FeatureProvider};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub task_id: String,
    pub bbox: BoundingBox,
    pub iou: f64,
    /// Index of the final step; a Trigger at the first step gives 0.
    pub length: usize,
    /// False when the step cap forced termination.
    pub triggered: bool,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    /// Box after every step.
    pub boxes: Vec<BoundingBox>,
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Runs `choose` from reset until the episode ends.
pub fn rollout(
    task: &Arc<GroundingTask>,
    env: &EnvParams,
    mut choose: impl FnMut(&crate::environment::EnvState) -> Result<Action>,
) -> Result<EvalResult> {
    let mut state = reset(Arc::clone(task));
    let mut actions = Vec::new();
    let mut rewards = Vec::new();
    let mut boxes = Vec::new();
    loop {
        let a = choose(&state)?;
        let (tr, next) = step(&state, a, env)?;
        actions.push(a);
        rewards.push(tr.reward);
        boxes.push(next.bbox());
        state = next;
        if tr.done {
            return Ok(EvalResult {
                task_id: task.task_id.clone(),
                bbox: state.bbox(),
                iou: state.iou(),
                length: actions.len() - 1,
                triggered: !tr.forced,
                actions,
                rewards,
                boxes,
            });
        }
    }
}

pub fn greedy_rollout(
    params: &NetworkParams,
    task: &Arc<GroundingTask>,
    provider: &dyn FeatureProvider,
    env: &EnvParams,
) -> Result<EvalResult> {
    let episode = EpisodeFeatures::load(task, provider, params.mode())?;
    let mut lstm = params.initial_state();
    rollout(task, env, |state| {
        let out = params.forward_inputs(&episode.inputs(state), &lstm);
        lstm = out.state;
        Ok(Action::ALL[argmax(&out.logits)])
    })
}

/// Uniformly random actions; the baseline the learning gate is judged against.
pub fn random_rollout(task: &Arc<GroundingTask>, env: &EnvParams, rng: &mut impl Rng) -> Result<EvalResult> {
    rollout(task, env, |_| Ok(Action::ALL[rng.gen_range(0..Action::COUNT)]))
}

/// Fraction of results whose final IoU is strictly above 0.5.
pub fn accuracy(results: &[EvalResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Usage("accuracy of an empty result list".into()));
    }
    let hits = results.iter().filter(|r| r.iou > 0.5).count();
    Ok(hits as f64 / results.len() as f64)
}

/// Greedy evaluation of many tasks, fanned out over `threads` workers.
/// Results come back in task order.
pub fn evaluate(
    params: &NetworkParams,
    tasks: &[Arc<GroundingTask>],
    provider: &dyn FeatureProvider,
    env: &EnvParams,
    threads: usize,
) -> Result<Vec<EvalResult>> {
    let threads = threads.clamp(1, tasks.len().max(1));
    if threads == 1 {
        return tasks.iter().map(|t| greedy_rollout(params, t, provider, env)).collect();
    }
    let chunk = tasks.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = tasks
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|t| greedy_rollout(params, t, provider, env))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(tasks.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

pub fn format_results(results: &[EvalResult]) -> Result<String> {
    let acc = accuracy(results)?;
    let mut s = String::new();
    for r in results {
        writeln!(s, "{}\t{:.6}\t{}\t{}", r.task_id, r.iou, r.length, r.triggered as u8).unwrap();
    }
    writeln!(s, "accuracy\t{acc:.6}").unwrap();
    Ok(s)
}

pub fn write_results(path: &Path, results: &[EvalResult]) -> Result<()> {
    fs::write(path, format_results(results)?).map_err(|e| Error::io(path, e))
}

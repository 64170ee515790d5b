#![allow(dead_code)]

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use refbox::geometry::Action;
use refbox::network::{segment_loss, LossConfig, LstmState, NetworkDims, NetworkParams, Segment, TrainingTuple};
use refbox::observation::{ContextMode, StepInputs};

pub fn small_dims() -> NetworkDims {
    // v_s = 8 + 12 = 20
    NetworkDims {
        query_dim: 6,
        visual_dim: 8,
        extra_dim: 12,
        fc1: 16,
        fc2: 16,
        lstm: 8,
    }
}

/// Initialized parameters with every tensor (biases and gains included)
/// jittered so no gradient is structurally zero.
pub fn random_params(dims: NetworkDims, mode: ContextMode, seed: u64) -> NetworkParams {
    let mut p = NetworkParams::init(dims, mode, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for v in p.as_mut_slice() {
        *v += rng.gen_range(-0.2..0.2);
    }
    p
}

pub fn random_segment(dims: NetworkDims, len: usize, rng: &mut ChaCha8Rng) -> Segment {
    let query: Arc<[f64]> = (0..dims.query_dim)
        .map(|_| if rng.gen_bool(0.5) { 1.0 } else { rng.gen_range(-1.0..1.0) })
        .collect();
    let tuples = (0..len)
        .map(|_| TrainingTuple {
            inputs: StepInputs {
                query: Arc::clone(&query),
                visual: (0..dims.visual_dim).map(|_| rng.gen_range(0.05..1.0)).collect(),
                extra: (0..dims.extra_dim)
                    .map(|_| if rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(-1.0..1.0) })
                    .collect(),
            },
            action: Action::from_index(rng.gen_range(0..9)).unwrap(),
            target: rng.gen_range(-1.5..1.5),
        })
        .collect();
    Segment {
        initial: LstmState {
            h: (0..dims.lstm).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            c: (0..dims.lstm).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        },
        tuples,
    }
}

/// Largest relative error between the analytic gradient and central
/// differences of the loss with advantages frozen at the base point.
pub fn max_gradient_error(params: &NetworkParams, seg: &Segment, loss: &LossConfig, h: f64) -> (f64, usize) {
    let weight = 1.0 / seg.tuples.len() as f64;
    let (grads, _) = params.compute_update(std::slice::from_ref(seg), loss);
    let values = params.segment_values(seg);
    let adv: Vec<f64> = seg.tuples.iter().zip(&values).map(|(t, v)| t.target - v).collect();
    let mut worst = 0.0f64;
    let mut p = params.clone();
    for i in 0..params.len() {
        let orig = p.as_slice()[i];
        p.as_mut_slice()[i] = orig + h;
        let up = segment_loss(&p, seg, loss, &adv, weight);
        p.as_mut_slice()[i] = orig - h;
        let down = segment_loss(&p, seg, loss, &adv, weight);
        p.as_mut_slice()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.as_slice()[i];
        let denom = analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    (worst, params.len())
}

//! Forward pass, truncated BPTT and the actor-critic loss.
//!
//! Per step:
//!
//! ```text
//! q' = Wq q + bq                 v_o = (q' * visual) / |q' * visual|
//! v_s = [v_o, extra]             a1 = relu(W1 v_s + b1), a2 = relu(W2 a1 + b2)
//! z  = LN_x(Wx a2) + LN_h(Wh h) + b,  gates i, f, o = sigmoid, g = tanh
//! c' = f c + i g                 h' = o tanh(LN_c(c'))
//! logits = Wp h' + bp            V = wv . h' + bv
//! ```
//!
//! The per-tuple loss is `-A log pi(a) - beta H(pi) + (R - V)^2` with the
//! advantage `A = R - V` held constant.

use crate::geometry::Action;
use crate::observation::StepInputs;

use super::linalg::{
    axpy, dot, entropy, matvec_add, matvec_add_sparse, matvec_t_add, outer_add, outer_add_sparse,
    sigmoid, softmax,
};
use super::{Layout, NetworkParams, Tensor, LN_EPS};

use std::sync::Arc;

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(width: usize) -> Self {
        Self {
            h: vec![0.0; width],
            c: vec![0.0; width],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub probs: Vec<f64>,
    pub logits: Vec<f64>,
    pub value: f64,
    pub state: LstmState,
}

/// One step ready for the learner: inputs, the action taken and the return
/// target.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTuple {
    pub inputs: StepInputs,
    pub action: Action,
    pub target: f64,
}

/// Consecutive tuples of one episode replayed from the recurrent state
/// recorded at the first tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub initial: LstmState,
    pub tuples: Vec<TrainingTuple>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub entropy_beta: f64,
    pub policy_weight: f64,
    pub value_weight: f64,
}

impl LossConfig {
    pub fn new(entropy_beta: f64) -> Self {
        Self {
            entropy_beta,
            policy_weight: 1.0,
            value_weight: 1.0,
        }
    }
}

/// Gradient buffer sharing the parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    layout: Arc<Layout>,
    data: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        Self {
            layout: Arc::clone(params.layout()),
            data: vec![0.0; params.len()],
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, t: Tensor) -> &[f64] {
        &self.data[self.layout.range(t)]
    }

    fn get_mut(&mut self, t: Tensor) -> &mut [f64] {
        let r = self.layout.range(t);
        &mut self.data[r]
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|g| *g *= s);
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        axpy(1.0, &other.data, &mut self.data);
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Summaries of a backward pass over tuples.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SegmentStats {
    pub tuples: usize,
    pub loss: f64,
    pub entropy_sum: f64,
    pub value_error_sum: f64,
}

struct LnCache {
    xhat: Vec<f64>,
    inv_std: f64,
}

fn ln_forward(z: &[f64], gain: &[f64], bias: &[f64], out: &mut [f64]) -> LnCache {
    let n = z.len() as f64;
    let mean = z.iter().sum::<f64>() / n;
    let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    let xhat: Vec<f64> = z.iter().map(|v| (v - mean) * inv_std).collect();
    for i in 0..z.len() {
        out[i] = gain[i] * xhat[i] + bias[i];
    }
    LnCache { xhat, inv_std }
}

/// Accumulates gain/bias gradients and returns the gradient w.r.t. the
/// normalized input.
fn ln_backward(dy: &[f64], cache: &LnCache, gain: &[f64], dgain: &mut [f64], dbias: &mut [f64]) -> Vec<f64> {
    let n = dy.len() as f64;
    let mut dxhat = vec![0.0; dy.len()];
    for i in 0..dy.len() {
        dgain[i] += dy[i] * cache.xhat[i];
        dbias[i] += dy[i];
        dxhat[i] = dy[i] * gain[i];
    }
    let mean_d = dxhat.iter().sum::<f64>() / n;
    let mean_dx = dot(&dxhat, &cache.xhat) / n;
    dxhat
        .iter()
        .zip(&cache.xhat)
        .map(|(d, x)| cache.inv_std * (d - mean_d - x * mean_dx))
        .collect()
}

struct FuseCache {
    visual: Vec<f64>,
    v_o: Vec<f64>,
    norm: f64,
}

struct CellTrace {
    ln_x: LnCache,
    ln_h: LnCache,
    gates: Vec<f64>,
    ln_c: LnCache,
    tanh_cn: Vec<f64>,
    state: LstmState,
}

/// Activations of one step kept for the backward pass.
struct Trace {
    fuse: Option<FuseCache>,
    query: Option<Arc<[f64]>>,
    v_s: Vec<f64>,
    nz: Vec<usize>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    ln_x: LnCache,
    ln_h: LnCache,
    /// Activated gates `[i, f, o, g]`.
    gates: Vec<f64>,
    ln_c: LnCache,
    tanh_cn: Vec<f64>,
    out: StepOutput,
}

impl NetworkParams {
    /// Projects and fuses the query with the visual vector, producing `v_s`.
    pub fn state_vector(&self, inputs: &StepInputs) -> Vec<f64> {
        self.fuse_inputs(inputs).1
    }

    fn fuse_inputs(&self, inputs: &StepInputs) -> (FuseCache, Vec<f64>) {
        let d = self.dims();
        assert_eq!(inputs.query.len(), d.query_dim, "query dim mismatch");
        assert_eq!(inputs.visual.len(), d.visual_dim, "visual dim mismatch");
        assert_eq!(inputs.extra.len(), d.extra_dim, "extra dim mismatch");
        let mut q = self.get(Tensor::QueryB).to_vec();
        matvec_add(self.get(Tensor::QueryW), &inputs.query, &mut q);
        let mut v_o: Vec<f64> = q.iter().zip(&inputs.visual).map(|(a, b)| a * b).collect();
        let norm = v_o.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            v_o.iter_mut().for_each(|v| *v /= norm);
        }
        let mut v_s = Vec::with_capacity(d.state_dim());
        v_s.extend_from_slice(&v_o);
        v_s.extend_from_slice(&inputs.extra);
        (
            FuseCache {
                visual: inputs.visual.clone(),
                v_o,
                norm,
            },
            v_s,
        )
    }

    /// Trunk and heads from a ready state vector.
    pub fn forward(&self, v_s: &[f64], state: &LstmState) -> StepOutput {
        self.trace_state_vector(v_s.to_vec(), state).out
    }

    pub fn forward_inputs(&self, inputs: &StepInputs, state: &LstmState) -> StepOutput {
        self.trace_inputs(inputs, state).out
    }

    fn trace_inputs(&self, inputs: &StepInputs, state: &LstmState) -> Trace {
        let (fuse, v_s) = self.fuse_inputs(inputs);
        let mut t = self.trace_state_vector(v_s, state);
        t.fuse = Some(fuse);
        t.query = Some(Arc::clone(&inputs.query));
        t
    }

    fn trace_state_vector(&self, v_s: Vec<f64>, state: &LstmState) -> Trace {
        let d = *self.dims();
        assert_eq!(v_s.len(), d.state_dim(), "state vector dim mismatch");
        let h_dim = d.lstm;
        let (h_prev, c_prev) = if self.mode().temporal() {
            assert_eq!(state.h.len(), h_dim, "lstm state dim mismatch");
            (state.h.clone(), state.c.clone())
        } else {
            (vec![0.0; h_dim], vec![0.0; h_dim])
        };

        let nz: Vec<usize> = v_s
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, _)| i)
            .collect();
        let mut a1 = self.get(Tensor::Fc1B).to_vec();
        matvec_add_sparse(self.get(Tensor::Fc1W), &v_s, &nz, &mut a1);
        a1.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut a2 = self.get(Tensor::Fc2B).to_vec();
        matvec_add(self.get(Tensor::Fc2W), &a1, &mut a2);
        a2.iter_mut().for_each(|v| *v = v.max(0.0));

        let cell = self.cell_forward(&a2, &h_prev, &c_prev);
        let h = cell.state.h.clone();

        let mut logits = self.get(Tensor::PolicyB).to_vec();
        matvec_add(self.get(Tensor::PolicyW), &h, &mut logits);
        let probs = softmax(&logits);
        let value = self.get(Tensor::ValueB)[0] + dot(self.get(Tensor::ValueW), &h);

        Trace {
            fuse: None,
            query: None,
            v_s,
            nz,
            a1,
            a2,
            h_prev,
            c_prev,
            ln_x: cell.ln_x,
            ln_h: cell.ln_h,
            gates: cell.gates,
            ln_c: cell.ln_c,
            tanh_cn: cell.tanh_cn,
            out: StepOutput {
                probs,
                logits,
                value,
                state: cell.state,
            },
        }
    }

    fn cell_forward(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> CellTrace {
        let h_dim = self.dims().lstm;
        let g = 4 * h_dim;
        let mut px = vec![0.0; g];
        matvec_add(self.get(Tensor::LstmWx), x, &mut px);
        let mut ph = vec![0.0; g];
        matvec_add(self.get(Tensor::LstmWh), h_prev, &mut ph);
        let mut nx = vec![0.0; g];
        let ln_x = ln_forward(&px, self.get(Tensor::LnXGain), self.get(Tensor::LnXBias), &mut nx);
        let mut nh = vec![0.0; g];
        let ln_h = ln_forward(&ph, self.get(Tensor::LnHGain), self.get(Tensor::LnHBias), &mut nh);
        let bias = self.get(Tensor::LstmB);
        let mut gates = vec![0.0; g];
        for k in 0..g {
            let z = nx[k] + nh[k] + bias[k];
            gates[k] = if k < 3 * h_dim { sigmoid(z) } else { z.tanh() };
        }
        let (i_g, rest) = gates.split_at(h_dim);
        let (f_g, rest) = rest.split_at(h_dim);
        let (o_g, g_g) = rest.split_at(h_dim);
        let c: Vec<f64> = (0..h_dim)
            .map(|k| f_g[k] * c_prev[k] + i_g[k] * g_g[k])
            .collect();
        let mut cn = vec![0.0; h_dim];
        let ln_c = ln_forward(&c, self.get(Tensor::LnCGain), self.get(Tensor::LnCBias), &mut cn);
        let tanh_cn: Vec<f64> = cn.iter().map(|v| v.tanh()).collect();
        let h: Vec<f64> = (0..h_dim).map(|k| o_g[k] * tanh_cn[k]).collect();
        CellTrace {
            ln_x,
            ln_h,
            gates,
            ln_c,
            tanh_cn,
            state: LstmState { h, c },
        }
    }

    /// One layer-normalized LSTM step on the cell input `x` (the output of
    /// the second dense layer).
    pub fn lstm_cell(&self, x: &[f64], state: &LstmState) -> LstmState {
        assert_eq!(x.len(), self.dims().fc2, "cell input dim mismatch");
        self.cell_forward(x, &state.h, &state.c).state
    }

    fn trace_segment(&self, seg: &Segment) -> Vec<Trace> {
        let mut state = seg.initial.clone();
        let mut traces = Vec::with_capacity(seg.tuples.len());
        for tuple in &seg.tuples {
            let t = self.trace_inputs(&tuple.inputs, &state);
            state = t.out.state.clone();
            traces.push(t);
        }
        traces
    }

    /// Accumulates `weight * dL/dtheta` for one segment into `grads`.
    pub fn backward_segment(
        &self,
        seg: &Segment,
        loss: &LossConfig,
        weight: f64,
        grads: &mut Gradients,
    ) -> SegmentStats {
        let traces = self.trace_segment(seg);
        let advantages: Vec<f64> = seg
            .tuples
            .iter()
            .zip(&traces)
            .map(|(tu, tr)| tu.target - tr.out.value)
            .collect();
        self.backward_traces(seg, &traces, &advantages, loss, weight, grads)
    }

    fn backward_traces(
        &self,
        seg: &Segment,
        traces: &[Trace],
        advantages: &[f64],
        loss: &LossConfig,
        weight: f64,
        grads: &mut Gradients,
    ) -> SegmentStats {
        let d = *self.dims();
        let h_dim = d.lstm;
        let temporal = self.mode().temporal();
        let mut stats = SegmentStats::default();
        let mut dh_next = vec![0.0; h_dim];
        let mut dc_next = vec![0.0; h_dim];

        for (idx, (tuple, tr)) in seg.tuples.iter().zip(traces).enumerate().rev() {
            let out = &tr.out;
            let adv = advantages[idx];
            let a = tuple.action.index();
            let ent = entropy(&out.probs);
            let residual = tuple.target - out.value;
            stats.tuples += 1;
            stats.entropy_sum += ent;
            stats.value_error_sum += residual * residual;
            stats.loss += weight
                * (loss.policy_weight * -adv * out.probs[a].max(f64::MIN_POSITIVE).ln()
                    - loss.entropy_beta * ent
                    + loss.value_weight * residual * residual);

            // heads
            let mut dlogits = vec![0.0; Action::COUNT];
            for (j, p) in out.probs.iter().enumerate() {
                let onehot = if j == a { 1.0 } else { 0.0 };
                let logp = p.max(f64::MIN_POSITIVE).ln();
                dlogits[j] = weight
                    * (loss.policy_weight * -adv * (onehot - p)
                        + loss.entropy_beta * p * (logp + ent));
            }
            let dvalue = weight * loss.value_weight * -2.0 * residual;

            outer_add(grads.get_mut(Tensor::PolicyW), &dlogits, &out.state.h);
            axpy(1.0, &dlogits, grads.get_mut(Tensor::PolicyB));
            axpy(dvalue, &out.state.h, grads.get_mut(Tensor::ValueW));
            grads.get_mut(Tensor::ValueB)[0] += dvalue;

            let mut dh = dh_next.clone();
            matvec_t_add(self.get(Tensor::PolicyW), &dlogits, &mut dh);
            axpy(dvalue, self.get(Tensor::ValueW), &mut dh);

            // cell output
            let (i_g, rest) = tr.gates.split_at(h_dim);
            let (f_g, rest) = rest.split_at(h_dim);
            let (o_g, g_g) = rest.split_at(h_dim);
            let mut dz = vec![0.0; 4 * h_dim];
            let mut dcn = vec![0.0; h_dim];
            for k in 0..h_dim {
                let t = tr.tanh_cn[k];
                dz[2 * h_dim + k] = dh[k] * t * o_g[k] * (1.0 - o_g[k]);
                dcn[k] = dh[k] * o_g[k] * (1.0 - t * t);
            }
            let (dgc, dbc) = grads_pair(grads, Tensor::LnCGain, Tensor::LnCBias);
            let mut dc = ln_backward(&dcn, &tr.ln_c, self.get(Tensor::LnCGain), dgc, dbc);
            axpy(1.0, &dc_next, &mut dc);

            let mut dc_prev = vec![0.0; h_dim];
            for k in 0..h_dim {
                dz[k] = dc[k] * g_g[k] * i_g[k] * (1.0 - i_g[k]);
                dz[h_dim + k] = dc[k] * tr.c_prev[k] * f_g[k] * (1.0 - f_g[k]);
                dz[3 * h_dim + k] = dc[k] * i_g[k] * (1.0 - g_g[k] * g_g[k]);
                dc_prev[k] = dc[k] * f_g[k];
            }
            axpy(1.0, &dz, grads.get_mut(Tensor::LstmB));

            let (dgx, dbx) = grads_pair(grads, Tensor::LnXGain, Tensor::LnXBias);
            let dpx = ln_backward(&dz, &tr.ln_x, self.get(Tensor::LnXGain), dgx, dbx);
            let (dgh, dbh) = grads_pair(grads, Tensor::LnHGain, Tensor::LnHBias);
            let dph = ln_backward(&dz, &tr.ln_h, self.get(Tensor::LnHGain), dgh, dbh);

            outer_add(grads.get_mut(Tensor::LstmWh), &dph, &tr.h_prev);
            let mut dh_prev = vec![0.0; h_dim];
            matvec_t_add(self.get(Tensor::LstmWh), &dph, &mut dh_prev);

            outer_add(grads.get_mut(Tensor::LstmWx), &dpx, &tr.a2);
            let mut da2 = vec![0.0; d.fc2];
            matvec_t_add(self.get(Tensor::LstmWx), &dpx, &mut da2);
            for (g, a) in da2.iter_mut().zip(&tr.a2) {
                if *a <= 0.0 {
                    *g = 0.0;
                }
            }
            outer_add(grads.get_mut(Tensor::Fc2W), &da2, &tr.a1);
            axpy(1.0, &da2, grads.get_mut(Tensor::Fc2B));
            let mut da1 = vec![0.0; d.fc1];
            matvec_t_add(self.get(Tensor::Fc2W), &da2, &mut da1);
            for (g, a) in da1.iter_mut().zip(&tr.a1) {
                if *a <= 0.0 {
                    *g = 0.0;
                }
            }
            outer_add_sparse(grads.get_mut(Tensor::Fc1W), &da1, &tr.v_s, &tr.nz);
            axpy(1.0, &da1, grads.get_mut(Tensor::Fc1B));

            if let (Some(fuse), Some(query)) = (&tr.fuse, &tr.query) {
                if fuse.norm > 0.0 {
                    // only the v_o block of v_s depends on parameters
                    let w1 = self.get(Tensor::Fc1W);
                    let cols = d.state_dim();
                    let mut dvo = vec![0.0; d.visual_dim];
                    for (g, row) in da1.iter().zip(w1.chunks_exact(cols)) {
                        if *g != 0.0 {
                            axpy(*g, &row[..d.visual_dim], &mut dvo);
                        }
                    }
                    let proj = dot(&dvo, &fuse.v_o);
                    let dq: Vec<f64> = (0..d.visual_dim)
                        .map(|k| (dvo[k] - fuse.v_o[k] * proj) / fuse.norm * fuse.visual[k])
                        .collect();
                    outer_add(grads.get_mut(Tensor::QueryW), &dq, query);
                    axpy(1.0, &dq, grads.get_mut(Tensor::QueryB));
                }
            }

            if temporal {
                dh_next = dh_prev;
                dc_next = dc_prev;
            }
        }
        stats
    }

    /// Mean-over-tuples gradient of a batch of segments.
    pub fn compute_update(&self, segments: &[Segment], loss: &LossConfig) -> (Gradients, SegmentStats) {
        let total: usize = segments.iter().map(|s| s.tuples.len()).sum();
        let mut grads = Gradients::zeros_like(self);
        let mut stats = SegmentStats::default();
        if total == 0 {
            return (grads, stats);
        }
        let w = 1.0 / total as f64;
        for seg in segments {
            let s = self.backward_segment(seg, loss, w, &mut grads);
            stats.tuples += s.tuples;
            stats.loss += s.loss;
            stats.entropy_sum += s.entropy_sum;
            stats.value_error_sum += s.value_error_sum;
        }
        (grads, stats)
    }
}

fn grads_pair(g: &mut Gradients, a: Tensor, b: Tensor) -> (&mut [f64], &mut [f64]) {
    let ra = g.layout.range(a);
    let rb = g.layout.range(b);
    assert_eq!(ra.end, rb.start, "gain and bias must be adjacent");
    let (x, y) = g.data[ra.start..rb.end].split_at_mut(ra.len());
    (x, y)
}

/// Loss of a segment with advantages frozen at the given values, used to
/// check gradients against finite differences.
pub fn segment_loss(params: &NetworkParams, seg: &Segment, loss: &LossConfig, advantages: &[f64], weight: f64) -> f64 {
    let traces = params.trace_segment(seg);
    seg.tuples
        .iter()
        .zip(&traces)
        .zip(advantages)
        .map(|((tu, tr), adv)| {
            let p = &tr.out.probs;
            let residual = tu.target - tr.out.value;
            weight
                * (loss.policy_weight * -adv * p[tu.action.index()].ln()
                    - loss.entropy_beta * entropy(p)
                    + loss.value_weight * residual * residual)
        })
        .sum()
}

impl NetworkParams {
    /// Values `V(s_t)` along a segment under these parameters.
    pub fn segment_values(&self, seg: &Segment) -> Vec<f64> {
        self.trace_segment(seg).iter().map(|t| t.out.value).collect()
    }
}

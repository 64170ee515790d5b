//! Policy/value network: query projection and fusion, two ReLU layers, a
//! layer-normalized LSTM cell and two linear heads. Gradients are derived
//! by hand for this fixed architecture.

mod adam;
mod checkpoint;
pub mod linalg;
mod model;

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Action;
use crate::observation::ContextMode;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use model::{
    segment_loss, Gradients, LossConfig, LstmState, Segment, SegmentStats, StepOutput, TrainingTuple,
};

/// Variance floor inside layer normalization.
pub const LN_EPS: f64 = 1e-5;

/// Layer widths. `visual_dim` is `2C`; `extra_dim` is the history plus box
/// tail of the state vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkDims {
    pub query_dim: usize,
    pub visual_dim: usize,
    pub extra_dim: usize,
    pub fc1: usize,
    pub fc2: usize,
    pub lstm: usize,
}

impl NetworkDims {
    pub fn state_dim(&self) -> usize {
        self.visual_dim + self.extra_dim
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.query_dim,
            self.visual_dim,
            self.fc1,
            self.fc2,
            self.lstm,
        ];
        if dims.contains(&0) {
            return Err(Error::Shape(format!("all network dims must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Named tensor slots, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tensor {
    QueryW,
    QueryB,
    Fc1W,
    Fc1B,
    Fc2W,
    Fc2B,
    LstmWx,
    LstmWh,
    LstmB,
    LnXGain,
    LnXBias,
    LnHGain,
    LnHBias,
    LnCGain,
    LnCBias,
    PolicyW,
    PolicyB,
    ValueW,
    ValueB,
}

impl Tensor {
    pub const ALL: [Tensor; 19] = [
        Tensor::QueryW,
        Tensor::QueryB,
        Tensor::Fc1W,
        Tensor::Fc1B,
        Tensor::Fc2W,
        Tensor::Fc2B,
        Tensor::LstmWx,
        Tensor::LstmWh,
        Tensor::LstmB,
        Tensor::LnXGain,
        Tensor::LnXBias,
        Tensor::LnHGain,
        Tensor::LnHBias,
        Tensor::LnCGain,
        Tensor::LnCBias,
        Tensor::PolicyW,
        Tensor::PolicyB,
        Tensor::ValueW,
        Tensor::ValueB,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Tensor::QueryW => "query_proj.weight",
            Tensor::QueryB => "query_proj.bias",
            Tensor::Fc1W => "fc1.weight",
            Tensor::Fc1B => "fc1.bias",
            Tensor::Fc2W => "fc2.weight",
            Tensor::Fc2B => "fc2.bias",
            Tensor::LstmWx => "lstm.weight_x",
            Tensor::LstmWh => "lstm.weight_h",
            Tensor::LstmB => "lstm.bias",
            Tensor::LnXGain => "lstm.ln_x.gain",
            Tensor::LnXBias => "lstm.ln_x.bias",
            Tensor::LnHGain => "lstm.ln_h.gain",
            Tensor::LnHBias => "lstm.ln_h.bias",
            Tensor::LnCGain => "lstm.ln_c.gain",
            Tensor::LnCBias => "lstm.ln_c.bias",
            Tensor::PolicyW => "policy.weight",
            Tensor::PolicyB => "policy.bias",
            Tensor::ValueW => "value.weight",
            Tensor::ValueB => "value.bias",
        }
    }

    /// Tensors private to the value head.
    pub fn is_value_head(self) -> bool {
        matches!(self, Tensor::ValueW | Tensor::ValueB)
    }

    /// Tensors private to the policy head.
    pub fn is_policy_head(self) -> bool {
        matches!(self, Tensor::PolicyW | Tensor::PolicyB)
    }

    fn shape(self, d: &NetworkDims) -> Vec<usize> {
        let g = 4 * d.lstm;
        match self {
            Tensor::QueryW => vec![d.visual_dim, d.query_dim],
            Tensor::QueryB => vec![d.visual_dim],
            Tensor::Fc1W => vec![d.fc1, d.state_dim()],
            Tensor::Fc1B => vec![d.fc1],
            Tensor::Fc2W => vec![d.fc2, d.fc1],
            Tensor::Fc2B => vec![d.fc2],
            Tensor::LstmWx => vec![g, d.fc2],
            Tensor::LstmWh => vec![g, d.lstm],
            Tensor::LstmB | Tensor::LnXGain | Tensor::LnXBias | Tensor::LnHGain | Tensor::LnHBias => {
                vec![g]
            }
            Tensor::LnCGain | Tensor::LnCBias => vec![d.lstm],
            Tensor::PolicyW => vec![Action::COUNT, d.lstm],
            Tensor::PolicyB => vec![Action::COUNT],
            Tensor::ValueW => vec![1, d.lstm],
            Tensor::ValueB => vec![1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    dims: NetworkDims,
    offsets: Vec<(usize, usize)>,
    shapes: Vec<Vec<usize>>,
    len: usize,
}

impl Layout {
    pub fn new(dims: NetworkDims) -> Self {
        let mut offsets = Vec::with_capacity(Tensor::ALL.len());
        let mut shapes = Vec::with_capacity(Tensor::ALL.len());
        let mut at = 0;
        for t in Tensor::ALL {
            let shape = t.shape(&dims);
            let n: usize = shape.iter().product();
            offsets.push((at, at + n));
            shapes.push(shape);
            at += n;
        }
        Self {
            dims,
            offsets,
            shapes,
            len: at,
        }
    }

    pub fn dims(&self) -> &NetworkDims {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn range(&self, t: Tensor) -> std::ops::Range<usize> {
        let (a, b) = self.offsets[t as usize];
        a..b
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.shapes[t as usize]
    }
}

/// All learnable parameters in one flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    layout: Arc<Layout>,
    mode: ContextMode,
    data: Vec<f64>,
}

impl NetworkParams {
    pub fn zeros(dims: NetworkDims, mode: ContextMode) -> Result<Self> {
        dims.validate()?;
        let layout = Arc::new(Layout::new(dims));
        let data = vec![0.0; layout.len()];
        Ok(Self { layout, mode, data })
    }

    /// Glorot-uniform weights, zero biases, unit layer-norm gains and a +1
    /// forget-gate bias.
    pub fn init(dims: NetworkDims, mode: ContextMode, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(dims, mode)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in [
            Tensor::QueryW,
            Tensor::Fc1W,
            Tensor::Fc2W,
            Tensor::LstmWx,
            Tensor::LstmWh,
            Tensor::PolicyW,
            Tensor::ValueW,
        ] {
            let shape = p.layout.shape(t).to_vec();
            let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
            for w in p.get_mut(t) {
                *w = rng.gen_range(-limit..limit);
            }
        }
        for t in [Tensor::LnXGain, Tensor::LnHGain, Tensor::LnCGain] {
            p.get_mut(t).fill(1.0);
        }
        let h = dims.lstm;
        p.get_mut(Tensor::LstmB)[h..2 * h].fill(1.0);
        Ok(p)
    }

    pub(crate) fn from_parts(layout: Arc<Layout>, mode: ContextMode, data: Vec<f64>) -> Self {
        Self { layout, mode, data }
    }

    pub fn dims(&self) -> &NetworkDims {
        self.layout.dims()
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn mode(&self) -> ContextMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn get_mut(&mut self, t: Tensor) -> &mut [f64] {
        let r = self.layout.range(t);
        &mut self.data[r]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn initial_state(&self) -> LstmState {
        LstmState::zeros(self.dims().lstm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_dims() -> NetworkDims {
        NetworkDims {
            query_dim: 6,
            visual_dim: 8,
            extra_dim: 12,
            fc1: 16,
            fc2: 16,
            lstm: 8,
        }
    }

    #[test]
    fn layout_is_contiguous() {
        let l = Layout::new(small_dims());
        let mut at = 0;
        for t in Tensor::ALL {
            let r = l.range(t);
            assert_eq!(r.start, at);
            assert_eq!(r.len(), l.shape(t).iter().product::<usize>());
            at = r.end;
        }
        assert_eq!(at, l.len());
    }

    #[test]
    fn init_follows_conventions() {
        let p = NetworkParams::init(small_dims(), ContextMode::Full, 1).unwrap();
        assert!(p.get(Tensor::Fc1B).iter().all(|v| *v == 0.0));
        assert!(p.get(Tensor::LnCGain).iter().all(|v| *v == 1.0));
        let b = p.get(Tensor::LstmB);
        assert!(b[..8].iter().all(|v| *v == 0.0));
        assert!(b[8..16].iter().all(|v| *v == 1.0));
        assert!(b[16..].iter().all(|v| *v == 0.0));
        let limit = (6.0f64 / (16 + 20) as f64).sqrt();
        assert!(p.get(Tensor::Fc1W).iter().all(|v| v.abs() <= limit));
        assert_eq!(p, NetworkParams::init(small_dims(), ContextMode::Full, 1).unwrap());
    }

    #[test]
    fn zero_dims_rejected() {
        let mut d = small_dims();
        d.lstm = 0;
        assert!(NetworkParams::zeros(d, ContextMode::Full).is_err());
    }
}

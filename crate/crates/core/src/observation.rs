//! State-vector assembly.
//!
//! A step's observation is `v_s = [v_o, v_history, v_bbox]` where `v_o` is
//! the L2-normalized elementwise product of the projected query and the
//! visual vector `[v_context, v_local]`. `v_context` is the global average
//! of the feature map (computed once per episode); `v_local` is the average
//! of a 7x7 max-pooled RoI grid under the current box.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::environment::{EnvState, GroundingTask, HISTORY_LEN};
use crate::error::{Error, Result};
use crate::geometry::{Action, BoundingBox, ImageSize};

/// Pixel stride between feature-grid cells.
pub const FEATURE_STRIDE: f64 = 16.0;
/// Side of the pooled RoI lattice.
pub const ROI_SIZE: usize = 7;
pub const HISTORY_DIM: usize = HISTORY_LEN * Action::COUNT;
pub const BBOX_DIM: usize = 5;
/// Length of the non-visual tail of `v_s`.
pub const EXTRA_DIM: usize = HISTORY_DIM + BBOX_DIM;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    grid_h: usize,
    grid_w: usize,
    channels: usize,
    /// Row-major (row, column, channel).
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(grid_h: usize, grid_w: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "feature map dims must be positive, got {grid_h}x{grid_w}x{channels}"
            )));
        }
        if data.len() != grid_h * grid_w * channels {
            return Err(Error::Shape(format!(
                "feature map {grid_h}x{grid_w}x{channels} needs {} values, got {}",
                grid_h * grid_w * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("feature map contains non-finite values".into()));
        }
        Ok(Self {
            grid_h,
            grid_w,
            channels,
            data,
        })
    }

    pub fn zeros(grid_h: usize, grid_w: usize, channels: usize) -> Self {
        Self {
            grid_h,
            grid_w,
            channels,
            data: vec![0.0; grid_h * grid_w * channels],
        }
    }

    /// Grid covering an image at the feature stride, rounding up.
    pub fn grid_for(image: ImageSize) -> (usize, usize) {
        (
            (image.height as usize).div_ceil(FEATURE_STRIDE as usize),
            (image.width as usize).div_ceil(FEATURE_STRIDE as usize),
        )
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }
    pub fn grid_w(&self) -> usize {
        self.grid_w
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.grid_w + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn cell_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let start = (row * self.grid_w + col) * self.channels;
        &mut self.data[start..start + self.channels]
    }
}

/// Features a provider resolves for one task.
#[derive(Debug, Clone)]
pub struct TaskFeatures {
    pub map: Arc<FeatureMap>,
    pub query: Arc<[f64]>,
}

/// Source of feature maps and query embeddings. Must be deterministic per
/// task and callable from many workers at once.
pub trait FeatureProvider: Send + Sync {
    fn features(&self, task: &GroundingTask) -> Result<TaskFeatures>;
}

/// Which context signals reach the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    /// Spatial context (`v_context`) and temporal context (history + LSTM state).
    #[default]
    Full,
    /// `v_context` zeroed; history and recurrence kept.
    NoSpatial,
    /// `v_context` and history zeroed; recurrent state reset every step.
    NoContext,
}

impl ContextMode {
    pub fn spatial(self) -> bool {
        self == ContextMode::Full
    }

    pub fn temporal(self) -> bool {
        self != ContextMode::NoContext
    }

    pub fn code(self) -> u32 {
        match self {
            ContextMode::Full => 0,
            ContextMode::NoSpatial => 1,
            ContextMode::NoContext => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(ContextMode::Full),
            1 => Some(ContextMode::NoSpatial),
            2 => Some(ContextMode::NoContext),
            _ => None,
        }
    }
}

/// Pooled RoI lattice of shape `7 x 7 x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiGrid {
    pub channels: usize,
    pub data: Vec<f64>,
}

impl RoiGrid {
    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * ROI_SIZE + col) * self.channels;
        &self.data[start..start + self.channels]
    }
}

/// Grid-cell interval `[start, end)` enclosing the pixel interval, at least
/// one cell wide.
fn project_interval(lo: f64, hi: f64, cells: usize) -> (usize, usize) {
    let mut start = ((lo / FEATURE_STRIDE).floor().max(0.0) as usize).min(cells);
    let end = ((hi / FEATURE_STRIDE).ceil().max(0.0) as usize).min(cells);
    if start >= cells {
        start = cells - 1;
    }
    (start, end.max(start + 1))
}

/// Max-pools the box region onto a 7x7 lattice. Sub-window `i` of an
/// `n`-cell span covers `[floor(i n / 7), ceil((i + 1) n / 7))`, which is
/// never empty: for spans shorter than seven cells a sub-window reuses the
/// nearest covered cell.
pub fn roi_pool(map: &FeatureMap, bbox: &BoundingBox, _image: ImageSize) -> RoiGrid {
    let (r0, r1) = project_interval(bbox.y0(), bbox.y1(), map.grid_h);
    let (c0, c1) = project_interval(bbox.x0(), bbox.x1(), map.grid_w);
    let (nr, nc) = (r1 - r0, c1 - c0);
    let ch = map.channels;
    let mut data = vec![f64::NEG_INFINITY; ROI_SIZE * ROI_SIZE * ch];
    for i in 0..ROI_SIZE {
        let rs = r0 + i * nr / ROI_SIZE;
        let re = r0 + ((i + 1) * nr).div_ceil(ROI_SIZE);
        for j in 0..ROI_SIZE {
            let cs = c0 + j * nc / ROI_SIZE;
            let ce = c0 + ((j + 1) * nc).div_ceil(ROI_SIZE);
            let out = &mut data[(i * ROI_SIZE + j) * ch..(i * ROI_SIZE + j + 1) * ch];
            for r in rs..re {
                for c in cs..ce {
                    for (o, v) in out.iter_mut().zip(map.cell(r, c)) {
                        *o = o.max(*v);
                    }
                }
            }
        }
    }
    RoiGrid { channels: ch, data }
}

fn mean_over_cells(data: &[f64], cells: usize, channels: usize) -> Vec<f64> {
    let mut out = vec![0.0; channels];
    for cell in data.chunks_exact(channels) {
        for (o, v) in out.iter_mut().zip(cell) {
            *o += v;
        }
    }
    let n = cells as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

pub fn global_average_pool(map: &FeatureMap) -> Vec<f64> {
    mean_over_cells(&map.data, map.grid_h * map.grid_w, map.channels)
}

pub fn pool_local(roi: &RoiGrid) -> Vec<f64> {
    mean_over_cells(&roi.data, ROI_SIZE * ROI_SIZE, roi.channels)
}

/// Elementwise product followed by L2 normalization; a zero product maps
/// to the zero vector.
pub fn fuse(query_proj: &[f64], visual: &[f64]) -> Vec<f64> {
    assert_eq!(query_proj.len(), visual.len(), "fuse operands differ in length");
    let mut out: Vec<f64> = query_proj.iter().zip(visual).map(|(q, v)| q * v).collect();
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        out.iter_mut().for_each(|v| *v /= norm);
    }
    out
}

/// One-hot slots for the last 50 actions, most recent in slot 0.
pub fn encode_history<'a>(history: impl IntoIterator<Item = &'a Action>) -> Vec<f64> {
    let mut out = vec![0.0; HISTORY_DIM];
    for (k, a) in history.into_iter().take(HISTORY_LEN).enumerate() {
        out[k * Action::COUNT + a.index()] = 1.0;
    }
    out
}

pub fn bbox_vector(bbox: &BoundingBox, image: ImageSize) -> [f64; BBOX_DIM] {
    let (w, h) = (image.width as f64, image.height as f64);
    [
        bbox.x0() / w,
        bbox.y0() / h,
        bbox.x1() / w,
        bbox.y1() / h,
        bbox.area() / image.area(),
    ]
}

/// Affine query projection `W q + b` with `W` row-major `(out, in)`.
pub fn project_query(weight: &[f64], bias: &[f64], query: &[f64]) -> Vec<f64> {
    let n_in = query.len();
    assert_eq!(weight.len(), bias.len() * n_in, "projection shape mismatch");
    bias.iter()
        .zip(weight.chunks_exact(n_in))
        .map(|(b, row)| b + row.iter().zip(query).map(|(w, q)| w * q).sum::<f64>())
        .collect()
}

/// Raw per-step network inputs before the learned query projection.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInputs {
    pub query: Arc<[f64]>,
    /// `[v_context, v_local]`.
    pub visual: Vec<f64>,
    /// `[v_history, v_bbox]`.
    pub extra: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub v_o: Vec<f64>,
    pub v_history: Vec<f64>,
    pub v_bbox: [f64; BBOX_DIM],
}

impl Observation {
    pub fn v_s(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.v_o.len() + EXTRA_DIM);
        v.extend_from_slice(&self.v_o);
        v.extend_from_slice(&self.v_history);
        v.extend_from_slice(&self.v_bbox);
        v
    }
}

/// Per-episode feature cache: resolves the task once and keeps `v_context`.
#[derive(Debug, Clone)]
pub struct EpisodeFeatures {
    features: TaskFeatures,
    context: Vec<f64>,
    mode: ContextMode,
}

impl EpisodeFeatures {
    pub fn load(task: &GroundingTask, provider: &dyn FeatureProvider, mode: ContextMode) -> Result<Self> {
        let features = provider.features(task)?;
        let context = if mode.spatial() {
            global_average_pool(&features.map)
        } else {
            vec![0.0; features.map.channels]
        };
        Ok(Self {
            features,
            context,
            mode,
        })
    }

    pub fn context(&self) -> &[f64] {
        &self.context
    }

    pub fn query(&self) -> &Arc<[f64]> {
        &self.features.query
    }

    pub fn map(&self) -> &FeatureMap {
        &self.features.map
    }

    pub fn local(&self, state: &EnvState) -> Vec<f64> {
        let image = state.task().image_size;
        pool_local(&roi_pool(&self.features.map, &state.bbox(), image))
    }

    pub fn visual(&self, state: &EnvState) -> Vec<f64> {
        let mut v = self.context.clone();
        v.extend(self.local(state));
        v
    }

    pub fn history(&self, state: &EnvState) -> Vec<f64> {
        if self.mode.temporal() {
            encode_history(state.history())
        } else {
            vec![0.0; HISTORY_DIM]
        }
    }

    pub fn inputs(&self, state: &EnvState) -> StepInputs {
        let mut extra = self.history(state);
        extra.extend_from_slice(&bbox_vector(&state.bbox(), state.task().image_size));
        StepInputs {
            query: Arc::clone(&self.features.query),
            visual: self.visual(state),
            extra,
        }
    }
}

/// Builds `v_s` for a state given the query projection weights.
pub fn assemble_observation(
    state: &EnvState,
    episode: &EpisodeFeatures,
    proj_weight: &[f64],
    proj_bias: &[f64],
) -> Observation {
    let q = project_query(proj_weight, proj_bias, episode.query());
    Observation {
        v_o: fuse(&q, &episode.visual(state)),
        v_history: episode.history(state),
        v_bbox: bbox_vector(&state.bbox(), state.task().image_size),
    }
}

// ---------------------------------------------------------------------------
// RBF1 feature files

const RBF_MAGIC: &[u8; 4] = b"RBF1";

pub fn encode_rbf(map: &FeatureMap, query: &[f64]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(20 + 4 * (map.data.len() + query.len()));
    buf.extend_from_slice(RBF_MAGIC);
    for v in [map.grid_h, map.grid_w, map.channels, query.len()] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in map.data.iter().chain(query) {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    buf
}

pub fn decode_rbf(bytes: &[u8], context: &str) -> Result<(FeatureMap, Vec<f64>)> {
    if bytes.len() < 20 || &bytes[..4] != RBF_MAGIC {
        return Err(Error::format(context, "missing RBF1 header"));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (gh, gw, ch, qd) = (u32_at(4), u32_at(8), u32_at(12), u32_at(16));
    let n_map = gh
        .checked_mul(gw)
        .and_then(|v| v.checked_mul(ch))
        .ok_or_else(|| Error::format(context, "dimension overflow"))?;
    let expected = 20 + 4 * (n_map + qd);
    if bytes.len() != expected {
        return Err(Error::format(
            context,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let floats: Vec<f64> = bytes[20..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let (map_data, query) = floats.split_at(n_map);
    let map = FeatureMap::new(gh, gw, ch, map_data.to_vec())
        .map_err(|e| Error::format(context, e.to_string()))?;
    if query.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(context, "non-finite query value"));
    }
    Ok((map, query.to_vec()))
}

pub fn write_rbf(path: &Path, map: &FeatureMap, query: &[f64]) -> Result<()> {
    let tmp = path.with_extension("rbf.tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&encode_rbf(map, query))
        .map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_rbf(path: &Path) -> Result<(FeatureMap, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_rbf(&bytes, &path.display().to_string())
}

/// Reads `<dir>/<feature_key>.rbf`, caching decoded files.
#[derive(Debug)]
pub struct FileProvider {
    dir: PathBuf,
    cache: RwLock<HashMap<String, TaskFeatures>>,
}

impl FileProvider {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.rbf"))
    }
}

impl FeatureProvider for FileProvider {
    fn features(&self, task: &GroundingTask) -> Result<TaskFeatures> {
        if let Some(f) = self.cache.read().unwrap().get(&task.feature_key) {
            return Ok(f.clone());
        }
        let (map, query) = read_rbf(&self.path_for(&task.feature_key)).map_err(|e| Error::TaskLoad {
            task_id: task.task_id.clone(),
            reason: e.to_string(),
        })?;
        let f = TaskFeatures {
            map: Arc::new(map),
            query: query.into(),
        };
        self.cache
            .write()
            .unwrap()
            .insert(task.feature_key.clone(), f.clone());
        Ok(f)
    }
}

/// In-memory provider keyed by `feature_key`.
#[derive(Debug, Default, Clone)]
pub struct MemoryProvider {
    entries: HashMap<String, TaskFeatures>,
}

impl MemoryProvider {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, map: FeatureMap, query: Vec<f64>) {
        self.entries.insert(
            key.into(),
            TaskFeatures {
                map: Arc::new(map),
                query: query.into(),
            },
        );
    }
}

impl FeatureProvider for MemoryProvider {
    fn features(&self, task: &GroundingTask) -> Result<TaskFeatures> {
        self.entries
            .get(&task.feature_key)
            .cloned()
            .ok_or_else(|| Error::TaskLoad {
                task_id: task.task_id.clone(),
                reason: format!("no features for key {:?}", task.feature_key),
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{reset, step, EnvParams};
    use proptest::prelude::*;

    fn size(w: u32, h: u32) -> ImageSize {
        ImageSize::new(w, h).unwrap()
    }

    fn full(w: u32, h: u32) -> BoundingBox {
        BoundingBox::full(size(w, h))
    }

    #[test]
    fn roi_pool_of_constant_map() {
        let map = FeatureMap::new(12, 12, 2, vec![0.7; 288]).unwrap();
        for b in [full(192, 192), BoundingBox::new(3.0, 50.0, 20.0, 61.0).unwrap()] {
            let roi = roi_pool(&map, &b, size(192, 192));
            assert!(roi.data.iter().all(|v| *v == 0.7));
        }
    }

    #[test]
    fn roi_pool_identity_on_7x7() {
        let data: Vec<f64> = (0..49).map(|v| v as f64).collect();
        let map = FeatureMap::new(7, 7, 1, data.clone()).unwrap();
        let roi = roi_pool(&map, &full(112, 112), size(112, 112));
        assert_eq!(roi.data, data);
    }

    #[test]
    fn roi_pool_hot_cell() {
        let mut map = FeatureMap::zeros(14, 14, 1);
        map.cell_mut(0, 0)[0] = 1.0;
        let roi = roi_pool(&map, &full(224, 224), size(224, 224));
        // each sub-window is a 2x2 block; only block (0,0) holds the hot cell
        for r in 0..7 {
            for c in 0..7 {
                let expected = if (r, c) == (0, 0) { 1.0 } else { 0.0 };
                assert_eq!(roi.cell(r, c)[0], expected);
            }
        }
        let local = pool_local(&roi);
        assert!((local[0] - 1.0 / 49.0).abs() < 1e-15);
    }

    #[test]
    fn tiny_box_replicates_cell() {
        let mut map = FeatureMap::zeros(12, 12, 1);
        map.cell_mut(5, 5)[0] = 3.0;
        let b = BoundingBox::new(82.0, 82.0, 90.0, 90.0).unwrap();
        let roi = roi_pool(&map, &b, size(192, 192));
        assert!(roi.data.iter().all(|v| *v == 3.0));
    }

    #[test]
    fn averages() {
        let map = FeatureMap::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_average_pool(&map), vec![2.5]);
        let map = FeatureMap::new(3, 3, 2, vec![4.0; 18]).unwrap();
        assert_eq!(global_average_pool(&map), vec![4.0, 4.0]);
    }

    #[test]
    fn fuse_examples() {
        let v = [3.0, 4.0];
        assert_eq!(fuse(&[1.0, 1.0], &v), vec![0.6, 0.8]);
        assert_eq!(fuse(&[1.0, 0.0], &v), vec![1.0, 0.0]);
        assert_eq!(fuse(&[1.0, 0.0], &[0.0, 4.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn history_encoding() {
        assert!(encode_history(&[]).iter().all(|v| *v == 0.0));
        let h = encode_history(&[Action::MoveLeft]);
        assert_eq!(h[0], 1.0);
        assert_eq!(h.iter().sum::<f64>(), 1.0);

        let long: Vec<Action> = (0..60).map(|i| Action::from_index(i % 8).unwrap()).collect();
        let h = encode_history(&long);
        assert_eq!(h.len(), 450);
        assert_eq!(h.iter().sum::<f64>(), 50.0);
        for (k, block) in h.chunks(9).enumerate() {
            assert_eq!(block[long[k].index()], 1.0);
        }
    }

    #[test]
    fn bbox_vectors() {
        let s = size(600, 600);
        assert_eq!(bbox_vector(&full(600, 600), s), [0.0, 0.0, 1.0, 1.0, 1.0]);
        let b = BoundingBox::new(0.0, 0.0, 300.0, 300.0).unwrap();
        assert_eq!(bbox_vector(&b, s), [0.0, 0.0, 0.5, 0.5, 0.25]);
        let b = BoundingBox::new(150.0, 150.0, 450.0, 450.0).unwrap();
        assert_eq!(bbox_vector(&b, s), [0.25, 0.25, 0.75, 0.75, 0.25]);
    }

    fn toy_setup(channels: usize) -> (Arc<GroundingTask>, MemoryProvider) {
        let task = Arc::new(GroundingTask {
            task_id: "a".into(),
            image_size: size(192, 192),
            ground_truth: BoundingBox::new(32.0, 32.0, 80.0, 96.0).unwrap(),
            query_tokens: vec!["red".into(), "square".into()],
            feature_key: "a".into(),
        });
        let data: Vec<f64> = (0..144 * channels).map(|i| ((i * 37) % 11) as f64 / 11.0).collect();
        let mut p = MemoryProvider::new();
        p.insert("a", FeatureMap::new(12, 12, channels, data).unwrap(), vec![0.5; 4]);
        (task, p)
    }

    #[test]
    fn observation_dims_and_history() {
        let (task, provider) = toy_setup(16);
        let ep = EpisodeFeatures::load(&task, &provider, ContextMode::Full).unwrap();
        let w: Vec<f64> = (0..32 * 4).map(|i| (i % 5) as f64 - 2.0).collect();
        let b = vec![0.1; 32];
        let s0 = reset(Arc::clone(&task));
        let o0 = assemble_observation(&s0, &ep, &w, &b);
        assert_eq!(o0.v_s().len(), 487);
        let n = o0.v_o.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);

        // Wider on the full image clips back to the same box
        let (_, s1) = step(&s0, Action::Wider, &EnvParams::default()).unwrap();
        assert_eq!(s1.bbox(), s0.bbox());
        let o1 = assemble_observation(&s1, &ep, &w, &b);
        assert_eq!(o0.v_o, o1.v_o);
        assert_ne!(o0.v_history, o1.v_history);
        assert_eq!(assemble_observation(&s1, &ep, &w, &b), o1);
    }

    #[test]
    fn paper_scale_dims() {
        let ch = 2048;
        assert_eq!(2 * ch + EXTRA_DIM, 4551);
    }

    #[test]
    fn ablation_zeroes_context_and_history() {
        let (task, provider) = toy_setup(4);
        let s0 = reset(Arc::clone(&task));
        let (_, s1) = step(&s0, Action::Narrower, &EnvParams::default()).unwrap();
        let ep = EpisodeFeatures::load(&task, &provider, ContextMode::NoSpatial).unwrap();
        let inp = ep.inputs(&s1);
        assert!(inp.visual[..4].iter().all(|v| *v == 0.0));
        assert_eq!(inp.extra[..HISTORY_DIM].iter().sum::<f64>(), 1.0);
        let ep = EpisodeFeatures::load(&task, &provider, ContextMode::NoContext).unwrap();
        let inp = ep.inputs(&s1);
        assert!(inp.extra[..HISTORY_DIM].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rbf_rejects_garbage() {
        assert!(decode_rbf(b"RBF0\0\0\0\0", "x").is_err());
        let map = FeatureMap::zeros(2, 2, 1);
        let mut bytes = encode_rbf(&map, &[1.0]);
        bytes.pop();
        assert!(decode_rbf(&bytes, "x").is_err());
    }

    #[test]
    fn file_provider_reads_written_features() {
        let dir = tempfile::tempdir().unwrap();
        let map = FeatureMap::new(2, 3, 2, (0..12).map(|v| v as f64 * 0.25).collect()).unwrap();
        write_rbf(&dir.path().join("a.rbf"), &map, &[1.5, -2.0]).unwrap();
        let (task, _) = toy_setup(1);
        let p = FileProvider::new(dir.path());
        let f = p.features(&task).unwrap();
        assert_eq!(*f.map, map);
        assert_eq!(&*f.query, &[1.5, -2.0]);

        let missing = GroundingTask {
            feature_key: "nope".into(),
            ..(*task).clone()
        };
        assert!(matches!(p.features(&missing), Err(Error::TaskLoad { .. })));
    }

    proptest! {
        #[test]
        fn rbf_round_trip_at_f32(vals in proptest::collection::vec(-1e6f32..1e6, 24), q in proptest::collection::vec(-10f32..10.0, 3)) {
            let map = FeatureMap::new(2, 3, 4, vals.iter().map(|v| *v as f64).collect()).unwrap();
            let qv: Vec<f64> = q.iter().map(|v| *v as f64).collect();
            let (m2, q2) = decode_rbf(&encode_rbf(&map, &qv), "mem").unwrap();
            prop_assert_eq!(m2, map);
            prop_assert_eq!(q2, qv);
        }

        #[test]
        fn fused_norm_is_zero_or_one(q in proptest::collection::vec(-2.0f64..2.0, 6), v in proptest::collection::vec(0.0f64..1.0, 6)) {
            let o = fuse(&q, &v);
            let n = o.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!(n == 0.0 || (n - 1.0).abs() < 1e-12);
        }
    }
}

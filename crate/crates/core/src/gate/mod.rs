//! The routing gate: a two-layer MLP mapping the concatenated question, text
//! and vision embeddings to three path logits.
//!
//! ```text
//! x (10112) -> Linear -> ReLU -> Dropout(0.1) -> Linear -> z (3)
//!              W1, b1                            W2, b2
//! ```
//!
//! Parameters are held in `f64` for training. Checkpoints store them as
//! `f32`; [`GateParameters::round_to_f32`] brings a gate to that at-rest
//! precision.

mod checkpoint;

pub use checkpoint::{load_checkpoint, load_checkpoint_with_dims, save_checkpoint, Checkpoint, CheckpointError};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::checksum_f64;

pub const QUESTION_DIM: usize = 384;
pub const TEXT_DIM: usize = 3584;
pub const VISION_DIM: usize = 6144;
pub const INPUT_DIM: usize = QUESTION_DIM + TEXT_DIM + VISION_DIM;
pub const HIDDEN_DIM: usize = 256;
pub const NUM_PATHS: usize = 3;
pub const DROPOUT_P: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GateError {
    #[error("dimension mismatch in {component}: expected {expected}, got {actual}")]
    DimensionMismatch {
        component: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("forward cache does not match these parameters or has been modified")]
    StaleCache,
}

type Result<T> = std::result::Result<T, GateError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateDims {
    pub input: usize,
    pub hidden: usize,
}

impl GateDims {
    pub const CANONICAL: GateDims = GateDims {
        input: INPUT_DIM,
        hidden: HIDDEN_DIM,
    };

    pub fn new(input: usize, hidden: usize) -> Self {
        Self { input, hidden }
    }

    pub fn num_params(&self) -> usize {
        self.input * self.hidden + self.hidden + NUM_PATHS * self.hidden + NUM_PATHS
    }

    fn w1_len(&self) -> usize {
        self.input * self.hidden
    }

    fn offsets(&self) -> [usize; 4] {
        let w1 = 0;
        let b1 = w1 + self.w1_len();
        let w2 = b1 + self.hidden;
        let b2 = w2 + NUM_PATHS * self.hidden;
        [w1, b1, w2, b2]
    }
}

/// Flat parameter storage laid out as `[W1 | b1 | W2 | b2]`, weights
/// row-major with shape `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParameters {
    dims: GateDims,
    data: Vec<f64>,
}

/// Gradients share the parameter layout.
pub type GateGradients = GateParameters;

macro_rules! section {
    ($name:ident, $name_mut:ident, $idx:expr, $len:expr) => {
        pub fn $name(&self) -> &[f64] {
            let start = self.dims.offsets()[$idx];
            let len = $len(&self.dims);
            &self.data[start..start + len]
        }

        pub fn $name_mut(&mut self) -> &mut [f64] {
            let start = self.dims.offsets()[$idx];
            let len = $len(&self.dims);
            &mut self.data[start..start + len]
        }
    };
}

impl GateParameters {
    pub fn zeros(dims: GateDims) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.num_params()],
        }
    }

    pub fn from_flat(dims: GateDims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.num_params() {
            return Err(GateError::DimensionMismatch {
                component: "parameters",
                expected: dims.num_params(),
                actual: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> GateDims {
        self.dims
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    section!(w1, w1_mut, 0, |d: &GateDims| d.w1_len());
    section!(b1, b1_mut, 1, |d: &GateDims| d.hidden);
    section!(w2, w2_mut, 2, |d: &GateDims| NUM_PATHS * d.hidden);
    section!(b2, b2_mut, 3, |_: &GateDims| NUM_PATHS);

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rounds every parameter to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        self.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}

/// Xavier-uniform weights, zero biases. Deterministic in `seed`.
///
/// Weights are drawn in `f32` so a freshly initialized gate is already at
/// checkpoint precision.
pub fn init_gate(dims: GateDims, seed: u64) -> GateParameters {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = GateParameters::zeros(dims);
    let bound1 = xavier_bound(dims.input, dims.hidden);
    for w in params.w1_mut() {
        *w = rng.gen_range(-bound1..=bound1) as f64;
    }
    let bound2 = xavier_bound(dims.hidden, NUM_PATHS);
    for w in params.w2_mut() {
        *w = rng.gen_range(-bound2..=bound2) as f64;
    }
    params
}

fn xavier_bound(fan_in: usize, fan_out: usize) -> f32 {
    (6.0f64 / (fan_in + fan_out) as f64).sqrt() as f32
}

/// The three frozen-encoder embeddings for one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateInput {
    pub question_embedding: Vec<f32>,
    pub text_embedding: Vec<f32>,
    pub vision_embedding: Vec<f32>,
}

/// `x = [e_q, e_t, e_v]`.
pub fn concat_input(gi: &GateInput) -> Result<Vec<f64>> {
    let parts: [(&'static str, &[f32], usize); 3] = [
        ("question_embedding", &gi.question_embedding, QUESTION_DIM),
        ("text_embedding", &gi.text_embedding, TEXT_DIM),
        ("vision_embedding", &gi.vision_embedding, VISION_DIM),
    ];
    let mut x = Vec::with_capacity(INPUT_DIM);
    for (component, values, expected) in parts {
        if values.len() != expected {
            return Err(GateError::DimensionMismatch {
                component,
                expected,
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GateError::NonFinite(component));
        }
        x.extend(values.iter().map(|&v| v as f64));
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Raw path logits in path order (text, image, fusion).
pub type RoutingLogits = [f64; NUM_PATHS];

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: Vec<f64>,
    pub pre_activation: Vec<f64>,
    pub hidden: Vec<f64>,
    pub dropout_mask: Vec<bool>,
    pub mode: Mode,
    input_checksum: u64,
}

impl ForwardCache {
    fn unit_scale(&self, j: usize) -> f64 {
        match self.mode {
            Mode::Eval => 1.0,
            Mode::Train if self.dropout_mask[j] => 1.0 / (1.0 - DROPOUT_P),
            Mode::Train => 0.0,
        }
    }
}

/// Sums with eight independent accumulators; the fixed order keeps results
/// deterministic while letting the compiler vectorize.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let chunks_a = a.chunks_exact(8);
    let chunks_b = b.chunks_exact(8);
    let (rem_a, rem_b) = (chunks_a.remainder(), chunks_b.remainder());
    for (ca, cb) in chunks_a.zip(chunks_b) {
        for k in 0..8 {
            acc[k] += ca[k] * cb[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in rem_a.iter().zip(rem_b) {
        tail += x * y;
    }
    acc.iter().sum::<f64>() + tail
}

/// Forward pass. In eval mode dropout is the identity and `rng_seed` is
/// ignored; in train mode units are kept with probability 0.9 and survivors
/// are scaled by `1 / 0.9`.
pub fn forward(
    params: &GateParameters,
    x: &[f64],
    mode: Mode,
    rng_seed: u64,
) -> Result<(RoutingLogits, ForwardCache)> {
    let dims = params.dims;
    if x.len() != dims.input {
        return Err(GateError::DimensionMismatch {
            component: "gate input",
            expected: dims.input,
            actual: x.len(),
        });
    }
    let w1 = params.w1();
    let b1 = params.b1();
    let mut pre = Vec::with_capacity(dims.hidden);
    let mut hidden = Vec::with_capacity(dims.hidden);
    for j in 0..dims.hidden {
        let row = &w1[j * dims.input..(j + 1) * dims.input];
        let a = dot(row, x) + b1[j];
        pre.push(a);
        hidden.push(a.max(0.0));
    }
    let dropout_mask = match mode {
        Mode::Eval => vec![true; dims.hidden],
        Mode::Train => {
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
            (0..dims.hidden)
                .map(|_| rng.gen::<f64>() >= DROPOUT_P)
                .collect()
        }
    };
    let cache = ForwardCache {
        input_checksum: checksum_f64(x),
        input: x.to_vec(),
        pre_activation: pre,
        hidden,
        dropout_mask,
        mode,
    };
    let w2 = params.w2();
    let b2 = params.b2();
    let mut z = [0.0; NUM_PATHS];
    for (k, zk) in z.iter_mut().enumerate() {
        let row = &w2[k * dims.hidden..(k + 1) * dims.hidden];
        let mut acc = b2[k];
        for j in 0..dims.hidden {
            acc += row[j] * cache.hidden[j] * cache.unit_scale(j);
        }
        *zk = acc;
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(GateError::NonFinite("logits"));
    }
    Ok((z, cache))
}

/// Eval-mode logits only.
pub fn logits(params: &GateParameters, x: &[f64]) -> Result<RoutingLogits> {
    forward(params, x, Mode::Eval, 0).map(|(z, _)| z)
}

/// Gradients of `dL_dz . z` with respect to every parameter.
pub fn backward(
    params: &GateParameters,
    cache: &ForwardCache,
    dl_dz: &[f64; NUM_PATHS],
) -> Result<GateGradients> {
    let mut grads = GateParameters::zeros(params.dims);
    backward_accumulate(params, cache, dl_dz, &mut grads)?;
    Ok(grads)
}

/// Like [`backward`] but adds into an existing gradient buffer.
pub fn backward_accumulate(
    params: &GateParameters,
    cache: &ForwardCache,
    dl_dz: &[f64; NUM_PATHS],
    grads: &mut GateGradients,
) -> Result<()> {
    let dims = params.dims;
    if grads.dims != dims
        || cache.input.len() != dims.input
        || cache.hidden.len() != dims.hidden
        || cache.dropout_mask.len() != dims.hidden
        || checksum_f64(&cache.input) != cache.input_checksum
    {
        return Err(GateError::StaleCache);
    }
    let hidden = dims.hidden;

    for (g, d) in grads.b2_mut().iter_mut().zip(dl_dz) {
        *g += d;
    }
    let scales: Vec<f64> = (0..hidden).map(|j| cache.unit_scale(j)).collect();
    {
        let gw2 = grads.w2_mut();
        for k in 0..NUM_PATHS {
            for j in 0..hidden {
                gw2[k * hidden + j] += dl_dz[k] * cache.hidden[j] * scales[j];
            }
        }
    }
    let w2 = params.w2();
    let dpre: Vec<f64> = (0..hidden)
        .map(|j| {
            if cache.pre_activation[j] <= 0.0 || scales[j] == 0.0 {
                return 0.0;
            }
            let dh: f64 = (0..NUM_PATHS).map(|k| w2[k * hidden + j] * dl_dz[k]).sum();
            dh * scales[j]
        })
        .collect();
    for (g, d) in grads.b1_mut().iter_mut().zip(&dpre) {
        *g += d;
    }
    let gw1 = grads.w1_mut();
    for (j, &d) in dpre.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        let row = &mut gw1[j * dims.input..(j + 1) * dims.input];
        for (g, &xi) in row.iter_mut().zip(&cache.input) {
            *g += d * xi;
        }
    }
    Ok(())
}

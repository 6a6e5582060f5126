//! Causal transformer encoder with a policy head and an opponent head.
//!
//! Parameters live in one flat vector so optimizers and gradient checks can
//! treat them uniformly; [`ParamLayout`] maps tensor names to slices. Blocks
//! are pre-norm: `h += Attn(LN(h))`, `h += FF(LN(h))`, with a final LN
//! before the heads. Matrices multiply row vectors from the right.

mod forward;
mod inference;
mod loss;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::features::{BASE_DIM, TOKEN_DIM};
use crate::io::{kv_fields, read_artifact_bytes, write_atomic};
use crate::seed::SeedNamespace;

pub use forward::{backward, forward, ForwardTrace, HeadGrads, HeadOutputs, Sequence};
pub use inference::InferenceSession;
pub use loss::{masked_softmax, opp_loss, policy_loss, sample_action, total_loss, PolicyTargets};

/// Floating-point element type for parameters and activations.
pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Send
    + Sync
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

#[inline]
pub(crate) fn r<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("representable")
}

#[inline]
pub(crate) fn f<T: Real>(x: T) -> f64 {
    x.to_f64().expect("finite conversion")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GtoLossMode {
    CrossEntropy,
    /// `KL(model ‖ GTO)` in place of the GTO cross-entropy term.
    Kl,
}

impl GtoLossMode {
    pub fn name(self) -> &'static str {
        match self {
            GtoLossMode::CrossEntropy => "ce",
            GtoLossMode::Kl => "kl",
        }
    }

    pub fn parse(s: &str) -> Result<GtoLossMode> {
        match s {
            "ce" | "cross_entropy" => Ok(GtoLossMode::CrossEntropy),
            "kl" => Ok(GtoLossMode::Kl),
            _ => Err(Error::Config(format!("unknown loss mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub max_seq_len: usize,
    pub input_dim: usize,
    pub loss_mode: GtoLossMode,
    pub label_smoothing: f64,
    /// Restrict the opponent-head softmax to legal actions.
    pub opp_loss_masked: bool,
}

impl ModelConfig {
    pub fn full() -> ModelConfig {
        ModelConfig {
            layers: 4,
            d_model: 512,
            heads: 8,
            ff_dim: 512,
            dropout: 0.15,
            max_seq_len: 3000,
            input_dim: TOKEN_DIM,
            loss_mode: GtoLossMode::CrossEntropy,
            label_smoothing: 0.01,
            opp_loss_masked: false,
        }
    }

    pub fn desk() -> ModelConfig {
        ModelConfig {
            layers: 2,
            d_model: 64,
            heads: 4,
            ff_dim: 64,
            max_seq_len: 1024,
            ..ModelConfig::full()
        }
    }

    pub fn with_input_dim(mut self, input_dim: usize) -> ModelConfig {
        self.input_dim = input_dim;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.layers == 0 || self.d_model == 0 || self.heads == 0 || self.ff_dim == 0 {
            return bad("model dimensions must be positive");
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return bad("d_model must be divisible by heads");
        }
        if self.input_dim != BASE_DIM && self.input_dim != TOKEN_DIM {
            return bad("input_dim must be 9 or 25");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label smoothing must be in [0, 1)");
        }
        if self.max_seq_len < 2 {
            return bad("max_seq_len must be at least 2");
        }
        Ok(())
    }

    pub fn to_header(&self) -> String {
        format!(
            "layers={} d_model={} heads={} ff_dim={} dropout={:?} max_seq_len={} input_dim={} loss_mode={} smoothing={:?} opp_masked={}",
            self.layers,
            self.d_model,
            self.heads,
            self.ff_dim,
            self.dropout,
            self.max_seq_len,
            self.input_dim,
            self.loss_mode.name(),
            self.label_smoothing,
            self.opp_loss_masked
        )
    }

    fn from_header(line: &str, origin: &str) -> Result<ModelConfig> {
        let get = |k: &str| {
            kv_fields(line)
                .find(|(key, _)| *key == k)
                .map(|(_, v)| v)
                .ok_or_else(|| Error::format(origin, format!("header missing `{k}`")))
        };
        fn p<V: std::str::FromStr>(s: &str, origin: &str) -> Result<V> {
            s.parse()
                .map_err(|_| Error::format(origin, format!("bad header value `{s}`")))
        }
        let cfg = ModelConfig {
            layers: p(get("layers")?, origin)?,
            d_model: p(get("d_model")?, origin)?,
            heads: p(get("heads")?, origin)?,
            ff_dim: p(get("ff_dim")?, origin)?,
            dropout: p(get("dropout")?, origin)?,
            max_seq_len: p(get("max_seq_len")?, origin)?,
            input_dim: p(get("input_dim")?, origin)?,
            loss_mode: GtoLossMode::parse(get("loss_mode")?)?,
            label_smoothing: p(get("smoothing")?, origin)?,
            opp_loss_masked: p(get("opp_masked")?, origin)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Written as a 1-D tensor of length `cols` when true.
    pub vector: bool,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    fn shape_string(&self) -> String {
        if self.vector {
            format!("{}", self.cols)
        } else {
            format!("{}x{}", self.rows, self.cols)
        }
    }
}

/// Tensor ids of one transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct BlockIds {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub tensors: Vec<TensorSpec>,
    pub total: usize,
    pub(crate) embed_w: usize,
    pub(crate) embed_b: usize,
    pub(crate) blocks: Vec<BlockIds>,
    pub(crate) lnf_g: usize,
    pub(crate) lnf_b: usize,
    pub(crate) policy_w: usize,
    pub(crate) policy_b: usize,
    pub(crate) opp_w1: usize,
    pub(crate) opp_b1: usize,
    pub(crate) opp_w2: usize,
    pub(crate) opp_b2: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> ParamLayout {
        let mut tensors: Vec<TensorSpec> = Vec::new();
        let mut total = 0;
        let mut add = |name: String, rows: usize, cols: usize, vector: bool| {
            tensors.push(TensorSpec {
                name,
                rows,
                cols,
                vector,
                offset: total,
            });
            total += rows * cols;
            tensors.len() - 1
        };
        let d = cfg.d_model;
        let embed_w = add("embed.w".into(), cfg.input_dim, d, false);
        let embed_b = add("embed.b".into(), 1, d, true);
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let mut m = |n: &str, rows, cols| add(format!("block{l}.{n}"), rows, cols, false);
            let (ln1_g, ln1_b) = (m("ln1.g", 1, d), m("ln1.b", 1, d));
            let (wq, bq) = (m("attn.wq", d, d), m("attn.bq", 1, d));
            let (wk, bk) = (m("attn.wk", d, d), m("attn.bk", 1, d));
            let (wv, bv) = (m("attn.wv", d, d), m("attn.bv", 1, d));
            let (wo, bo) = (m("attn.wo", d, d), m("attn.bo", 1, d));
            let (ln2_g, ln2_b) = (m("ln2.g", 1, d), m("ln2.b", 1, d));
            let (w1, b1) = (m("ff.w1", d, cfg.ff_dim), m("ff.b1", 1, cfg.ff_dim));
            let (w2, b2) = (m("ff.w2", cfg.ff_dim, d), m("ff.b2", 1, d));
            blocks.push(BlockIds {
                ln1_g,
                ln1_b,
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ln2_g,
                ln2_b,
                w1,
                b1,
                w2,
                b2,
            });
        }
        let lnf_g = add("final_ln.g".into(), 1, d, true);
        let lnf_b = add("final_ln.b".into(), 1, d, true);
        let policy_w = add("policy.w".into(), d, 3, false);
        let policy_b = add("policy.b".into(), 1, 3, true);
        let opp_w1 = add("opp.w1".into(), d, d, false);
        let opp_b1 = add("opp.b1".into(), 1, d, true);
        let opp_w2 = add("opp.w2".into(), d, 3, false);
        let opp_b2 = add("opp.b2".into(), 1, 3, true);
        for t in tensors.iter_mut() {
            if t.rows == 1 {
                t.vector = true;
            }
        }
        ParamLayout {
            tensors,
            total,
            embed_w,
            embed_b,
            blocks,
            lnf_g,
            lnf_b,
            policy_w,
            policy_b,
            opp_w1,
            opp_b1,
            opp_w2,
            opp_b2,
        }
    }

    pub fn find(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Ids of the policy head tensors.
    pub fn policy_head(&self) -> [usize; 2] {
        [self.policy_w, self.policy_b]
    }

    /// True for tensors that receive weight decay (matrices only).
    pub fn decays(&self, id: usize) -> bool {
        !self.tensors[id].vector
    }
}

static VERSION: AtomicU64 = AtomicU64::new(1);

fn next_version() -> u64 {
    VERSION.fetch_add(1, Ordering::Relaxed)
}

/// Flat parameter vector plus its layout. Every mutable access bumps a
/// version stamp so traces from older parameters are rejected.
#[derive(Debug, Clone)]
pub struct ModelParameters<T: Real> {
    config: ModelConfig,
    layout: ParamLayout,
    data: Vec<T>,
    version: u64,
}

impl<T: Real> PartialEq for ModelParameters<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.data == other.data
    }
}

impl<T: Real> ModelParameters<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<ModelParameters<T>> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut data = vec![T::zero(); layout.total];
        let ns = SeedNamespace::new(seed);
        let d = config.d_model as f64;
        let depth_scale = (2.0 * config.layers as f64).sqrt();
        for (id, t) in layout.tensors.iter().enumerate() {
            let name = t.name.as_str();
            let std = if name.ends_with(".g") {
                None
            } else if t.vector {
                Some(0.0)
            } else if name == "embed.w" {
                Some(1.0 / (config.input_dim as f64).sqrt())
            } else if name.ends_with("attn.wo") || name.ends_with("ff.w2") {
                Some(1.0 / (t.rows as f64).sqrt() / depth_scale)
            } else if name == "policy.w" || name == "opp.w2" {
                Some(0.02)
            } else {
                Some(1.0 / d.sqrt().max((t.rows as f64).sqrt()))
            };
            let slice = &mut data[t.range()];
            match std {
                None => slice.fill(T::one()),
                Some(s) if s == 0.0 => {}
                Some(s) => {
                    let normal = Normal::new(0.0, s).expect("valid std");
                    let mut rng = ns.rng("init", &[id as u64]);
                    for v in slice.iter_mut() {
                        *v = r(normal.sample(&mut rng));
                    }
                }
            }
        }
        Ok(ModelParameters {
            config,
            layout,
            data,
            version: next_version(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        self.version = next_version();
        &mut self.data
    }

    pub fn tensor(&self, id: usize) -> &[T] {
        &self.data[self.layout.tensors[id].range()]
    }

    pub(crate) fn mat(&self, id: usize) -> ArrayView2<'_, T> {
        let t = &self.layout.tensors[id];
        ArrayView2::from_shape((t.rows, t.cols), &self.data[t.range()]).expect("layout shape")
    }

    pub(crate) fn vec(&self, id: usize) -> ArrayView1<'_, T> {
        ArrayView1::from(&self.data[self.layout.tensors[id].range()])
    }

    /// Overrides selected settings that do not change tensor shapes.
    pub fn set_training_options(
        &mut self,
        dropout: f64,
        loss_mode: GtoLossMode,
        label_smoothing: f64,
        opp_loss_masked: bool,
    ) -> Result<()> {
        let cfg = ModelConfig {
            dropout,
            loss_mode,
            label_smoothing,
            opp_loss_masked,
            ..self.config
        };
        cfg.validate()?;
        self.config = cfg;
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts element type, e.g. f32 training weights to f64 for checks.
    pub fn cast<U: Real>(&self) -> ModelParameters<U> {
        ModelParameters {
            config: self.config,
            layout: self.layout.clone(),
            data: self.data.iter().map(|&v| r::<U>(f(v))).collect(),
            version: next_version(),
        }
    }

    /// Widens a 9-input model to 25 inputs. Original input rows are copied
    /// and the new rows start at zero; all other tensors are unchanged.
    pub fn expand_input_projection(&self) -> Result<ModelParameters<T>> {
        if self.config.input_dim != BASE_DIM {
            return Err(Error::WrongInputWidth {
                expected: BASE_DIM,
                found: self.config.input_dim,
            });
        }
        let config = self.config.with_input_dim(TOKEN_DIM);
        let layout = ParamLayout::new(&config);
        let mut data = vec![T::zero(); layout.total];
        for (old, new) in self.layout.tensors.iter().zip(&layout.tensors) {
            debug_assert_eq!(old.name, new.name);
            data[new.offset..new.offset + old.len()].copy_from_slice(&self.data[old.range()]);
        }
        Ok(ModelParameters {
            config,
            layout,
            data,
            version: next_version(),
        })
    }

    pub fn save_checkpoint(&self, path: &Path, step: u64) -> Result<()> {
        write_atomic(path, &self.checkpoint_bytes(step))
    }

    pub fn checkpoint_bytes(&self, step: u64) -> Vec<u8> {
        let shapes: Vec<String> = self
            .layout
            .tensors
            .iter()
            .map(|t| format!("{}={}", t.name, t.shape_string()))
            .collect();
        let header = format!(
            "{CHECKPOINT_FORMAT} step={step} {} tensors={}\n{}\n",
            self.config.to_header(),
            self.layout.tensors.len(),
            shapes.join(" ")
        );
        let mut bytes = header.into_bytes();
        bytes.reserve(self.data.len() * 4);
        for &v in &self.data {
            bytes.extend_from_slice(&(f(v) as f32).to_le_bytes());
        }
        bytes
    }

    /// Loads a checkpoint, returning parameters and the stored step.
    pub fn load_checkpoint(path: &Path) -> Result<(ModelParameters<T>, u64)> {
        let bytes = read_artifact_bytes(path)?;
        Self::from_checkpoint_bytes(&bytes, &path.display().to_string())
    }

    pub fn from_checkpoint_bytes(bytes: &[u8], origin: &str) -> Result<(ModelParameters<T>, u64)> {
        let mut lines = bytes.splitn(3, |&b| b == b'\n');
        let header = lines
            .next()
            .and_then(|l| std::str::from_utf8(l).ok())
            .unwrap_or("");
        let shapes = lines
            .next()
            .and_then(|l| std::str::from_utf8(l).ok())
            .ok_or_else(|| Error::format(origin, "missing shape table"))?;
        let body = lines
            .next()
            .ok_or_else(|| Error::format(origin, "missing tensor data"))?;
        crate::io::check_header(header, CHECKPOINT_FORMAT, origin)?;
        let config = ModelConfig::from_header(header, origin)?;
        let step: u64 = kv_fields(header)
            .find(|(k, _)| *k == "step")
            .and_then(|(_, v)| v.parse().ok())
            .ok_or_else(|| Error::format(origin, "bad step"))?;
        let layout = ParamLayout::new(&config);
        let table: Vec<(&str, &str)> = kv_fields(shapes).collect();
        if table.len() != layout.tensors.len() {
            return Err(Error::format(origin, "shape table does not match config"));
        }
        for ((name, shape), t) in table.iter().zip(&layout.tensors) {
            if *name != t.name || *shape != t.shape_string() {
                return Err(Error::format(
                    origin,
                    format!(
                        "tensor `{name}` has shape {shape}, expected {} {}",
                        t.name,
                        t.shape_string()
                    ),
                ));
            }
        }
        if body.len() != layout.total * 4 {
            return Err(Error::format(origin, "tensor data length mismatch"));
        }
        let data: Vec<T> = body
            .chunks_exact(4)
            .map(|c| r::<T>(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        Ok((
            ModelParameters {
                config,
                layout,
                data,
                version: next_version(),
            },
            step,
        ))
    }
}

pub const CHECKPOINT_FORMAT: &str = "leduc-model v1";

/// Gradient buffer aligned with a [`ParamLayout`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T: Real> {
    pub data: Vec<T>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros(layout: &ParamLayout) -> Gradients<T> {
        Gradients {
            data: vec![T::zero(); layout.total],
        }
    }

    pub(crate) fn mat_mut<'a>(
        &'a mut self,
        layout: &ParamLayout,
        id: usize,
    ) -> ArrayViewMut2<'a, T> {
        let t = &layout.tensors[id];
        ArrayViewMut2::from_shape((t.rows, t.cols), &mut self.data[t.range()])
            .expect("layout shape")
    }

    pub fn tensor<'a>(&'a self, layout: &ParamLayout, id: usize) -> &'a [T] {
        &self.data[layout.tensors[id].range()]
    }

    pub fn add_scaled(&mut self, other: &Gradients<T>, scale: T) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b * scale;
        }
    }

    pub fn scale(&mut self, s: T) {
        for a in self.data.iter_mut() {
            *a *= s;
        }
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|&v| f(v) * f(v)).sum::<f64>().sqrt()
    }
}

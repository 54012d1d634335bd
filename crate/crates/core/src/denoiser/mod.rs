//! Conditional sample-prediction networks `G(z, τ, cond)`.
//!
//! Two architectures share one flat parameter vector with a named-segment
//! layout:
//!
//! * [`Arch::SeqAttn`]: per-frame input projection plus a sinusoidal timestep
//!   embedding, one single-head cross-attention block over the conditioning
//!   tokens, a residual two-layer GeLU feed-forward, and an output projection.
//! * [`Arch::PooledMlp`]: pooled latent ⊕ timestep embedding ⊕ pooled
//!   conditioning through one GeLU hidden layer, broadcast over frames.
//!
//! Gradients are hand-derived reverse mode; [`grad_check`] compares them
//! against central differences.

mod checkpoint;
mod linalg;
mod pooled_mlp;
mod seq_attn;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GdrError, Result};
use crate::latentdata::{CondSeq, LatentSeq};
use crate::numerics::{Mat, SeededRng};

pub use checkpoint::{decode_model, encode_model, load_model, load_model_as, save_model, MODEL_MAGIC, MODEL_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    SeqAttn,
    PooledMlp,
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::SeqAttn => "seq_attn",
            Arch::PooledMlp => "pooled_mlp",
        })
    }
}

/// What the network output means to the sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    /// Clean latent ẑ₀.
    #[default]
    Sample,
    /// The added noise ε.
    Epsilon,
    /// Clean latent from learned mask frames, no diffusion.
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d_a: usize,
    pub d_t: usize,
    pub hidden: usize,
    pub d_time: usize,
    /// Feed-forward width (SeqAttn only).
    pub ff: usize,
    /// Learned mask frames for the regression baseline; 0 disables them.
    pub mask_len: usize,
}

impl Dims {
    pub fn new(d_a: usize, d_t: usize, hidden: usize) -> Self {
        Self {
            d_a,
            d_t,
            hidden,
            d_time: 32,
            ff: 2 * hidden,
            mask_len: 0,
        }
    }

    pub fn with_mask(mut self, len: usize) -> Self {
        self.mask_len = len;
        self
    }

    fn validate(&self, arch: Arch) -> Result<()> {
        if self.d_a == 0 || self.d_t == 0 || self.hidden == 0 || self.d_time == 0 {
            return Err(GdrError::InvalidSpec(format!(
                "all model dims must be positive: {self:?}"
            )));
        }
        if !self.d_time.is_multiple_of(2) {
            return Err(GdrError::InvalidSpec("timestep embedding width must be even".into()));
        }
        if arch == Arch::SeqAttn && self.ff == 0 {
            return Err(GdrError::InvalidSpec("feed-forward width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    fn is_weight(&self) -> bool {
        self.name.ends_with(".w") || self.name.starts_with("attn.")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    segments: Vec<Segment>,
    total: usize,
}

impl Layout {
    fn build(parts: &[(&str, usize, usize)]) -> Self {
        let mut offset = 0;
        let segments = parts
            .iter()
            .map(|&(name, rows, cols)| {
                let s = Segment {
                    name: name.to_string(),
                    offset,
                    rows,
                    cols,
                };
                offset += rows * cols;
                s
            })
            .collect();
        Self {
            segments,
            total: offset,
        }
    }

    pub fn for_arch(arch: Arch, d: &Dims) -> Self {
        let (a, c, h, e) = (d.d_a, d.d_t, d.hidden, d.d_time);
        let mut parts: Vec<(&str, usize, usize)> = match arch {
            Arch::SeqAttn => vec![
                ("in.w", h, a),
                ("in.b", h, 1),
                ("time.w", h, e),
                ("attn.q", h, h),
                ("attn.k", h, c),
                ("attn.v", h, c),
                ("attn.o", h, h),
                ("ff1.w", d.ff, h),
                ("ff1.b", d.ff, 1),
                ("ff2.w", h, d.ff),
                ("ff2.b", h, 1),
                ("out.w", a, h),
                ("out.b", a, 1),
            ],
            Arch::PooledMlp => vec![
                ("hidden.w", h, a + e + c),
                ("hidden.b", h, 1),
                ("out.w", a, h),
                ("out.b", a, 1),
            ],
        };
        if d.mask_len > 0 {
            parts.push(("mask", d.mask_len, a));
        }
        Self::build(&parts)
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn get(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub(crate) fn range(&self, name: &str) -> std::ops::Range<usize> {
        self.get(name)
            .unwrap_or_else(|| panic!("layout has no segment {name}"))
            .range()
    }

    /// Segment containing flat parameter index `idx`.
    pub fn locate(&self, idx: usize) -> Option<&Segment> {
        self.segments.iter().find(|s| s.range().contains(&idx))
    }
}

/// Provenance carried in checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ModelMeta {
    pub prediction: Prediction,
    #[serde(default)]
    pub schedule_hash: Option<String>,
    #[serde(default)]
    pub train_digest: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    arch: Arch,
    dims: Dims,
    layout: Layout,
    params: Vec<f64>,
    meta: ModelMeta,
}

/// Sinusoidal features of an integer diffusion step: `[sin(τ·f_i), cos(τ·f_i)]`
/// with geometric frequencies `f_i = 10000^{-i/(width/2)}`.
pub fn timestep_embedding(step: usize, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    let t = step as f64;
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t * freq).sin();
        out[half + i] = (t * freq).cos();
    }
    out
}

/// Anything the sampler can query for a prediction.
pub trait Denoiser: Sync {
    fn predict(&self, z: &LatentSeq, step: usize, cond: &CondSeq) -> Result<LatentSeq>;

    fn prediction(&self) -> Prediction {
        Prediction::Sample
    }

    /// Learned input frames for regression models.
    fn mask_frames(&self) -> Option<LatentSeq> {
        None
    }

    fn latent_dim(&self) -> usize;

    fn cond_dim(&self) -> usize;
}

/// Network input: either a latent sequence or the model's own mask frames.
#[derive(Debug, Clone, PartialEq)]
pub enum ExampleInput {
    Latent(LatentSeq),
    Mask,
}

/// One supervised pair for [`loss_and_grad`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub input: ExampleInput,
    pub step: usize,
    pub target: LatentSeq,
    pub cond: CondSeq,
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Weights ~ N(0, 1/fan_in), biases and mask frames zero. Parameters are
/// rounded to f32 so checkpoints round-trip exactly.
pub fn init_model(arch: Arch, dims: Dims, seed: u64) -> Result<DenoiserModel> {
    dims.validate(arch)?;
    let layout = Layout::for_arch(arch, &dims);
    let mut params = vec![0.0; layout.total()];
    let mut rng = SeededRng::new(seed, 0x1a17);
    for seg in layout.segments() {
        if !seg.is_weight() {
            continue;
        }
        let std = 1.0 / (seg.cols as f64).sqrt();
        for p in &mut params[seg.range()] {
            *p = round_f32(std * rng.normal());
        }
    }
    Ok(DenoiserModel {
        arch,
        dims,
        layout,
        params,
        meta: ModelMeta::default(),
    })
}

/// A model with all weights zero and output bias `bias`, so every frame of
/// every prediction equals `bias` whatever the inputs. With
/// `Prediction::Epsilon` this makes DDIM inversion exactly invertible.
pub fn constant_model(arch: Arch, dims: Dims, bias: &[f64], prediction: Prediction) -> Result<DenoiserModel> {
    dims.validate(arch)?;
    if bias.len() != dims.d_a {
        return Err(GdrError::ShapeError(format!(
            "bias of length {} for d_a={}",
            bias.len(),
            dims.d_a
        )));
    }
    let layout = Layout::for_arch(arch, &dims);
    let mut params = vec![0.0; layout.total()];
    params[layout.range("out.b")].copy_from_slice(bias);
    DenoiserModel::from_params(
        arch,
        dims,
        params,
        ModelMeta {
            prediction,
            ..ModelMeta::default()
        },
    )
}

impl DenoiserModel {
    pub fn from_params(arch: Arch, dims: Dims, params: Vec<f64>, meta: ModelMeta) -> Result<Self> {
        dims.validate(arch)?;
        let layout = Layout::for_arch(arch, &dims);
        if params.len() != layout.total() {
            return Err(GdrError::ShapeError(format!(
                "{} parameters for a layout of {}",
                params.len(),
                layout.total()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(GdrError::InvalidMatrix("non-finite parameter".into()));
        }
        Ok(Self {
            arch,
            dims,
            layout,
            params,
            meta,
        })
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn dims(&self) -> &Dims {
        &self.dims
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn meta(&self) -> &ModelMeta {
        &self.meta
    }

    pub fn set_meta(&mut self, meta: ModelMeta) {
        self.meta = meta;
    }

    /// Overwrites parameters in place; lengths must match and values be finite.
    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(GdrError::ShapeError("parameter length mismatch".into()));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(GdrError::NumericalFailure("non-finite parameter update".into()));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    /// Rounds every parameter to the nearest f32.
    pub fn quantize(&mut self) {
        self.params.iter_mut().for_each(|p| *p = round_f32(*p));
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.layout.get(name).map(|s| &self.params[s.range()])
    }

    pub(crate) fn seg(&self, name: &str) -> &[f64] {
        &self.params[self.layout.range(name)]
    }

    fn mask_seq(&self) -> Result<LatentSeq> {
        let seg = self
            .layout
            .get("mask")
            .ok_or_else(|| GdrError::ShapeError("model has no mask frames".into()))?;
        LatentSeq::new(Mat::new(seg.rows, seg.cols, self.params[seg.range()].to_vec())?)
    }

    fn check_shapes(&self, z: &LatentSeq, cond: &CondSeq) -> Result<()> {
        if z.dim() != self.dims.d_a {
            return Err(GdrError::ShapeError(format!(
                "latent dim {} for model d_a={}",
                z.dim(),
                self.dims.d_a
            )));
        }
        if cond.dim() != self.dims.d_t {
            return Err(GdrError::ShapeError(format!(
                "cond dim {} for model d_t={}",
                cond.dim(),
                self.dims.d_t
            )));
        }
        Ok(())
    }

    /// Predicted output sequence for a noisy latent at `step`.
    pub fn forward(&self, z: &LatentSeq, step: usize, cond: &CondSeq) -> Result<LatentSeq> {
        self.check_shapes(z, cond)?;
        let out = match self.arch {
            Arch::SeqAttn => seq_attn::forward(self, z.frames(), step, cond).0,
            Arch::PooledMlp => pooled_mlp::forward(self, z.frames(), step, cond).0,
        };
        LatentSeq::new(out)
    }

    /// Squared error of one example; accumulates d(scale·err)/dθ into `grad`.
    fn example_grad(&self, ex: &TrainExample, scale: f64, grad: &mut [f64]) -> Result<f64> {
        let input = match &ex.input {
            ExampleInput::Latent(z) => z.clone(),
            ExampleInput::Mask => self.mask_seq()?,
        };
        self.check_shapes(&input, &ex.cond)?;
        if ex.target.dim() != self.dims.d_a || ex.target.len() != input.len() {
            return Err(GdrError::ShapeError(format!(
                "target {}x{} for input {}x{}",
                ex.target.len(),
                ex.target.dim(),
                input.len(),
                input.dim()
            )));
        }
        let (out, dz) = match self.arch {
            Arch::SeqAttn => {
                let (out, cache) = seq_attn::forward(self, input.frames(), ex.step, &ex.cond);
                let (dout, err) = residual_grad(&out, &ex.target, scale);
                (err, seq_attn::backward(self, &cache, &dout, grad))
            }
            Arch::PooledMlp => {
                let (out, cache) = pooled_mlp::forward(self, input.frames(), ex.step, &ex.cond);
                let (dout, err) = residual_grad(&out, &ex.target, scale);
                (err, pooled_mlp::backward(self, &cache, &dout, grad))
            }
        };
        if matches!(ex.input, ExampleInput::Mask) {
            let r = self.layout.range("mask");
            linalg::add_into(&mut grad[r], dz.data());
        }
        Ok(out)
    }
}

/// Returns (scale·2·(out − target), Σ(out − target)²).
fn residual_grad(out: &Mat, target: &LatentSeq, scale: f64) -> (Mat, f64) {
    let mut d = out.clone();
    let mut err = 0.0;
    for (v, t) in d.data_mut().iter_mut().zip(target.data()) {
        let r = *v - t;
        err += r * r;
        *v = 2.0 * scale * r;
    }
    (d, err)
}

impl Denoiser for DenoiserModel {
    fn predict(&self, z: &LatentSeq, step: usize, cond: &CondSeq) -> Result<LatentSeq> {
        self.forward(z, step, cond)
    }

    fn prediction(&self) -> Prediction {
        self.meta.prediction
    }

    fn mask_frames(&self) -> Option<LatentSeq> {
        self.mask_seq().ok()
    }

    fn latent_dim(&self) -> usize {
        self.dims.d_a
    }

    fn cond_dim(&self) -> usize {
        self.dims.d_t
    }
}

const CHUNK: usize = 8;

/// Mean squared error over every element of the batch and its gradient.
///
/// Items are processed in fixed chunks whose partial sums are reduced in
/// order, so results do not depend on the number of worker threads.
pub fn loss_and_grad(model: &DenoiserModel, batch: &[TrainExample]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(GdrError::EmptyInput("empty batch".into()));
    }
    let elements: usize = batch.iter().map(|ex| ex.target.len() * ex.target.dim()).sum();
    let scale = 1.0 / elements as f64;
    let partials: Vec<Result<(f64, Vec<f64>)>> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grad = vec![0.0; model.param_count()];
            let mut err = 0.0;
            for ex in chunk {
                err += model.example_grad(ex, scale, &mut grad)?;
            }
            Ok((err, grad))
        })
        .collect();
    let mut total = 0.0;
    let mut grad = vec![0.0; model.param_count()];
    for p in partials {
        let (e, g) = p?;
        total += e;
        linalg::add_into(&mut grad, &g);
    }
    Ok((total * scale, grad))
}

/// Loss only; same reduction order as [`loss_and_grad`].
pub fn batch_loss(model: &DenoiserModel, batch: &[TrainExample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(GdrError::EmptyInput("empty batch".into()));
    }
    let mut err = 0.0;
    let mut elements = 0usize;
    for ex in batch {
        let input = match &ex.input {
            ExampleInput::Latent(z) => z.clone(),
            ExampleInput::Mask => model.mask_seq()?,
        };
        let out = model.forward(&input, ex.step, &ex.cond)?;
        err += out
            .data()
            .iter()
            .zip(ex.target.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>();
        elements += ex.target.len() * ex.target.dim();
    }
    Ok(err / elements as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentError {
    pub segment: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub arch: Arch,
    pub param_count: usize,
    pub max_rel_err: f64,
    pub worst_segment: String,
    pub worst_index: usize,
    pub per_segment: Vec<SegmentError>,
    pub tolerance: f64,
    pub passed: bool,
}

pub const GRAD_CHECK_STEP: f64 = 1e-3;
pub const GRAD_CHECK_MAX_PARAMS: usize = 50_000;

fn random_batch(model: &DenoiserModel, rng: &mut SeededRng) -> Result<Vec<TrainExample>> {
    let d = model.dims;
    let len = if d.mask_len > 0 { d.mask_len } else { 3 };
    let mut batch = Vec::new();
    for k in 0..3 {
        let z = LatentSeq::new(crate::numerics::gaussian_mat(rng, len, d.d_a))?;
        let target = LatentSeq::new(crate::numerics::gaussian_mat(rng, len, d.d_a))?;
        let cond = if k == 2 {
            CondSeq::null(d.d_t)
        } else {
            CondSeq::new(crate::numerics::gaussian_mat(rng, 2, d.d_t))?
        };
        batch.push(TrainExample {
            input: ExampleInput::Latent(z),
            step: 1 + rng.below(50),
            target,
            cond,
        });
    }
    if d.mask_len > 0 {
        let target = LatentSeq::new(crate::numerics::gaussian_mat(rng, len, d.d_a))?;
        batch.push(TrainExample {
            input: ExampleInput::Mask,
            step: 1,
            target,
            cond: CondSeq::new(crate::numerics::gaussian_mat(rng, 2, d.d_t))?,
        });
    }
    Ok(batch)
}

/// Compares analytic gradients with central differences (step
/// [`GRAD_CHECK_STEP`], five-point stencil) on a random batch.
pub fn grad_check(model: &DenoiserModel, tolerance: f64, rng: &mut SeededRng) -> Result<GradientReport> {
    if model.param_count() > GRAD_CHECK_MAX_PARAMS {
        return Err(GdrError::InvalidSpec(format!(
            "{} parameters exceed the finite-difference limit of {GRAD_CHECK_MAX_PARAMS}",
            model.param_count()
        )));
    }
    let batch = random_batch(model, rng)?;
    let (_, analytic) = loss_and_grad(model, &batch)?;
    let mut probe = model.clone();
    let mut rel = vec![0.0; model.param_count()];
    for i in 0..model.param_count() {
        let orig = model.params[i];
        let mut at = |offset: f64| -> Result<f64> {
            probe.params[i] = orig + offset * GRAD_CHECK_STEP;
            batch_loss(&probe, &batch)
        };
        // five-point central stencil, O(h⁴) truncation error
        let near = at(1.0)? - at(-1.0)?;
        let far = at(2.0)? - at(-2.0)?;
        probe.params[i] = orig;
        let fd = (8.0 * near - far) / (12.0 * GRAD_CHECK_STEP);
        let ga = analytic[i];
        rel[i] = (ga - fd).abs() / (ga.abs() + fd.abs()).max(1e-8);
    }
    let (worst_index, max_rel_err) =
        rel.iter()
            .copied()
            .enumerate()
            .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    let per_segment = model
        .layout
        .segments()
        .iter()
        .map(|s| SegmentError {
            segment: s.name.clone(),
            max_rel_err: rel[s.range()].iter().copied().fold(0.0, f64::max),
        })
        .collect();
    Ok(GradientReport {
        arch: model.arch,
        param_count: model.param_count(),
        max_rel_err,
        worst_segment: model
            .layout
            .locate(worst_index)
            .map(|s| s.name.clone())
            .unwrap_or_default(),
        worst_index,
        per_segment,
        tolerance,
        passed: max_rel_err <= tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gaussian_mat;

    fn tiny(arch: Arch) -> DenoiserModel {
        let dims = Dims {
            d_time: 8,
            ..Dims::new(4, 4, 8)
        };
        init_model(arch, dims, 3).unwrap()
    }

    fn rand_seq(rng: &mut SeededRng, t: usize, d: usize) -> LatentSeq {
        LatentSeq::new(gaussian_mat(rng, t, d)).unwrap()
    }

    fn rand_cond(rng: &mut SeededRng, l: usize, d: usize) -> CondSeq {
        CondSeq::new(gaussian_mat(rng, l, d)).unwrap()
    }

    #[test]
    fn constant_model_ignores_its_inputs() {
        let bias = [0.5, -1.0, 2.0];
        for arch in [Arch::SeqAttn, Arch::PooledMlp] {
            let m = constant_model(arch, Dims::new(3, 2, 4), &bias, Prediction::Epsilon).unwrap();
            assert_eq!(m.meta().prediction, Prediction::Epsilon);
            let mut rng = SeededRng::new(1, 0);
            let z = LatentSeq::new(gaussian_mat(&mut rng, 5, 3)).unwrap();
            let c = CondSeq::new(gaussian_mat(&mut rng, 2, 2)).unwrap();
            let out = m.forward(&z, 17, &c).unwrap();
            for row in out.frames().row_iter() {
                assert_eq!(row, &bias);
            }
        }
        assert!(constant_model(Arch::SeqAttn, Dims::new(3, 2, 4), &[1.0], Prediction::Sample).is_err());
    }

    #[test]
    fn pooled_mlp_param_count_matches_layout_formula() {
        let m = init_model(Arch::PooledMlp, Dims::new(32, 16, 256), 0).unwrap();
        assert_eq!(m.param_count(), (32 + 16 + 32) * 256 + 256 + 256 * 32 + 32);
    }

    #[test]
    fn init_is_deterministic_and_guards_dims() {
        let a = init_model(Arch::SeqAttn, Dims::new(8, 4, 16), 9).unwrap();
        let b = init_model(Arch::SeqAttn, Dims::new(8, 4, 16), 9).unwrap();
        assert_eq!(a.params(), b.params());
        assert!(matches!(
            init_model(Arch::PooledMlp, Dims::new(8, 4, 0), 9),
            Err(GdrError::InvalidSpec(_))
        ));
    }

    #[test]
    fn timestep_embedding_distinct_per_step() {
        let embs: Vec<_> = (1..=1000).map(|t| timestep_embedding(t, 32)).collect();
        for i in 0..embs.len() {
            for j in (i + 1)..embs.len().min(i + 60) {
                assert_ne!(embs[i], embs[j]);
            }
        }
    }

    #[test]
    fn zero_params_give_zero_output() {
        for arch in [Arch::SeqAttn, Arch::PooledMlp] {
            let m = tiny(arch);
            let zero =
                DenoiserModel::from_params(arch, m.dims, vec![0.0; m.param_count()], ModelMeta::default()).unwrap();
            let mut rng = SeededRng::new(1, 0);
            let out = zero
                .forward(&rand_seq(&mut rng, 5, 4), 7, &rand_cond(&mut rng, 2, 4))
                .unwrap();
            assert!(out.data().iter().all(|&v| v == 0.0));
            assert_eq!(out.len(), 5);
        }
    }

    #[test]
    fn null_condition_bypasses_the_conditioning_path() {
        for arch in [Arch::SeqAttn, Arch::PooledMlp] {
            let m = tiny(arch);
            let mut rng = SeededRng::new(2, 0);
            let z = rand_seq(&mut rng, 3, 4);
            let base = m.forward(&z, 5, &CondSeq::null(4)).unwrap();
            // Cutting the cond pathway out of the weights must reproduce the null output.
            let mut p = m.params().to_vec();
            match arch {
                Arch::SeqAttn => p[m.layout.range("attn.o")].iter_mut().for_each(|v| *v = 0.0),
                Arch::PooledMlp => {
                    let d = m.dims;
                    let cols = d.d_a + d.d_time + d.d_t;
                    let r = m.layout.range("hidden.w");
                    for row in p[r].chunks_exact_mut(cols) {
                        row[d.d_a + d.d_time..].iter_mut().for_each(|v| *v = 0.0);
                    }
                }
            }
            let cut = DenoiserModel::from_params(arch, m.dims, p, ModelMeta::default()).unwrap();
            for _ in 0..3 {
                let c = rand_cond(&mut rng, 2, 4);
                assert_eq!(cut.forward(&z, 5, &c).unwrap(), base);
                assert_ne!(m.forward(&z, 5, &c).unwrap(), base);
            }
        }
    }

    #[test]
    fn forward_is_deterministic_and_checks_shapes() {
        let m = tiny(Arch::SeqAttn);
        let mut rng = SeededRng::new(4, 0);
        let z = rand_seq(&mut rng, 3, 4);
        let c = rand_cond(&mut rng, 2, 4);
        assert_eq!(m.forward(&z, 3, &c).unwrap(), m.forward(&z, 3, &c).unwrap());
        let wrong = rand_seq(&mut rng, 3, 5);
        assert!(matches!(m.forward(&wrong, 3, &c), Err(GdrError::ShapeError(_))));
        let wrong_c = rand_cond(&mut rng, 2, 3);
        assert!(matches!(m.forward(&z, 3, &wrong_c), Err(GdrError::ShapeError(_))));
    }

    #[test]
    fn seq_attn_is_permutation_equivariant_in_tokens() {
        let m = tiny(Arch::SeqAttn);
        let mut rng = SeededRng::new(5, 0);
        let z = rand_seq(&mut rng, 4, 4);
        let c = rand_cond(&mut rng, 3, 4);
        let perm = c.select(&[2, 0, 1]).unwrap();
        let a = m.forward(&z, 9, &c).unwrap();
        let b = m.forward(&z, 9, &perm).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_model_loss_is_mean_square_of_targets() {
        let m = tiny(Arch::SeqAttn);
        let zero = DenoiserModel::from_params(Arch::SeqAttn, m.dims, vec![0.0; m.param_count()], ModelMeta::default())
            .unwrap();
        let mut rng = SeededRng::new(6, 0);
        let batch: Vec<_> = (0..4)
            .map(|_| TrainExample {
                input: ExampleInput::Latent(rand_seq(&mut rng, 3, 4)),
                step: 2,
                target: rand_seq(&mut rng, 3, 4),
                cond: rand_cond(&mut rng, 2, 4),
            })
            .collect();
        let expected: f64 = batch
            .iter()
            .flat_map(|ex| ex.target.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            / 48.0;
        let (loss, _) = loss_and_grad(&zero, &batch).unwrap();
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn duplicating_batch_leaves_loss_and_grad_unchanged() {
        let m = tiny(Arch::PooledMlp);
        let mut rng = SeededRng::new(7, 0);
        let batch = random_batch(&m, &mut rng).unwrap();
        let doubled: Vec<_> = batch.iter().chain(batch.iter()).cloned().collect();
        let (l1, g1) = loss_and_grad(&m, &batch).unwrap();
        let (l2, g2) = loss_and_grad(&m, &doubled).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_check_passes_for_both_archs() {
        for arch in [Arch::SeqAttn, Arch::PooledMlp] {
            let m = tiny(arch);
            let report = grad_check(&m, 1e-4, &mut SeededRng::new(11, 0)).unwrap();
            assert!(report.passed, "{arch}: {report:?}");
        }
    }

    #[test]
    fn grad_check_covers_mask_frames() {
        let dims = Dims {
            d_time: 8,
            ..Dims::new(4, 4, 8)
        }
        .with_mask(3);
        let mut m = init_model(Arch::SeqAttn, dims, 1).unwrap();
        // nonzero mask so the input path is exercised
        let r = m.layout.range("mask");
        let mut p = m.params().to_vec();
        for (k, v) in p[r].iter_mut().enumerate() {
            *v = 0.1 * k as f64 - 0.4;
        }
        m.set_params(&p).unwrap();
        let report = grad_check(&m, 1e-4, &mut SeededRng::new(12, 0)).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn grad_check_with_zero_tolerance_fails() {
        let m = tiny(Arch::SeqAttn);
        let report = grad_check(&m, 0.0, &mut SeededRng::new(11, 0)).unwrap();
        assert!(!report.passed);
        assert!(!report.worst_segment.is_empty());
    }

    #[test]
    fn loss_is_zero_for_exact_reproduction() {
        let m = tiny(Arch::SeqAttn);
        let mut rng = SeededRng::new(8, 0);
        let z = rand_seq(&mut rng, 3, 4);
        let c = rand_cond(&mut rng, 2, 4);
        let target = m.forward(&z, 4, &c).unwrap();
        let batch = vec![TrainExample {
            input: ExampleInput::Latent(z),
            step: 4,
            target,
            cond: c,
        }];
        let (loss, grad) = loss_and_grad(&m, &batch).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }
}

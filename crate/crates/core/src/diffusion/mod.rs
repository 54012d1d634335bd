//! Noise schedules, the forward corruption process, guided DDIM sampling with
//! negative prompting, and DDIM inversion/editing.

mod train;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, Prediction};
use crate::error::{GdrError, Result};
use crate::latentdata::{CondSeq, LatentSeq};
use crate::numerics::{gaussian_mat, Mat, SeededRng};

pub use train::{lr_at, train, AdamConfig, LogEntry, Objective, TrainConfig, TrainReport};

/// Linear β schedule with cumulative products ᾱ_τ = ∏_{s≤τ}(1 − β_s).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

pub fn build_schedule(n: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if n < 2 {
        return Err(GdrError::InvalidSchedule(format!("need at least 2 steps, got {n}")));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(GdrError::InvalidSchedule(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let beta: Vec<f64> = (0..n)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (n - 1) as f64)
        .collect();
    let mut alpha_bar = Vec::with_capacity(n);
    let mut acc = 1.0;
    for b in &beta {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { beta, alpha_bar })
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        build_schedule(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// β_τ for τ in 1..=N.
    pub fn beta(&self, step: usize) -> f64 {
        self.beta[step - 1]
    }

    /// ᾱ_τ with ᾱ_0 = 1.
    pub fn alpha_bar(&self, step: usize) -> f64 {
        if step == 0 {
            1.0
        } else {
            self.alpha_bar[step - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_step(&self, step: usize, allow_zero: bool) -> Result<()> {
        if step > self.steps() || (!allow_zero && step == 0) {
            return Err(GdrError::InvalidStep(format!(
                "step {step} outside {}..={}",
                if allow_zero { 0 } else { 1 },
                self.steps()
            )));
        }
        Ok(())
    }

    /// Short stable digest of the β table.
    pub fn digest(&self) -> String {
        let mut bytes = Vec::with_capacity(self.beta.len() * 8);
        for b in &self.beta {
            bytes.extend_from_slice(&b.to_le_bytes());
        }
        format!("linear-{}-{:08x}", self.steps(), crc32fast::hash(&bytes))
    }
}

fn same_shape(a: &LatentSeq, b: &LatentSeq) -> Result<()> {
    if a.len() != b.len() || a.dim() != b.dim() {
        return Err(GdrError::ShapeError(format!(
            "{}x{} vs {}x{}",
            a.len(),
            a.dim(),
            b.len(),
            b.dim()
        )));
    }
    Ok(())
}

/// out = a·x + b·y, elementwise.
fn affine(x: &LatentSeq, a: f64, y: &LatentSeq, b: f64) -> LatentSeq {
    let data: Vec<f64> = x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect();
    LatentSeq::new(Mat::new(x.len(), x.dim(), data).expect("finite affine combination")).expect("non-empty")
}

/// z_τ = √ᾱ_τ·z₀ + √(1−ᾱ_τ)·ε
pub fn add_noise(z0: &LatentSeq, step: usize, eps: &LatentSeq, sched: &NoiseSchedule) -> Result<LatentSeq> {
    sched.check_step(step, false)?;
    same_shape(z0, eps)?;
    let ab = sched.alpha_bar(step);
    Ok(affine(z0, ab.sqrt(), eps, (1.0 - ab).sqrt()))
}

/// Guidance strength plus positive and negative conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceSpec {
    pub w: f64,
    pub positive: CondSeq,
    pub negative: CondSeq,
}

impl GuidanceSpec {
    /// Classifier-free guidance: the negative branch is the null sequence.
    pub fn cfg(positive: CondSeq, w: f64) -> Self {
        let negative = CondSeq::null(positive.dim());
        Self { w, positive, negative }
    }

    pub fn negative(positive: CondSeq, negative: CondSeq, w: f64) -> Self {
        Self { w, positive, negative }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.w.is_finite() || self.w < 0.0 {
            return Err(GdrError::InvalidSpec(format!(
                "guidance strength {} must be finite and >= 0",
                self.w
            )));
        }
        if self.positive.dim() != self.negative.dim() {
            return Err(GdrError::ShapeError(
                "positive and negative conditioning dims differ".into(),
            ));
        }
        Ok(())
    }
}

/// (1+w)·G(z, τ, positive) − w·G(z, τ, negative), evaluated as
/// `pos + w·(pos − neg)` so that w = 0 and positive = negative both return the
/// positive prediction bit for bit.
pub fn guided_prediction<D: Denoiser + ?Sized>(
    model: &D,
    z: &LatentSeq,
    step: usize,
    g: &GuidanceSpec,
) -> Result<LatentSeq> {
    g.validate()?;
    let pos = model.predict(z, step, &g.positive)?;
    if g.w == 0.0 {
        return Ok(pos);
    }
    let neg = model.predict(z, step, &g.negative)?;
    let data: Vec<f64> = pos
        .data()
        .iter()
        .zip(neg.data())
        .map(|(p, n)| p + g.w * (p - n))
        .collect();
    LatentSeq::new(Mat::new(pos.len(), pos.dim(), data)?)
}

/// Converts a raw network output at `step` into (ẑ₀, ε̂).
fn split_prediction(
    kind: Prediction,
    out: LatentSeq,
    z: &LatentSeq,
    step: usize,
    sched: &NoiseSchedule,
) -> (LatentSeq, LatentSeq) {
    let ab = sched.alpha_bar(step);
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    match kind {
        Prediction::Epsilon => {
            let x0 = affine(z, 1.0 / sa, &out, -sn / sa);
            (x0, out)
        }
        Prediction::Sample | Prediction::Regression => {
            let eps = affine(z, 1.0 / sn, &out, -sa / sn);
            (out, eps)
        }
    }
}

/// Deterministic DDIM move between two noise levels sharing ẑ₀:
/// ε̂ = (z − √ᾱ_from·ẑ₀)/√(1−ᾱ_from), out = √ᾱ_to·ẑ₀ + √(1−ᾱ_to)·ε̂.
pub fn ddim_step(z: &LatentSeq, x0: &LatentSeq, from: usize, to: usize, sched: &NoiseSchedule) -> Result<LatentSeq> {
    if from == 0 {
        return Err(GdrError::InvalidStep(
            "cannot step from the clean level with a sample prediction".into(),
        ));
    }
    if from == to {
        return Err(GdrError::InvalidStep(format!("from and to are both {from}")));
    }
    sched.check_step(from, false)?;
    sched.check_step(to, true)?;
    same_shape(z, x0)?;
    let af = sched.alpha_bar(from);
    let eps = affine(z, 1.0 / (1.0 - af).sqrt(), x0, -(af / (1.0 - af)).sqrt());
    let at = sched.alpha_bar(to);
    Ok(affine(x0, at.sqrt(), &eps, (1.0 - at).sqrt()))
}

/// The same move parameterized by ε̂, which stays defined at `from = 0`:
/// ẑ₀ = (z − √(1−ᾱ_from)·ε̂)/√ᾱ_from, out = √ᾱ_to·ẑ₀ + √(1−ᾱ_to)·ε̂.
pub fn ddim_step_eps(
    z: &LatentSeq,
    eps: &LatentSeq,
    from: usize,
    to: usize,
    sched: &NoiseSchedule,
) -> Result<LatentSeq> {
    if from == to {
        return Err(GdrError::InvalidStep(format!("from and to are both {from}")));
    }
    sched.check_step(from, true)?;
    sched.check_step(to, true)?;
    same_shape(z, eps)?;
    let af = sched.alpha_bar(from);
    let x0 = affine(z, 1.0 / af.sqrt(), eps, -((1.0 - af) / af).sqrt());
    let at = sched.alpha_bar(to);
    Ok(affine(&x0, at.sqrt(), eps, (1.0 - at).sqrt()))
}

/// Guided clean-latent estimate at `step`, whatever the model predicts.
pub fn predict_x0<D: Denoiser + ?Sized>(
    model: &D,
    z: &LatentSeq,
    step: usize,
    g: &GuidanceSpec,
    sched: &NoiseSchedule,
) -> Result<LatentSeq> {
    let out = guided_prediction(model, z, step, g)?;
    Ok(split_prediction(model.prediction(), out, z, step, sched).0)
}

/// Runs the guided DDIM chain from `z` at level `from` down to the clean level.
pub fn denoise<D: Denoiser + ?Sized>(
    model: &D,
    z: LatentSeq,
    from: usize,
    g: &GuidanceSpec,
    sched: &NoiseSchedule,
) -> Result<LatentSeq> {
    sched.check_step(from, true)?;
    let mut z = z;
    for step in (1..=from).rev() {
        let x0 = predict_x0(model, &z, step, g, sched)?;
        z = ddim_step(&z, &x0, step, step - 1, sched)?;
    }
    Ok(z)
}

/// Generates `n_q` clean latents of `len` frames. Query `j` starts from
/// Gaussian noise on stream `j` of `seed`. Regression models skip the chain
/// and return their guided prediction from the learned mask frames.
pub fn sample<D: Denoiser + ?Sized>(
    model: &D,
    g: &GuidanceSpec,
    n_q: usize,
    len: usize,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<LatentSeq>> {
    if n_q == 0 {
        return Err(GdrError::InvalidSpec("n_q must be at least 1".into()));
    }
    g.validate()?;
    if model.prediction() == Prediction::Regression {
        let mask = model
            .mask_frames()
            .ok_or_else(|| GdrError::ShapeError("regression model has no mask frames".into()))?;
        let out = guided_prediction(model, &mask, 1, g)?;
        return Ok(vec![out; n_q]);
    }
    (0..n_q)
        .into_par_iter()
        .map(|j| {
            let mut rng = SeededRng::new(seed, j as u64);
            let z = LatentSeq::new(gaussian_mat(&mut rng, len, model.latent_dim()))?;
            denoise(model, z, sched.steps(), g, sched)
        })
        .collect()
}

/// DDIM inversion: lifts a clean latent to level `k` using unguided
/// predictions evaluated one level behind (at max(τ−1, 1)).
pub fn invert<D: Denoiser + ?Sized>(
    model: &D,
    z0: &LatentSeq,
    cond: &CondSeq,
    k: usize,
    sched: &NoiseSchedule,
) -> Result<LatentSeq> {
    if k == 0 || k > sched.steps() {
        return Err(GdrError::InvalidStep(format!(
            "inversion depth {k} outside 1..={}",
            sched.steps()
        )));
    }
    let mut z = z0.clone();
    for step in 1..=k {
        let eval_at = (step - 1).max(1);
        let out = model.predict(&z, eval_at, cond)?;
        let (_, eps) = split_prediction(model.prediction(), out, &z, eval_at, sched);
        z = ddim_step_eps(&z, &eps, step - 1, step, sched)?;
    }
    Ok(z)
}

/// Inverts `z0` under `source` conditioning for `k` levels, then re-denoises
/// from that pivot under the new guidance.
pub fn edit<D: Denoiser + ?Sized>(
    model: &D,
    z0: &LatentSeq,
    source: &CondSeq,
    new: &GuidanceSpec,
    k: usize,
    sched: &NoiseSchedule,
) -> Result<LatentSeq> {
    let pivot = invert(model, z0, source, k, sched)?;
    denoise(model, pivot, k, new, sched)
}

/// Test double whose output ignores its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantDenoiser {
    pub output: LatentSeq,
    pub cond_dim: usize,
    pub kind: Prediction,
}

impl Denoiser for ConstantDenoiser {
    fn predict(&self, z: &LatentSeq, _step: usize, cond: &CondSeq) -> Result<LatentSeq> {
        if z.dim() != self.output.dim() || cond.dim() != self.cond_dim {
            return Err(GdrError::ShapeError("constant model dims".into()));
        }
        Ok(self.output.clone())
    }

    fn prediction(&self) -> Prediction {
        self.kind
    }

    fn latent_dim(&self) -> usize {
        self.output.dim()
    }

    fn cond_dim(&self) -> usize {
        self.cond_dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{init_model, Arch, Dims};
    use crate::numerics::gaussian_mat;

    fn seq(rng: &mut SeededRng, t: usize, d: usize) -> LatentSeq {
        LatentSeq::new(gaussian_mat(rng, t, d)).unwrap()
    }

    fn max_rel(a: &LatentSeq, b: &LatentSeq) -> f64 {
        let num: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        num / crate::numerics::norm(b.data()).max(1e-300)
    }

    #[test]
    fn two_step_schedule_by_hand() {
        let s = build_schedule(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn default_schedule_is_monotone() {
        let s = NoiseSchedule::default();
        assert_eq!(s.steps(), 50);
        assert!(s.betas().windows(2).all(|w| w[0] < w[1]));
        assert!(s.alpha_bars().windows(2).all(|w| w[0] > w[1]));
        let last = s.alpha_bar(50);
        assert!(last > 0.0 && last < 1.0);
    }

    #[test]
    fn schedule_guards() {
        assert!(matches!(build_schedule(1, 0.1, 0.2), Err(GdrError::InvalidSchedule(_))));
        assert!(matches!(build_schedule(5, 0.0, 0.2), Err(GdrError::InvalidSchedule(_))));
        assert!(matches!(build_schedule(5, 0.3, 0.2), Err(GdrError::InvalidSchedule(_))));
        assert!(matches!(build_schedule(5, 0.1, 1.0), Err(GdrError::InvalidSchedule(_))));
    }

    #[test]
    fn add_noise_limits() {
        let s = build_schedule(10, 1e-9, 1e-8).unwrap();
        let mut rng = SeededRng::new(0, 0);
        let z0 = seq(&mut rng, 4, 3);
        let eps = seq(&mut rng, 4, 3);
        assert!(max_rel(&add_noise(&z0, 1, &eps, &s).unwrap(), &z0) < 1e-4);
        let zero = LatentSeq::zeros(4, 3);
        let s = NoiseSchedule::default();
        let out = add_noise(&z0, 30, &zero, &s).unwrap();
        let expect = affine(&z0, s.alpha_bar(30).sqrt(), &zero, 0.0);
        assert_eq!(out, expect);
        assert!(matches!(add_noise(&z0, 0, &eps, &s), Err(GdrError::InvalidStep(_))));
        assert!(matches!(
            add_noise(&z0, 3, &seq(&mut rng, 2, 3), &s),
            Err(GdrError::ShapeError(_))
        ));
    }

    #[test]
    fn add_noise_variance_matches_schedule() {
        let s = NoiseSchedule::default();
        let z0 = LatentSeq::zeros(1, 1);
        let mut rng = SeededRng::new(1, 0);
        for step in [5, 25, 50] {
            let n = 10_000;
            let vals: Vec<f64> = (0..n)
                .map(|_| add_noise(&z0, step, &seq(&mut rng, 1, 1), &s).unwrap().data()[0])
                .collect();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let expect = 1.0 - s.alpha_bar(step);
            assert!((var / expect - 1.0).abs() < 0.05, "step {step}: {var} vs {expect}");
        }
    }

    #[test]
    fn ddim_step_to_clean_returns_prediction() {
        let s = NoiseSchedule::default();
        let mut rng = SeededRng::new(2, 0);
        let z = seq(&mut rng, 3, 4);
        let x0 = seq(&mut rng, 3, 4);
        assert_eq!(ddim_step(&z, &x0, 7, 0, &s).unwrap(), x0);
    }

    #[test]
    fn ddim_down_then_up_is_identity() {
        let s = NoiseSchedule::default();
        let mut rng = SeededRng::new(3, 0);
        let z = seq(&mut rng, 3, 4);
        let x0 = seq(&mut rng, 3, 4);
        for (a, b) in [(10, 9), (40, 3), (2, 1), (5, 30)] {
            let there = ddim_step(&z, &x0, a, b, &s).unwrap();
            let back = if b == 0 {
                unreachable!()
            } else {
                ddim_step(&there, &x0, b, a, &s).unwrap()
            };
            assert!(max_rel(&back, &z) < 1e-10, "{a}->{b}");
        }
    }

    #[test]
    fn ddim_step_hand_computed_on_two_step_schedule() {
        // ẑ₀ = z: ε̂ = z(1 − √0.72)/√0.28, out = √0.9·z + √0.1·ε̂
        let s = build_schedule(2, 0.1, 0.2).unwrap();
        let z = LatentSeq::new(Mat::from_rows(&[[1.0, -2.0]]).unwrap()).unwrap();
        let out = ddim_step(&z, &z, 2, 1, &s).unwrap();
        let factor = 0.9f64.sqrt() + 0.1f64.sqrt() * (1.0 - 0.72f64.sqrt()) / 0.28f64.sqrt();
        assert!((out.data()[0] - factor).abs() < 1e-12);
        assert!((out.data()[1] + 2.0 * factor).abs() < 1e-12);
        assert!(matches!(ddim_step(&z, &z, 0, 1, &s), Err(GdrError::InvalidStep(_))));
        assert!(matches!(ddim_step(&z, &z, 1, 1, &s), Err(GdrError::InvalidStep(_))));
        assert!(matches!(ddim_step(&z, &z, 1, 3, &s), Err(GdrError::InvalidStep(_))));
    }

    fn tiny_model() -> crate::denoiser::DenoiserModel {
        init_model(Arch::SeqAttn, Dims::new(4, 3, 8), 5).unwrap()
    }

    #[test]
    fn cfg_identities() {
        let m = tiny_model();
        let mut rng = SeededRng::new(4, 0);
        let z = seq(&mut rng, 3, 4);
        let pos = CondSeq::new(gaussian_mat(&mut rng, 2, 3)).unwrap();
        let neg = CondSeq::new(gaussian_mat(&mut rng, 1, 3)).unwrap();
        let cond = m.forward(&z, 6, &pos).unwrap();

        let g0 = GuidanceSpec::negative(pos.clone(), neg.clone(), 0.0);
        assert_eq!(guided_prediction(&m, &z, 6, &g0).unwrap(), cond);

        for w in [0.5, 3.0, 17.0] {
            let same = GuidanceSpec::negative(pos.clone(), pos.clone(), w);
            assert_eq!(guided_prediction(&m, &z, 6, &same).unwrap(), cond);

            let g = GuidanceSpec::cfg(pos.clone(), w);
            let unc = m.forward(&z, 6, &CondSeq::null(3)).unwrap();
            let manual: Vec<f64> = cond
                .data()
                .iter()
                .zip(unc.data())
                .map(|(c, u)| c + w * (c - u))
                .collect();
            assert_eq!(guided_prediction(&m, &z, 6, &g).unwrap().data(), &manual[..]);
        }
        let bad = GuidanceSpec::cfg(pos, -1.0);
        assert!(guided_prediction(&m, &z, 6, &bad).is_err());
    }

    #[test]
    fn constant_sample_model_samples_its_constant() {
        let mut rng = SeededRng::new(5, 0);
        let c0 = seq(&mut rng, 4, 3);
        let m = ConstantDenoiser {
            output: c0.clone(),
            cond_dim: 2,
            kind: Prediction::Sample,
        };
        let g = GuidanceSpec::cfg(CondSeq::new(gaussian_mat(&mut rng, 2, 2)).unwrap(), 2.0);
        for seed in [0, 1, 99] {
            let out = sample(&m, &g, 3, 4, &NoiseSchedule::default(), seed).unwrap();
            assert_eq!(out.len(), 3);
            assert!(out.iter().all(|s| *s == c0));
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let m = tiny_model();
        let mut rng = SeededRng::new(6, 0);
        let g = GuidanceSpec::cfg(CondSeq::new(gaussian_mat(&mut rng, 2, 3)).unwrap(), 1.5);
        let s = NoiseSchedule::default();
        let a = sample(&m, &g, 3, 5, &s, 42).unwrap();
        let b = sample(&m, &g, 3, 5, &s, 42).unwrap();
        let c = sample(&m, &g, 3, 5, &s, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a[0], a[1]);
        assert!(sample(&m, &g, 0, 5, &s, 42).is_err());
    }

    fn eps_constant(rng: &mut SeededRng) -> ConstantDenoiser {
        ConstantDenoiser {
            output: seq(rng, 4, 3),
            cond_dim: 2,
            kind: Prediction::Epsilon,
        }
    }

    #[test]
    fn invert_then_denoise_is_exact_for_input_independent_predictions() {
        let s = NoiseSchedule::default();
        let mut rng = SeededRng::new(7, 0);
        let m = eps_constant(&mut rng);
        let cond = CondSeq::new(gaussian_mat(&mut rng, 2, 2)).unwrap();
        let z0 = seq(&mut rng, 4, 3);
        for k in [1, 20, 50] {
            let pivot = invert(&m, &z0, &cond, k, &s).unwrap();
            let back = denoise(&m, pivot, k, &GuidanceSpec::cfg(cond.clone(), 0.0), &s).unwrap();
            assert!(max_rel(&back, &z0) <= 1e-9, "k={k}: {}", max_rel(&back, &z0));
        }
        assert!(matches!(invert(&m, &z0, &cond, 0, &s), Err(GdrError::InvalidStep(_))));
        assert!(matches!(invert(&m, &z0, &cond, 51, &s), Err(GdrError::InvalidStep(_))));
    }

    #[test]
    fn edit_with_original_conditioning_round_trips() {
        let s = NoiseSchedule::default();
        let mut rng = SeededRng::new(8, 0);
        let m = eps_constant(&mut rng);
        let cond = CondSeq::new(gaussian_mat(&mut rng, 2, 2)).unwrap();
        let z0 = seq(&mut rng, 4, 3);
        let out = edit(&m, &z0, &cond, &GuidanceSpec::cfg(cond.clone(), 0.0), 20, &s).unwrap();
        assert!(max_rel(&out, &z0) <= 1e-9);
    }

    #[test]
    fn first_inversion_step_is_defined_at_the_clean_level() {
        let s = NoiseSchedule::default();
        let m = tiny_model();
        let mut rng = SeededRng::new(9, 0);
        let z0 = seq(&mut rng, 3, 4);
        let cond = CondSeq::new(gaussian_mat(&mut rng, 2, 3)).unwrap();
        let z1 = invert(&m, &z0, &cond, 1, &s).unwrap();
        assert!(z1.data().iter().all(|v| v.is_finite()));
    }
}

//! Structure-to-detail edit control.
//!
//! The source latent is inverted under the source prompt while recording the
//! hooked attention values. Denoising under the target prompt then runs `T`
//! structuring steps (`i = N … N−T+1`), each followed by the mask-guided latent
//! blend `M∘Z̃ + (1−M)∘Z_src(t)`, and `N−T` detailing steps (`j = N−T … 1`)
//! whose hooked image values are blended with the cached source values.

mod sweep;

use serde::{Deserialize, Serialize};

pub use sweep::{
    ablation_sweep, salt_and_pepper, RobustnessRow, SweepConfig, SweepItem, SweepReport, SweepRow, PAPER_T_GRID,
};

use crate::dit::{DiT, DiTVelocity, HookPlan, PromptTokens, ValueCache};
use crate::error::{Error, Result};
use crate::flow::{invert, rf_solver_step, LatentState, SourcePath, TimeGrid};
use crate::metrics::{psnr, ssim, ImagePair};
use crate::pasl::{area_pool, PaslModel};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    S2d,
    LatentOnly,
    ValueOnly,
    None,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::S2d => "s2d",
            Strategy::LatentOnly => "latent_only",
            Strategy::ValueOnly => "value_only",
            Strategy::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "s2d" => Ok(Strategy::S2d),
            "latent_only" => Ok(Strategy::LatentOnly),
            "value_only" => Ok(Strategy::ValueOnly),
            "none" => Ok(Strategy::None),
            other => Err(Error::Input(format!(
                "unknown strategy '{other}' (s2d | latent_only | value_only | none)"
            ))),
        }
    }

    fn latent_fusion(self) -> bool {
        matches!(self, Strategy::S2d | Strategy::LatentOnly)
    }

    fn value_fusion(self) -> bool {
        matches!(self, Strategy::S2d | Strategy::ValueOnly)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    Pasl,
    File,
    Manual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Continuous,
    /// Threshold at 0.5 after pooling.
    Binarized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditConfig {
    /// Total denoising steps.
    pub n: usize,
    /// Structuring steps before the stage shift.
    pub t: usize,
    /// Hooked tail blocks; must match the model.
    pub m: usize,
    pub strategy: Strategy,
    pub mask_source: MaskSource,
    pub mask_mode: MaskMode,
    pub seed: u64,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            n: 30,
            t: 3,
            m: 2,
            strategy: Strategy::S2d,
            mask_source: MaskSource::Pasl,
            mask_mode: MaskMode::Continuous,
            seed: 0,
        }
    }
}

/// Which steps fuse what, after resolving the strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    /// Steps `i > N − latent_steps` use latent fusion.
    pub latent_steps: usize,
    /// Steps `j ≤ value_until` use value fusion.
    pub value_until: usize,
}

impl EditConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Input("N must be at least 1".into()));
        }
        if self.t > self.n {
            return Err(Error::Input(format!("T = {} exceeds N = {}", self.t, self.n)));
        }
        Ok(())
    }

    pub fn plan(&self) -> StagePlan {
        StagePlan {
            latent_steps: if self.strategy.latent_fusion() { self.t } else { 0 },
            value_until: if self.strategy.value_fusion() { self.n - self.t } else { 0 },
        }
    }

    /// Canonical form: `s2d` at `T = N` is `latent_only`, at `T = 0` it is
    /// `value_only`. Normalisation never changes the plan.
    pub fn normalized(&self) -> Self {
        let strategy = match self.strategy {
            Strategy::S2d if self.t == self.n => Strategy::LatentOnly,
            Strategy::S2d if self.t == 0 => Strategy::ValueOnly,
            s => s,
        };
        Self { strategy, ..*self }
    }

    fn needs_mask(&self) -> bool {
        let p = self.plan();
        p.latent_steps > 0 || p.value_until > 0
    }
}

/// Role of a denoising step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRole {
    Structuring,
    Detailing,
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Time the step lands on.
    pub t: f64,
    pub role: StepRole,
    pub latent_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskStats {
    pub tokens: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// Share of tokens with `M ≥ 0.5`.
    pub coverage: f64,
}

impl MaskStats {
    pub fn of(m: &Tensor) -> Self {
        let d = m.data();
        let n = d.len().max(1) as f64;
        Self {
            tokens: d.len(),
            mean: d.iter().map(|&v| v as f64).sum::<f64>() / n,
            min: d.iter().fold(f64::INFINITY, |a, &v| a.min(v as f64)),
            max: d.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v as f64)),
            coverage: d.iter().filter(|&&v| v >= 0.5).count() as f64 / n,
        }
    }
}

/// Where the editing mask comes from.
pub enum MaskInput<'a> {
    /// PASL prediction on the source image for `prompt`.
    Pasl { model: &'a PaslModel<f32>, prompt: &'a str },
    /// A mask at any resolution whose side divides, or is divided by, the
    /// token grid side.
    Pixels(Tensor<f64>),
}

/// Resamples a square mask to `size × size` by area pooling (downsampling)
/// or cell replication (upsampling).
pub fn resample_mask(mask: &Tensor<f64>, size: usize) -> Result<Tensor<f64>> {
    let (h, w) = mask.shape2()?;
    if h != w {
        return Err(Error::Contract(format!("mask must be square, got {h}×{w}")));
    }
    if h % size == 0 {
        return area_pool(mask, size, size);
    }
    if size.is_multiple_of(h) {
        let f = size / h;
        return Ok(Tensor::from_fn([size, size], |i| {
            let (y, x) = (i / size, i % size);
            mask.data()[(y / f) * w + x / f]
        }));
    }
    Err(Error::Contract(format!(
        "mask side {h} is incompatible with the {size}×{size} token grid"
    )))
}

/// Row-wise `M∘a + (1−M)∘b` over `[L × C]` latents. Rows with `M = 1` copy
/// `a` and rows with `M = 0` copy `b` exactly.
pub fn fuse_latents(a: &Tensor, b: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("latent fusion: {:?} vs {:?}", a.dims(), b.dims())));
    }
    let (l, c) = a.shape2()?;
    if mask.len() != l {
        return Err(Error::Contract(format!("mask has {} entries, latent has {l} tokens", mask.len())));
    }
    let mut out = a.clone();
    let (od, bd) = (out.data_mut(), b.data());
    for r in 0..l {
        let w = mask.data()[r];
        let row = r * c..(r + 1) * c;
        if w == 1.0 {
            continue;
        }
        if w == 0.0 {
            od[row.clone()].copy_from_slice(&bd[row]);
            continue;
        }
        let w = w as f64;
        for k in row {
            od[k] = (w * od[k] as f64 + (1.0 - w) * bd[k] as f64) as f32;
        }
    }
    Ok(out)
}

/// Expands a token mask `[L]` to pixels `[H × W]`.
pub fn token_mask_to_pixels(mask: &Tensor, grid: usize, patch: usize) -> Result<Tensor<f64>> {
    if mask.len() != grid * grid {
        return Err(Error::Shape(format!("mask has {} entries, grid is {grid}×{grid}", mask.len())));
    }
    let s = grid * patch;
    Ok(Tensor::from_fn([s, s], |i| {
        let (y, x) = (i / s, i % s);
        mask.data()[(y / patch) * grid + x / patch] as f64
    }))
}

/// Editing state for one source image and prompt pair.
#[derive(Clone)]
pub struct EditSession<'a> {
    model: &'a DiT,
    pub config: EditConfig,
    pub source: Tensor,
    pub prompt_src: String,
    pub prompt_tgt: String,
    src_tokens: PromptTokens,
    tgt_tokens: PromptTokens,
    pub grid: TimeGrid,
    pub path: SourcePath,
    /// Editing mask on the token grid, `[L]`.
    pub mask: Option<Tensor>,
    pub cache: ValueCache,
    /// Highest step recorded in the cache.
    pub recorded_until: usize,
}

impl<'a> EditSession<'a> {
    /// Patchifies and inverts the source, recording values for the detailing
    /// steps the config needs.
    pub fn new(model: &'a DiT, source: &Tensor, prompt_src: &str, prompt_tgt: &str, config: EditConfig) -> Result<Self> {
        config.validate()?;
        let record = config.plan().value_until;
        Self::with_recording(model, source, prompt_src, prompt_tgt, config, record)
    }

    /// As [`EditSession::new`] but records every step `≤ record_until`, so
    /// several configs can share one inversion.
    pub fn with_recording(
        model: &'a DiT,
        source: &Tensor,
        prompt_src: &str,
        prompt_tgt: &str,
        config: EditConfig,
        record_until: usize,
    ) -> Result<Self> {
        config.validate()?;
        if config.m != model.config().m {
            return Err(Error::Contract(format!(
                "config hooks m = {} blocks, model hooks {}",
                config.m,
                model.config().m
            )));
        }
        let dc = model.config();
        let want = [dc.image_channels, dc.image_size, dc.image_size];
        if source.dims() != want {
            return Err(Error::Shape(format!("image {:?}, model expects {want:?}", source.dims())).in_stage("patchify"));
        }
        let z0 = model.patchify(source).map_err(|e| e.in_stage("patchify"))?;
        let src_tokens = model.embed_prompt(prompt_src).map_err(|e| e.in_stage("prompt"))?;
        let tgt_tokens = model.embed_prompt(prompt_tgt).map_err(|e| e.in_stage("prompt"))?;
        let grid = TimeGrid::uniform(config.n)?;
        let mut cache = ValueCache::new();
        let record_until = record_until.min(config.n);
        let plan = if record_until > 0 {
            HookPlan::Record {
                cache: &mut cache,
                max_step: record_until,
            }
        } else {
            HookPlan::None
        };
        let path = invert(&z0, &grid, &mut DiTVelocity::new(model, &src_tokens, plan), None)
            .map_err(|e| e.in_stage("invert"))?;
        Ok(Self {
            model,
            config,
            source: source.clone(),
            prompt_src: prompt_src.to_string(),
            prompt_tgt: prompt_tgt.to_string(),
            src_tokens,
            tgt_tokens,
            grid,
            path,
            mask: None,
            cache,
            recorded_until: record_until,
        })
    }

    pub fn model(&self) -> &DiT {
        self.model
    }

    pub fn source_prompt_tokens(&self) -> &PromptTokens {
        &self.src_tokens
    }

    /// Switches to another config over the same inversion.
    pub fn set_config(&mut self, config: EditConfig) -> Result<()> {
        config.validate()?;
        if config.n != self.config.n || config.m != self.config.m {
            return Err(Error::Contract("a session's N and m are fixed by its inversion".into()));
        }
        let need = config.plan().value_until;
        if need > self.recorded_until {
            return Err(Error::Contract(format!(
                "config needs values up to step {need}, session recorded {}",
                self.recorded_until
            )));
        }
        self.config = config;
        Ok(())
    }

    /// Computes the token-grid mask and stores it on the session.
    pub fn prepare_mask(&mut self, input: MaskInput<'_>) -> Result<&Tensor> {
        let g = self.model.config().grid();
        let raw = match input {
            MaskInput::Pasl { model, prompt } => model.predict_mask(&self.source, prompt)?.mask,
            MaskInput::Pixels(m) => m,
        };
        if raw.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Input("mask values must lie in [0, 1]".into()));
        }
        let pooled = resample_mask(&raw, g)?;
        let m = match self.config.mask_mode {
            MaskMode::Continuous => pooled,
            MaskMode::Binarized => pooled.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }),
        };
        self.mask = Some(Tensor::new([g * g], m.data().iter().map(|&v| v as f32).collect())?);
        Ok(self.mask.as_ref().expect("just set"))
    }

    /// Sets a token-grid mask directly.
    pub fn set_token_mask(&mut self, mask: Tensor) -> Result<()> {
        let l = self.model.config().tokens();
        if mask.len() != l {
            return Err(Error::Contract(format!("mask has {} entries, image has {l} tokens", mask.len())));
        }
        self.mask = Some(mask.into_reshaped([l])?);
        Ok(())
    }

    fn mask(&self) -> Result<&Tensor> {
        self.mask
            .as_ref()
            .ok_or_else(|| Error::Contract("strategy needs a mask; call prepare_mask first".into()))
    }

    fn h(&self, i: usize) -> f64 {
        self.grid.t(i - 1) - self.grid.t(i)
    }

    /// Denoising step `i` under the target prompt, no control.
    pub fn plain_step(&self, state: &LatentState, i: usize) -> Result<LatentState> {
        let mut v = DiTVelocity::new(self.model, &self.tgt_tokens, HookPlan::None);
        let (mut next, _) = rf_solver_step(state, self.h(i), &mut v, i)?;
        next.t = self.grid.t(i - 1);
        Ok(next)
    }

    /// Structuring step `i ∈ {N, …, N−T+1}`: solver step under the target
    /// prompt, then `M∘Z̃ + (1−M)∘Z_src(t_{i−1})`.
    pub fn structuring_step(&self, state: &LatentState, i: usize) -> Result<LatentState> {
        let n = self.config.n;
        let t = self.config.plan().latent_steps;
        if i == 0 || i > n || i + t <= n {
            return Err(Error::Contract(format!(
                "step {i} is outside the structuring window (last {t} of {n} steps)"
            )));
        }
        let mask = self.mask()?;
        let next = self.plain_step(state, i)?;
        let reference = self.path.at(self.grid.t(i - 1))?;
        Ok(LatentState {
            z: fuse_latents(&next.z, &reference, mask)?,
            t: next.t,
        })
    }

    /// Detailing step `j ≤ N − T`: solver step under the target prompt with
    /// both evaluations injecting their matching cached source values.
    pub fn detailing_step(&self, state: &LatentState, j: usize) -> Result<LatentState> {
        let until = self.config.plan().value_until;
        if j == 0 || j > until {
            return Err(Error::Contract(format!("step {j} is outside the detailing window 1..={until}")));
        }
        let mask = self.mask()?;
        let plan = HookPlan::Inject {
            cache: &self.cache,
            mask: Some(mask),
            max_step: until,
        };
        let mut v = DiTVelocity::new(self.model, &self.tgt_tokens, plan);
        let (mut next, _) = rf_solver_step(state, self.h(j), &mut v, j)?;
        next.t = self.grid.t(j - 1);
        Ok(next)
    }

    pub fn role(&self, i: usize) -> StepRole {
        let p = self.config.plan();
        if i + p.latent_steps > self.config.n {
            StepRole::Structuring
        } else if i <= p.value_until {
            StepRole::Detailing
        } else {
            StepRole::Plain
        }
    }

    /// Full denoising pass from the inverted latent.
    pub fn run(&self) -> Result<EditOutcome> {
        if self.config.needs_mask() {
            self.mask()?;
        }
        if self.config.plan().value_until > self.recorded_until {
            return Err(Error::Contract("value cache does not cover the detailing steps".into()));
        }
        let n = self.config.n;
        let mut state = LatentState {
            z: self.path.zn.clone(),
            t: self.grid.t(n),
        };
        let mut steps = Vec::with_capacity(n);
        for i in (1..=n).rev() {
            let role = self.role(i);
            let (next, stage) = match role {
                StepRole::Structuring => (self.structuring_step(&state, i), "structuring"),
                StepRole::Detailing => (self.detailing_step(&state, i), "detailing"),
                StepRole::Plain => (self.plain_step(&state, i), "denoise"),
            };
            state = next.map_err(|e| e.in_stage(stage))?;
            if !state.z.all_finite() {
                return Err(Error::NonFinite(format!("latent at step {i}")).in_stage(stage));
            }
            steps.push(StepRecord {
                step: i,
                t: state.t,
                role,
                latent_norm: state.z.norm_l2(),
            });
        }
        let raw = self.model.unpatchify(&state.z).map_err(|e| e.in_stage("unpatchify"))?;
        Ok(EditOutcome {
            image: raw.map(|v| v.clamp(0.0, 1.0)),
            latent: state.z,
            steps,
        })
    }
}

#[derive(Debug, Clone)]
pub struct EditOutcome {
    /// Edited image clamped to `[0, 1]`.
    pub image: Tensor,
    pub latent: Tensor,
    pub steps: Vec<StepRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditMetrics {
    pub psnr: f64,
    pub ssim: f64,
    /// PSNR over pixels whose token mask is below 0.5.
    pub psnr_out_of_mask: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditReport {
    pub version: String,
    pub config: EditConfig,
    pub normalized: EditConfig,
    pub plan: StagePlan,
    pub prompt_src: String,
    pub prompt_tgt: String,
    pub mask: Option<MaskStats>,
    pub cache_entries: usize,
    pub source_inverted_norm: f64,
    pub steps: Vec<StepRecord>,
    pub metrics: EditMetrics,
}

/// Source-relative metrics of an edited image.
pub fn edit_metrics(source: &Tensor, edited: &Tensor, token_mask: Option<&Tensor>, grid: usize, patch: usize) -> Result<EditMetrics> {
    let pair = ImagePair::new(source, edited)?;
    let out = match token_mask {
        Some(m) => {
            let px = token_mask_to_pixels(m, grid, patch)?.map(|v| if v < 0.5 { 1.0 } else { 0.0 });
            if px.sum() > 0.0 {
                Some(psnr(pair, Some(&px))?)
            } else {
                None
            }
        }
        None => None,
    };
    Ok(EditMetrics {
        psnr: psnr(pair, None)?,
        ssim: ssim(pair)?,
        psnr_out_of_mask: out,
    })
}

/// Models an edit may consult.
pub struct EditModels<'a> {
    pub dit: &'a DiT,
    pub pasl: Option<&'a PaslModel<f32>>,
    /// Mask for the `file` and `manual` sources.
    pub mask: Option<Tensor<f64>>,
    /// Prompt given to PASL; the target prompt when `None`.
    pub mask_prompt: Option<String>,
}

/// Inversion, mask acquisition, structuring and detailing, unpatchify.
pub fn edit(
    image: &Tensor,
    prompt_src: &str,
    prompt_tgt: &str,
    config: EditConfig,
    models: EditModels<'_>,
) -> Result<(EditOutcome, EditReport)> {
    let mut session = EditSession::new(models.dit, image, prompt_src, prompt_tgt, config)?;
    if config.needs_mask() || models.mask.is_some() {
        let input = match config.mask_source {
            MaskSource::Pasl => MaskInput::Pasl {
                model: models
                    .pasl
                    .ok_or_else(|| Error::Input("mask source 'pasl' needs a PASL checkpoint".into()))?,
                prompt: models.mask_prompt.as_deref().unwrap_or(prompt_tgt),
            },
            MaskSource::File | MaskSource::Manual => MaskInput::Pixels(
                models
                    .mask
                    .ok_or_else(|| Error::Input("mask source needs a mask tensor".into()))?,
            ),
        };
        session.prepare_mask(input).map_err(|e| e.in_stage("mask"))?;
    }
    let outcome = session.run()?;
    let c = models.dit.config();
    let metrics = edit_metrics(image, &outcome.image, session.mask.as_ref(), c.grid(), c.patch)
        .map_err(|e| e.in_stage("metrics"))?;
    let report = EditReport {
        version: crate::VERSION.to_string(),
        config,
        normalized: config.normalized(),
        plan: config.plan(),
        prompt_src: prompt_src.to_string(),
        prompt_tgt: prompt_tgt.to_string(),
        mask: session.mask.as_ref().map(MaskStats::of),
        cache_entries: session.cache.len(),
        source_inverted_norm: session.path.zn.norm_l2(),
        steps: outcome.steps.clone(),
        metrics,
    };
    Ok((outcome, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plans_of_degenerate_strategies_coincide() {
        let at = |strategy, t| EditConfig {
            strategy,
            t,
            ..Default::default()
        };
        assert_eq!(at(Strategy::S2d, 30).plan(), at(Strategy::LatentOnly, 30).plan());
        assert_eq!(at(Strategy::S2d, 0).plan(), at(Strategy::ValueOnly, 0).plan());
        assert_eq!(at(Strategy::S2d, 30).normalized().strategy, Strategy::LatentOnly);
        assert_eq!(at(Strategy::S2d, 0).normalized().strategy, Strategy::ValueOnly);
        assert_eq!(at(Strategy::S2d, 3).normalized().strategy, Strategy::S2d);
        assert_eq!(
            at(Strategy::S2d, 3).plan(),
            StagePlan {
                latent_steps: 3,
                value_until: 27
            }
        );
        assert!(at(Strategy::S2d, 31).validate().is_err());
    }

    #[test]
    fn resampling_up_and_down() {
        let m = Tensor::<f64>::from_fn([2, 2], |i| i as f64 / 3.0);
        let up = resample_mask(&m, 4).unwrap();
        assert_eq!(up.data()[0..4], [0.0, 0.0, 1.0 / 3.0, 1.0 / 3.0]);
        let down = resample_mask(&up, 1).unwrap();
        assert!((down.data()[0] - 0.5).abs() < 1e-12);
        assert!(matches!(resample_mask(&m, 3), Err(Error::Contract(_))));
    }

    #[test]
    fn latent_fusion_extremes_are_exact() {
        let a = Tensor::from_fn([3, 2], |i| i as f32 * 0.37);
        let b = Tensor::from_fn([3, 2], |i| -(i as f32) * 1.1);
        let m = Tensor::new([3], vec![1.0, 0.0, 0.25]).unwrap();
        let f = fuse_latents(&a, &b, &m).unwrap();
        assert_eq!(f.row(0), a.row(0));
        assert_eq!(f.row(1), b.row(1));
        let want = (0.25 * a.row(2)[0] as f64 + 0.75 * b.row(2)[0] as f64) as f32;
        assert_eq!(f.row(2)[0], want);
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in [Strategy::S2d, Strategy::LatentOnly, Strategy::ValueOnly, Strategy::None] {
            assert_eq!(Strategy::parse(s.as_str()).unwrap(), s);
        }
        assert!(Strategy::parse("both").is_err());
    }
}

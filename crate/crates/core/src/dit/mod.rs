//! Frozen toy diffusion transformer used as the velocity field.
//!
//! Text and image tokens form one joint sequence. Each block is pre-norm
//! multi-head self-attention followed by a pre-norm MLP, both residual. The
//! last `m` blocks expose their value tensor to a [`ValueHook`].

mod hooks;
mod text;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use hooks::{fuse_values, Injector, Recorder, Tapped, ValueCache, ValueHook};
pub use text::{prompt_id, word_vector, words, PromptTokens, TextStub};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::flow::{StepKey, Velocity};
use crate::rng::{derive_seed, Rng};
use crate::tensor::{matmul, matmul_nt, Tensor};

const LN_EPS: f64 = 1e-5;
const TIME_DIM: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiTConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub patch: usize,
    /// Number of tail blocks whose values are hooked.
    pub m: usize,
    pub text_len: usize,
    pub image_channels: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Gain on the residual branch output projections.
    pub residual_scale: f64,
    /// Gain on the velocity head.
    pub output_scale: f64,
    /// Logit offset added to every query's scores against text keys.
    pub text_attn_bias: f64,
}

impl Default for DiTConfig {
    fn default() -> Self {
        Self {
            depth: 6,
            width: 64,
            heads: 4,
            patch: 4,
            m: 2,
            text_len: 8,
            image_channels: 3,
            image_size: 64,
            seed: 0,
            residual_scale: 0.5,
            output_scale: 0.5,
            text_attn_bias: 5.0,
        }
    }
}

impl DiTConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Input(m));
        if self.depth == 0 || self.width == 0 || self.heads == 0 || self.patch == 0 || self.text_len == 0 {
            return bad("DiT extents must be positive".into());
        }
        if !self.width.is_multiple_of(self.heads) {
            return bad(format!("width {} not divisible by heads {}", self.width, self.heads));
        }
        if self.m > self.depth {
            return bad(format!("m = {} exceeds depth {}", self.m, self.depth));
        }
        if !self.image_size.is_multiple_of(self.patch) {
            return bad(format!("image size {} not divisible by patch {}", self.image_size, self.patch));
        }
        if self.patch_dim() > self.width {
            return bad(format!(
                "patch dimension {} exceeds width {}; the projector must be injective",
                self.patch_dim(),
                self.width
            ));
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.image_channels * self.patch * self.patch
    }

    /// Image tokens `L`.
    pub fn tokens(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    /// Indices of the hooked tail blocks.
    pub fn hooked_blocks(&self) -> Vec<usize> {
        (self.depth - self.m..self.depth).collect()
    }

    pub fn text_stub(&self) -> TextStub {
        TextStub {
            seed: derive_seed(self.seed, "dit/text"),
            width: self.width,
            text_len: self.text_len,
        }
    }
}

/// Matrix `[rows × cols]` with orthonormal rows (if `rows ≤ cols`) or columns,
/// times `gain`. Gram-Schmidt in f64, applied twice for accuracy.
pub fn orthonormal(rows: usize, cols: usize, gain: f64, rng: &mut Rng) -> Tensor {
    let (n, d) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut vs: Vec<Vec<f64>> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for _ in 0..2 {
            for u in &vs {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (a, b) in v.iter_mut().zip(u) {
                    *a -= dot * b;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        vs.push(v.into_iter().map(|x| x / norm).collect());
    }
    Tensor::from_fn([rows, cols], |i| {
        let (r, c) = (i / cols, i % cols);
        let x = if rows <= cols { vs[r][c] } else { vs[c][r] };
        (x * gain) as f32
    })
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

const BLOCK_TENSORS: [&str; 8] = ["wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2"];

impl Block {
    fn tensors(&self) -> [&Tensor; 8] {
        [&self.wq, &self.wk, &self.wv, &self.wo, &self.w1, &self.b1, &self.w2, &self.b2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiT {
    cfg: DiTConfig,
    /// `[patch_dim × C]` with orthonormal rows.
    patch_proj: Tensor,
    /// Fixed image position embedding `[L × C]`.
    pos: Tensor,
    time_w: Tensor,
    time_b: Tensor,
    blocks: Vec<Block>,
    head: Tensor,
    text: TextStub,
}

/// Per-block activations collected by [`DiT::forward_traced`].
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    /// Input of each block, `[text_len + L] × C`.
    pub block_inputs: Vec<Tensor>,
    /// Largest `|Σ_j p_ij − 1|` over all attention rows.
    pub max_row_sum_error: f64,
}

/// Sinusoidal features of `t` with frequencies `10^(k/(half−1))`, `k < half`.
pub fn time_features(t: f64) -> Vec<f64> {
    let half = TIME_DIM / 2;
    let mut out = Vec::with_capacity(TIME_DIM);
    for k in 0..half {
        let w = 10f64.powf(k as f64 / (half - 1) as f64);
        out.push((w * t).sin());
    }
    for k in 0..half {
        let w = 10f64.powf(k as f64 / (half - 1) as f64);
        out.push((w * t).cos());
    }
    out
}

fn columns(x: &Tensor, start: usize, width: usize) -> Tensor {
    let (r, c) = x.shape2().expect("matrix");
    Tensor::from_fn([r, width], |i| x.data()[(i / width) * c + start + i % width])
}

impl DiT {
    pub fn new(cfg: DiTConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.width;
        let root = Rng::seeded(cfg.seed);
        let mut r = root.derive("dit/patch");
        let patch_proj = orthonormal(cfg.patch_dim(), c, 1.0, &mut r);
        let mut r = root.derive("dit/pos");
        let pos = Tensor::from_fn([cfg.tokens(), c], |_| (0.1 * r.normal()) as f32);
        let mut r = root.derive("dit/time");
        let time_w = orthonormal(TIME_DIM, c, 1.0, &mut r);
        let time_b = Tensor::zeros([c]);
        let mut blocks = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let mut r = root.derive(&format!("dit/block{l}"));
            let rs = cfg.residual_scale;
            blocks.push(Block {
                wq: orthonormal(c, c, 1.0, &mut r),
                wk: orthonormal(c, c, 1.0, &mut r),
                wv: orthonormal(c, c, 1.0, &mut r),
                wo: orthonormal(c, c, rs, &mut r),
                w1: orthonormal(c, 4 * c, 2.0, &mut r),
                b1: Tensor::from_fn([4 * c], |_| (0.1 * r.normal()) as f32),
                w2: orthonormal(4 * c, c, rs, &mut r),
                b2: Tensor::zeros([c]),
            });
        }
        let mut r = root.derive("dit/head");
        let head = orthonormal(c, c, cfg.output_scale, &mut r);
        Ok(Self {
            text: cfg.text_stub(),
            cfg,
            patch_proj,
            pos,
            time_w,
            time_b,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &DiTConfig {
        &self.cfg
    }

    pub fn embed_prompt(&self, prompt: &str) -> Result<PromptTokens> {
        self.text.embed(prompt)
    }

    /// `[C_img × H × W]` → `[L × C]` through non-overlapping patches and the
    /// orthonormal projector (no bias).
    pub fn patchify(&self, image: &Tensor) -> Result<Tensor> {
        patchify_with(image, self.cfg.patch, &self.patch_proj)
    }

    /// Inverse of [`DiT::patchify`] via the projector transpose.
    pub fn unpatchify(&self, tokens: &Tensor) -> Result<Tensor> {
        let c = self.cfg;
        let (l, w) = tokens.shape2()?;
        if l != c.tokens() || w != c.width {
            return Err(Error::Shape(format!(
                "expected [{} × {}] tokens, got {:?}",
                c.tokens(),
                c.width,
                tokens.dims()
            )));
        }
        let patches = matmul_nt(tokens, &self.patch_proj)?;
        let (p, g, ch) = (c.patch, c.grid(), c.image_channels);
        let s = c.image_size;
        let mut img = vec![0.0f32; ch * s * s];
        for (tok, row) in patches.data().chunks(p * p * ch).enumerate() {
            let (gy, gx) = (tok / g, tok % g);
            for (k, &v) in row.iter().enumerate() {
                let (cc, rest) = (k / (p * p), k % (p * p));
                let (dy, dx) = (rest / p, rest % p);
                img[(cc * s + gy * p + dy) * s + gx * p + dx] = v;
            }
        }
        Tensor::new([ch, s, s], img)
    }

    pub fn forward(
        &self,
        z: &Tensor,
        t: f64,
        prompt: &PromptTokens,
        hook: Option<&mut dyn ValueHook>,
    ) -> Result<Tensor> {
        self.forward_traced(z, t, prompt, hook, None)
    }

    pub fn forward_traced(
        &self,
        z: &Tensor,
        t: f64,
        prompt: &PromptTokens,
        mut hook: Option<&mut dyn ValueHook>,
        mut trace: Option<&mut ForwardTrace>,
    ) -> Result<Tensor> {
        let cfg = &self.cfg;
        let (c, lt, l) = (cfg.width, cfg.text_len, cfg.tokens());
        if z.dims() != [l, c] {
            return Err(Error::Shape(format!("latent {:?}, expected [{l}, {c}]", z.dims())));
        }
        if prompt.tokens.dims() != [lt, c] {
            return Err(Error::Shape(format!(
                "prompt tokens {:?}, expected [{lt}, {c}]",
                prompt.tokens.dims()
            )));
        }
        let tf = Tensor::from_f64_slice([1, TIME_DIM], &time_features(t))?;
        let temb = matmul(&tf, &self.time_w)?.add(&self.time_b.reshape([1, c])?)?;
        let img = z.add(&self.pos)?;
        let mut x = prompt.tokens.concat_rows(&img)?.add_row_bias(&temb.reshape([c])?)?;

        let first_hooked = cfg.depth - cfg.m;
        let dh = cfg.width / cfg.heads;
        let inv_sqrt = 1.0 / (dh as f32).sqrt();
        let text_bias = cfg.text_attn_bias as f32;
        for (li, b) in self.blocks.iter().enumerate() {
            if let Some(tr) = trace.as_deref_mut() {
                tr.block_inputs.push(x.clone());
            }
            let h = x.layer_norm_rows(LN_EPS)?;
            let q = matmul(&h, &b.wq)?;
            let k = matmul(&h, &b.wk)?;
            let mut v = matmul(&h, &b.wv)?;
            if li >= first_hooked {
                if let Some(hk) = hook.as_deref_mut() {
                    if let Some(nv) = hk.on_value(li, &v)? {
                        if nv.dims() != v.dims() {
                            return Err(Error::Contract(format!(
                                "hook returned value dims {:?} at block {li}, expected {:?}",
                                nv.dims(),
                                v.dims()
                            )));
                        }
                        v = nv;
                    }
                }
            }
            let s = lt + l;
            let mut attn = vec![0.0f32; s * c];
            for hd in 0..cfg.heads {
                let qh = columns(&q, hd * dh, dh);
                let kh = columns(&k, hd * dh, dh);
                let vh = columns(&v, hd * dh, dh);
                let mut logits = matmul_nt(&qh, &kh)?.scale(inv_sqrt);
                if text_bias != 0.0 {
                    for row in logits.data_mut().chunks_mut(s) {
                        for v in &mut row[..lt] {
                            *v += text_bias;
                        }
                    }
                }
                let p = logits.softmax_rows()?;
                if let Some(tr) = trace.as_deref_mut() {
                    for row in p.data().chunks(s) {
                        let sum: f64 = row.iter().map(|&x| x as f64).sum();
                        tr.max_row_sum_error = tr.max_row_sum_error.max((sum - 1.0).abs());
                    }
                }
                let o = matmul(&p, &vh)?;
                for r in 0..s {
                    attn[r * c + hd * dh..r * c + (hd + 1) * dh].copy_from_slice(o.row(r));
                }
            }
            let attn = Tensor::new([s, c], attn)?;
            x = x.add(&matmul(&attn, &b.wo)?)?;
            let h = x.layer_norm_rows(LN_EPS)?;
            let u = matmul(&h, &b.w1)?.add_row_bias(&b.b1)?.map(gelu);
            x = x.add(&matmul(&u, &b.w2)?.add_row_bias(&b.b2)?)?;
        }
        let out = x.slice_rows(lt, lt + l)?.layer_norm_rows(LN_EPS)?;
        let v = matmul(&out, &self.head)?;
        if !v.all_finite() {
            return Err(Error::NonFinite(format!("velocity at t={t}")));
        }
        Ok(v)
    }

    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("patch_proj".to_string(), &self.patch_proj),
            ("pos".to_string(), &self.pos),
            ("time_w".to_string(), &self.time_w),
            ("time_b".to_string(), &self.time_b),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            for (n, t) in BLOCK_TENSORS.iter().zip(b.tensors()) {
                out.push((format!("block{l}.{n}"), t));
            }
        }
        out.push(("head".to_string(), &self.head));
        out
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Writes `manifest.json` and one FSTN file per tensor into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::save(dir, "dit", &self.cfg, &self.named())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (cfg, mut loaded) = checkpoint::load::<DiTConfig, f32>(dir, "dit")?;
        let mut model = DiT::new(cfg)?;
        let names: Vec<(String, Vec<usize>)> =
            model.named().into_iter().map(|(n, t)| (n, t.dims().to_vec())).collect();
        let mut fresh = Vec::with_capacity(names.len());
        for (n, d) in &names {
            fresh.push(loaded.take(n, d)?);
        }
        let mut it = fresh.into_iter();
        let mut next = || it.next().expect("one tensor per name");
        model.patch_proj = next();
        model.pos = next();
        model.time_w = next();
        model.time_b = next();
        for b in &mut model.blocks {
            for slot in [
                &mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo, &mut b.w1, &mut b.b1, &mut b.w2, &mut b.b2,
            ] {
                *slot = next();
            }
        }
        model.head = next();
        Ok(model)
    }
}

/// Patch extraction with an explicit projector `[patch_dim × C]`.
pub fn patchify_with(image: &Tensor, patch: usize, proj: &Tensor) -> Result<Tensor> {
    let [ch, h, w] = image.dims()[..] else {
        return Err(Error::Shape(format!("image must be [C×H×W], got {:?}", image.dims())));
    };
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape(format!("image {h}×{w} not divisible by patch {patch}")));
    }
    let (pd, _) = proj.shape2()?;
    if pd != ch * patch * patch {
        return Err(Error::Shape(format!(
            "projector expects patch dimension {pd}, image gives {}",
            ch * patch * patch
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut rows = Vec::with_capacity(gh * gw * pd);
    for gy in 0..gh {
        for gx in 0..gw {
            for c in 0..ch {
                for dy in 0..patch {
                    for dx in 0..patch {
                        rows.push(image.data()[(c * h + gy * patch + dy) * w + gx * patch + dx]);
                    }
                }
            }
        }
    }
    matmul(&Tensor::new([gh * gw, pd], rows)?, proj)
}

fn gelu(x: f32) -> f32 {
    let k = (2.0 / std::f32::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + 0.044715 * x * x * x)).tanh())
}

/// What the velocity adapter does with the hooked values at each evaluation.
pub enum HookPlan<'a> {
    None,
    /// Record every evaluation whose step index is `≤ max_step`.
    Record { cache: &'a mut ValueCache, max_step: usize },
    /// Inject at every evaluation whose step index is `≤ max_step`.
    Inject {
        cache: &'a ValueCache,
        mask: Option<&'a Tensor>,
        max_step: usize,
    },
}

/// The DiT as a [`Velocity`] under a fixed prompt.
pub struct DiTVelocity<'a> {
    pub model: &'a DiT,
    pub prompt: &'a PromptTokens,
    pub plan: HookPlan<'a>,
    /// Receives `(key, block, value before hook, value after hook)`.
    pub tap: Option<&'a mut dyn FnMut(StepKey, usize, &Tensor, &Tensor)>,
}

impl<'a> DiTVelocity<'a> {
    pub fn new(model: &'a DiT, prompt: &'a PromptTokens, plan: HookPlan<'a>) -> Self {
        Self {
            model,
            prompt,
            plan,
            tap: None,
        }
    }
}

struct Passthrough;

impl ValueHook for Passthrough {
    fn on_value(&mut self, _: usize, _: &Tensor) -> Result<Option<Tensor>> {
        Ok(None)
    }
}

impl Velocity<f32> for DiTVelocity<'_> {
    fn velocity(&mut self, z: &Tensor, t: f64, key: StepKey) -> Result<Tensor> {
        let text_len = self.model.cfg.text_len;
        let mut base: Box<dyn ValueHook + '_> = match &mut self.plan {
            HookPlan::Record { cache, max_step } if key.step <= *max_step => Box::new(Recorder { cache, key }),
            HookPlan::Inject { cache, mask, max_step } if key.step <= *max_step => Box::new(Injector {
                cache,
                key,
                mask: *mask,
                text_len,
            }),
            _ => Box::new(Passthrough),
        };
        match self.tap.as_deref_mut() {
            Some(tap) => {
                let mut f = |b: usize, before: &Tensor, after: &Tensor| tap(key, b, before, after);
                let mut tapped = Tapped {
                    inner: &mut *base,
                    tap: &mut f,
                };
                self.model.forward(z, t, self.prompt, Some(&mut tapped))
            }
            None => self.model.forward(z, t, self.prompt, Some(&mut *base)),
        }
    }
}

impl<H: ValueHook + ?Sized> ValueHook for &mut H {
    fn on_value(&mut self, block: usize, v: &Tensor) -> Result<Option<Tensor>> {
        (**self).on_value(block, v)
    }
}

impl<H: ValueHook + ?Sized> ValueHook for Box<H> {
    fn on_value(&mut self, block: usize, v: &Tensor) -> Result<Option<Tensor>> {
        (**self).on_value(block, v)
    }
}

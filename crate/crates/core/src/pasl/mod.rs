//! Prompt-aligned spatial locator.
//!
//! A six-layer 3×3 conv encoder produces per-pixel features `f_img[C × L]`;
//! a frozen hashed text embedding goes through a two-layer projector to
//! `f_text[C]`; the mask is `M_i = σ(⟨f_img_i, f_text⟩)`.

mod complexity;
mod loss;
mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use complexity::{complexity_report, ComplexityReport, ComplexityRow};
pub use loss::{mask_loss, mask_loss_graph, MaskLoss, CLAMP_EPS};
pub use train::{evaluate_iou, train_pasl, IouReport, Target, TrainConfig, TrainPortrait, TrainReport};

use crate::autodiff::{sigmoid, Graph, ParamId, ParamSet, Var};
use crate::checkpoint;
use crate::dit::TextStub;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};
use crate::tensor::{conv2d, conv2d_output_hw, matmul, Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaslMode {
    Paper,
    Toy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PaslConfig {
    pub mode: PaslMode,
    pub input_size: usize,
    pub channels: [usize; 6],
    pub strides: [usize; 6],
    /// Width of the frozen text embedding.
    pub text_dim: usize,
    pub proj_hidden: usize,
    pub leaky_slope: f64,
    pub seed: u64,
}

impl PaslConfig {
    pub fn paper() -> Self {
        Self {
            mode: PaslMode::Paper,
            input_size: 512,
            channels: [64, 128, 256, 512, 512, 512],
            strides: [1, 2, 2, 2, 1, 1],
            text_dim: 768,
            proj_hidden: 1024,
            leaky_slope: 0.01,
            seed: 0,
        }
    }

    pub fn toy() -> Self {
        Self {
            mode: PaslMode::Toy,
            input_size: 64,
            channels: [8, 16, 32, 64, 64, 64],
            strides: [1, 2, 2, 2, 1, 1],
            text_dim: 32,
            proj_hidden: 48,
            ..Self::paper()
        }
    }

    pub fn for_mode(mode: PaslMode) -> Self {
        match mode {
            PaslMode::Paper => Self::paper(),
            PaslMode::Toy => Self::toy(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prod: usize = self.strides.iter().product();
        if self.strides.iter().any(|&s| s != 1 && s != 2) {
            return Err(Error::Input("PASL strides must be 1 or 2".into()));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(prod) {
            return Err(Error::Input(format!(
                "input size {} not divisible by stride product {prod}",
                self.input_size
            )));
        }
        if self.channels.contains(&0) || self.text_dim == 0 || self.proj_hidden == 0 {
            return Err(Error::Input("PASL widths must be positive".into()));
        }
        Ok(())
    }

    pub fn feature_size(&self) -> usize {
        self.input_size / self.strides.iter().product::<usize>()
    }

    pub fn feature_channels(&self) -> usize {
        self.channels[5]
    }

    pub fn text_stub(&self) -> TextStub {
        TextStub {
            seed: derive_seed(self.seed, "pasl/text"),
            width: self.text_dim,
            text_len: 1,
        }
    }
}

/// Encoder, projector and the frozen text stub. The stub has no parameters in
/// the set, so it never receives gradients.
#[derive(Debug, Clone)]
pub struct PaslModel<T: Element = f32> {
    cfg: PaslConfig,
    pub params: ParamSet<T>,
    conv: Vec<(ParamId, ParamId)>,
    proj: [(ParamId, ParamId); 2],
    text: TextStub,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPrediction {
    /// `[H_f × W_f]`, each value in `(0, 1)`.
    pub mask: Tensor<f64>,
    pub prompt_id: String,
    pub image_id: Option<String>,
}

impl<T: Element> PaslModel<T> {
    /// He-normal conv weights for the leaky activation, zero biases; the
    /// projector output layer starts small so initial masks sit near 0.5.
    pub fn new(cfg: PaslConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::seeded(cfg.seed).derive("pasl/init");
        let mut params = ParamSet::new();
        let mut conv = Vec::with_capacity(6);
        let mut cin = 3;
        for (l, &cout) in cfg.channels.iter().enumerate() {
            let std = (2.0 / (9 * cin) as f64).sqrt();
            let w = params.add(
                format!("enc.conv{}.w", l + 1),
                Tensor::from_fn([cout, cin, 3, 3], |_| T::from_f64(std * rng.normal())),
            );
            let b = params.add(format!("enc.conv{}.b", l + 1), Tensor::zeros([cout]));
            conv.push((w, b));
            cin = cout;
        }
        let c = cfg.feature_channels();
        let s1 = (2.0 / cfg.text_dim as f64).sqrt();
        let w1 = params.add(
            "proj.fc1.w",
            Tensor::from_fn([cfg.text_dim, cfg.proj_hidden], |_| T::from_f64(s1 * rng.normal())),
        );
        let b1 = params.add("proj.fc1.b", Tensor::zeros([cfg.proj_hidden]));
        let s2 = 0.1 / (cfg.proj_hidden as f64).sqrt();
        let w2 = params.add(
            "proj.fc2.w",
            Tensor::from_fn([cfg.proj_hidden, c], |_| T::from_f64(s2 * rng.normal())),
        );
        let b2 = params.add("proj.fc2.b", Tensor::zeros([c]));
        Ok(Self {
            text: cfg.text_stub(),
            cfg,
            params,
            conv,
            proj: [(w1, b1), (w2, b2)],
        })
    }

    pub fn config(&self) -> &PaslConfig {
        &self.cfg
    }

    pub fn cast<U: Element>(&self) -> PaslModel<U> {
        PaslModel {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            conv: self.conv.clone(),
            proj: self.proj,
            text: self.text,
        }
    }

    /// Parameter ids of the encoder and of the projector.
    pub fn encoder_params(&self) -> Vec<ParamId> {
        self.conv.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    pub fn projector_params(&self) -> Vec<ParamId> {
        self.proj.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    fn check_image(&self, x: &Tensor<T>) -> Result<()> {
        let s = self.cfg.input_size;
        if x.dims() != [3, s, s] {
            return Err(Error::Shape(format!("PASL expects a [3, {s}, {s}] image, got {:?}", x.dims())));
        }
        Ok(())
    }

    /// `[3 × H × W]` → `[C × H_f × W_f]` features.
    pub fn encode_image(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_image(x)?;
        let slope = T::from_f64(self.cfg.leaky_slope);
        let mut h = x.clone();
        for (l, &(w, b)) in self.conv.iter().enumerate() {
            h = conv2d(&h, self.params.get(w), self.params.get(b), self.cfg.strides[l])?;
            h = h.map(|v| if v > T::ZERO { v } else { v * slope });
        }
        Ok(h)
    }

    /// Frozen embedding of the prompt.
    pub fn text_embedding(&self, prompt: &str) -> Result<Tensor<T>> {
        let e = self.text.pooled(prompt)?;
        Tensor::from_f64_slice([1, self.cfg.text_dim], &e)
    }

    fn project_embedding(&self, e: &Tensor<T>) -> Result<Tensor<T>> {
        let [(w1, b1), (w2, b2)] = self.proj;
        let h = matmul(e, self.params.get(w1))?
            .add_row_bias(self.params.get(b1))?
            .map(|v| v.max(T::ZERO));
        matmul(&h, self.params.get(w2))?.add_row_bias(self.params.get(b2))
    }

    /// Prompt → `f_text[C]`.
    pub fn project_text(&self, prompt: &str) -> Result<Tensor<T>> {
        let e = self.text_embedding(prompt)?;
        let c = self.cfg.feature_channels();
        self.project_embedding(&e)?.into_reshaped([c])
    }

    /// `M_i = σ(Σ_c f_img[c, i] · f_text[c])` on the feature grid.
    pub fn predict_mask(&self, x: &Tensor<T>, prompt: &str) -> Result<MaskPrediction> {
        let feat = self.encode_image(x)?;
        let text = self.project_text(prompt)?;
        Ok(MaskPrediction {
            mask: similarity_mask(&feat, &text)?,
            prompt_id: crate::dit::prompt_id(prompt),
            image_id: None,
        })
    }

    /// Masks for several prompts against one encoder pass.
    pub fn predict_masks(&self, x: &Tensor<T>, prompts: &[&str]) -> Result<Vec<MaskPrediction>> {
        let feat = self.encode_image(x)?;
        prompts
            .iter()
            .map(|p| {
                Ok(MaskPrediction {
                    mask: similarity_mask(&feat, &self.project_text(p)?)?,
                    prompt_id: crate::dit::prompt_id(p),
                    image_id: None,
                })
            })
            .collect()
    }

    /// Mask logits `[P × L]` on the tape for a stack of text embeddings `[P × D]`.
    pub fn logits_graph(&self, g: &mut Graph<T>, params: &ParamSet<T>, x: &Tensor<T>, emb: &Tensor<T>) -> Result<Var> {
        self.check_image(x)?;
        let slope = T::from_f64(self.cfg.leaky_slope);
        let mut h = g.constant(x.clone());
        for (l, &(w, b)) in self.conv.iter().enumerate() {
            let wv = g.param(params, w);
            let bv = g.param(params, b);
            h = g.conv2d(h, wv, bv, self.cfg.strides[l])?;
            h = g.leaky_relu(h, slope);
        }
        let c = self.cfg.feature_channels();
        let fs = self.cfg.feature_size();
        let feat = g.reshape(h, &[c, fs * fs])?;
        let [(w1, b1), (w2, b2)] = self.proj;
        let e = g.constant(emb.clone());
        let (w1, b1, w2, b2) = (g.param(params, w1), g.param(params, b1), g.param(params, w2), g.param(params, b2));
        let t = g.affine(e, w1, b1)?;
        let t = g.relu(t);
        let t = g.affine(t, w2, b2)?;
        g.matmul(t, feat)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let named: Vec<(String, &Tensor<T>)> =
            self.params.iter().map(|(_, n, t)| (n.to_string(), t)).collect();
        checkpoint::save(dir, "pasl", &self.cfg, &named)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (cfg, mut loaded) = checkpoint::load::<PaslConfig, T>(dir, "pasl")?;
        let mut model = Self::new(cfg)?;
        let ids: Vec<ParamId> = model.params.ids().collect();
        for id in ids {
            let name = model.params.name(id).to_string();
            let dims = model.params.get(id).dims().to_vec();
            *model.params.get_mut(id) = loaded.take(&name, &dims)?;
        }
        Ok(model)
    }
}

/// Per-pixel sigmoid similarity of features `[C × H_f × W_f]` with `text[C]`.
pub fn similarity_mask<T: Element>(feat: &Tensor<T>, text: &Tensor<T>) -> Result<Tensor<f64>> {
    let [c, h, w] = feat.dims()[..] else {
        return Err(Error::Shape(format!("features must be [C×H×W], got {:?}", feat.dims())));
    };
    if text.len() != c {
        return Err(Error::Shape(format!("text vector has {} entries, features {c} channels", text.len())));
    }
    let l = h * w;
    let f = feat.data();
    let tv = text.data();
    let mut out = vec![0.0; l];
    for (ch, &tc) in tv.iter().enumerate() {
        let tc = tc.to_f64();
        for (i, o) in out.iter_mut().enumerate() {
            *o += f[ch * l + i].to_f64() * tc;
        }
    }
    Tensor::new([h, w], out.into_iter().map(sigmoid).collect())
}

/// Mean of `mask` over `factor × factor` blocks.
pub fn area_pool(mask: &Tensor<f64>, out_h: usize, out_w: usize) -> Result<Tensor<f64>> {
    let (h, w) = mask.shape2()?;
    if out_h == 0 || out_w == 0 || h % out_h != 0 || w % out_w != 0 {
        return Err(Error::Contract(format!(
            "cannot area-pool a {h}×{w} mask to {out_h}×{out_w}"
        )));
    }
    let (fy, fx) = (h / out_h, w / out_w);
    let inv = 1.0 / (fy * fx) as f64;
    Ok(Tensor::from_fn([out_h, out_w], |i| {
        let (oy, ox) = (i / out_w, i % out_w);
        let mut s = 0.0;
        for y in oy * fy..(oy + 1) * fy {
            for x in ox * fx..(ox + 1) * fx {
                s += mask.data()[y * w + x];
            }
        }
        s * inv
    }))
}

/// Area-pool to the feature grid, then threshold at 0.5.
pub fn downsample_mask(mask: &Tensor<f64>, size: usize) -> Result<Tensor<f64>> {
    Ok(area_pool(mask, size, size)?.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
}

/// Output extents of the encoder for a square input.
pub fn encoder_shape(cfg: &PaslConfig) -> Result<[usize; 3]> {
    let mut s = cfg.input_size;
    for &st in &cfg.strides {
        s = conv2d_output_hw(s, s, st).0;
    }
    Ok([cfg.feature_channels(), s, s])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_shapes() {
        let m = PaslModel::<f32>::new(PaslConfig::toy()).unwrap();
        let f = m.encode_image(&Tensor::zeros([3, 64, 64])).unwrap();
        assert_eq!(f.dims(), &[64, 8, 8]);
        assert!(f.data().iter().all(|&v| v == 0.0));
        assert_eq!(encoder_shape(&PaslConfig::paper()).unwrap(), [512, 64, 64]);
        assert!(m.encode_image(&Tensor::zeros([3, 32, 32])).is_err());
    }

    #[test]
    fn zero_embedding_and_biases_project_to_zero() {
        let m = PaslModel::<f64>::new(PaslConfig::toy()).unwrap();
        let out = m.project_embedding(&Tensor::zeros([1, 32])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert_eq!(m.project_text("the hair").unwrap().len(), 64);
        assert!(m.project_text(" ").is_err());
    }

    #[test]
    fn similarity_extremes() {
        let text = Tensor::<f64>::from_fn([4], |i| i as f64 - 1.5);
        let zero = similarity_mask(&Tensor::<f64>::zeros([4, 2, 2]), &text).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.5));
        let aligned = Tensor::from_fn([4, 2, 2], |i| 50.0 * text.data()[i / 4]);
        let m = similarity_mask(&aligned, &text).unwrap();
        assert!(m.data().iter().all(|&v| v > 1.0 - 1e-12));
    }

    #[test]
    fn pooling_and_binarising() {
        let m = Tensor::from_fn([4, 4], |i| if i % 4 < 2 && i / 4 < 2 { 1.0 } else { 0.0 });
        let p = area_pool(&m, 2, 2).unwrap();
        assert_eq!(p.data(), &[1.0, 0.0, 0.0, 0.0]);
        let q = Tensor::from_fn([4, 4], |i| if i == 0 || i == 1 { 1.0 } else { 0.0 });
        assert_eq!(downsample_mask(&q, 2).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
        assert!(area_pool(&m, 3, 3).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = PaslModel::<f32>::new(PaslConfig::toy()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = PaslModel::<f32>::load(dir.path()).unwrap();
        for id in m.params.ids() {
            assert_eq!(m.params.get(id), back.params.get(id));
        }
    }
}

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{mask_loss_graph, PaslConfig, PaslModel};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::metrics::mask_iou;
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One region prompt and its ground truth on the feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub region: String,
    pub prompt: String,
    /// Binary `[H_f × W_f]`.
    pub mask: Tensor<f64>,
}

/// An image with all of its region prompts. A training step covers one
/// portrait and every one of its targets against a single encoder pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPortrait {
    pub id: String,
    pub image: Tensor,
    pub targets: Vec<Target>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub optim: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 32,
            optim: AdamWConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean total loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

fn stack_targets(model: &PaslModel<f32>, p: &TrainPortrait, cache: &mut BTreeMap<String, Tensor>) -> Result<(Tensor, Tensor)> {
    let d = model.config().text_dim;
    let l = model.config().feature_size().pow(2);
    let mut emb = Vec::with_capacity(p.targets.len() * d);
    let mut gt = Vec::with_capacity(p.targets.len() * l);
    for t in &p.targets {
        if t.mask.len() != l {
            return Err(Error::Shape(format!(
                "target '{}' of {} has {} entries, feature grid has {l}",
                t.region,
                p.id,
                t.mask.len()
            )));
        }
        if !cache.contains_key(&t.prompt) {
            cache.insert(t.prompt.clone(), model.text_embedding(&t.prompt)?);
        }
        emb.extend_from_slice(cache[&t.prompt].data());
        gt.extend(t.mask.data().iter().map(|&v| v as f32));
    }
    let n = p.targets.len();
    Ok((Tensor::new([n, d], emb)?, Tensor::new([n, l], gt)?))
}

/// AdamW with a cosine schedule over `epochs × portraits` steps; the
/// portrait order is reshuffled each epoch from `rng`.
pub fn train_pasl(
    data: &[TrainPortrait],
    cfg: PaslConfig,
    tc: &TrainConfig,
    rng: &mut Rng,
) -> Result<(PaslModel<f32>, TrainReport)> {
    if data.is_empty() || data.iter().any(|p| p.targets.is_empty()) {
        return Err(Error::Input("training set is empty or has a portrait without targets".into()));
    }
    let mut model = PaslModel::<f32>::new(cfg)?;
    let total = tc.epochs * data.len();
    let mut opt = AdamW::new(tc.optim, &model.params, total);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cache = BTreeMap::new();
    let mut epoch_losses = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        rng.shuffle(&mut order);
        let mut sum = 0.0;
        for (k, &i) in order.iter().enumerate() {
            let (emb, gt) = stack_targets(&model, &data[i], &mut cache)?;
            let mut g = Graph::new();
            let logits = model.logits_graph(&mut g, &model.params, &data[i].image, &emb)?;
            let (loss, ..) = mask_loss_graph(&mut g, logits, &gt)?;
            let v = g.scalar_value(loss) as f64;
            if !v.is_finite() {
                return Err(Error::Training(format!("non-finite mask loss at epoch {} step {k}", epoch + 1)));
            }
            let grads = g.backward(loss).map_err(|e| {
                Error::Training(format!("backward failed at epoch {} step {k}: {e}", epoch + 1))
            })?;
            opt.step(&mut model.params, &grads)?;
            sum += v;
        }
        epoch_losses.push(sum / data.len() as f64);
    }
    Ok((
        model,
        TrainReport {
            epoch_losses,
            steps: opt.steps_taken(),
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub threshold: f64,
    pub samples: usize,
    /// Mean of per-sample IoU (empty prediction and empty truth count as 1).
    pub mean_iou: f64,
    /// Mean over regions of the per-region sample mean.
    pub class_mean_iou: f64,
    /// Pooled intersection over pooled union across all samples.
    pub overall_iou: f64,
    pub per_region: BTreeMap<String, f64>,
}

pub fn evaluate_iou(model: &PaslModel<f32>, data: &[TrainPortrait], threshold: f64) -> Result<IouReport> {
    let mut per_region: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let (mut sum, mut n, mut inter, mut union) = (0.0, 0usize, 0usize, 0usize);
    for p in data {
        let prompts: Vec<&str> = p.targets.iter().map(|t| t.prompt.as_str()).collect();
        let preds = model.predict_masks(&p.image, &prompts)?;
        for (t, pr) in p.targets.iter().zip(&preds) {
            let iou = mask_iou(&pr.mask, &t.mask, threshold)?;
            sum += iou;
            n += 1;
            let e = per_region.entry(t.region.clone()).or_insert((0.0, 0));
            e.0 += iou;
            e.1 += 1;
            for (&a, &b) in pr.mask.data().iter().zip(t.mask.data()) {
                let (a, b) = (a > threshold, b > threshold);
                inter += (a && b) as usize;
                union += (a || b) as usize;
            }
        }
    }
    if n == 0 {
        return Err(Error::Input("no evaluation samples".into()));
    }
    let per_region: BTreeMap<String, f64> = per_region.into_iter().map(|(k, (s, c))| (k, s / c as f64)).collect();
    let class_mean_iou = per_region.values().sum::<f64>() / per_region.len() as f64;
    Ok(IouReport {
        threshold,
        samples: n,
        mean_iou: sum / n as f64,
        class_mean_iou,
        overall_iou: if union == 0 { 1.0 } else { inter as f64 / union as f64 },
        per_region,
    })
}

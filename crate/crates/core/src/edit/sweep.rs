//! Grid runs over stage-shift step and fusion strategy.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{resample_mask, token_mask_to_pixels, EditConfig, EditSession, MaskMode, MaskSource, Strategy};
use crate::dit::DiT;
use crate::error::{Error, Result};
use crate::metrics::{attr_edit, attr_preserve, attribute_flags, classify_attributes, mask_iou, psnr, ssim, ImagePair, ScoreMatrix};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Stage-shift values of the ablation grid.
pub const PAPER_T_GRID: [usize; 5] = [1, 3, 5, 7, 9];

/// One image with its prompts and editing region.
#[derive(Debug, Clone)]
pub struct SweepItem {
    pub id: String,
    pub image: Tensor,
    pub prompt_src: String,
    pub prompt_tgt: String,
    /// Editing region at pixel resolution, `[H × W]`.
    pub mask: Tensor<f64>,
    /// Part masks for the attribute classifier.
    pub regions: Option<BTreeMap<String, Tensor<f64>>>,
    /// Attribute the edit should switch on.
    pub target_attribute: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub n: usize,
    pub m: usize,
    pub t_values: Vec<usize>,
    pub strategies: Vec<Strategy>,
    pub mask_mode: MaskMode,
    /// A pixel counts as changed when its channel-mean absolute change
    /// exceeds this.
    pub change_threshold: f64,
    /// Salt-and-pepper rates for the robustness check; empty skips it.
    pub noise_levels: Vec<f64>,
    pub noise_t: usize,
    pub seed: u64,
    /// Worker threads; 0 uses the available parallelism.
    pub threads: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            n: 30,
            m: 2,
            t_values: PAPER_T_GRID.to_vec(),
            strategies: vec![Strategy::LatentOnly, Strategy::ValueOnly, Strategy::S2d],
            mask_mode: MaskMode::Binarized,
            change_threshold: 0.02,
            noise_levels: vec![0.1],
            noise_t: 3,
            seed: 0,
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub strategy: Strategy,
    pub t: usize,
    pub images: usize,
    pub psnr: f64,
    pub psnr_out_of_mask: f64,
    pub ssim: f64,
    /// Mean absolute pixel change outside the mask.
    pub change_out: f64,
    /// Mean absolute pixel change inside the mask.
    pub change_in: f64,
    /// IoU of the changed-pixel set against the editing mask.
    pub iou_change: f64,
    pub attr_edit: Option<f64>,
    pub attr_preserve: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub strategy: Strategy,
    pub t: usize,
    pub noise: f64,
    pub psnr_out_clean: f64,
    pub psnr_out_noisy: f64,
    /// `psnr_out_clean − psnr_out_noisy`.
    pub degradation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub version: String,
    pub config: SweepConfig,
    pub items: Vec<String>,
    pub rows: Vec<SweepRow>,
    pub robustness: Vec<RobustnessRow>,
}

impl SweepReport {
    pub fn row(&self, strategy: Strategy, t: usize) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.strategy == strategy && r.t == t)
    }

    pub fn robustness_row(&self, strategy: Strategy, noise: f64) -> Option<&RobustnessRow> {
        self.robustness.iter().find(|r| r.strategy == strategy && r.noise == noise)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<12} {:>3} {:>8} {:>9} {:>7} {:>9} {:>9} {:>8} {:>9} {:>9}\n",
            "strategy", "T", "PSNR", "PSNRout", "SSIM", "chg_out", "chg_in", "IoUchg", "AttrEdit", "AttrPres"
        );
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
        for r in &self.rows {
            s += &format!(
                "{:<12} {:>3} {:>8.3} {:>9.3} {:>7.4} {:>9.5} {:>9.5} {:>8.3} {:>9} {:>9}\n",
                r.strategy.as_str(),
                r.t,
                r.psnr,
                r.psnr_out_of_mask,
                r.ssim,
                r.change_out,
                r.change_in,
                r.iou_change,
                opt(r.attr_edit),
                opt(r.attr_preserve)
            );
        }
        if !self.robustness.is_empty() {
            s += &format!(
                "\n{:<12} {:>3} {:>6} {:>10} {:>10} {:>8}\n",
                "strategy", "T", "noise", "PSNRclean", "PSNRnoisy", "drop"
            );
            for r in &self.robustness {
                s += &format!(
                    "{:<12} {:>3} {:>6.2} {:>10.3} {:>10.3} {:>8.3}\n",
                    r.strategy.as_str(),
                    r.t,
                    r.noise,
                    r.psnr_out_clean,
                    r.psnr_out_noisy,
                    r.degradation
                );
            }
        }
        s
    }
}

/// Replaces each entry with 0 or 1 (equal odds) with probability `rate`.
pub fn salt_and_pepper(mask: &Tensor, rate: f64, rng: &mut Rng) -> Tensor {
    let mut out = mask.clone();
    for v in out.data_mut() {
        if rng.bernoulli(rate) {
            *v = if rng.bernoulli(0.5) { 1.0 } else { 0.0 };
        }
    }
    out
}

struct Job {
    item: usize,
    config: EditConfig,
    mask: Tensor,
}

#[derive(Debug, Clone, Copy)]
struct PixelStats {
    psnr: f64,
    psnr_out: f64,
    ssim: f64,
    change_out: f64,
    change_in: f64,
    iou_change: f64,
}

fn pixel_stats(source: &Tensor, edited: &Tensor, inside: &Tensor<f64>, threshold: f64) -> Result<PixelStats> {
    let pair = ImagePair::new(source, edited)?;
    let hw = inside.len();
    let (a, b) = (source.data(), edited.data());
    let change = Tensor::<f64>::from_fn(inside.dims().to_vec(), |i| {
        (0..3).map(|c| (a[c * hw + i] as f64 - b[c * hw + i] as f64).abs()).sum::<f64>() / 3.0
    });
    let outside = inside.map(|v| 1.0 - v);
    let mean_over = |region: &Tensor<f64>| {
        let n = region.sum();
        if n == 0.0 {
            0.0
        } else {
            change.data().iter().zip(region.data()).map(|(c, r)| c * r).sum::<f64>() / n
        }
    };
    let changed = change.map(|v| if v > threshold { 1.0 } else { 0.0 });
    Ok(PixelStats {
        psnr: psnr(pair, None)?,
        psnr_out: if outside.sum() > 0.0 {
            psnr(pair, Some(&outside))?
        } else {
            f64::NAN
        },
        ssim: ssim(pair)?,
        change_out: mean_over(&outside),
        change_in: mean_over(inside),
        iou_change: mask_iou(&changed, inside, 0.5)?,
    })
}

fn run_jobs(sessions: &[EditSession<'_>], jobs: &[Job], threads: usize) -> Result<Vec<Tensor>> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<Tensor>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let threads = if threads == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        threads
    }
    .min(jobs.len())
    .max(1);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                if k >= jobs.len() {
                    break;
                }
                let job = &jobs[k];
                let out = (|| {
                    let mut s = sessions[job.item].clone();
                    s.set_config(job.config)?;
                    s.set_token_mask(job.mask.clone())?;
                    Ok(s.run()?.image)
                })();
                results.lock().expect("result lock")[k] = Some(out);
            });
        }
    });
    results
        .into_inner()
        .expect("result lock")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// Runs every `(strategy, T)` over every item, plus the salt-and-pepper
/// robustness runs, and aggregates source-relative metrics.
pub fn ablation_sweep(model: &DiT, items: &[SweepItem], cfg: &SweepConfig) -> Result<SweepReport> {
    if items.is_empty() {
        return Err(Error::Input("sweep needs at least one item".into()));
    }
    if cfg.t_values.iter().chain([&cfg.noise_t]).any(|&t| t > cfg.n) {
        return Err(Error::Input(format!("sweep T values must not exceed N = {}", cfg.n)));
    }
    let dc = *model.config();
    let g = dc.grid();
    let base = EditConfig {
        n: cfg.n,
        t: 0,
        m: cfg.m,
        strategy: Strategy::None,
        mask_source: MaskSource::File,
        mask_mode: cfg.mask_mode,
        seed: cfg.seed,
    };
    let min_t = cfg.t_values.iter().chain([&cfg.noise_t]).copied().min().unwrap_or(0);
    let mut sessions = Vec::with_capacity(items.len());
    let mut masks = Vec::with_capacity(items.len());
    let mut insides = Vec::with_capacity(items.len());
    for it in items {
        let s = EditSession::with_recording(model, &it.image, &it.prompt_src, &it.prompt_tgt, base, cfg.n - min_t)
            .map_err(|e| e.in_stage("sweep inversion"))?;
        let pooled = resample_mask(&it.mask, g).map_err(|e| e.in_stage("mask"))?;
        let m = match cfg.mask_mode {
            MaskMode::Continuous => pooled,
            MaskMode::Binarized => pooled.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }),
        };
        let tokens = Tensor::new([g * g], m.data().iter().map(|&v| v as f32).collect())?;
        insides.push(token_mask_to_pixels(&tokens, g, dc.patch)?.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }));
        masks.push(tokens);
        sessions.push(s);
    }

    let mut jobs = Vec::new();
    for &strategy in &cfg.strategies {
        for &t in &cfg.t_values {
            for (k, m) in masks.iter().enumerate() {
                jobs.push(Job {
                    item: k,
                    config: EditConfig { t, strategy, ..base },
                    mask: m.clone(),
                });
            }
        }
    }
    let grid_jobs = jobs.len();
    let robust = [Strategy::LatentOnly, Strategy::S2d];
    let mut rng = Rng::seeded(cfg.seed).derive("sweep/noise");
    for &noise in &cfg.noise_levels {
        for (k, m) in masks.iter().enumerate() {
            let noisy = salt_and_pepper(m, noise, &mut rng);
            for strategy in robust {
                for mask in [m.clone(), noisy.clone()] {
                    jobs.push(Job {
                        item: k,
                        config: EditConfig {
                            t: cfg.noise_t,
                            strategy,
                            ..base
                        },
                        mask,
                    });
                }
            }
        }
    }
    let images = run_jobs(&sessions, &jobs, cfg.threads).map_err(|e| e.in_stage("sweep edit"))?;

    let source_scores: Vec<Option<BTreeMap<String, f64>>> = items
        .iter()
        .map(|it| it.regions.as_ref().map(|r| classify_attributes(&it.image, r)).transpose())
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    let per = items.len();
    for (c, chunk) in jobs[..grid_jobs].chunks(per).enumerate() {
        let imgs = &images[c * per..(c + 1) * per];
        let mut acc = [0.0f64; 6];
        let mut target = Vec::new();
        let mut preserve = Vec::new();
        let mut labels = Vec::new();
        for (k, (job, img)) in chunk.iter().zip(imgs).enumerate() {
            let st = pixel_stats(&items[k].image, img, &insides[k], cfg.change_threshold)?;
            for (a, v) in acc.iter_mut().zip([st.psnr, st.psnr_out, st.ssim, st.change_out, st.change_in, st.iou_change]) {
                *a += v;
            }
            debug_assert_eq!(job.item, k);
            if let (Some(regions), Some(src), Some(attr)) =
                (&items[k].regions, &source_scores[k], &items[k].target_attribute)
            {
                let scores = classify_attributes(img, regions)?;
                let flags = attribute_flags(src);
                target.push(scores[attr.as_str()]);
                let others: Vec<&String> = scores.keys().filter(|a| *a != attr).collect();
                preserve.push(others.iter().map(|a| scores[a.as_str()]).collect());
                labels.push(others.iter().map(|a| flags[a.as_str()]).collect());
            }
        }
        let (attr_e, attr_p) = if target.is_empty() {
            (None, None)
        } else {
            let sm = ScoreMatrix::new(target, preserve, labels);
            (Some(attr_edit(&sm)?), Some(attr_preserve(&sm)?))
        };
        let n = per as f64;
        rows.push(SweepRow {
            strategy: chunk[0].config.strategy,
            t: chunk[0].config.t,
            images: per,
            psnr: acc[0] / n,
            psnr_out_of_mask: acc[1] / n,
            ssim: acc[2] / n,
            change_out: acc[3] / n,
            change_in: acc[4] / n,
            iou_change: acc[5] / n,
            attr_edit: attr_e,
            attr_preserve: attr_p,
        });
    }

    let mut robustness = Vec::new();
    let rest = &jobs[grid_jobs..];
    let rest_imgs = &images[grid_jobs..];
    for (ni, &noise) in cfg.noise_levels.iter().enumerate() {
        for (si, strategy) in robust.into_iter().enumerate() {
            let (mut clean, mut noisy) = (0.0, 0.0);
            for k in 0..per {
                let base_idx = ((ni * per + k) * robust.len() + si) * 2;
                debug_assert_eq!(rest[base_idx].item, k);
                let out = insides[k].map(|v| 1.0 - v);
                if out.sum() == 0.0 {
                    continue;
                }
                clean += psnr(ImagePair::new(&items[k].image, &rest_imgs[base_idx])?, Some(&out))?;
                noisy += psnr(ImagePair::new(&items[k].image, &rest_imgs[base_idx + 1])?, Some(&out))?;
            }
            let n = per as f64;
            robustness.push(RobustnessRow {
                strategy,
                t: cfg.noise_t,
                noise,
                psnr_out_clean: clean / n,
                psnr_out_noisy: noisy / n,
                degradation: (clean - noisy) / n,
            });
        }
    }

    Ok(SweepReport {
        version: crate::VERSION.to_string(),
        config: cfg.clone(),
        items: items.iter().map(|i| i.id.clone()).collect(),
        rows,
        robustness,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn salt_and_pepper_rate_zero_and_one() {
        let m = Tensor::full([100], 0.3f32);
        let mut r = Rng::seeded(1);
        assert_eq!(salt_and_pepper(&m, 0.0, &mut r), m);
        let all = salt_and_pepper(&m, 1.0, &mut r);
        assert!(all.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn pixel_stats_of_identity() {
        let img = Tensor::from_fn([3, 16, 16], |i| (i % 7) as f32 / 7.0);
        let inside = Tensor::<f64>::from_fn([16, 16], |i| (i < 128) as u8 as f64);
        let s = pixel_stats(&img, &img, &inside, 0.02).unwrap();
        assert_eq!((s.change_out, s.change_in), (0.0, 0.0));
        assert_eq!(s.iou_change, 0.0);
        assert!((s.ssim - 1.0).abs() < 1e-12);
    }
}

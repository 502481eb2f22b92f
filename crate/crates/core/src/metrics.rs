//! Edit and preservation metrics plus the analytic attribute oracle for
//! synthetic portraits.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TAU_EDIT: f64 = 0.1;
/// Preservation threshold; not given a value upstream, 0.5 is the usual
/// classifier cut.
pub const TAU_PRESERVE: f64 = 0.5;
/// PSNR reported when the MSE falls below [`MSE_FLOOR`].
pub const PSNR_CAP: f64 = 100.0;
pub const MSE_FLOOR: f64 = 1e-10;

/// Scores from an attribute classifier over a set of edited samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    /// Target-attribute score of each edited sample.
    pub target: Vec<f64>,
    /// Per-sample scores of the attributes that should be preserved.
    pub preserve: Vec<Vec<f64>>,
    /// Source labels for the preserved attributes, same shape as `preserve`.
    pub labels: Vec<Vec<bool>>,
    pub tau: f64,
    pub tau_preserve: f64,
}

impl ScoreMatrix {
    pub fn new(target: Vec<f64>, preserve: Vec<Vec<f64>>, labels: Vec<Vec<bool>>) -> Self {
        Self {
            target,
            preserve,
            labels,
            tau: TAU_EDIT,
            tau_preserve: TAU_PRESERVE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_range = |s: &f64| (0.0..=1.0).contains(s);
        if !self.target.iter().all(in_range) || !self.preserve.iter().flatten().all(in_range) {
            return Err(Error::Input("attribute scores must lie in [0, 1]".into()));
        }
        if self.preserve.len() != self.labels.len()
            || self.preserve.iter().zip(&self.labels).any(|(s, l)| s.len() != l.len())
        {
            return Err(Error::Shape("preservation scores and labels differ in shape".into()));
        }
        Ok(())
    }
}

/// Fraction of samples whose target score exceeds `tau`.
pub fn attr_edit(m: &ScoreMatrix) -> Result<f64> {
    m.validate()?;
    if m.target.is_empty() {
        return Err(Error::Input("attr_edit needs at least one sample".into()));
    }
    let hits = m.target.iter().filter(|&&s| s > m.tau).count();
    Ok(hits as f64 / m.target.len() as f64)
}

/// Fraction of preserved attributes, pooled over all samples, whose
/// thresholded score agrees with the source label.
pub fn attr_preserve(m: &ScoreMatrix) -> Result<f64> {
    m.validate()?;
    let total: usize = m.preserve.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::Input("attr_preserve needs at least one preserved attribute".into()));
    }
    let agree = m
        .preserve
        .iter()
        .zip(&m.labels)
        .flat_map(|(s, l)| s.iter().zip(l))
        .filter(|(&s, &l)| (s > m.tau_preserve) == l)
        .count();
    Ok(agree as f64 / total as f64)
}

/// Source and edited image `[3 × H × W]` in `[0, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct ImagePair<'a> {
    pub source: &'a Tensor,
    pub edited: &'a Tensor,
}

impl<'a> ImagePair<'a> {
    pub fn new(source: &'a Tensor, edited: &'a Tensor) -> Result<Self> {
        if source.dims() != edited.dims() {
            return Err(Error::Shape(format!(
                "image pair dims differ: {:?} vs {:?}",
                source.dims(),
                edited.dims()
            )));
        }
        if source.rank() != 3 || source.dims()[0] != 3 {
            return Err(Error::Shape(format!("expected [3, H, W], got {:?}", source.dims())));
        }
        Ok(Self { source, edited })
    }

    fn hw(&self) -> (usize, usize) {
        (self.source.dims()[1], self.source.dims()[2])
    }
}

/// `10·log10(1/MSE)` over the pixels where `region > 0.5` (all pixels when
/// `None`), pooled over channels.
pub fn psnr(pair: ImagePair<'_>, region: Option<&Tensor<f64>>) -> Result<f64> {
    let (h, w) = pair.hw();
    if let Some(r) = region {
        if r.dims() != [h, w] {
            return Err(Error::Shape(format!("region {:?} vs image {h}x{w}", r.dims())));
        }
    }
    let (a, b) = (pair.source.data(), pair.edited.data());
    let (mut se, mut n) = (0.0f64, 0usize);
    for c in 0..3 {
        for i in 0..h * w {
            if region.is_some_and(|r| r.data()[i] <= 0.5) {
                continue;
            }
            let d = a[c * h * w + i] as f64 - b[c * h * w + i] as f64;
            se += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Input("psnr region is empty".into()));
    }
    Ok(psnr_from_mse(se / n as f64))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < MSE_FLOOR {
        PSNR_CAP
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Luma with the 0.299 / 0.587 / 0.114 weights, `[H × W]`.
pub fn grayscale(img: &Tensor) -> Result<Tensor<f64>> {
    if img.rank() != 3 || img.dims()[0] != 3 {
        return Err(Error::Shape(format!("expected [3, H, W], got {:?}", img.dims())));
    }
    let (h, w) = (img.dims()[1], img.dims()[2]);
    let d = img.data();
    let n = h * w;
    Tensor::new(
        [h, w],
        (0..n)
            .map(|i| 0.299 * d[i] as f64 + 0.587 * d[n + i] as f64 + 0.114 * d[2 * n + i] as f64)
            .collect(),
    )
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filter of `[H × W]`.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = (0..k).map(|j| taps[j] * x[y * w + ox + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = (0..k).map(|i| taps[i] * rows[(oy + i) * ow + ox]).sum();
        }
    }
    out
}

/// Grayscale SSIM with an 11×11 Gaussian window (σ = 1.5), averaged over
/// valid window positions.
pub fn ssim(pair: ImagePair<'_>) -> Result<f64> {
    let (h, w) = pair.hw();
    if h.min(w) < SSIM_WINDOW {
        return Err(Error::Input(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let x = grayscale(pair.source)?;
    let y = grayscale(pair.edited)?;
    let (x, y) = (x.data(), y.data());
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = filter_valid(x, h, w, &taps);
    let my = filter_valid(y, h, w, &taps);
    let mxx = filter_valid(&prod(x, x), h, w, &taps);
    let myy = filter_valid(&prod(y, y), h, w, &taps);
    let mxy = filter_valid(&prod(x, y), h, w, &taps);
    let mut sum = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cxy = mxy[i] - ux * uy;
        sum += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
            / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
    }
    Ok(sum / mx.len() as f64)
}

/// Intersection over union of `pred > threshold` and `gt > threshold`;
/// 1.0 when both are empty.
pub fn mask_iou(pred: &Tensor<f64>, gt: &Tensor<f64>, threshold: f64) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!("mask dims differ: {:?} vs {:?}", pred.dims(), gt.dims())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p > threshold, g > threshold);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// The twelve synthetic attributes, in report order.
pub const ATTRIBUTES: [&str; 12] = [
    "hair_dark",
    "lips_red",
    "has_glasses",
    "brows_thick",
    "eyes_open",
    "cheeks_rosy",
    "skin_light",
    "mouth_open",
    "beard",
    "bangs",
    "earrings",
    "necklace",
];

fn luma(p: [f64; 3]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn redness(p: [f64; 3]) -> f64 {
    p[0] - 0.5 * (p[1] + p[2])
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn affine(x: f64, threshold: f64, gain: f64) -> f64 {
    (0.5 + gain * (x - threshold)).clamp(0.0, 1.0)
}

struct Pixels<'a> {
    img: &'a [f32],
    plane: usize,
}

impl Pixels<'_> {
    fn at(&self, i: usize) -> [f64; 3] {
        [
            self.img[i] as f64,
            self.img[self.plane + i] as f64,
            self.img[2 * self.plane + i] as f64,
        ]
    }

    /// Pixels in any of `inside` and none of `outside`.
    fn select(&self, inside: &[&Tensor<f64>], outside: &[&Tensor<f64>]) -> Vec<[f64; 3]> {
        (0..self.plane)
            .filter(|&i| inside.iter().any(|m| m.data()[i] > 0.5) && outside.iter().all(|m| m.data()[i] <= 0.5))
            .map(|i| self.at(i))
            .collect()
    }
}

fn mean(px: &[[f64; 3]]) -> [f64; 3] {
    let mut m = [0.0; 3];
    for p in px {
        for c in 0..3 {
            m[c] += p[c];
        }
    }
    let n = px.len().max(1) as f64;
    m.map(|v| v / n)
}

fn fraction(px: &[[f64; 3]], f: impl Fn([f64; 3]) -> bool) -> f64 {
    px.iter().filter(|&&p| f(p)).count() as f64 / px.len().max(1) as f64
}

/// Analytic attribute scores in `[0, 1]` from region statistics of a
/// synthetic portrait; a score above 0.5 means the attribute is present.
///
/// The skin reference is the mean colour of the face outline ring, which no
/// attribute paints over. Each score is `clamp(0.5 + gain·(x − θ), 0, 1)`:
///
/// | attribute   | statistic x                                         | θ    |
/// |-------------|-----------------------------------------------------|------|
/// | hair_dark   | 0.30 − mean hair luma                               | 0    |
/// | lips_red    | mean lip redness r − (g+b)/2                        | 0.5  |
/// | has_glasses | share of glasses-zone pixels outside the eyes with luma < 0.15 | 0.05 |
/// | brows_thick | share of brow pixels with luma < 0.25               | 0.6  |
/// | eyes_open   | share of eye pixels with every channel > 0.8        | 0.3  |
/// | cheeks_rosy | cheek redness minus skin redness                    | 0.07 |
/// | skin_light  | skin luma                                           | 0.6  |
/// | mouth_open  | share of mouth pixels with luma < 0.2               | 0.5  |
/// | beard       | RGB distance of chin mean from skin                 | 0.15 |
/// | bangs       | share of forehead pixels farther than 0.15 from skin | 0.25 |
/// | earrings    | share of ear pixels that are gold                   | 0.04 |
/// | necklace    | share of neck pixels with every channel > 0.85      | 0.05 |
pub fn classify_attributes(image: &Tensor, regions: &BTreeMap<String, Tensor<f64>>) -> Result<BTreeMap<String, f64>> {
    if image.rank() != 3 || image.dims()[0] != 3 {
        return Err(Error::Shape(format!("expected [3, H, W], got {:?}", image.dims())));
    }
    let (h, w) = (image.dims()[1], image.dims()[2]);
    let get = |name: &str| -> Result<&Tensor<f64>> {
        let m = regions
            .get(name)
            .ok_or_else(|| Error::Input(format!("region '{name}' missing from layout")))?;
        if m.dims() != [h, w] {
            return Err(Error::Shape(format!("region '{name}' dims {:?} vs image {h}x{w}", m.dims())));
        }
        Ok(m)
    };
    let px = Pixels {
        img: image.data(),
        plane: h * w,
    };
    let skin = mean(&px.select(&[get("face outline")?], &[]));
    let eyes = [get("left eye")?, get("right eye")?];

    let mut s = BTreeMap::new();
    let hair = mean(&px.select(&[get("hair")?], &[]));
    s.insert("hair_dark", affine(0.30 - luma(hair), 0.0, 2.5));
    let lips = mean(&px.select(&[get("upper lip")?, get("lower lip")?], &[]));
    s.insert("lips_red", affine(redness(lips), 0.5, 2.5));
    let frame = px.select(&[get("glasses")?], &eyes);
    s.insert("has_glasses", affine(fraction(&frame, |p| luma(p) < 0.15), 0.05, 10.0));
    let brows = px.select(&[get("left brow")?, get("right brow")?], &[]);
    s.insert("brows_thick", affine(fraction(&brows, |p| luma(p) < 0.25), 0.6, 2.5));
    let eye_px = px.select(&eyes, &[]);
    s.insert(
        "eyes_open",
        affine(fraction(&eye_px, |p| p.iter().all(|&c| c > 0.8)), 0.3, 2.5),
    );
    let cheeks = mean(&px.select(&[get("left cheek")?, get("right cheek")?], &[]));
    s.insert("cheeks_rosy", affine(redness(cheeks) - redness(skin), 0.07, 5.0));
    s.insert("skin_light", affine(luma(skin), 0.6, 2.5));
    let mouth = px.select(&[get("mouth")?], &[]);
    s.insert("mouth_open", affine(fraction(&mouth, |p| luma(p) < 0.2), 0.5, 2.5));
    let chin = mean(&px.select(&[get("chin")?], &[]));
    s.insert("beard", affine(dist(chin, skin), 0.15, 3.0));
    let forehead = px.select(&[get("forehead")?], &[]);
    s.insert("bangs", affine(fraction(&forehead, |p| dist(p, skin) > 0.15), 0.25, 2.0));
    let ears = px.select(&[get("left ear")?, get("right ear")?], &[]);
    s.insert(
        "earrings",
        affine(fraction(&ears, |p| p[0] > 0.75 && p[1] > 0.55 && p[2] < 0.3), 0.04, 10.0),
    );
    let neck = px.select(&[get("neck")?], &[]);
    s.insert(
        "necklace",
        affine(fraction(&neck, |p| p.iter().all(|&c| c > 0.85)), 0.05, 10.0),
    );
    Ok(s.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
}

/// Thresholded [`classify_attributes`].
pub fn attribute_flags(scores: &BTreeMap<String, f64>) -> BTreeMap<String, bool> {
    scores.iter().map(|(k, &v)| (k.clone(), v > 0.5)).collect()
}

/// One entry of a metrics JSONL file: the edit's target attribute score and
/// the scores and source labels of the attributes meant to be preserved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRecord {
    pub id: String,
    #[serde(default)]
    pub target_attribute: Option<String>,
    #[serde(default)]
    pub target_score: Option<f64>,
    #[serde(default)]
    pub preserve: BTreeMap<String, PreservedScore>,
    #[serde(default)]
    pub source_path: Option<String>,
    #[serde(default)]
    pub edited_path: Option<String>,
    #[serde(default)]
    pub mask_path: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreservedScore {
    pub score: f64,
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeRow {
    pub attribute: String,
    pub edit_samples: usize,
    pub attr_edit: Option<f64>,
    pub preserve_samples: usize,
    pub attr_preserve: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub tau: f64,
    pub tau_preserve: f64,
    pub samples: usize,
    pub attr_edit: Option<f64>,
    pub attr_preserve: Option<f64>,
    pub per_attribute: Vec<AttributeRow>,
}

/// Aggregate and per-attribute AttrEdit / AttrPreserve over score records.
pub fn score_report(records: &[ScoreRecord], tau: f64, tau_preserve: f64) -> Result<ScoreReport> {
    let matrix = |rs: &[&ScoreRecord], only: Option<&str>| -> ScoreMatrix {
        let mut m = ScoreMatrix::new(vec![], vec![], vec![]);
        m.tau = tau;
        m.tau_preserve = tau_preserve;
        for r in rs {
            if let (Some(a), Some(s)) = (&r.target_attribute, r.target_score) {
                if only.is_none_or(|o| o == a) {
                    m.target.push(s);
                }
            }
            let (s, l): (Vec<f64>, Vec<bool>) = r
                .preserve
                .iter()
                .filter(|(k, _)| only.is_none_or(|o| o == k.as_str()))
                .map(|(_, p)| (p.score, p.label))
                .unzip();
            m.preserve.push(s);
            m.labels.push(l);
        }
        m
    };
    let optional = |m: &ScoreMatrix, f: fn(&ScoreMatrix) -> Result<f64>, n: usize| -> Result<Option<f64>> {
        if n == 0 {
            Ok(None)
        } else {
            f(m).map(Some)
        }
    };
    let all: Vec<&ScoreRecord> = records.iter().collect();
    let m = matrix(&all, None);
    let n_pres: usize = m.preserve.iter().map(Vec::len).sum();
    let mut names: Vec<String> = records
        .iter()
        .flat_map(|r| r.target_attribute.iter().cloned().chain(r.preserve.keys().cloned()))
        .collect();
    names.sort();
    names.dedup();
    let mut per_attribute = Vec::with_capacity(names.len());
    for a in names {
        let ma = matrix(&all, Some(&a));
        let np: usize = ma.preserve.iter().map(Vec::len).sum();
        per_attribute.push(AttributeRow {
            edit_samples: ma.target.len(),
            attr_edit: optional(&ma, attr_edit, ma.target.len())?,
            preserve_samples: np,
            attr_preserve: optional(&ma, attr_preserve, np)?,
            attribute: a,
        });
    }
    Ok(ScoreReport {
        tau,
        tau_preserve,
        samples: records.len(),
        attr_edit: optional(&m, attr_edit, m.target.len())?,
        attr_preserve: optional(&m, attr_preserve, n_pres)?,
        per_attribute,
    })
}

impl ScoreReport {
    pub fn to_table(&self) -> String {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        let mut s = format!(
            "{:<14} {:>6} {:>10} {:>6} {:>13}\n",
            "attribute", "n_edit", "AttrEdit", "n_pres", "AttrPreserve"
        );
        for r in &self.per_attribute {
            s.push_str(&format!(
                "{:<14} {:>6} {:>10} {:>6} {:>13}\n",
                r.attribute,
                r.edit_samples,
                f(r.attr_edit),
                r.preserve_samples,
                f(r.attr_preserve)
            ));
        }
        s.push_str(&format!(
            "{:<14} {:>6} {:>10} {:>6} {:>13}\n",
            "all",
            self.samples,
            f(self.attr_edit),
            "",
            f(self.attr_preserve)
        ));
        s.push_str(&format!("tau={} tau_preserve={}\n", self.tau, self.tau_preserve));
        s
    }
}

//! Procedural portraits with exact region masks, attribute flags and
//! templated region prompts.
//!
//! Geometry is axis-aligned ellipses and rectangles in face coordinates
//! `dx = (u − cx)/rx`, `dy = (v − cy)/ry`, where `u, v` are pixel centres
//! normalised to `[0, 1]`. Region masks come from a priority label map and
//! are therefore disjoint, except for the glasses zone which overlays the
//! eyes. Region masks are fixed zones; attributes only change the paint
//! inside them. "Left" and "right" are as seen by the viewer.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ATTRIBUTES;
use crate::pasl::{downsample_mask, Target, TrainPortrait};
use crate::pnm::{write_pgm, write_ppm};
use crate::rng::{derive_seed, Rng};
use crate::tensor::{read_fstn_as, write_fstn, Tensor};

/// The 18 region names; each is also the keyword its prompts contain.
pub const REGIONS: [&str; 18] = [
    "hair",
    "forehead",
    "left brow",
    "right brow",
    "left eye",
    "right eye",
    "glasses",
    "nose",
    "left cheek",
    "right cheek",
    "upper lip",
    "lower lip",
    "mouth",
    "chin",
    "left ear",
    "right ear",
    "neck",
    "face outline",
];

/// Prompt templates; `{}` is replaced by the region keyword.
pub const TEMPLATES: [&str; 12] = [
    "edit the {}",
    "change the {} region",
    "make the {} look different",
    "the {} of this person",
    "select the {}",
    "modify the {}",
    "a portrait with a different {}",
    "focus on the {}",
    "highlight the {} area",
    "recolor the {}",
    "retouch the {} only",
    "mask out the {}",
];

pub fn prompt_for(region: &str, template: usize) -> String {
    TEMPLATES[template % TEMPLATES.len()].replace("{}", region)
}

/// Longest region keyword contained in `prompt`.
pub fn region_of_prompt(prompt: &str) -> Option<&'static str> {
    REGIONS.iter().filter(|r| prompt.contains(*r)).max_by_key(|r| r.len()).copied()
}

pub fn region_slug(region: &str) -> String {
    region.replace(' ', "_")
}

const SKIN_LIGHT: [f64; 3] = [0.93, 0.78, 0.68];
const SKIN_DARK: [f64; 3] = [0.55, 0.38, 0.28];
const HAIR_DARK: [f64; 3] = [0.12, 0.09, 0.07];
const HAIR_BLOND: [f64; 3] = [0.95, 0.85, 0.35];
const HAIR_GINGER: [f64; 3] = [0.85, 0.35, 0.12];
const BROW: [f64; 3] = [0.15, 0.11, 0.08];
const SCLERA: [f64; 3] = [0.95, 0.95, 0.93];
const IRIS: [f64; 3] = [0.25, 0.15, 0.10];
const FRAME: [f64; 3] = [0.05, 0.05, 0.05];
const LIPS_RED: [f64; 3] = [0.82, 0.12, 0.16];
const MOUTH_OPEN: [f64; 3] = [0.25, 0.05, 0.07];
const BEARD: [f64; 3] = [0.22, 0.16, 0.11];
const GOLD: [f64; 3] = [0.95, 0.80, 0.15];
const SILVER: [f64; 3] = [0.92, 0.92, 0.95];

/// Sampled geometry and palette of one portrait.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    /// Eye centre height in face units; brows and the glasses zone follow it.
    pub eye_dy: f64,
    pub mouth_dy: f64,
    pub skin: [f64; 3],
    pub hair: [f64; 3],
    pub background: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Label {
    Region(usize),
    Skin,
    Background,
}

fn idx(name: &str) -> usize {
    REGIONS.iter().position(|r| *r == name).expect("known region")
}

fn in_ellipse(x: f64, y: f64, cx: f64, cy: f64, a: f64, b: f64) -> bool {
    ((x - cx) / a).powi(2) + ((y - cy) / b).powi(2) <= 1.0
}

impl Layout {
    fn sample(rng: &mut Rng, flags: &BTreeMap<String, bool>) -> Self {
        let jitter = |rng: &mut Rng, c: f64, d: f64| c + rng.uniform_in(-d, d);
        let base = if flags["skin_light"] { SKIN_LIGHT } else { SKIN_DARK };
        let skin = base.map(|c| jitter(rng, c, 0.03));
        let hair = if flags["hair_dark"] {
            HAIR_DARK
        } else if rng.bernoulli(0.5) {
            HAIR_BLOND
        } else {
            HAIR_GINGER
        };
        let hair = hair.map(|c| jitter(rng, c, 0.02));
        let background = [0.0; 3].map(|_| rng.uniform_in(0.3, 0.6));
        Self {
            cx: jitter(rng, 0.5, 0.015),
            cy: jitter(rng, 0.46, 0.015),
            rx: jitter(rng, 0.32, 0.01),
            ry: jitter(rng, 0.37, 0.01),
            eye_dy: jitter(rng, -0.12, 0.02),
            mouth_dy: jitter(rng, 0.56, 0.02),
            skin,
            hair,
            background,
        }
    }

    fn brow_dy(&self) -> f64 {
        self.eye_dy - 0.33
    }

    fn ear_centers(&self) -> [(f64, f64); 2] {
        let off = self.rx + 0.01;
        [(self.cx - off, self.cy), (self.cx + off, self.cy)]
    }

    fn in_face(&self, dx: f64, dy: f64) -> bool {
        dx * dx + dy * dy <= 1.0
    }

    fn in_glasses_zone(&self, dx: f64, dy: f64) -> bool {
        dx.abs() <= 0.72 && (dy - self.eye_dy).abs() <= 0.21
    }

    fn label(&self, u: f64, v: f64) -> Label {
        let dx = (u - self.cx) / self.rx;
        let dy = (v - self.cy) / self.ry;
        if self.in_face(dx, dy) {
            let side = if dx < 0.0 { 0 } else { 1 };
            let ex = if side == 0 { -0.40 } else { 0.40 };
            if in_ellipse(dx, dy, ex, self.eye_dy, 0.22, 0.13) {
                return Label::Region(idx(["left eye", "right eye"][side]));
            }
            if (dx - ex).abs() <= 0.25 && (dy - self.brow_dy()).abs() <= 0.10 {
                return Label::Region(idx(["left brow", "right brow"][side]));
            }
            if in_ellipse(dx, dy, 0.0, self.mouth_dy, 0.24, 0.09) {
                return Label::Region(idx("mouth"));
            }
            if in_ellipse(dx, dy, 0.0, self.mouth_dy, 0.34, 0.15) {
                return Label::Region(idx(if dy < self.mouth_dy { "upper lip" } else { "lower lip" }));
            }
            if in_ellipse(dx, dy, 0.0, 0.12, 0.13, 0.22) {
                return Label::Region(idx("nose"));
            }
            let cxk = if side == 0 { -0.55 } else { 0.55 };
            if in_ellipse(dx, dy, cxk, 0.32, 0.20, 0.17) {
                return Label::Region(idx(["left cheek", "right cheek"][side]));
            }
            if dy > 0.78 {
                return Label::Region(idx("chin"));
            }
            if dy < -0.52 {
                return Label::Region(idx("forehead"));
            }
            if dx * dx + dy * dy > 0.86 * 0.86 {
                return Label::Region(idx("face outline"));
            }
            return Label::Skin;
        }
        for (k, &(ex, ey)) in self.ear_centers().iter().enumerate() {
            if in_ellipse(u, v, ex, ey, 0.05, 0.09) {
                return Label::Region(idx(["left ear", "right ear"][k]));
            }
        }
        if in_ellipse(u, v, self.cx, self.cy - 0.06, self.rx + 0.07, self.ry + 0.05) && v < self.cy + 0.05 {
            return Label::Region(idx("hair"));
        }
        if (u - self.cx).abs() < 0.13 && v > self.cy + 0.6 * self.ry {
            return Label::Region(idx("neck"));
        }
        Label::Background
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPortrait {
    pub seed: u64,
    pub size: usize,
    /// `[3 × S × S]` in `[0, 1]`.
    pub image: Tensor,
    /// Binary `[S × S]` per region name.
    pub regions: BTreeMap<String, Tensor<f64>>,
    pub attributes: BTreeMap<String, bool>,
    pub layout: Layout,
}

fn shade(c: [f64; 3], k: f64) -> [f64; 3] {
    c.map(|v| (v * k).clamp(0.0, 1.0))
}

/// Paint of a pixel at `(x, y)` with label `lab`.
fn paint(l: &Layout, a: &BTreeMap<String, bool>, size: usize, x: usize, y: usize, lab: Label) -> [f64; 3] {
    let s = size as f64;
    let (u, v) = ((x as f64 + 0.5) / s, (y as f64 + 0.5) / s);
    let dx = (u - l.cx) / l.rx;
    let dy = (v - l.cy) / l.ry;
    let skin = l.skin;
    let lips = if a["lips_red"] {
        LIPS_RED
    } else {
        [skin[0], skin[1] * 0.78, skin[2] * 0.78]
    };
    let name = match lab {
        Label::Background => return l.background,
        Label::Skin => return skin,
        Label::Region(i) => REGIONS[i],
    };
    match name {
        "hair" => l.hair,
        "forehead" if a["bangs"] && dy < -0.72 => l.hair,
        "left eye" | "right eye" => {
            let ex = if name == "left eye" { -0.40 } else { 0.40 };
            let (xn, yn) = ((dx - ex) / 0.22, (dy - l.eye_dy) / 0.13);
            if a["eyes_open"] {
                if xn.abs() < 0.35 {
                    IRIS
                } else {
                    SCLERA
                }
            } else if yn.abs() < 0.3 {
                BROW
            } else {
                skin
            }
        }
        "left brow" | "right brow" => {
            let half = if a["brows_thick"] { 0.9 } else { 0.3 };
            if ((dy - l.brow_dy()) / 0.10).abs() < half {
                BROW
            } else {
                skin
            }
        }
        "nose" => shade(skin, 0.94),
        "left cheek" | "right cheek" if a["cheeks_rosy"] => [
            (skin[0] + 0.05).min(1.0),
            (skin[1] - 0.10).max(0.0),
            (skin[2] - 0.08).max(0.0),
        ],
        "chin" if a["beard"] => BEARD,
        "upper lip" | "lower lip" => lips,
        "mouth" => {
            if a["mouth_open"] {
                MOUTH_OPEN
            } else {
                shade(lips, 0.85)
            }
        }
        "left ear" | "right ear" => {
            let k = if name == "left ear" { 0 } else { 1 };
            let (ex, ey) = l.ear_centers()[k];
            let sx = if k == 0 { -0.025 } else { 0.025 };
            if a["earrings"] && in_ellipse(u, v, ex + sx, ey + 0.055, 0.022, 0.022) {
                GOLD
            } else {
                shade(skin, 0.95)
            }
        }
        "neck" => {
            let band = (0.035f64).max(1.0 / s);
            let top = l.cy + l.ry + 0.05;
            if a["necklace"] && v >= top && v < top + band {
                SILVER
            } else {
                shade(skin, 0.9)
            }
        }
        _ => skin,
    }
}

/// Whether pixel `(x, y)` lies on a glasses frame: a rectangle outline
/// around each eye plus a bridge.
fn on_frame(l: &Layout, size: usize, x: usize, y: usize) -> bool {
    let s = size as f64;
    let t = (s / 32.0).max(1.0);
    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
    let cy = (l.cy + l.eye_dy * l.ry) * s;
    let (hw, hh) = (0.31 * l.rx * s, 0.20 * l.ry * s);
    for ex in [-0.40, 0.40] {
        let cx = (l.cx + ex * l.rx) * s;
        let (ax, ay) = ((px - cx).abs(), (py - cy).abs());
        if ax <= hw && ay <= hh && (ax > hw - t || ay > hh - t) {
            return true;
        }
    }
    let inner = (0.40 - 0.31) * l.rx * s;
    (px - l.cx * s).abs() <= inner && (py - cy).abs() <= t / 2.0
}

/// Deterministic portrait for `seed`. `size` must be at least 32 and a
/// multiple of 4.
pub fn render_portrait(seed: u64, size: usize) -> Result<SyntheticPortrait> {
    if size < 32 || !size.is_multiple_of(4) {
        return Err(Error::Input(format!("portrait size must be >= 32 and divisible by 4, got {size}")));
    }
    let mut rng = Rng::seeded(derive_seed(seed, "portrait"));
    let attributes: BTreeMap<String, bool> = ATTRIBUTES.iter().map(|a| (a.to_string(), rng.bernoulli(0.5))).collect();
    let layout = Layout::sample(&mut rng, &attributes);
    let n = size * size;
    let mut img = vec![0.0f32; 3 * n];
    let mut masks = vec![vec![0.0f64; n]; REGIONS.len()];
    let glasses = idx("glasses");
    let s = size as f64;
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let (u, v) = ((x as f64 + 0.5) / s, (y as f64 + 0.5) / s);
            let lab = layout.label(u, v);
            if let Label::Region(r) = lab {
                masks[r][i] = 1.0;
            }
            let (dx, dy) = ((u - layout.cx) / layout.rx, (v - layout.cy) / layout.ry);
            let in_zone = layout.in_face(dx, dy) && layout.in_glasses_zone(dx, dy);
            if in_zone {
                masks[glasses][i] = 1.0;
            }
            let mut c = paint(&layout, &attributes, size, x, y, lab);
            if attributes["has_glasses"] && in_zone && on_frame(&layout, size, x, y) {
                c = FRAME;
            }
            for k in 0..3 {
                img[k * n + i] = c[k] as f32;
            }
        }
    }
    let regions = REGIONS
        .iter()
        .zip(masks)
        .map(|(r, m)| Ok((r.to_string(), Tensor::new([size, size], m)?)))
        .collect::<Result<_>>()?;
    Ok(SyntheticPortrait {
        seed,
        size,
        image: Tensor::new([3, size, size], img)?,
        regions,
        attributes,
        layout,
    })
}

/// JSONL manifest record: one region prompt of one portrait. Paths are
/// relative to the manifest directory; PPM/PGM copies share the stem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub image_path: String,
    pub mask_path: String,
    pub region: String,
    pub prompt: String,
    pub attributes: BTreeMap<String, bool>,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n: usize,
    pub size: usize,
    pub val_frac: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n: 500,
            size: 64,
            val_frac: 0.2,
            seed: 0,
        }
    }
}

pub const MANIFEST: &str = "manifest.jsonl";

pub fn portrait_id(i: usize) -> String {
    format!("p{i:05}")
}

pub fn portrait_seed(master: u64, i: usize) -> u64 {
    derive_seed(master, &format!("portrait/{i}"))
}

/// Portrait indices assigned to the validation split.
pub fn val_indices(cfg: &DatasetConfig) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cfg.n).collect();
    Rng::seeded(derive_seed(cfg.seed, "split")).shuffle(&mut order);
    let k = (cfg.val_frac * cfg.n as f64).floor() as usize;
    let mut val = order[..k].to_vec();
    val.sort_unstable();
    val
}

/// One random prompt per region for portrait `i`.
pub fn portrait_prompts(master: u64, i: usize) -> Vec<(&'static str, String)> {
    let mut rng = Rng::seeded(derive_seed(master, &format!("prompts/{i}")));
    REGIONS.iter().map(|r| (*r, prompt_for(r, rng.below(TEMPLATES.len())))).collect()
}

/// Portraits of a dataset held in memory, with their split and prompts.
pub fn generate(cfg: &DatasetConfig) -> Result<Vec<(SyntheticPortrait, Split, Vec<(&'static str, String)>)>> {
    if cfg.n == 0 {
        return Err(Error::Input("dataset needs at least one portrait".into()));
    }
    if !(0.0..1.0).contains(&cfg.val_frac) {
        return Err(Error::Input(format!("val fraction {} outside [0, 1)", cfg.val_frac)));
    }
    let val = val_indices(cfg);
    (0..cfg.n)
        .map(|i| {
            let p = render_portrait(portrait_seed(cfg.seed, i), cfg.size)?;
            let split = if val.binary_search(&i).is_ok() { Split::Val } else { Split::Train };
            Ok((p, split, portrait_prompts(cfg.seed, i)))
        })
        .collect()
}

/// Writes images, masks and the manifest under `out`.
pub fn make_dataset(cfg: &DatasetConfig, out: &Path) -> Result<Vec<SampleRecord>> {
    let items = generate(cfg)?;
    for sub in ["images", "masks"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut records = Vec::with_capacity(items.len() * REGIONS.len());
    for (i, (p, split, prompts)) in items.iter().enumerate() {
        let pid = portrait_id(i);
        let image_rel = format!("images/{pid}.fstn");
        write_fstn(out.join(&image_rel), &p.image)?;
        write_ppm(&out.join(format!("images/{pid}.ppm")), &p.image)?;
        for (region, prompt) in prompts {
            let slug = region_slug(region);
            let mask_rel = format!("masks/{pid}_{slug}.fstn");
            let mask = &p.regions[*region];
            write_fstn(out.join(&mask_rel), mask)?;
            write_pgm(&out.join(format!("masks/{pid}_{slug}.pgm")), mask)?;
            records.push(SampleRecord {
                id: format!("{pid}/{slug}"),
                image_path: image_rel.clone(),
                mask_path: mask_rel,
                region: region.to_string(),
                prompt: prompt.clone(),
                attributes: p.attributes.clone(),
                split: *split,
            });
        }
    }
    let path = out.join(MANIFEST);
    let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for r in &records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(records)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<SampleRecord>> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                path: path.clone(),
                msg: format!("line {}: {e}", k + 1),
            })
        })
        .collect()
}

/// In-memory training entry for a portrait, masks downsampled to
/// `feature_size`.
pub fn train_portrait(id: &str, p: &SyntheticPortrait, prompts: &[(&str, String)], feature_size: usize) -> Result<TrainPortrait> {
    let targets = prompts
        .iter()
        .map(|(region, prompt)| {
            let m = p
                .regions
                .get(*region)
                .ok_or_else(|| Error::Input(format!("unknown region '{region}'")))?;
            Ok(Target {
                region: region.to_string(),
                prompt: prompt.clone(),
                mask: downsample_mask(m, feature_size)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(TrainPortrait {
        id: id.to_string(),
        image: p.image.clone(),
        targets,
    })
}

/// Groups manifest records of `split` by image and loads them from disk.
pub fn load_split(dir: &Path, records: &[SampleRecord], split: Split, feature_size: usize) -> Result<Vec<TrainPortrait>> {
    let mut by_image: BTreeMap<&str, Vec<&SampleRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.split == split) {
        by_image.entry(&r.image_path).or_default().push(r);
    }
    let resolve = |p: &str| -> PathBuf { dir.join(p) };
    by_image
        .into_iter()
        .map(|(img, rs)| {
            let image: Tensor = read_fstn_as(resolve(img))?;
            let targets = rs
                .iter()
                .map(|r| {
                    let m: Tensor<f64> = read_fstn_as(resolve(&r.mask_path))?;
                    Ok(Target {
                        region: r.region.clone(),
                        prompt: r.prompt.clone(),
                        mask: downsample_mask(&m, feature_size)?,
                    })
                })
                .collect::<Result<_>>()?;
            let id = Path::new(img).file_stem().map_or(img.to_string(), |s| s.to_string_lossy().into_owned());
            Ok(TrainPortrait { id, image, targets })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keywords_are_unambiguous() {
        for r in REGIONS {
            for t in 0..TEMPLATES.len() {
                assert_eq!(region_of_prompt(&prompt_for(r, t)), Some(r));
            }
        }
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(render_portrait(0, 30).is_err());
        assert!(render_portrait(0, 34).is_err());
    }

    #[test]
    fn glasses_zone_covers_eyes_and_no_brow() {
        let p = render_portrait(5, 64).unwrap();
        let g = &p.regions["glasses"];
        for eye in ["left eye", "right eye"] {
            let e = &p.regions[eye];
            assert!(e.data().iter().zip(g.data()).all(|(&a, &b)| a == 0.0 || b == 1.0));
        }
        for brow in ["left brow", "right brow"] {
            let b = &p.regions[brow];
            assert!(b.data().iter().zip(g.data()).all(|(&a, &z)| a == 0.0 || z == 0.0));
        }
    }

    #[test]
    fn split_size_is_floor() {
        let cfg = DatasetConfig {
            n: 13,
            size: 32,
            val_frac: 0.2,
            seed: 1,
        };
        assert_eq!(val_indices(&cfg).len(), 2);
    }
}

//! Scalar-loop reference implementations shared by test targets.
#![allow(dead_code)]

use maskflow::{Rng, Tensor};

pub fn oracle_attr_edit(s: &[f64], tau: f64) -> f64 {
    let mut hits = 0.0;
    for &v in s {
        if v > tau {
            hits += 1.0;
        }
    }
    hits / s.len() as f64
}

pub fn oracle_attr_preserve(s: &[Vec<f64>], l: &[Vec<bool>], tau: f64) -> f64 {
    let (mut num, mut den) = (0usize, 0usize);
    for i in 0..s.len() {
        den += s[i].len();
        for j in 0..s[i].len() {
            let pred = if s[i][j] > tau { 1 } else { 0 };
            let label = if l[i][j] { 1 } else { 0 };
            if pred == label {
                num += 1;
            }
        }
    }
    num as f64 / den as f64
}

pub fn oracle_psnr(a: &Tensor, b: &Tensor, region: Option<&Tensor<f64>>) -> f64 {
    let hw = a.dims()[1] * a.dims()[2];
    let (mut se, mut n) = (0.0f64, 0.0f64);
    for k in 0..a.len() {
        if let Some(r) = region {
            if !(r.data()[k % hw] > 0.5) {
                continue;
            }
        }
        let d = a.data()[k] as f64 - b.data()[k] as f64;
        se += d * d;
        n += 1.0;
    }
    let mse = se / n;
    if mse < 1e-10 {
        100.0
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

pub fn oracle_iou(p: &Tensor<f64>, g: &Tensor<f64>, th: f64) -> f64 {
    let (mut i, mut u) = (0u32, 0u32);
    for k in 0..p.len() {
        let a = p.data()[k] > th;
        let b = g.data()[k] > th;
        if a && b {
            i += 1;
        }
        if a || b {
            u += 1;
        }
    }
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

/// Direct windowed SSIM: every 11×11 window gathered explicitly.
pub fn oracle_ssim(a: &Tensor, b: &Tensor) -> f64 {
    let (h, w) = (a.dims()[1], a.dims()[2]);
    let gray = |t: &Tensor, y: usize, x: usize| {
        let d = t.data();
        0.299 * d[y * w + x] as f64 + 0.587 * d[h * w + y * w + x] as f64 + 0.114 * d[2 * h * w + y * w + x] as f64
    };
    let mut win = [[0.0f64; 11]; 11];
    let mut tot = 0.0;
    for i in 0..11 {
        for j in 0..11 {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            win[i][j] = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            tot += win[i][j];
        }
    }
    let (c1, c2) = (0.0001, 0.0009);
    let mut acc = 0.0;
    let mut count = 0.0;
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = win[i][j] / tot;
                    mx += k * gray(a, y0 + i, x0 + j);
                    my += k * gray(b, y0 + i, x0 + j);
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = win[i][j] / tot;
                    let (p, q) = (gray(a, y0 + i, x0 + j) - mx, gray(b, y0 + i, x0 + j) - my);
                    vx += k * p * p;
                    vy += k * q * q;
                    cxy += k * p * q;
                }
            }
            acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1.0;
        }
    }
    acc / count
}

pub fn random_image(rng: &mut Rng, h: usize, w: usize) -> Tensor {
    Tensor::from_fn([3, h, w], |_| rng.uniform() as f32)
}

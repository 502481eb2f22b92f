use serde::{Deserialize, Serialize};

use super::MaskPrediction;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// BCE clamps predictions to `[ε, 1 − ε]` before taking logs.
pub const CLAMP_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskLoss {
    pub bce: f64,
    pub dice: f64,
    pub total: f64,
}

fn check_gt(gt: &Tensor<f64>) -> Result<()> {
    if gt.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Input("ground-truth mask must be binary".into()));
    }
    Ok(())
}

/// BCE averaged over pixels on the clamped prediction, Dice
/// `1 − 2ΣM·G / (ΣM + ΣG)` on the raw prediction, and their sum.
pub fn mask_loss(pred: &MaskPrediction, gt: &Tensor<f64>) -> Result<MaskLoss> {
    if pred.mask.dims() != gt.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.mask.dims(),
            gt.dims()
        )));
    }
    check_gt(gt)?;
    let n = gt.len() as f64;
    let (mut bce, mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0, 0.0);
    for (&p, &g) in pred.mask.data().iter().zip(gt.data()) {
        let pc = p.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS);
        bce -= g * pc.ln() + (1.0 - g) * (1.0 - pc).ln();
        inter += p * g;
        sp += p;
        sg += g;
    }
    let bce = bce / n;
    let dice = if sp + sg > 0.0 { 1.0 - 2.0 * inter / (sp + sg) } else { 0.0 };
    Ok(MaskLoss {
        bce,
        dice,
        total: bce + dice,
    })
}

/// Mean over rows of `BCE + Dice` for logits `[P × L]` against binary
/// targets `[P × L]`. Returns `(total, bce, dice)` vars.
pub fn mask_loss_graph<T: Element>(g: &mut Graph<T>, logits: Var, gt: &Tensor<T>) -> Result<(Var, Var, Var)> {
    if g.value(logits).dims() != gt.dims() {
        return Err(Error::Shape(format!(
            "logits {:?} vs targets {:?}",
            g.value(logits).dims(),
            gt.dims()
        )));
    }
    if gt.data().iter().any(|&v| v != T::ZERO && v != T::ONE) {
        return Err(Error::Input("ground-truth mask must be binary".into()));
    }
    let (rows, _) = gt.shape2()?;
    let eps = T::from_f64(CLAMP_EPS);
    let p = g.sigmoid(logits);
    let pc = g.clamp(p, eps, T::ONE - eps);
    let lp = g.ln(pc);
    let neg = g.scale(pc, -T::ONE);
    let q = g.add_scalar(neg, T::ONE);
    let lq = g.ln(q);
    let gv = g.constant(gt.clone());
    let gneg = g.constant(gt.map(|v| T::ONE - v));
    let a = g.mul(gv, lp)?;
    let b = g.mul(gneg, lq)?;
    let s = g.add(a, b)?;
    let m = g.mean(s);
    let bce = g.scale(m, -T::ONE);

    let pg = g.mul(p, gv)?;
    let pg_t = g.transpose(pg)?;
    let inter = g.sum_cols(pg_t)?;
    let p_t = g.transpose(p)?;
    let sp = g.sum_cols(p_t)?;
    let sg: Vec<T> = (0..rows)
        .map(|r| {
            let mut acc = T::ZERO;
            for &v in gt.row(r) {
                acc += v;
            }
            acc
        })
        .collect();
    let sg = g.constant(Tensor::new([rows], sg)?);
    let denom = g.add(sp, sg)?;
    let two_inter = g.scale(inter, T::from_f64(2.0));
    let ratio = g.div(two_inter, denom)?;
    let mean_ratio = g.mean(ratio);
    let neg_ratio = g.scale(mean_ratio, -T::ONE);
    let dice = g.add_scalar(neg_ratio, T::ONE);
    let total = g.add(bce, dice)?;
    Ok((total, bce, dice))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(v: Vec<f64>, h: usize, w: usize) -> MaskPrediction {
        MaskPrediction {
            mask: Tensor::new([h, w], v).unwrap(),
            prompt_id: String::new(),
            image_id: None,
        }
    }

    #[test]
    fn perfect_prediction_has_zero_dice() {
        let gt = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let l = mask_loss(&pred(gt.data().to_vec(), 2, 2), &gt).unwrap();
        assert_eq!(l.dice, 0.0);
        assert!(l.bce < 1e-6);
    }

    #[test]
    fn half_prediction_gives_ln2_bce() {
        for gt in [vec![0.0; 4], vec![1.0, 0.0, 1.0, 1.0]] {
            let gt = Tensor::new([2, 2], gt).unwrap();
            let l = mask_loss(&pred(vec![0.5; 4], 2, 2), &gt).unwrap();
            assert!((l.bce - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn non_binary_target_rejected() {
        let gt = Tensor::new([1, 2], vec![0.5, 1.0]).unwrap();
        assert!(mask_loss(&pred(vec![0.5; 2], 1, 2), &gt).is_err());
    }

    #[test]
    fn graph_loss_matches_direct_loss() {
        let logits = Tensor::<f64>::new([2, 3], vec![0.3, -1.2, 2.0, 0.0, 4.0, -0.5]).unwrap();
        let gt = Tensor::<f64>::new([2, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0]).unwrap();
        let mut g = Graph::new();
        let lv = g.constant(logits.clone());
        let (total, ..) = mask_loss_graph(&mut g, lv, &gt).unwrap();
        let mut want = 0.0;
        for r in 0..2 {
            let p = pred(logits.row(r).iter().map(|&x| crate::autodiff::sigmoid(x)).collect(), 1, 3);
            want += mask_loss(&p, &Tensor::new([1, 3], gt.row(r).to_vec()).unwrap()).unwrap().total;
        }
        assert!((g.scalar_value(total) - want / 2.0).abs() < 1e-12);
    }
}

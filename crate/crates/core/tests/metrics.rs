use maskflow::metrics::{
    attr_edit, attr_preserve, mask_iou, psnr, ssim, ImagePair, ScoreMatrix, PSNR_CAP, TAU_EDIT, TAU_PRESERVE,
};
use maskflow::{Rng, Tensor};
use proptest::prelude::*;

mod common;

use common::*;

#[test]
fn attr_edit_matches_loop_oracle() {
    let mut rng = Rng::seeded(10);
    for _ in 0..1000 {
        let n = 1 + rng.below(40);
        let s: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        let tau = rng.uniform();
        let mut m = ScoreMatrix::new(s.clone(), vec![], vec![]);
        m.tau = tau;
        assert_eq!(attr_edit(&m).unwrap(), oracle_attr_edit(&s, tau));
    }
}

#[test]
fn attr_preserve_matches_loop_oracle() {
    let mut rng = Rng::seeded(11);
    for case in 0..1000 {
        let n = if case == 0 { 50 } else { 1 + rng.below(50) };
        let mut s = Vec::new();
        let mut l = Vec::new();
        for i in 0..n {
            let m = if i == 0 { 1 + rng.below(8) } else { rng.below(9) };
            s.push((0..m).map(|_| rng.uniform()).collect::<Vec<_>>());
            l.push((0..m).map(|_| rng.bernoulli(0.5)).collect::<Vec<_>>());
        }
        let m = ScoreMatrix::new(vec![], s.clone(), l.clone());
        assert_eq!(attr_preserve(&m).unwrap(), oracle_attr_preserve(&s, &l, TAU_PRESERVE));
    }
}

#[test]
fn psnr_matches_loop_oracle() {
    let mut rng = Rng::seeded(12);
    for case in 0..1000 {
        let (h, w) = (2 + rng.below(12), 2 + rng.below(12));
        let a = random_image(&mut rng, h, w);
        let b = random_image(&mut rng, h, w);
        let region = (case % 2 == 1).then(|| {
            let mut r = Tensor::<f64>::from_fn([h, w], |_| rng.uniform());
            r.data_mut()[0] = 1.0;
            r
        });
        let got = psnr(ImagePair::new(&a, &b).unwrap(), region.as_ref()).unwrap();
        assert_eq!(got, oracle_psnr(&a, &b, region.as_ref()));
    }
}

#[test]
fn mask_iou_matches_counting_oracle() {
    let mut rng = Rng::seeded(13);
    for case in 0..1000 {
        let (h, w) = (1 + rng.below(10), 1 + rng.below(10));
        let density = if case % 10 == 0 { 0.0 } else { rng.uniform() };
        let p = Tensor::<f64>::from_fn([h, w], |_| if rng.bernoulli(density) { rng.uniform() } else { 0.0 });
        let g = Tensor::<f64>::from_fn([h, w], |_| if rng.bernoulli(density) { 1.0 } else { 0.0 });
        assert_eq!(mask_iou(&p, &g, 0.5).unwrap(), oracle_iou(&p, &g, 0.5));
    }
}

#[test]
fn ssim_matches_direct_window_oracle() {
    let mut rng = Rng::seeded(14);
    for _ in 0..20 {
        let (h, w) = (11 + rng.below(10), 11 + rng.below(10));
        let a = random_image(&mut rng, h, w);
        let noise = rng.uniform() * 0.5;
        let b = Tensor::from_fn([3, h, w], |i| (a.data()[i] + (noise * (rng.uniform() - 0.5)) as f32).clamp(0.0, 1.0));
        let got = ssim(ImagePair::new(&a, &b).unwrap()).unwrap();
        let want = oracle_ssim(&a, &b);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}

#[test]
fn attr_edit_uses_default_tau() {
    assert_eq!(TAU_EDIT, 0.1);
    let m = ScoreMatrix::new(vec![0.5, 0.05, 0.2], vec![], vec![]);
    assert_eq!(attr_edit(&m).unwrap(), 2.0 / 3.0);
}

proptest! {
    #[test]
    fn psnr_decreases_with_noise_amplitude(seed in 0u64..1000, a1 in 0.01f64..0.3, extra in 0.01f64..0.3) {
        let mut rng = Rng::seeded(seed);
        let x = Tensor::from_fn([3, 8, 8], |_| 0.5f32);
        let dir: Vec<f64> = (0..x.len()).map(|_| rng.uniform() * 2.0 - 1.0).collect();
        let noisy = |amp: f64| Tensor::from_fn([3, 8, 8], |i| (0.5 + amp * dir[i]) as f32);
        let (n1, n2) = (noisy(a1), noisy(a1 + extra));
        let p1 = psnr(ImagePair::new(&x, &n1).unwrap(), None).unwrap();
        let p2 = psnr(ImagePair::new(&x, &n2).unwrap(), None).unwrap();
        prop_assert!(p2 < p1);
    }

    #[test]
    fn ssim_of_image_with_itself_is_one(seed in 0u64..1000, h in 11usize..20, w in 11usize..20) {
        let mut rng = Rng::seeded(seed);
        let x = random_image(&mut rng, h, w);
        let s = ssim(ImagePair::new(&x, &x).unwrap()).unwrap();
        prop_assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn accuracies_are_permutation_invariant(seed in 0u64..1000, n in 2usize..30) {
        let mut rng = Rng::seeded(seed);
        let t: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        let s: Vec<Vec<f64>> = (0..n).map(|_| (0..rng.below(5)).map(|_| rng.uniform()).collect()).collect();
        let l: Vec<Vec<bool>> = s.iter().map(|r| r.iter().map(|_| rng.bernoulli(0.5)).collect()).collect();
        let mut idx: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut idx);
        let a = ScoreMatrix::new(t.clone(), s.clone(), l.clone());
        let b = ScoreMatrix::new(
            idx.iter().map(|&i| t[i]).collect(),
            idx.iter().map(|&i| s[i].clone()).collect(),
            idx.iter().map(|&i| l[i].clone()).collect(),
        );
        prop_assert_eq!(attr_edit(&a).unwrap(), attr_edit(&b).unwrap());
        if s.iter().any(|r| !r.is_empty()) {
            prop_assert_eq!(attr_preserve(&a).unwrap(), attr_preserve(&b).unwrap());
        }
    }

    #[test]
    fn psnr_capped_for_identical(seed in 0u64..100) {
        let mut rng = Rng::seeded(seed);
        let x = random_image(&mut rng, 5, 5);
        prop_assert_eq!(psnr(ImagePair::new(&x, &x).unwrap(), None).unwrap(), PSNR_CAP);
    }
}

use maskflow::autodiff::{sigmoid, Graph};
use maskflow::gradcheck::grad_check;
use maskflow::pasl::{
    complexity_report, encoder_shape, mask_loss, mask_loss_graph, similarity_mask, train_pasl, MaskPrediction, PaslConfig,
    PaslModel, Target, TrainConfig, TrainPortrait,
};
use maskflow::synth::{portrait_prompts, render_portrait, train_portrait};
use maskflow::{Rng, Tensor};
use proptest::prelude::*;

/// Scalar-loop reference for `σ(Σ_c f[c, i]·t[c])`.
fn oracle_similarity(feat: &Tensor<f64>, text: &Tensor<f64>) -> Vec<f64> {
    let c = feat.dims()[0];
    let l = feat.len() / c;
    let mut out = vec![0.0; l];
    for i in 0..l {
        let mut dot = 0.0;
        for k in 0..c {
            dot += feat.data()[k * l + i] * text.data()[k];
        }
        out[i] = 1.0 / (1.0 + (-dot).exp());
    }
    out
}

fn oracle_loss(p: &[f64], g: &[f64]) -> (f64, f64) {
    let eps = 1e-7;
    let mut bce = 0.0;
    let (mut num, mut den) = (0.0, 0.0);
    for k in 0..p.len() {
        let q = p[k].max(eps).min(1.0 - eps);
        bce += -(g[k] * q.ln() + (1.0 - g[k]) * (1.0 - q).ln());
        num += p[k] * g[k];
        den += p[k] + g[k];
    }
    (bce / p.len() as f64, 1.0 - 2.0 * num / den)
}

#[test]
fn similarity_matches_scalar_oracle() {
    let mut rng = Rng::seeded(1);
    for _ in 0..50 {
        let c = 1 + rng.below(16);
        let h = 1 + rng.below(8);
        let feat = Tensor::<f64>::from_fn([c, h, h], |_| rng.normal());
        let text = Tensor::<f64>::from_fn([c], |_| rng.normal());
        let m = similarity_mask(&feat, &text).unwrap();
        assert_eq!(m.dims(), &[h, h]);
        for (a, b) in m.data().iter().zip(oracle_similarity(&feat, &text)) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn zero_features_and_saturation() {
    let feat = Tensor::<f64>::zeros([4, 2, 2]);
    let text = Tensor::<f64>::from_fn([4], |i| i as f64 + 1.0);
    assert!(similarity_mask(&feat, &text).unwrap().data().iter().all(|&v| v == 0.5));
    let feat = Tensor::<f64>::from_fn([4, 1, 1], |i| 50.0 * (i as f64 + 1.0));
    assert!(similarity_mask(&feat, &text).unwrap().data()[0] > 1.0 - 1e-9);
}

#[test]
fn loss_matches_scalar_oracle() {
    let mut rng = Rng::seeded(2);
    for _ in 0..200 {
        let p: Vec<f64> = (0..64).map(|_| rng.uniform()).collect();
        let g: Vec<f64> = (0..64).map(|_| if rng.bernoulli(0.4) { 1.0 } else { 0.0 }).collect();
        let pred = MaskPrediction {
            mask: Tensor::new([8, 8], p.clone()).unwrap(),
            prompt_id: String::new(),
            image_id: None,
        };
        let l = mask_loss(&pred, &Tensor::new([8, 8], g.clone()).unwrap()).unwrap();
        let (bce, dice) = oracle_loss(&p, &g);
        assert!((l.bce - bce).abs() < 1e-10);
        assert!((l.dice - dice).abs() < 1e-10);
        assert!((l.total - bce - dice).abs() < 1e-10);
    }
}

#[test]
fn paper_mode_shapes_and_counts() {
    let cfg = PaslConfig::paper();
    assert_eq!(encoder_shape(&cfg).unwrap(), [512, 64, 64]);
    let r = complexity_report(&cfg);
    assert_eq!(r.row("Image Encoder").unwrap().params, 6_270_592);
    assert_eq!(r.row("Multi-Modal Projector").unwrap().params, 1_312_256);
    let m = PaslModel::<f32>::new(cfg).unwrap();
    assert_eq!(m.project_text("edit the hair").unwrap().dims(), &[512]);
    assert_eq!(m.text_embedding("edit the hair").unwrap().dims(), &[1, 768]);
    let enc: usize = m.encoder_params().iter().map(|&id| m.params.get(id).len()).sum();
    let proj: usize = m.projector_params().iter().map(|&id| m.params.get(id).len()).sum();
    assert_eq!((enc, proj), (6_270_592, 1_312_256));
    assert_eq!(m.params.num_scalars(), enc + proj);
}

#[test]
fn empty_prompt_is_rejected_and_projection_is_deterministic() {
    let m = PaslModel::<f32>::new(PaslConfig::toy()).unwrap();
    assert!(m.project_text("").is_err());
    assert_eq!(m.project_text("edit the nose").unwrap(), m.project_text("edit the nose").unwrap());
}

fn toy_batch(model: &PaslModel<f64>, seed: u64) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let p = render_portrait(seed, 64).unwrap();
    let prompts = portrait_prompts(seed, 0);
    let tp = train_portrait("g", &p, &prompts[..4], model.config().feature_size()).unwrap();
    let d = model.config().text_dim;
    let mut emb = Vec::new();
    let mut gt = Vec::new();
    for t in &tp.targets {
        emb.extend(model.text_embedding(&t.prompt).unwrap().into_data());
        gt.extend_from_slice(t.mask.data());
    }
    let n = tp.targets.len();
    (
        tp.image.cast(),
        Tensor::new([n, d], emb).unwrap(),
        Tensor::new([n, gt.len() / n], gt).unwrap(),
    )
}

#[test]
fn loss_gradients_match_central_differences() {
    let model = PaslModel::<f64>::new(PaslConfig::toy()).unwrap();
    let (x, emb, gt) = toy_batch(&model, 3);
    let f = |g: &mut Graph<f64>, ps: &maskflow::autodiff::ParamSet<f64>| {
        let logits = model.logits_graph(g, ps, &x, &emb)?;
        Ok(mask_loss_graph(g, logits, &gt)?.0)
    };
    let r = grad_check(f, &model.params, 1e-4, Some(6), &mut Rng::seeded(4)).unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
    assert_eq!(r.coords_checked, 6 * model.params.len());
}

#[test]
fn graph_logits_match_inference_path() {
    let model = PaslModel::<f64>::new(PaslConfig::toy()).unwrap();
    let (x, emb, _) = toy_batch(&model, 5);
    let mut g = Graph::new();
    let logits = model.logits_graph(&mut g, &model.params, &x, &emb).unwrap();
    let p = render_portrait(5, 64).unwrap();
    let prompts = portrait_prompts(5, 0);
    for (r, (_, prompt)) in prompts[..4].iter().enumerate() {
        let m = model.predict_mask(&p.image.cast(), prompt).unwrap();
        for (a, &b) in m.mask.data().iter().zip(g.value(logits).row(r)) {
            assert!((a - sigmoid(b)).abs() < 1e-12);
        }
    }
}

#[test]
fn single_sample_overfits() {
    let p = render_portrait(11, 64).unwrap();
    let prompt = "edit the hair".to_string();
    let cfg = PaslConfig::toy();
    let tp = train_portrait("one", &p, &[("hair", prompt.clone())], cfg.feature_size()).unwrap();
    let tc = TrainConfig {
        epochs: 500,
        optim: maskflow::optim::AdamWConfig {
            lr: 1e-3,
            ..Default::default()
        },
    };
    let (model, report) = train_pasl(std::slice::from_ref(&tp), cfg, &tc, &mut Rng::seeded(0)).unwrap();
    assert_eq!(report.steps, 500);
    let last = *report.epoch_losses.last().unwrap();
    assert!(last < 0.01, "final loss {last}");
    let pred = model.predict_mask(&tp.image, &prompt).unwrap();
    let l = mask_loss(&pred, &tp.targets[0].mask).unwrap().total;
    assert!(l < 0.01, "{l}");
}

#[test]
fn empty_training_set_rejected() {
    assert!(train_pasl(&[], PaslConfig::toy(), &TrainConfig::default(), &mut Rng::seeded(0)).is_err());
    let tp = TrainPortrait {
        id: "x".into(),
        image: Tensor::zeros([3, 64, 64]),
        targets: vec![],
    };
    assert!(train_pasl(&[tp], PaslConfig::toy(), &TrainConfig::default(), &mut Rng::seeded(0)).is_err());
}

#[test]
fn wrong_target_size_is_shape_error() {
    let tp = TrainPortrait {
        id: "x".into(),
        image: Tensor::zeros([3, 64, 64]),
        targets: vec![Target {
            region: "hair".into(),
            prompt: "edit the hair".into(),
            mask: Tensor::zeros([4, 4]),
        }],
    };
    let tc = TrainConfig {
        epochs: 1,
        ..Default::default()
    };
    assert!(matches!(
        train_pasl(&[tp], PaslConfig::toy(), &tc, &mut Rng::seeded(0)),
        Err(maskflow::Error::Shape(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn masks_lie_strictly_inside_unit_interval(seed in any::<u64>()) {
        let mut cfg = PaslConfig::toy();
        cfg.seed = seed;
        let m = PaslModel::<f32>::new(cfg).unwrap();
        let p = render_portrait(seed, 64).unwrap();
        let pred = m.predict_mask(&p.image, "edit the chin").unwrap();
        prop_assert!(pred.mask.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn loss_terms_are_bounded(seed in any::<u64>()) {
        let mut rng = Rng::seeded(seed);
        let p: Vec<f64> = (0..16).map(|_| rng.uniform_in(1e-3, 1.0 - 1e-3)).collect();
        let mut g: Vec<f64> = (0..16).map(|_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 }).collect();
        g[0] = 1.0;
        let pred = MaskPrediction { mask: Tensor::new([4, 4], p).unwrap(), prompt_id: String::new(), image_id: None };
        let l = mask_loss(&pred, &Tensor::new([4, 4], g).unwrap()).unwrap();
        prop_assert!(l.bce >= 0.0);
        prop_assert!((0.0..1.0).contains(&l.dice));
    }
}

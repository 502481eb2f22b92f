use maskflow::dit::{DiT, DiTConfig, DiTVelocity, ForwardTrace, HookPlan, Injector, Recorder, ValueCache, ValueHook};
use maskflow::flow::{denoise, invert, StepKey, TimeGrid};
use maskflow::{Error, Rng, Tensor};

fn model() -> DiT {
    DiT::new(DiTConfig::default()).unwrap()
}

fn image(seed: u64) -> Tensor {
    let mut r = Rng::seeded(seed);
    let (a, b) = (r.uniform_in(2.0, 6.0), r.uniform_in(2.0, 6.0));
    Tensor::from_fn([3, 64, 64], |i| {
        let (c, y, x) = (i / 4096, (i / 64) % 64, i % 64);
        let v = 0.5 + 0.3 * ((a * x as f64 / 64.0 + c as f64).sin() * (b * y as f64 / 64.0).cos());
        v as f32
    })
}

fn latent(m: &DiT, seed: u64) -> Tensor {
    m.patchify(&image(seed)).unwrap()
}

#[test]
fn patchify_round_trip_and_token_count() {
    let m = model();
    let x = image(1);
    let z = m.patchify(&x).unwrap();
    assert_eq!(z.dims(), &[256, 64]);
    let back = m.unpatchify(&z).unwrap();
    let rel = back.rel_l2(&x).unwrap();
    assert!(rel < 1e-5, "{rel}");
}

#[test]
fn forward_is_deterministic() {
    let m = model();
    let p = m.embed_prompt("a portrait").unwrap();
    let z = latent(&m, 2);
    let a = m.forward(&z, 0.3, &p, None).unwrap();
    let b = m.forward(&z, 0.3, &p, None).unwrap();
    assert_eq!(a.to_fstn_bytes(), b.to_fstn_bytes());
}

#[test]
fn self_injection_is_identity_at_every_block_and_time() {
    let m = model();
    let p = m.embed_prompt("a portrait with red lips").unwrap();
    let z = latent(&m, 3);
    for (step, t) in [(1usize, 0.0), (5, 0.37), (30, 0.99)] {
        for key in [StepKey::main(step), StepKey::midpoint(step)] {
            let plain = m.forward(&z, t, &p, None).unwrap();
            let mut cache = ValueCache::new();
            m.forward(&z, t, &p, Some(&mut Recorder { cache: &mut cache, key })).unwrap();
            assert_eq!(cache.len(), 2);
            let mut inj = Injector {
                cache: &cache,
                key,
                mask: None,
                text_len: 8,
            };
            let again = m.forward(&z, t, &p, Some(&mut inj)).unwrap();
            assert!(again.max_abs_diff(&plain).unwrap() < 1e-6);
        }
    }
}

struct Spy<H> {
    inner: H,
    seen: Vec<(usize, Tensor, Tensor)>,
}

impl<H: ValueHook> ValueHook for Spy<H> {
    fn on_value(&mut self, block: usize, v: &Tensor) -> maskflow::Result<Option<Tensor>> {
        let out = self.inner.on_value(block, v)?;
        self.seen.push((block, v.clone(), out.clone().unwrap_or_else(|| v.clone())));
        Ok(out)
    }
}

#[test]
fn full_replacement_installs_source_image_values_and_keeps_text() {
    let m = model();
    let p = m.embed_prompt("a portrait").unwrap();
    let q = m.embed_prompt("a portrait with glasses").unwrap();
    let key = StepKey::main(4);
    let mut cache = ValueCache::new();
    m.forward(&latent(&m, 4), 0.4, &p, Some(&mut Recorder { cache: &mut cache, key })).unwrap();
    let mut spy = Spy {
        inner: Injector {
            cache: &cache,
            key,
            mask: Some(&Tensor::zeros([256])),
            text_len: 8,
        },
        seen: vec![],
    };
    m.forward(&latent(&m, 5), 0.4, &q, Some(&mut spy)).unwrap();
    assert_eq!(spy.seen.len(), 2);
    for (block, before, after) in &spy.seen {
        let src = cache.get(key, *block).unwrap();
        assert_eq!(after.slice_rows(8, 264).unwrap(), src.slice_rows(8, 264).unwrap());
        assert_eq!(after.slice_rows(0, 8).unwrap(), before.slice_rows(0, 8).unwrap());
    }
}

#[test]
fn injection_leaves_earlier_blocks_untouched() {
    let m = model();
    let p = m.embed_prompt("a portrait").unwrap();
    let key = StepKey::main(1);
    let mut cache = ValueCache::new();
    m.forward(&latent(&m, 6), 0.6, &p, Some(&mut Recorder { cache: &mut cache, key })).unwrap();
    let z = latent(&m, 7);
    let mut plain = ForwardTrace::default();
    m.forward_traced(&z, 0.6, &p, None, Some(&mut plain)).unwrap();
    let mut inj = ForwardTrace::default();
    let mut hook = Injector {
        cache: &cache,
        key,
        mask: None,
        text_len: 8,
    };
    m.forward_traced(&z, 0.6, &p, Some(&mut hook), Some(&mut inj)).unwrap();
    let first = m.config().depth - m.config().m;
    for l in 0..=first {
        assert_eq!(plain.block_inputs[l], inj.block_inputs[l], "block {l}");
    }
    assert_ne!(plain.block_inputs[first + 1], inj.block_inputs[first + 1]);
    // f32 accumulation over the 264 keys of a row.
    let bound = 264.0 * f32::EPSILON as f64;
    assert!(plain.max_row_sum_error < bound, "{}", plain.max_row_sum_error);
}

#[test]
fn missing_cache_entry_is_reported() {
    let m = model();
    let p = m.embed_prompt("a portrait").unwrap();
    let cache = ValueCache::new();
    let mut hook = Injector {
        cache: &cache,
        key: StepKey::midpoint(9),
        mask: None,
        text_len: 8,
    };
    let err = m.forward(&latent(&m, 1), 0.5, &p, Some(&mut hook)).unwrap_err();
    assert!(matches!(err, Error::CacheMiss { step: 9, phase: "midpoint", block: 4 }), "{err}");
}

#[test]
fn prompt_corpus_embeds_distinctly() {
    let m = model();
    let corpus = [
        "a portrait",
        "a portrait with glasses",
        "make the hair darker",
        "red lips",
        "lips red",
        "thick brows",
        "close the eyes",
        "rosy cheeks",
    ];
    let embs: Vec<_> = corpus.iter().map(|s| m.embed_prompt(s).unwrap()).collect();
    for i in 0..embs.len() {
        for j in i + 1..embs.len() {
            assert_ne!(embs[i].tokens, embs[j].tokens, "{} / {}", corpus[i], corpus[j]);
            assert_ne!(embs[i].prompt_id, embs[j].prompt_id);
        }
    }
}

#[test]
fn weights_round_trip_through_directory() {
    let cfg = DiTConfig {
        depth: 2,
        seed: 11,
        ..DiTConfig::default()
    };
    let m = DiT::new(cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    m.save(dir.path()).unwrap();
    let back = DiT::load(dir.path()).unwrap();
    assert_eq!(back, m);
    std::fs::remove_file(dir.path().join("head.fstn")).unwrap();
    assert!(DiT::load(dir.path()).is_err());
}

fn round_trip(m: &DiT, n: usize) -> f64 {
    let p = m.embed_prompt("a portrait").unwrap();
    let z0 = latent(m, 8);
    let g = TimeGrid::uniform(n).unwrap();
    let path = invert(&z0, &g, &mut DiTVelocity::new(m, &p, HookPlan::None), None).unwrap();
    let back = denoise(&path.zn, &g, &mut DiTVelocity::new(m, &p, HookPlan::None), None, None).unwrap();
    back.rel_l2(&z0).unwrap()
}

#[test]
fn inversion_round_trip_improves_with_steps() {
    let m = model();
    let errs: Vec<f64> = [15, 30, 60].iter().map(|&n| round_trip(&m, n)).collect();
    println!("round-trip rel L2 at N=15/30/60: {errs:?}");
    assert!(errs[1] < 0.05);
    assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
}

#[test]
fn recording_covers_both_evaluations_below_the_limit() {
    let m = DiT::new(DiTConfig {
        depth: 2,
        m: 1,
        ..DiTConfig::default()
    })
    .unwrap();
    let p = m.embed_prompt("a portrait").unwrap();
    let g = TimeGrid::uniform(5).unwrap();
    let mut cache = ValueCache::new();
    let plan = HookPlan::Record {
        cache: &mut cache,
        max_step: 3,
    };
    invert(&latent(&m, 9), &g, &mut DiTVelocity::new(&m, &p, plan), None).unwrap();
    assert_eq!(cache.steps(), vec![1, 2, 3]);
    assert_eq!(cache.len(), 6);
    cache.check_coverage(3, &[1]).unwrap();
}


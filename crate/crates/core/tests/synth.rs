use maskflow::metrics::{attribute_flags, classify_attributes, ATTRIBUTES};
use maskflow::synth::{
    generate, make_dataset, read_manifest, region_of_prompt, render_portrait, DatasetConfig, Split, REGIONS, TEMPLATES,
};
use proptest::prelude::*;

#[test]
fn same_seed_same_portrait() {
    let a = render_portrait(42, 64).unwrap();
    let b = render_portrait(42, 64).unwrap();
    assert_eq!(a, b);
    let c = render_portrait(43, 64).unwrap();
    assert_ne!(a.image, c.image);
}

#[test]
fn classifier_reproduces_flags_over_1000_seeds() {
    for seed in 0..1000u64 {
        let p = render_portrait(seed, 64).unwrap();
        let scores = classify_attributes(&p.image, &p.regions).unwrap();
        assert_eq!(scores.len(), ATTRIBUTES.len());
        let flags = attribute_flags(&scores);
        assert_eq!(flags, p.attributes, "seed {seed}: scores {scores:?}");
    }
}

#[test]
fn recoloring_lips_red_flips_the_score() {
    let seed = (0..100u64)
        .find(|&s| !render_portrait(s, 64).unwrap().attributes["lips_red"])
        .unwrap();
    let mut p = render_portrait(seed, 64).unwrap();
    let before = classify_attributes(&p.image, &p.regions).unwrap()["lips_red"];
    let hw = 64 * 64;
    for region in ["upper lip", "lower lip"] {
        let m = p.regions[region].clone();
        let d = p.image.data_mut();
        for i in 0..hw {
            if m.data()[i] > 0.5 {
                d[i] = 0.85;
                d[hw + i] = 0.1;
                d[2 * hw + i] = 0.12;
            }
        }
    }
    let after = classify_attributes(&p.image, &p.regions).unwrap()["lips_red"];
    assert!(before < 0.5 && after > 0.5, "{before} -> {after}");
}

#[test]
fn missing_region_is_an_input_error() {
    let mut p = render_portrait(1, 64).unwrap();
    p.regions.remove("hair");
    assert!(classify_attributes(&p.image, &p.regions).is_err());
}

#[test]
fn ten_portraits_give_180_samples_and_stable_manifest() {
    let cfg = DatasetConfig {
        n: 10,
        size: 32,
        val_frac: 0.2,
        seed: 9,
    };
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let r1 = make_dataset(&cfg, d1.path()).unwrap();
    make_dataset(&cfg, d2.path()).unwrap();
    assert_eq!(r1.len(), 180);
    let m1 = std::fs::read(d1.path().join("manifest.jsonl")).unwrap();
    assert_eq!(m1, std::fs::read(d2.path().join("manifest.jsonl")).unwrap());
    assert_eq!(read_manifest(d1.path()).unwrap(), r1);

    let val: std::collections::BTreeSet<&str> =
        r1.iter().filter(|r| r.split == Split::Val).map(|r| r.image_path.as_str()).collect();
    let train: std::collections::BTreeSet<&str> =
        r1.iter().filter(|r| r.split == Split::Train).map(|r| r.image_path.as_str()).collect();
    assert_eq!(val.len(), 2);
    assert!(val.is_disjoint(&train));
    for r in &r1 {
        assert!(r.prompt.contains(&r.region));
        assert_eq!(region_of_prompt(&r.prompt), Some(r.region.as_str()));
        assert!(d1.path().join(&r.mask_path).exists());
        assert!(d1.path().join(r.mask_path.replace(".fstn", ".pgm")).exists());
        assert!(d1.path().join(r.image_path.replace(".fstn", ".ppm")).exists());
    }
}

#[test]
fn unwritable_output_is_io_error() {
    let f = tempfile::NamedTempFile::new().unwrap();
    let cfg = DatasetConfig {
        n: 1,
        size: 32,
        ..Default::default()
    };
    let err = make_dataset(&cfg, &f.path().join("sub")).unwrap_err();
    assert!(matches!(err, maskflow::Error::Io { .. }), "{err:?}");
}

#[test]
fn templates_per_region() {
    assert!(TEMPLATES.len() >= 10);
    assert_eq!(REGIONS.len(), 18);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn every_region_is_non_empty_and_in_bounds(seed in any::<u64>(), k in 0usize..5) {
        let size = [32, 48, 64, 96, 128][k];
        let p = render_portrait(seed, size).unwrap();
        prop_assert_eq!(p.regions.len(), 18);
        prop_assert!(p.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        for (name, m) in &p.regions {
            prop_assert_eq!(m.dims(), &[size, size][..]);
            prop_assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
            prop_assert!(m.sum() > 0.0, "region {} empty at size {}", name, size);
        }
    }

    #[test]
    fn label_regions_are_pairwise_disjoint(seed in any::<u64>()) {
        let p = render_portrait(seed, 64).unwrap();
        let names: Vec<&String> = p.regions.keys().filter(|n| n.as_str() != "glasses").collect();
        for (i, a) in names.iter().enumerate() {
            for b in &names[i + 1..] {
                let (ma, mb) = (&p.regions[*a], &p.regions[*b]);
                let overlap = ma.data().iter().zip(mb.data()).any(|(&x, &y)| x > 0.0 && y > 0.0);
                prop_assert!(!overlap, "{} overlaps {}", a, b);
            }
        }
    }

    #[test]
    fn split_is_disjoint_and_floor_sized(seed in any::<u64>(), n in 1usize..30, frac in 0.0f64..0.9) {
        let cfg = DatasetConfig { n, size: 32, val_frac: frac, seed };
        let items = generate(&cfg).unwrap();
        let val = items.iter().filter(|(_, s, _)| *s == Split::Val).count();
        prop_assert_eq!(val, (frac * n as f64).floor() as usize);
    }
}

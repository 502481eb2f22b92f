use maskflow::flow::demo2d::{run_demo, Demo2dConfig};
use maskflow::flow::{euler_step, interpolate, rf_solver_step, LatentState, StepKey, TimeGrid};
use maskflow::{Rng, Tensor};
use proptest::prelude::*;

fn decay(z: &Tensor<f64>, _t: f64, _k: StepKey) -> maskflow::Result<Tensor<f64>> {
    Ok(z.map(|x| -x))
}

/// Integrate z' = −z backward from z(1) = e to t = 0; the exact answer is e².
fn backward_error(n: usize, second_order: bool) -> f64 {
    let g = TimeGrid::uniform(n).unwrap();
    let mut s = LatentState {
        z: Tensor::scalar(std::f64::consts::E),
        t: 1.0,
    };
    let mut v = decay;
    for i in (1..=n).rev() {
        let h = g.t(i - 1) - g.t(i);
        s = if second_order {
            rf_solver_step(&s, h, &mut v, i).unwrap().0
        } else {
            euler_step(&s, h, &mut v, StepKey::main(i)).unwrap()
        };
    }
    (s.z.data()[0] - std::f64::consts::E.powi(2)).abs()
}

#[test]
fn euler_global_error_is_first_order() {
    for n in [10, 20] {
        let r = backward_error(n, false) / backward_error(2 * n, false);
        assert!((1.7..=2.3).contains(&r), "N={n}: ratio {r}");
    }
}

#[test]
fn solver_global_error_is_second_order() {
    for n in [10, 20] {
        let r = backward_error(n, true) / backward_error(2 * n, true);
        assert!((3.4..=4.6).contains(&r), "N={n}: ratio {r}");
    }
}

#[test]
fn solver_is_euler_plus_vanishing_correction() {
    let s = LatentState {
        z: Tensor::<f64>::from_fn([3], |i| i as f64 - 1.0),
        t: 0.4,
    };
    let mut c = |z: &Tensor<f64>, _t: f64, _k: StepKey| Ok(Tensor::full(z.dims().to_vec(), 0.7));
    let e = euler_step(&s, 0.2, &mut c, StepKey::main(1)).unwrap();
    let (r, _) = rf_solver_step(&s, 0.2, &mut c, 1).unwrap();
    assert_eq!(e, r);
}

proptest! {
    #[test]
    fn interpolation_is_affine_in_t(seed in any::<u64>(), t in 0.0f64..0.8, d in 0.01f64..0.1) {
        let mut rng = Rng::seeded(seed);
        let z0 = Tensor::<f64>::from_fn([5], |_| rng.normal());
        let z1 = Tensor::<f64>::from_fn([5], |_| rng.normal());
        let a = interpolate(&z0, &z1, t).unwrap();
        let b = interpolate(&z0, &z1, t + d).unwrap();
        let c = interpolate(&z0, &z1, t + 2.0 * d).unwrap();
        for i in 0..5 {
            let second = a.data()[i] - 2.0 * b.data()[i] + c.data()[i];
            prop_assert!(second.abs() < 1e-12);
        }
    }
}

#[test]
fn two_gaussian_demo_learns_the_flow() {
    let report = run_demo(&Demo2dConfig::default(), &mut Rng::seeded(0)).unwrap();
    println!(
        "demo2d: initial {:.4} final {:.4} ratio {:.4} straightness {:.4} hits {:.3} right {:.3}",
        report.initial_loss,
        report.final_loss,
        report.loss_ratio,
        report.straightness,
        report.mode_hit_rate,
        report.right_fraction
    );
    assert!(report.loss_ratio < 0.25, "{report:?}");
    assert!((0.35..=0.65).contains(&report.right_fraction));
}

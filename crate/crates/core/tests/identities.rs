//! Algebraic identities of the conditioning and flow components.

use depflow::gen::{film_modulate, flow_path_sample, prior_loss, FlowTts, GenConfig, GenExample, FILM_BLOCKS};
use depflow::severity::{angle, normalize, slerp, PrototypeBank};
use depflow_nn::Session;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const TOL: f64 = 1e-6;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn unit(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, dim).prop_filter_map("nonzero", |v| normalize(&v))
}

fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..=32).prop_flat_map(|d| (unit(d), unit(d))).prop_filter("not antiparallel", |(p, q)| {
        angle(p, q) < std::f64::consts::PI - 1e-3
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, ..ProptestConfig::default() })]

    #[test]
    fn slerp_is_unit_exact_at_ends_and_angle_linear((p, q) in pair(), tau in 0.0f64..=1.0) {
        let r = slerp(&p, &q, tau).unwrap();
        prop_assert!((norm(&r) - 1.0).abs() <= TOL);
        prop_assert_eq!(slerp(&p, &q, 0.0).unwrap(), p.clone());
        prop_assert_eq!(slerp(&p, &q, 1.0).unwrap(), q.clone());
        let omega = angle(&p, &q);
        prop_assert!((angle(&p, &r) - tau * omega).abs() <= TOL);
        prop_assert!((angle(&r, &q) - (1.0 - tau) * omega).abs() <= TOL);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, ..ProptestConfig::default() })]

    #[test]
    fn flow_path_has_constant_velocity(seed in any::<u64>(), t in 0.0f64..=1.0, dt in 1e-3f64..0.5, sigma in 1e-5f64..0.1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x1 = Array2::from_shape_fn((6, 3), |_| rng.sample::<f64, _>(StandardNormal));
        let z = Array2::from_shape_fn((6, 3), |_| rng.sample::<f64, _>(StandardNormal));
        let t2 = (t + dt).min(1.0);
        let (xa, ua) = flow_path_sample(&x1, &z, t, sigma).unwrap();
        let (xb, ub) = flow_path_sample(&x1, &z, t2, sigma).unwrap();
        prop_assert_eq!(&ua, &ub);
        if t2 > t {
            let fd = (&xb - &xa) / (t2 - t);
            prop_assert!(fd.iter().zip(&ua).all(|(a, b)| (a - b).abs() <= TOL));
        }
        let (x0, _) = flow_path_sample(&x1, &z, 0.0, sigma).unwrap();
        prop_assert_eq!(x0, z.clone());
        let (xend, _) = flow_path_sample(&x1, &z, 1.0, sigma).unwrap();
        prop_assert!(xend.iter().zip(&(&x1 + &(&z * sigma))).all(|(a, b)| (a - b).abs() <= 1e-12));
    }

    #[test]
    fn film_at_unit_scale_zero_shift_is_identity(seed in any::<u64>(), rows in 1usize..20, cols in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-5.0..5.0));
        let out = film_modulate(&h, &vec![1.0; cols], &vec![0.0; cols]).unwrap();
        prop_assert_eq!(out, h);
    }
}

#[test]
fn prior_loss_at_zero_residual() {
    let y = Array2::from_shape_fn((5, 4), |(i, j)| (i * 4 + j) as f64 * 0.1);
    let mask = [true, false, true, true, false];
    let expect = 0.5 * (2.0 * std::f64::consts::PI).ln();
    assert!((prior_loss(&y, &y, &mask).unwrap() - expect).abs() <= 1e-12);
}

/// A freshly attached FiLM generator leaves every block unchanged.
#[test]
fn film_generator_is_identity_at_init() {
    let cfg = GenConfig { channels: 16, segment_frames: 16, ..Default::default() };
    let base = FlowTts::new(cfg, &[3, 4]).unwrap();
    let mut tuned = base.clone();
    tuned.enable_film();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let c: Vec<f64> = normalize(&(0..32).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap();
    let film = tuned.film_generate(&c).unwrap();
    assert_eq!(film.blocks.len(), FILM_BLOCKS);
    for (g, b) in &film.blocks {
        assert!(g.iter().all(|&v| (v - 1.0).abs() <= TOL));
        assert!(b.iter().all(|&v| v.abs() <= TOL));
    }
    let durations = vec![3, 2, 4, 3];
    let ex = GenExample {
        tokens: vec![0, 5, 9, 2],
        frames: Array2::from_shape_fn((12, 16), |_| rng.sample::<f64, _>(StandardNormal)),
        durations,
        speaker_id: 4,
        c_dep: None,
    };
    let draw = base.draw(&ex, &mut rng);
    let value = |m: &FlowTts, e: &GenExample| {
        let s = Session::eval(&m.store);
        let l = m.losses(&s, e, &draw).unwrap();
        (s.scalar(l.fm), s.scalar(l.prior), s.scalar(l.dur))
    };
    let plain = value(&base, &ex);
    let modulated = value(&tuned, &GenExample { c_dep: Some(c.clone()), ..ex.clone() });
    assert!((plain.0 - modulated.0).abs() <= TOL);
    assert_eq!(plain.1, modulated.1);
    assert_eq!(plain.2, modulated.2);
    let (a, _) = base.sample(&ex.tokens, 4, None, 7).unwrap();
    let (b, _) = tuned.sample(&ex.tokens, 4, Some(&c), 7).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= TOL));
}

#[test]
fn bank_condition_is_unit_and_monotone_between_centers() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let subjects: Vec<(Vec<f64>, usize)> = (0..25)
        .map(|i| {
            let v: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            (normalize(&v).unwrap(), i % 5)
        })
        .collect();
    let bank = PrototypeBank::build(&subjects).unwrap();
    for w in bank.centers.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let p = bank.condition(lo).unwrap();
        let mut last = 0.0;
        for k in 1..=10 {
            let s = lo + (hi - lo) * k as f64 / 10.0;
            let c = bank.condition(s).unwrap();
            assert!((norm(&c) - 1.0).abs() <= TOL);
            let a = angle(&p, &c);
            assert!(a + 1e-9 >= last);
            last = a;
        }
    }
}

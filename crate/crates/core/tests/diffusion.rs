//! Schedules, the forward process, and timestep samplers against closed-form oracles.

use ctcal::diffusion::{
    add_noise, prediction_target, sample_t_tea, NoiseSchedule, SamplerKind, TeacherStrategy, TimestepPair, TimestepSampler,
};
use ctcal::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Cumulative product of `1 - beta_t` over a linear beta ramp, accumulated in log space.
fn alpha_bar_oracle(t: usize, t_train: usize) -> f64 {
    (1..=t)
        .map(|s| {
            let beta = 1e-4 + (2e-2 - 1e-4) * (s - 1) as f64 / (t_train - 1) as f64;
            (1.0 - beta).ln()
        })
        .sum::<f64>()
        .exp()
}

/// Standard normal CDF by Simpson integration of the density from 0.
fn phi(x: f64) -> f64 {
    let n = 2000;
    let h = x / n as f64;
    let f = |u: f64| (-u * u / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let s: f64 = (0..=n).map(|i| f(i as f64 * h) * if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 }).sum();
    0.5 + s * h / 3.0
}

#[test]
fn ddpm_alpha_bar_matches_log_space_product() {
    let s = NoiseSchedule::ddpm(1000);
    for t in [0, 1, 2, 10, 250, 500, 999, 1000] {
        let want = alpha_bar_oracle(t, 1000);
        assert!((s.alpha_bar(t) - want).abs() <= 1e-12 * want.max(1e-300), "t={t}");
        let (a, b) = s.coefficients(t);
        assert!((a * a + b * b - 1.0).abs() < 1e-10);
        assert!((a - want.sqrt()).abs() < 1e-10 && (b - (1.0 - want).sqrt()).abs() < 1e-10);
    }
    assert!(s.alpha_bar(1000) < 1e-4);
}

#[test]
fn rectified_flow_interpolates_linearly() {
    let s = NoiseSchedule::rectified_flow(1000);
    let x0 = [0.4f64, -0.2];
    let eps = [1.0f64, 0.5];
    assert_eq!(add_noise(&x0, &eps, 0, &s).unwrap(), x0.to_vec());
    assert_eq!(add_noise(&x0, &eps, 1000, &s).unwrap(), eps.to_vec());
    let mid = add_noise(&x0, &eps, 250, &s).unwrap();
    assert!((mid[0] - (0.75 * 0.4 + 0.25 * 1.0)).abs() < 1e-15);
    assert_eq!(prediction_target(&x0, &eps, 250, &s).unwrap(), vec![0.6, 0.7]);
}

#[test]
fn out_of_range_inputs_are_rejected() {
    let s = NoiseSchedule::ddpm(1000);
    assert!(matches!(add_noise(&[0.0f64], &[0.0], 1001, &s), Err(Error::InvalidTimestep { .. })));
    assert!(matches!(add_noise(&[0.0f64; 2], &[0.0], 10, &s), Err(Error::ShapeMismatch(_))));
    assert!(matches!(TimestepPair::new(10, 10, 1000), Err(Error::InvalidTimesteps)));
    assert!(matches!(TimestepPair::new(1001, 3, 1000), Err(Error::InvalidTimesteps)));
    assert!("sometimes".parse::<TeacherStrategy>().is_err());
}

proptest! {
    #[test]
    fn forward_process_is_linear(
        t in 0usize..=1000,
        rf in any::<bool>(),
        x in prop::collection::vec(-1.0f64..1.0, 8),
        y in prop::collection::vec(-1.0f64..1.0, 8),
        e in prop::collection::vec(-3.0f64..3.0, 8),
        f in prop::collection::vec(-3.0f64..3.0, 8),
        c in -2.0f64..2.0,
    ) {
        let s = if rf { NoiseSchedule::rectified_flow(1000) } else { NoiseSchedule::ddpm(1000) };
        let lin = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| c * p + q).collect::<Vec<_>>();
        let lhs = add_noise(&lin(&x, &y), &lin(&e, &f), t, &s).unwrap();
        let rhs = lin(&add_noise(&x, &e, t, &s).unwrap(), &add_noise(&y, &f, t, &s).unwrap());
        for (l, r) in lhs.iter().zip(&rhs) {
            prop_assert!((l - r).abs() < 1e-12);
        }
    }

    #[test]
    fn teacher_is_strictly_cleaner(seed in any::<u64>(), strategy in 0usize..3, logit in any::<bool>()) {
        let kind = if logit { SamplerKind::logit_normal_default() } else { SamplerKind::Uniform };
        let sampler = TimestepSampler::new(kind, 1000).unwrap();
        let strategy = [TeacherStrategy::FixedZero, TeacherStrategy::DensityMode, TeacherStrategy::UniformBelow][strategy];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..32 {
            let pair = TimestepPair::sample(&sampler, strategy, &mut rng);
            prop_assert!((1..=1000).contains(&pair.t_stu));
            prop_assert!(pair.t_tea < pair.t_stu);
            prop_assert!(TimestepPair::new(pair.t_stu, pair.t_tea, 1000).is_ok());
        }
    }
}

#[test]
fn uniform_sampler_fills_every_centile() {
    let sampler = TimestepSampler::new(SamplerKind::Uniform, 1000).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut buckets = [0usize; 100];
    let n = 100_000;
    for _ in 0..n {
        let t = sampler.sample_t_stu(&mut rng);
        buckets[(t - 1) / 10] += 1;
    }
    let expected = n as f64 / 100.0;
    for (i, &b) in buckets.iter().enumerate() {
        assert!((b as f64 - expected).abs() <= 0.15 * expected, "centile {i}: {b}");
    }
}

#[test]
fn logit_normal_sampler_concentrates_in_the_middle() {
    let sampler = TimestepSampler::new(SamplerKind::logit_normal_default(), 1000).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 100_000;
    let mut hist = [0usize; 10];
    let mut middle = 0usize;
    for _ in 0..n {
        let t = sampler.sample_t_stu(&mut rng);
        hist[((t - 1) / 100).min(9)] += 1;
        middle += usize::from((334..=666).contains(&t));
    }
    let mode = hist.iter().enumerate().max_by_key(|(_, &c)| c).unwrap().0;
    assert!((3..=6).contains(&mode), "{hist:?}");
    // P(|logit u| < ln 2) for a standard normal logit
    let want = 2.0 * phi(2f64.ln()) - 1.0;
    let got = middle as f64 / n as f64;
    assert!((got - want).abs() < 0.01, "{got} vs {want}");
}

#[test]
fn density_mode_matches_grid_scan() {
    for kind in [SamplerKind::logit_normal_default(), SamplerKind::LogitNormal { mu: 0.8, s: 0.6 }, SamplerKind::LogitNormal { mu: -1.2, s: 1.5 }] {
        let sampler = TimestepSampler::new(kind, 1000).unwrap();
        let SamplerKind::LogitNormal { mu, s } = kind else { unreachable!() };
        let closed = |t: usize| {
            let u = t as f64 / 1000.0;
            if u <= 0.0 {
                return 0.0;
            }
            let z = (u / (1.0 - u)).ln();
            (-(z - mu).powi(2) / (2.0 * s * s)).exp() / (u * (1.0 - u))
        };
        for t_stu in [1usize, 2, 50, 200, 499, 500, 501, 800, 1000] {
            let mut best = 0;
            for t in 0..t_stu {
                if closed(t) > closed(best) {
                    best = t;
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            assert_eq!(sample_t_tea(TeacherStrategy::DensityMode, t_stu, &sampler, &mut rng).unwrap(), best, "{kind:?} t_stu={t_stu}");
        }
    }
    // symmetric density peaks at the midpoint
    let sampler = TimestepSampler::new(SamplerKind::logit_normal_default(), 1000).unwrap();
    assert_eq!(sampler.density_mode_below(1000), 500);
    let uniform = TimestepSampler::new(SamplerKind::Uniform, 1000).unwrap();
    assert_eq!(uniform.density_mode_below(700), 0);
}

#[test]
fn uniform_below_covers_its_range() {
    let sampler = TimestepSampler::new(SamplerKind::Uniform, 1000).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut seen = [false; 7];
    for _ in 0..500 {
        seen[sample_t_tea(TeacherStrategy::UniformBelow, 7, &sampler, &mut rng).unwrap()] = true;
    }
    assert!(seen.iter().all(|&s| s));
    assert!(matches!(sample_t_tea(TeacherStrategy::FixedZero, 0, &sampler, &mut rng), Err(Error::InvalidTimestep { .. })));
}

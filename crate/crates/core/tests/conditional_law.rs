use nalgebra::{DMatrix, DVector, Matrix2};

use ivpretest::distributions::{ks_statistic, ks_two_sample, norm_cdf, std_normal};
use ivpretest::model::{estimates_from_moments, Moments};
use ivpretest::pretest::{default_randomization_scale, run_pretest, PretestOutcome, RandomizationLaw};
use ivpretest::rng::substream;
use ivpretest::sampler::{build_law_tsls, exact_law, gibbs_sample, ConditionalLaw, RandomizationDensity, SamplerConfig};
use ivpretest::sim::{oracle_state, rejection_oracle, DGPConfig};
use ivpretest::{prepare, IVDataset};

fn passing(seed: u64, n: usize, gamma: &[f64]) -> (Moments, PretestOutcome) {
    let p = gamma.len();
    for attempt in 0.. {
        let mut rng = substream(seed, &[attempt]);
        let z = DMatrix::from_fn(n, p, |_, _| std_normal(&mut rng));
        let xi = DVector::from_fn(n, |_, _| std_normal(&mut rng));
        let e = DVector::from_fn(n, |i, _| 0.6 * xi[i] + 0.8 * std_normal(&mut rng));
        let d = &z * DVector::from_column_slice(gamma) + &xi;
        let y = &d + e;
        let m = Moments::from_data(&prepare(&IVDataset::new(y, d, z, None).unwrap()).unwrap()).unwrap();
        let law = RandomizationLaw::new(default_randomization_scale(&m), seed + attempt).unwrap();
        let pre = run_pretest(&m, 10.0, Some(&law)).unwrap();
        if pre.passed {
            return (m, pre);
        }
    }
    unreachable!()
}

fn law_at(m: &Moments, pre: &PretestOutcome, beta0: f64, g: RandomizationDensity) -> ConditionalLaw {
    let est = estimates_from_moments(m, beta0).unwrap();
    build_law_tsls(m, beta0, pre, &est, g).unwrap()
}

// tabulated CDF of an unnormalized density on [lo, hi]
fn tabulate(dens: impl Fn(f64) -> f64, lo: f64, hi: f64, k: usize) -> impl Fn(f64) -> f64 {
    let h = (hi - lo) / k as f64;
    let mut cum = vec![0.0];
    for i in 0..k {
        let a = lo + i as f64 * h;
        cum.push(cum[i] + h / 6.0 * (dens(a) + 4.0 * dens(a + 0.5 * h) + dens(a + h)));
    }
    let total = cum[k];
    move |t: f64| {
        let x = ((t - lo) / h).clamp(0.0, k as f64 - 1e-9);
        let i = x as usize;
        (cum[i] + (x - i as f64) * (cum[i + 1] - cum[i])) / total
    }
}

#[test]
fn observed_state_has_positive_density_and_reproduces_omega() {
    let (m, pre) = passing(1, 200, &[0.2, 0.1, 0.15]);
    let g = RandomizationDensity::Gaussian { scale: pre.law.unwrap().scale };
    let law = law_at(&m, &pre, 1.0, g);
    assert!(law.log_density(law.t_obs, law.d_obs).is_finite());
    assert!((law.randomization_at(law.t_obs, law.d_obs) - &pre.omega).amax() < 1e-8);
    assert_eq!(law.jacobian_exponent, 2);
}

#[test]
fn single_instrument_marginal_is_closed_form() {
    let (m, pre) = passing(2, 150, &[0.2]);
    let c = pre.law.unwrap().scale;
    let law = law_at(&m, &pre, 1.0, RandomizationDensity::Gaussian { scale: c });
    assert_eq!(law.jacobian_exponent, 0);
    let cfg = SamplerConfig { n_samples: 40_000, seed: 5, ..SamplerConfig::default() };
    let draws = gibbs_sample(&law, &cfg, law.t_obs, law.d_obs).unwrap();
    // integrating d out of the truncated bivariate Gaussian
    let (u, w, o, lam) = (law.u[0], law.w_st[0], law.o[0], law.lambda);
    let cdf = tabulate(|t| (-0.5 * t * t).exp() * norm_cdf(-u * (u * lam - w * t - o) / c), -9.0, 9.0, 4000);
    let ks = ks_statistic(&draws.t, cdf);
    assert!(ks < 0.02, "{ks}");
}

#[test]
fn huge_randomization_leaves_the_standard_normal() {
    let (m, pre) = passing(3, 200, &[0.2, 0.1, 0.15]);
    let g = RandomizationDensity::Gaussian { scale: 1e3 * pre.s.norm() };
    let law = law_at(&m, &pre, 1.0, g);
    let draws = gibbs_sample(&law, &SamplerConfig { n_samples: 20_000, ..SamplerConfig::default() }, law.t_obs, law.d_obs).unwrap();
    let ks = ks_statistic(&draws.t, norm_cdf);
    assert!(ks < 0.02, "{ks}");
}

#[test]
fn chains_started_at_the_observed_state_pass_geweke() {
    let (m, pre) = passing(4, 200, &[0.15, 0.15, 0.1]);
    let g = RandomizationDensity::Gaussian { scale: pre.law.unwrap().scale };
    let law = law_at(&m, &pre, 1.0, g);
    let draws = gibbs_sample(&law, &SamplerConfig { n_samples: 20_000, ..SamplerConfig::default() }, law.t_obs, law.d_obs).unwrap();
    // family-wise 5% over the chains
    let crit = 2.50;
    assert!(draws.diagnostics.geweke_max_abs() < crit, "{:?}", draws.diagnostics.geweke_z);
}

#[test]
fn exact_law_normalizer_matches_quadrature() {
    let (m, pre) = passing(5, 120, &[0.4]);
    let gamma = DVector::from_element(1, 0.4);
    let sigma = Matrix2::new(1.0, 0.6, 0.6, 1.0);
    let c = 0.7;
    let law = exact_law(&m.ztz, &pre, &gamma, &sigma, RandomizationDensity::Gaussian { scale: c }).unwrap();
    let (mean, u, lam) = (law.mean_s[0], law.u[0], law.lambda);
    let v = sigma[(1, 1)] + c * c;
    let want = (2.0 * std::f64::consts::PI).sqrt() * c * norm_cdf((u * mean - lam) / v.sqrt());

    let simpson = |f: &dyn Fn(f64) -> f64, a: f64, b: f64, k: usize| {
        let h = (b - a) / k as f64;
        (0..k).map(|i| {
            let x = a + i as f64 * h;
            h / 6.0 * (f(x) + 4.0 * f(x + 0.5 * h) + f(x + h))
        }).sum::<f64>()
    };
    // the support is d > 0, open at the left end
    let d_hi = mean.abs() + 14.0 * v.sqrt();
    let inner = |d: f64| {
        let f = |s: f64| law.log_density(&DVector::from_element(1, s), d).exp();
        let centre = 0.5 * (mean + u * (d + lam));
        simpson(&f, centre - 14.0 * v.sqrt(), centre + 14.0 * v.sqrt(), 600)
    };
    let got = simpson(&inner, f64::MIN_POSITIVE, d_hi, 1500);
    assert!(((got - want) / want).abs() < 1e-6, "{got} vs {want}");
}

#[test]
fn oracle_with_huge_randomization_is_standard_normal() {
    let cfg = DGPConfig::equal_strength(200, 3, 1.0, 0.5, 0.5, 11);
    let law = RandomizationLaw::new(1e4, 3).unwrap();
    let sample = rejection_oracle(&cfg, 1.0, 10.0, &law, 3000, None, 500).unwrap();
    assert!(sample.t.len() > 2900);
    let ks = ks_statistic(&sample.t, norm_cdf);
    assert!(ks < 0.05, "{ks}");
}

#[test]
fn oracle_without_neighborhood_is_the_passing_marginal() {
    let cfg = DGPConfig::equal_strength(200, 3, 1.0, 0.25, 0.8, 12);
    let law = RandomizationLaw::new(0.5, 4).unwrap();
    let reps = 2000;
    let sample = rejection_oracle(&cfg, 1.0, 10.0, &law, reps, None, 100).unwrap();
    let by_hand: Vec<f64> = (0..reps as u64)
        .map(|rep| oracle_state(&cfg, rep, 1.0, 10.0, &law).unwrap())
        .filter(|s| s.passed)
        .map(|s| s.t)
        .collect();
    assert_eq!(sample.passed, by_hand.len());
    assert_eq!(ks_two_sample(&sample.t, &by_hand), 0.0);
}

//! MCMC over the conditional null law, chain diagnostics and the TSLS
//! conditional test and interval.

mod law;
mod tsls;

pub use law::{build_law_tsls, exact_law, w_st, ConditionalLaw, ExactLaw, LogDensityFn, RandomizationDensity};
pub use tsls::{invert_ci, tsls_conditional_pvalue, TslsConditional};

use std::io::Write;

use rand::Rng as _;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::distributions::truncated_normal;
use crate::error::{Error, Result};
use crate::par;
use crate::rng::{substream, tag, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMethod {
    /// Exact conditional updates when `g` is Gaussian, Metropolis otherwise.
    Auto,
    /// Random-walk Metropolis-within-Gibbs regardless of `g`.
    Metropolis,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Post-burn-in draws pooled over all chains.
    pub n_samples: usize,
    /// Burn-in iterations per chain.
    pub burn_in: usize,
    /// Initial random-walk step for `t`.
    pub step_t: f64,
    /// Initial random-walk step for `d`.
    pub step_d: f64,
    /// Acceptance rate targeted while adapting steps during burn-in.
    pub adapt_target: f64,
    pub chains: usize,
    pub seed: u64,
    pub method: SamplerMethod,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_samples: 10_000,
            burn_in: 2_000,
            step_t: 1.0,
            step_d: 1.0,
            adapt_target: 0.44,
            chains: 4,
            seed: 0,
            method: SamplerMethod::Auto,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.chains == 0 {
            return Err(Error::InvalidArgument("n_samples and chains must be positive".into()));
        }
        if !(self.step_t > 0.0 && self.step_d > 0.0) {
            return Err(Error::InvalidArgument("step sizes must be positive".into()));
        }
        if !(self.adapt_target > 0.0 && self.adapt_target < 1.0) {
            return Err(Error::InvalidArgument("adapt_target must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn per_chain(&self) -> usize {
        self.n_samples.div_ceil(self.chains)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SamplerDiagnostics {
    pub method: String,
    pub chains: usize,
    pub draws_per_chain: usize,
    pub burn_in: usize,
    /// Post-burn-in acceptance rates averaged over chains.
    pub acceptance: Vec<(String, f64)>,
    /// Effective sample size of the pooled `t` draws.
    pub ess: f64,
    /// Geweke z-scores of `t`, one per chain.
    pub geweke_z: Vec<f64>,
}

impl SamplerDiagnostics {
    pub fn geweke_max_abs(&self) -> f64 {
        self.geweke_z.iter().fold(0.0, |a: f64, z| a.max(z.abs()))
    }
}

/// Pooled draws, chain-major.
#[derive(Debug, Clone)]
pub struct Draws {
    pub t: Vec<f64>,
    pub d: Vec<f64>,
    pub chains: usize,
    pub per_chain: usize,
    pub diagnostics: SamplerDiagnostics,
}

impl Draws {
    pub fn chain_t(&self, c: usize) -> &[f64] {
        &self.t[c * self.per_chain..(c + 1) * self.per_chain]
    }

    /// CSV with columns `chain, iter, t, d`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["chain", "iter", "t", "d"])?;
        for c in 0..self.chains {
            for i in 0..self.per_chain {
                let k = c * self.per_chain + i;
                w.write_record(&[c.to_string(), i.to_string(), self.t[k].to_string(), self.d[k].to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

struct Chain {
    t: Vec<f64>,
    d: Vec<f64>,
    accept_t: f64,
    accept_d: f64,
}

/// Draws `t` (and `d`) from `law`, starting every chain at `(init_t, init_d)`.
pub fn gibbs_sample(law: &ConditionalLaw, config: &SamplerConfig, init_t: f64, init_d: f64) -> Result<Draws> {
    config.validate()?;
    if !(init_d > 0.0) {
        return Err(Error::NonFiniteInit(format!("d = {init_d} must be positive")));
    }
    let l0 = law.log_density(init_t, init_d);
    if !l0.is_finite() {
        return Err(Error::NonFiniteInit(format!("log-density {l0} at t = {init_t}, d = {init_d}")));
    }
    let exact = config.method == SamplerMethod::Auto && law.g.gaussian_scale().is_some();
    let per_chain = config.per_chain();
    let key = law.beta0.to_bits();
    let chains: Vec<Result<Chain>> = par::map_range(config.chains, |c| {
        let mut rng = substream(config.seed, &[tag::SAMPLER, key, c as u64]);
        if exact {
            Ok(exact_chain(law, config, per_chain, init_d, &mut rng))
        } else {
            metropolis_chain(law, config, per_chain, init_t, init_d, &mut rng)
        }
    });
    let chains = chains.into_iter().collect::<Result<Vec<_>>>()?;
    let nc = chains.len() as f64;
    let acceptance = vec![
        ("t".to_string(), chains.iter().map(|c| c.accept_t).sum::<f64>() / nc),
        ("d".to_string(), chains.iter().map(|c| c.accept_d).sum::<f64>() / nc),
    ];
    let geweke_z = chains.iter().map(|c| geweke_z(&c.t)).collect();
    let ess = chains.iter().map(|c| effective_sample_size(&c.t)).sum();
    let mut t = Vec::with_capacity(per_chain * chains.len());
    let mut d = Vec::with_capacity(per_chain * chains.len());
    for c in &chains {
        t.extend_from_slice(&c.t);
        d.extend_from_slice(&c.d);
    }
    Ok(Draws {
        t,
        d,
        chains: chains.len(),
        per_chain,
        diagnostics: SamplerDiagnostics {
            method: if exact { "gibbs".into() } else { "metropolis".into() },
            chains: chains.len(),
            draws_per_chain: per_chain,
            burn_in: config.burn_in,
            acceptance,
            ess,
            geweke_z,
        },
    })
}

/// Exact Gaussian update of `t` and slice update of `e = d + lambda`.
fn exact_chain(law: &ConditionalLaw, config: &SamplerConfig, keep: usize, d0: f64, rng: &mut Rng) -> Chain {
    let c = law.g.gaussian_scale().expect("Gaussian randomization");
    let c2 = c * c;
    let prec = 1.0 / law.w_t + law.ww / c2;
    let sd_t = prec.sqrt().recip();
    let k = law.jacobian_exponent as f64;
    let lo = law.lambda;
    // t is redrawn first, so only d0 matters
    let mut e = d0 + lo;
    let mut out = Chain {
        t: Vec::with_capacity(keep),
        d: Vec::with_capacity(keep),
        accept_t: 1.0,
        accept_d: 1.0,
    };
    for it in 0..config.burn_in + keep {
        // W'a with a = e u - O
        let mean_t = ((e * law.wu - law.wo) / c2) / prec;
        let z: f64 = StandardNormal.sample(rng);
        let t = mean_t + sd_t * z;

        let mu = t * law.wu + law.uo;
        e = if k == 0.0 {
            let x = truncated_normal(rng, mu, c, lo, f64::INFINITY);
            if x > lo {
                x
            } else {
                e
            }
        } else {
            slice_log_concave(rng, e, lo, mu, c, k)
        };
        if it >= config.burn_in {
            out.t.push(t);
            out.d.push(e - lo);
        }
    }
    out
}

/// One slice-sampling update for the log-concave density
/// `exp(-(e - mu)^2 / (2 c^2)) e^k` on `e > lo`.
fn slice_log_concave(rng: &mut Rng, e0: f64, lo: f64, mu: f64, c: f64, k: f64) -> f64 {
    let logf = |e: f64| -> f64 {
        if e <= lo || e <= 0.0 {
            f64::NEG_INFINITY
        } else {
            -0.5 * (e - mu) * (e - mu) / (c * c) + k * e.ln()
        }
    };
    let mode = (0.5 * (mu + (mu * mu + 4.0 * k * c * c).sqrt())).max(lo);
    let width = 2.5 / (k / (mode * mode).max(f64::MIN_POSITIVE) + 1.0 / (c * c)).sqrt();
    let y = logf(e0) - Distribution::<f64>::sample(&Exp1, rng);
    let mut left = e0 - width * rng.random::<f64>();
    let mut right = left + width;
    let floor = lo.max(0.0);
    if left < floor {
        left = floor;
    }
    let mut guard = 0;
    while left > floor && logf(left) > y && guard < 1000 {
        left = (left - width).max(floor);
        guard += 1;
    }
    guard = 0;
    while logf(right) > y && guard < 1000 {
        right += width;
        guard += 1;
    }
    for _ in 0..10_000 {
        let x = left + (right - left) * rng.random::<f64>();
        if logf(x) > y {
            return x;
        }
        if x < e0 {
            left = x;
        } else {
            right = x;
        }
    }
    e0
}

/// Random-walk Metropolis on `t` then `d`, with Robbins–Monro step
/// adaptation during burn-in.
fn metropolis_chain(
    law: &ConditionalLaw,
    config: &SamplerConfig,
    keep: usize,
    t0: f64,
    d0: f64,
    rng: &mut Rng,
) -> Result<Chain> {
    let (mut t, mut d) = (t0, d0);
    let mut cur = law.log_density(t, d);
    let (mut log_a, mut log_b) = (config.step_t.ln(), config.step_d.ln());
    let (mut burn_acc_t, mut burn_acc_d) = (0usize, 0usize);
    let (mut acc_t, mut acc_d) = (0usize, 0usize);
    let mut out = Chain {
        t: Vec::with_capacity(keep),
        d: Vec::with_capacity(keep),
        accept_t: 0.0,
        accept_d: 0.0,
    };
    for it in 0..config.burn_in + keep {
        let burning = it < config.burn_in;
        let z: f64 = StandardNormal.sample(rng);
        let t_new = t + log_a.exp() * z;
        let l_new = law.log_density(t_new, d);
        let ok_t = l_new - cur >= (1.0 - rng.random::<f64>()).ln();
        if ok_t {
            t = t_new;
            cur = l_new;
        }
        let z: f64 = StandardNormal.sample(rng);
        let d_new = d + log_b.exp() * z;
        let ok_d = if d_new > 0.0 {
            let l_new = law.log_density(t, d_new);
            let ok = l_new - cur >= (1.0 - rng.random::<f64>()).ln();
            if ok {
                d = d_new;
                cur = l_new;
            }
            ok
        } else {
            false
        };
        if burning {
            let gain = ((it + 1) as f64).powf(-0.6);
            log_a += gain * (ok_t as u8 as f64 - config.adapt_target);
            log_b += gain * (ok_d as u8 as f64 - config.adapt_target);
            burn_acc_t += ok_t as usize;
            burn_acc_d += ok_d as usize;
        } else {
            acc_t += ok_t as usize;
            acc_d += ok_d as usize;
            out.t.push(t);
            out.d.push(d);
        }
    }
    if config.burn_in > 0 {
        if burn_acc_t == 0 {
            return Err(Error::ChainStuck("t"));
        }
        if burn_acc_d == 0 {
            return Err(Error::ChainStuck("d"));
        }
    }
    out.accept_t = acc_t as f64 / keep as f64;
    out.accept_d = acc_d as f64 / keep as f64;
    Ok(out)
}

/// Effective sample size from the initial positive sequence of
/// autocorrelations.
pub fn effective_sample_size(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 4 {
        return n as f64;
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let var = c.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if var <= 0.0 {
        return n as f64;
    }
    let rho = |lag: usize| -> f64 { c[..n - lag].iter().zip(&c[lag..]).map(|(a, b)| a * b).sum::<f64>() / (n as f64 * var) };
    let mut sum = 0.0;
    let mut m = 0;
    while 2 * m + 1 < n {
        let pair = if m == 0 { 1.0 + rho(1) } else { rho(2 * m) + rho(2 * m + 1) };
        if pair <= 0.0 {
            break;
        }
        sum += pair;
        m += 1;
    }
    let tau = (2.0 * sum - 1.0).max(1.0 / n as f64);
    (n as f64 / tau).min(n as f64)
}

/// Geweke z-score comparing the first 10% and last 50% of a chain, with
/// batch-means variances.
pub fn geweke_z(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 20 {
        return 0.0;
    }
    let a = &x[..n / 10];
    let b = &x[n / 2..];
    let (ma, va) = mean_and_variance_of_mean(a);
    let (mb, vb) = mean_and_variance_of_mean(b);
    let denom = (va + vb).sqrt();
    if denom > 0.0 {
        (ma - mb) / denom
    } else {
        0.0
    }
}

fn mean_and_variance_of_mean(x: &[f64]) -> (f64, f64) {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let batches = ((n as f64).sqrt() as usize).max(2);
    let size = n / batches;
    let means: Vec<f64> = (0..batches)
        .map(|b| x[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64)
        .collect();
    let bm = means.iter().sum::<f64>() / batches as f64;
    let var_b = means.iter().map(|m| (m - bm) * (m - bm)).sum::<f64>() / (batches - 1) as f64;
    (mean, var_b / batches as f64)
}

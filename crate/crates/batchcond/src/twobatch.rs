//! Two-batch, two-arm demonstration of why the averaged pivot is wasteful
//! and conditionally invalid, in the smallest model where everything is
//! closed-form.
//!
//! Model: first-batch means `X1 ~ N(mu, 2 I)`; the policy inspects the
//! difference `Delta = X11 - X12` and allocates the second batch with arm-1
//! share `Pi`, giving `X21 | X1 ~ N(mu_1, 1/Pi)` and
//! `X22 | X1 ~ N(mu_2, 1/(1-Pi))`.  The arm-1 pivot statistic decomposes as
//!
//! ```text
//! Z = a * Delta + c(Pi) * U + b(Pi) * V + sigma(Pi) * xi,
//! ```
//!
//! with `U = Xbar/2 + Pi X21`, `V = Xbar/2 + (1-Pi) X22`
//! (`Xbar = (X11+X12)/2`), and `xi ~ N(0,1)` independent of `(Delta, U, V)`
//! for every `mu`.  Conditioning away the pure-noise term `sigma xi` yields a
//! strictly better estimator (Rao-Blackwell), and the event where `|xi|`
//! alone exceeds the pivot interval's half-width is a recognizable subset on
//! which the pivot interval covers at most half the time.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::stochastics::normal_quantile;

const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Coefficients of the pivot decomposition at a given second-batch share.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoBatchCoeffs {
    /// Loading on the first-batch difference; `1/(2 sqrt 2)` for every share.
    pub a: f64,
    /// Loading on `V` (the arm-2 information statistic).
    pub b: f64,
    /// Loading on `U` (the arm-1 information statistic).
    pub c: f64,
    /// Standard deviation of the leftover pure-noise component; zero exactly
    /// at `pi = 1/2`.
    pub sigma: f64,
}

/// Decompose the arm-1 pivot at second-batch share `pi`.
///
/// The coefficients come from Gaussian conditioning of `Z` on `(U, V)` given
/// `Delta`: the joint conditional covariance is
///
/// ```text
///         Z                  U            V
/// Z   [ 3/2          a + sqrt(pi)      a        ]
/// U   [ .            1/4 + pi          1/4      ]
/// V   [ .            .                 5/4 - pi ]
/// ```
///
/// so `(c, b) = Cov22^{-1} Cov21` and `sigma^2` is the Schur complement,
/// floored at zero against rounding.
pub fn pivot_decompose(pi: f64) -> Result<TwoBatchCoeffs> {
    if !(pi > 0.0 && pi < 1.0) {
        return Err(Error::BadPi { pi });
    }
    let a = 1.0 / (2.0 * SQRT_2);
    let cov_zu = a + pi.sqrt();
    let cov_zv = a;
    let var_u = 0.25 + pi;
    let var_v = 1.25 - pi;
    let cov_uv = 0.25;
    let det = var_u * var_v - cov_uv * cov_uv;
    let c = (var_v * cov_zu - cov_uv * cov_zv) / det;
    let b = (var_u * cov_zv - cov_uv * cov_zu) / det;
    let raw = 1.5 - (c * cov_zu + b * cov_zv);
    let sigma2 = if raw.abs() < 1e-12 { 0.0 } else { raw.max(0.0) };
    Ok(TwoBatchCoeffs {
        a,
        b,
        c,
        sigma: sigma2.sqrt(),
    })
}

/// Second-batch allocation rule for the arm-1 share.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TwoBatchPolicy {
    /// Fixed share regardless of the first batch.
    Constant(f64),
    /// `hi` when the first batch favors arm 1 (`Delta > 0`), else `lo`.
    Greedy { lo: f64, hi: f64 },
}

impl TwoBatchPolicy {
    fn validate(self) -> Result<()> {
        let ok = |p: f64| p > 0.0 && p < 1.0;
        let valid = match self {
            TwoBatchPolicy::Constant(p) => ok(p),
            TwoBatchPolicy::Greedy { lo, hi } => ok(lo) && ok(hi),
        };
        if valid {
            Ok(())
        } else {
            Err(Error::BadPi {
                pi: match self {
                    TwoBatchPolicy::Constant(p) => p,
                    TwoBatchPolicy::Greedy { lo, hi } => {
                        if ok(lo) {
                            hi
                        } else {
                            lo
                        }
                    }
                },
            })
        }
    }

    fn share(self, delta: f64) -> f64 {
        match self {
            TwoBatchPolicy::Constant(p) => p,
            TwoBatchPolicy::Greedy { lo, hi } => {
                if delta > 0.0 {
                    hi
                } else {
                    lo
                }
            }
        }
    }

    fn always_half(self) -> bool {
        match self {
            TwoBatchPolicy::Constant(p) => p == 0.5,
            TwoBatchPolicy::Greedy { lo, hi } => lo == 0.5 && hi == 0.5,
        }
    }
}

/// One simulated replicate of the two-batch experiment.
struct Draw {
    delta: f64,
    u: f64,
    v: f64,
    z: f64,
    pi: f64,
}

fn draw_two_batch<R: Rng + ?Sized>(mu: [f64; 2], policy: TwoBatchPolicy, rng: &mut R) -> Draw {
    let z1: f64 = rng.sample(StandardNormal);
    let z2: f64 = rng.sample(StandardNormal);
    let x11 = mu[0] + SQRT_2 * z1;
    let x12 = mu[1] + SQRT_2 * z2;
    let delta = x11 - x12;
    let xbar = 0.5 * (x11 + x12);
    let pi = policy.share(delta);
    let z3: f64 = rng.sample(StandardNormal);
    let z4: f64 = rng.sample(StandardNormal);
    let x21 = mu[0] + (1.0 / pi).sqrt() * z3;
    let x22 = mu[1] + (1.0 / (1.0 - pi)).sqrt() * z4;
    let ztil = xbar / SQRT_2 + pi.sqrt() * x21;
    Draw {
        delta,
        u: 0.5 * xbar + pi * x21,
        v: 0.5 * xbar + (1.0 - pi) * x22,
        z: delta / (2.0 * SQRT_2) + ztil,
        pi,
    }
}

/// Paired mean-squared errors of the pivot estimator and its
/// Rao-Blackwellization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MseSim {
    pub mse_t0: f64,
    pub mse_tstar: f64,
    /// Monte Carlo standard error of the paired difference
    /// `mse_t0 - mse_tstar`.
    pub diff_se: f64,
}

/// Compare the pivot point estimator `T0 = Z / (1/sqrt2 + sqrt Pi)` of arm
/// 1's mean against `T* = (a Delta + c U + b V) / (1/sqrt2 + sqrt Pi)`, its
/// conditional expectation given `(Delta, U, V)`.
pub fn rao_blackwell_mse_sim<R: Rng + ?Sized>(
    mu: [f64; 2],
    policy: TwoBatchPolicy,
    reps: u64,
    rng: &mut R,
) -> Result<MseSim> {
    policy.validate()?;
    if reps < 1 {
        return Err(Error::InvalidArgument("reps must be at least 1".into()));
    }
    let mut sum0 = 0.0;
    let mut sum1 = 0.0;
    let mut diff_sum = 0.0;
    let mut diff_sumsq = 0.0;
    for _ in 0..reps {
        let d = draw_two_batch(mu, policy, rng);
        let coef = pivot_decompose(d.pi)?;
        let denom = 1.0 / SQRT_2 + d.pi.sqrt();
        let t0 = d.z / denom;
        let tstar = (coef.a * d.delta + coef.c * d.u + coef.b * d.v) / denom;
        let e0 = (t0 - mu[0]) * (t0 - mu[0]);
        let e1 = (tstar - mu[0]) * (tstar - mu[0]);
        sum0 += e0;
        sum1 += e1;
        let diff = e0 - e1;
        diff_sum += diff;
        diff_sumsq += diff * diff;
    }
    let n = reps as f64;
    let mean_diff = diff_sum / n;
    let var_diff = (diff_sumsq / n - mean_diff * mean_diff).max(0.0);
    Ok(MseSim {
        mse_t0: sum0 / n,
        mse_tstar: sum1 / n,
        diff_se: (var_diff / n).sqrt(),
    })
}

/// Conditional-coverage summary over the recognizable subset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubsetSim {
    /// Fraction of replicates landing in the event `A`.
    pub p_event: f64,
    /// Replicates in `A`.
    pub event_reps: u64,
    /// Coverage of the pivot interval among replicates in `A` (NaN if the
    /// event never occurred).
    pub cover_given_event: f64,
    /// Binomial standard error of `cover_given_event`.
    pub cover_se: f64,
    /// Coverage over all replicates.
    pub uncond_coverage: f64,
}

/// Estimate coverage of the arm-1 pivot interval conditional on the event
///
/// ```text
/// A = { |xi| > sqrt(2) z_{1-alpha/2} / sigma(Pi),  Pi != 1/2 }
/// ```
///
/// where the noise component alone overwhelms the interval's half-width: on
/// `A` the interval covers with probability at most one half, even though its
/// unconditional coverage is exactly `1 - alpha`.
pub fn recognizable_subset_sim<R: Rng + ?Sized>(
    mu: [f64; 2],
    alpha: f64,
    policy: TwoBatchPolicy,
    reps: u64,
    rng: &mut R,
) -> Result<SubsetSim> {
    policy.validate()?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    if policy.always_half() {
        return Err(Error::InvalidArgument(
            "the recognizable subset needs a policy with mass off 1/2".into(),
        ));
    }
    if reps < 1 {
        return Err(Error::InvalidArgument("reps must be at least 1".into()));
    }
    let z = normal_quantile(1.0 - alpha / 2.0);
    let mut covered_all = 0u64;
    let mut in_event = 0u64;
    let mut covered_event = 0u64;
    for _ in 0..reps {
        let d = draw_two_batch(mu, policy, rng);
        let coef = pivot_decompose(d.pi)?;
        let denom = 1.0 / SQRT_2 + d.pi.sqrt();
        let t0 = d.z / denom;
        let half = SQRT_2 * z / denom;
        let covered = (t0 - mu[0]).abs() <= half;
        if covered {
            covered_all += 1;
        }
        if coef.sigma > 1e-6 && (d.pi - 0.5).abs() > 1e-9 {
            let xi = (d.z - coef.a * d.delta - coef.c * d.u - coef.b * d.v) / coef.sigma;
            if xi.abs() > SQRT_2 * z / coef.sigma {
                in_event += 1;
                if covered {
                    covered_event += 1;
                }
            }
        }
    }
    let n = reps as f64;
    let p_event = in_event as f64 / n;
    let cover_given_event = if in_event > 0 {
        covered_event as f64 / in_event as f64
    } else {
        f64::NAN
    };
    let cover_se = if in_event > 0 {
        (cover_given_event * (1.0 - cover_given_event) / in_event as f64)
            .sqrt()
            .max((0.25 / in_event as f64).sqrt() * 0.5)
    } else {
        f64::NAN
    };
    Ok(SubsetSim {
        p_event,
        event_reps: in_event,
        cover_given_event,
        cover_se,
        uncond_coverage: covered_all as f64 / n,
    })
}

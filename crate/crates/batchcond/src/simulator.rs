//! Trajectory generation: runs an adaptive policy forward under either the
//! exact-Gaussian model or a finite-sample outcome law.
//!
//! Two generation modes share one driver:
//!
//! * **Exact-Gaussian** ([`run_experiment_gaussian`]): batch means are drawn
//!   directly from `X_t ~ N(mu, V_t/n)` given the chosen probabilities;
//!   counts are the expected `n_t pi_tk`, `pi_hat = pi`, and variances are
//!   known. Arms with `pi_tk = 0` (pruned) are recorded as absent with
//!   `x = 0`.
//! * **Finite-sample** ([`run_experiment_finite`]): each of the `n_t` units
//!   is assigned an arm from `Categorical(pi_t)` and an outcome from the
//!   [`OutcomeLaw`]; the policy then consumes realized-count means and
//!   pooled plug-in variance estimates.
//!
//! In both modes the policy for batch `t+1` sees the running statistics
//! through batch `t` exactly as recomputed by
//! [`crate::model::cumulative_stats`] under the corresponding weight source.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{BatchRecord, ModelParams, Trajectory};
use crate::policies::{
    argmax_lowest, egreedy_next, select_target, stop_decision, thompson_next, PolicyKind,
    PolicySpec, StoppingSpec, TargetSpec,
};

/// Distribution of individual outcomes in finite-sample mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutcomeLaw {
    /// `y = mu_k +/- 1` with equal probability: variance exactly 1.
    RademacherShifted,
    /// `y = mu_k + sigma_k * N(0,1)` with `sigma_k` from the model.
    Gaussian,
}

enum Mode {
    Exact,
    Finite(OutcomeLaw),
}

/// Runs the experiment under the exact-Gaussian model.
pub fn run_experiment_gaussian<R: Rng + ?Sized>(
    params: &ModelParams,
    policy: &PolicySpec,
    stopping: &StoppingSpec,
    target: &TargetSpec,
    rng: &mut R,
) -> Result<Trajectory> {
    run_experiment(params, policy, stopping, target, Mode::Exact, rng)
}

/// Runs the experiment with per-unit assignment and outcomes.
pub fn run_experiment_finite<R: Rng + ?Sized>(
    params: &ModelParams,
    policy: &PolicySpec,
    stopping: &StoppingSpec,
    target: &TargetSpec,
    law: OutcomeLaw,
    rng: &mut R,
) -> Result<Trajectory> {
    run_experiment(params, policy, stopping, target, Mode::Finite(law), rng)
}

fn run_experiment<R: Rng + ?Sized>(
    params: &ModelParams,
    policy: &PolicySpec,
    stopping: &StoppingSpec,
    target: &TargetSpec,
    mode: Mode,
    rng: &mut R,
) -> Result<Trajectory> {
    let k = params.k();
    policy.validate(k)?;
    stopping.validate(params.horizon())?;
    target.validate(k)?;
    let horizon = stopping.horizon;

    // Running aggregates. Design-weighted and realized-count views are both
    // maintained; the policy reads the one matching the generation mode.
    let mut dsgn_w = vec![0.0; k]; // sum_s c_s pi_sk
    let mut dsgn_wx = vec![0.0; k]; // sum_s c_s pi_sk X_sk
    let mut dsgn_info = vec![0.0; k]; // sum_s n_s pi_sk
    let mut real_count = vec![0.0; k]; // sum_s N_sk
    let mut real_total = vec![0.0; k]; // sum of outcomes on the arm
    let mut real_sumsq = vec![0.0; k]; // sum of squared outcomes

    let mut batches: Vec<BatchRecord> = Vec::with_capacity(horizon);
    let mut winners: Vec<usize> = Vec::new();
    // Policy inputs from the previous batch boundary.
    let mut w_prev: Option<Vec<f64>> = None;
    let mut omega_prev: Option<Vec<f64>> = None;
    // Means through batch T-1, for adaptive target selection.
    let mut w_penultimate: Option<Vec<f64>> = None;

    for t in 1..=horizon {
        let is_last = stop_decision(&StoppingSpec { horizon }, t);
        if is_last {
            w_penultimate = w_prev.clone();
        }
        let pi_t: Vec<f64> = if t == 1 {
            policy.pi1.clone()
        } else {
            let w = w_prev.as_ref().expect("running means exist after batch 1");
            let omega = omega_prev.as_ref().expect("running variances exist");
            match policy.kind {
                PolicyKind::Thompson => thompson_next(w, omega, policy, is_last, rng)?,
                PolicyKind::EGreedy => egreedy_next(w, policy.greedy_eps)?.0,
            }
        };

        let nt_units = params.batch_sizes[t - 1];
        let nt = nt_units as f64;
        let record = match &mode {
            Mode::Exact => {
                let mut x = vec![0.0; k];
                for arm in 0..k {
                    if pi_t[arm] > 0.0 {
                        let sd = (params.sigma2[arm] / (nt * pi_t[arm])).sqrt();
                        let z: f64 = rng.sample(StandardNormal);
                        x[arm] = params.mu[arm] + sd * z;
                    }
                }
                BatchRecord {
                    t,
                    pi: pi_t.clone(),
                    pi_hat: pi_t.clone(),
                    counts: pi_t.iter().map(|&p| p * nt).collect(),
                    x,
                    sumsq: vec![0.0; k],
                }
            }
            Mode::Finite(law) => {
                let mut count = vec![0.0; k];
                let mut total = vec![0.0; k];
                let mut sumsq = vec![0.0; k];
                for _ in 0..nt_units {
                    let arm = categorical(&pi_t, rng);
                    let y = match law {
                        OutcomeLaw::RademacherShifted => {
                            let sign = if rng.random::<f64>() < 0.5 { 1.0 } else { -1.0 };
                            params.mu[arm] + sign
                        }
                        OutcomeLaw::Gaussian => {
                            let z: f64 = rng.sample(StandardNormal);
                            params.mu[arm] + params.sigma2[arm].sqrt() * z
                        }
                    };
                    count[arm] += 1.0;
                    total[arm] += y;
                    sumsq[arm] += y * y;
                }
                let x: Vec<f64> = (0..k)
                    .map(|arm| if count[arm] > 0.0 { total[arm] / count[arm] } else { 0.0 })
                    .collect();
                BatchRecord {
                    t,
                    pi: pi_t.clone(),
                    pi_hat: count.iter().map(|&c| c / nt).collect(),
                    counts: count,
                    x,
                    sumsq,
                }
            }
        };

        // Update running aggregates.
        for arm in 0..k {
            dsgn_w[arm] += params.c[t - 1] * record.pi[arm];
            dsgn_wx[arm] += params.c[t - 1] * record.pi[arm] * record.x[arm];
            dsgn_info[arm] += nt * record.pi[arm];
            real_count[arm] += record.counts[arm];
            real_total[arm] += record.counts[arm] * record.x[arm];
            real_sumsq[arm] += record.sumsq[arm];
        }
        batches.push(record);

        // Policy view of the world after batch t.
        let (w_t, omega_t) = match &mode {
            Mode::Exact => {
                let mut w = vec![0.0; k];
                let mut omega = vec![0.0; k];
                for arm in 0..k {
                    if dsgn_w[arm] <= 0.0 {
                        return Err(Error::EmptyArm { arm: arm + 1, batch: t });
                    }
                    w[arm] = dsgn_wx[arm] / dsgn_w[arm];
                    omega[arm] = params.sigma2[arm] / dsgn_info[arm];
                }
                (w, omega)
            }
            Mode::Finite(_) => {
                let mut w = vec![0.0; k];
                let mut omega = vec![0.0; k];
                for arm in 0..k {
                    if real_count[arm] <= 0.0 {
                        return Err(Error::EmptyArm { arm: arm + 1, batch: t });
                    }
                    w[arm] = real_total[arm] / real_count[arm];
                    let s2 = (real_sumsq[arm] / real_count[arm] - w[arm] * w[arm]).max(0.0);
                    omega[arm] = s2 / real_count[arm];
                }
                (w, omega)
            }
        };
        if !is_last && policy.kind == PolicyKind::EGreedy {
            winners.push(argmax_lowest(&w_t));
        }
        w_prev = Some(w_t);
        omega_prev = Some(omega_t);
    }

    let eta = select_target(target, w_penultimate.as_deref(), k)?;
    let sigma2_hat = match &mode {
        Mode::Exact => params.sigma2.clone(),
        Mode::Finite(_) => (0..k)
            .map(|arm| {
                if real_count[arm] <= 0.0 {
                    return Err(Error::EmptyArm { arm: arm + 1, batch: horizon });
                }
                let mean = real_total[arm] / real_count[arm];
                Ok((real_sumsq[arm] / real_count[arm] - mean * mean).max(0.0))
            })
            .collect::<Result<Vec<f64>>>()?,
    };

    let traj = Trajectory {
        params: params.clone(),
        batches,
        eta,
        sigma2_hat,
        winners: if policy.kind == PolicyKind::EGreedy {
            Some(winners)
        } else {
            None
        },
    };
    debug_assert!(traj.validate().is_ok(), "{:?}", traj.validate());
    Ok(traj)
}

/// Samples an arm index from the probability vector by inverse transform.
/// Never returns a zero-probability arm.
fn categorical<R: Rng + ?Sized>(pi: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in pi.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// One-pass plug-in variance of a sample of outcomes, floored at zero.
/// Errors with [`Error::EmptyArm`] on an empty slice.
pub fn estimate_arm_variance(outcomes: &[f64]) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::EmptyArm { arm: 0, batch: 0 });
    }
    let n = outcomes.len() as f64;
    let mut total = 0.0;
    let mut sumsq = 0.0;
    for &y in outcomes {
        total += y;
        sumsq += y * y;
    }
    let mean = total / n;
    Ok((sumsq / n - mean * mean).max(0.0))
}

//! Adaptive allocation policies and their selection events.
//!
//! Before each batch the policy sees the running inverse-variance weighted
//! arm means `W` and their variances `Omega` and produces the next batch's
//! sampling probabilities:
//!
//! * **Thompson**: `pi_{t+1,k} = P(argmax_j X_j = k)` for
//!   `X ~ N(W_t, Omega_t)`, estimated by Monte Carlo with common random
//!   numbers. Before the final batch, arms whose probability falls below a
//!   pruning threshold are dropped and the remainder renormalized.
//! * **Epsilon-greedy**: the empirically best arm receives
//!   `1 - (K-1) eps`, every other arm `eps`.
//!
//! Epsilon-greedy decisions are determined by sign comparisons of the `W`
//! coordinates, so the set of batch-mean vectors leading to a given decision
//! sequence is a polyhedron `A X <= 0` in the stacked data
//! ([`egreedy_polyhedron`]). That polyhedron is what the conditional
//! inference procedure conditions on.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{Trajectory, WeightSource};
use crate::stochastics::orthant_probability;

/// Which adaptive policy drives the experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    /// Thompson sampling via Monte Carlo orthant probabilities.
    Thompson,
    /// Epsilon-greedy.
    EGreedy,
}

/// Full policy specification.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySpec {
    /// Which policy family.
    pub kind: PolicyKind,
    /// Thompson pruning threshold for the final batch, in `[0, 1/K)`;
    /// 0 disables pruning.
    pub prune_eps: f64,
    /// Epsilon-greedy exploration probability, in `(0, 1/K)`; unused by
    /// Thompson.
    pub greedy_eps: f64,
    /// First-batch sampling probabilities (no data exist yet).
    pub pi1: Vec<f64>,
    /// Monte Carlo draws per orthant-probability evaluation.
    pub orthant_draws: usize,
}

impl PolicySpec {
    /// Uniform-first-batch spec with the crate defaults
    /// (`orthant_draws = 8192`, no pruning).
    pub fn new(kind: PolicyKind, k: usize) -> Self {
        Self {
            kind,
            prune_eps: 0.0,
            greedy_eps: 0.1,
            pi1: vec![1.0 / k as f64; k],
            orthant_draws: 8192,
        }
    }

    /// Validates parameter ranges against the arm count.
    pub fn validate(&self, k: usize) -> Result<()> {
        if self.pi1.len() != k {
            return Err(Error::InvalidArgument(format!(
                "pi1 has length {}, expected {k}",
                self.pi1.len()
            )));
        }
        if self.pi1.iter().any(|&p| p < 0.0)
            || (self.pi1.iter().sum::<f64>() - 1.0).abs() > 1e-12
        {
            return Err(Error::InvalidArgument(
                "pi1 must be a point on the probability simplex".into(),
            ));
        }
        if !(0.0..1.0 / k as f64).contains(&self.prune_eps) {
            return Err(Error::InvalidArgument(format!(
                "prune_eps {} outside [0, 1/{k})",
                self.prune_eps
            )));
        }
        // First-batch probabilities must sit at or above the prune floor so
        // pruning can never empty the support.
        if self.pi1.iter().any(|&p| p < self.prune_eps) {
            return Err(Error::InvalidArgument(
                "pi1 entries must be at or above the prune threshold".into(),
            ));
        }
        if self.kind == PolicyKind::EGreedy
            && !(self.greedy_eps > 0.0 && self.greedy_eps < 1.0 / k as f64)
        {
            return Err(Error::BadEpsilon {
                eps: self.greedy_eps,
                k,
            });
        }
        if self.orthant_draws == 0 {
            return Err(Error::InvalidArgument("orthant_draws must be >= 1".into()));
        }
        Ok(())
    }
}

/// When to stop: after a fixed number of batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoppingSpec {
    /// Number of batches to run, between 1 and the planned horizon.
    pub horizon: usize,
}

impl StoppingSpec {
    /// Validates against the planned horizon `t0`.
    pub fn validate(&self, t0: usize) -> Result<()> {
        if self.horizon == 0 || self.horizon > t0 {
            return Err(Error::InvalidArgument(format!(
                "horizon {} outside 1..={t0}",
                self.horizon
            )));
        }
        Ok(())
    }
}

/// How the inferential target is chosen at the end of the experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetSpec {
    /// The mean of a fixed arm (1-based index), chosen before the data.
    FixedArm { arm: usize },
    /// The mean of the empirically best arm as of the penultimate batch.
    BestArm,
}

impl TargetSpec {
    /// Validates the arm index against the arm count.
    pub fn validate(&self, k: usize) -> Result<()> {
        if let TargetSpec::FixedArm { arm } = self {
            if *arm == 0 || *arm > k {
                return Err(Error::InvalidArgument(format!(
                    "target arm {arm} outside 1..={k}"
                )));
            }
        }
        Ok(())
    }
}

/// A polyhedral selection event `A X <= b` over the stacked batch means
/// `X = (X_11..X_1K, X_21..X_2K, ...)` (batch-major).
#[derive(Debug, Clone)]
pub struct Polyhedron {
    /// Constraint rows, `T*K` columns; rows are unit vectors.
    pub a: DMatrix<f64>,
    /// Right-hand side (all zeros for greedy comparisons).
    pub b: DVector<f64>,
    /// For each row, the decision it encodes: `(t, winner, loser)` with
    /// 1-based batch index and 0-based arm indices.
    pub provenance: Vec<(usize, usize, usize)>,
}

impl Polyhedron {
    /// Largest constraint violation of a stacked data vector.
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        if self.a.nrows() == 0 {
            return f64::NEG_INFINITY;
        }
        let slack = &self.a * x - &self.b;
        slack.iter().fold(f64::NEG_INFINITY, |acc, &v| acc.max(v))
    }
}

/// Thompson allocation for the next batch: orthant probabilities of the
/// posterior-like law `N(w, diag(omega))`, pruned (final batch only) at the
/// spec's threshold.
pub fn thompson_next<R: Rng + ?Sized>(
    w: &[f64],
    omega: &[f64],
    spec: &PolicySpec,
    is_last: bool,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let pi = orthant_probability(w, omega, spec.orthant_draws, rng)?;
    if is_last && spec.prune_eps > 0.0 {
        prune(&pi, spec.prune_eps)
    } else {
        Ok(pi)
    }
}

/// Zeroes out entries below `eps` and renormalizes:
/// `rho_k proportional to pi_k 1{pi_k >= eps}`.
///
/// Renormalization only increases surviving entries, so the operation is
/// idempotent. Errors with [`Error::AllPruned`] if nothing survives.
pub fn prune(pi: &[f64], eps: f64) -> Result<Vec<f64>> {
    let kept: Vec<f64> = pi.iter().map(|&p| if p >= eps { p } else { 0.0 }).collect();
    let total: f64 = kept.iter().sum();
    if total <= 0.0 {
        return Err(Error::AllPruned { eps });
    }
    Ok(kept.into_iter().map(|p| p / total).collect())
}

/// Epsilon-greedy allocation: the argmax of `w` (ties to the lowest index)
/// receives `1 - (K-1) eps`, everyone else `eps`. Returns the probabilities
/// and the greedy arm. Errors with [`Error::BadEpsilon`] unless
/// `0 < eps < 1/K`.
pub fn egreedy_next(w: &[f64], eps: f64) -> Result<(Vec<f64>, usize)> {
    let k = w.len();
    if k == 0 {
        return Err(Error::InvalidArgument("w must be non-empty".into()));
    }
    if !(eps > 0.0 && eps < 1.0 / k as f64) {
        return Err(Error::BadEpsilon { eps, k });
    }
    let winner = argmax_lowest(w);
    let mut pi = vec![eps; k];
    pi[winner] = 1.0 - (k as f64 - 1.0) * eps;
    Ok((pi, winner))
}

/// Whether to stop after batch `t` (1-based): true exactly at the horizon.
pub fn stop_decision(spec: &StoppingSpec, t: usize) -> bool {
    t == spec.horizon
}

/// Selects the target direction at the end of the experiment.
///
/// `w_prev` holds the running means through the penultimate batch and is
/// required for [`TargetSpec::BestArm`]. Returns a standard basis vector.
pub fn select_target(spec: &TargetSpec, w_prev: Option<&[f64]>, k: usize) -> Result<Vec<f64>> {
    let arm = match spec {
        TargetSpec::FixedArm { arm } => {
            spec.validate(k)?;
            arm - 1
        }
        TargetSpec::BestArm => {
            let w = w_prev.ok_or_else(|| {
                Error::InvalidArgument(
                    "best-arm target needs running means through the penultimate batch".into(),
                )
            })?;
            argmax_lowest(w)
        }
    };
    let mut eta = vec![0.0; k];
    eta[arm] = 1.0;
    Ok(eta)
}

/// Builds the selection-event polyhedron for an epsilon-greedy trajectory.
///
/// For each non-final batch `t` with greedy winner `k_t`, the event is
/// `W_{t,l} <= W_{t,k_t}` for every `l != k_t`, where `W_t` are the running
/// weighted means the policy actually compared. Expanding `W` in the batch
/// means gives one linear row per `(t, l)` pair with cumulative weights
///
/// ```text
/// omega_{s,k}^{(t)} = w_sk / sum_{r<=t} w_rk,   w = counts (realized)
///                                               or  c_s pi_sk (design),
/// ```
/// frozen at their observed values. Rows are normalized to unit length;
/// final-batch columns are identically zero because the events are decided
/// before batch `T` is drawn.
///
/// With `include_target_event` set and a best-arm target, the event "the
/// selected arm led at `T-1`" is requested as well; for epsilon-greedy it
/// coincides with the batch-`T-1` greedy comparison rows, so no rows are
/// added.
pub fn egreedy_polyhedron(
    traj: &Trajectory,
    source: WeightSource,
    include_target_event: bool,
) -> Result<Polyhedron> {
    let winners = traj.winners.as_ref().ok_or(Error::MissingWinners)?;
    let k = traj.k();
    let t_len = traj.t();
    let cols = t_len * k;
    let n_rows = winners.len() * (k - 1);
    let mut a = DMatrix::zeros(n_rows, cols);
    let mut provenance = Vec::with_capacity(n_rows);

    // Per-batch aggregation weights under the requested source.
    let weight = |s: usize, arm: usize| -> f64 {
        match source {
            WeightSource::Design => traj.params.c[s] * traj.batches[s].pi[arm],
            WeightSource::Realized => traj.batches[s].counts[arm],
        }
    };

    let mut row = 0;
    for (ti, &winner) in winners.iter().enumerate() {
        let t = ti + 1; // decision made after batch t
        // Cumulative weight per arm through batch t.
        let mut cum = vec![0.0; k];
        for s in 0..t {
            for arm in 0..k {
                cum[arm] += weight(s, arm);
            }
        }
        for arm in 0..k {
            if cum[arm] <= 0.0 {
                return Err(Error::EmptyArm { arm: arm + 1, batch: t });
            }
        }
        for loser in 0..k {
            if loser == winner {
                continue;
            }
            for s in 0..t {
                a[(row, s * k + loser)] += weight(s, loser) / cum[loser];
                a[(row, s * k + winner)] -= weight(s, winner) / cum[winner];
            }
            // Normalize the row so the feasibility tolerance is meaningful.
            let norm = a.row(row).iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for c in 0..cols {
                    a[(row, c)] /= norm;
                }
            }
            provenance.push((t, winner, loser));
            row += 1;
        }
    }
    debug_assert_eq!(row, n_rows);

    // A best-arm target selected from W_{T-1} is exactly the last round of
    // greedy comparisons, which the loop above already emitted.
    let _ = include_target_event;

    Ok(Polyhedron {
        a,
        b: DVector::zeros(n_rows),
        provenance,
    })
}

/// Index of the largest entry, ties resolved to the lowest index.
pub(crate) fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for j in 1..v.len() {
        if v[j] > v[best] {
            best = j;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BatchRecord, ModelParams};
    use crate::stochastics::RngStream;
    use approx::assert_relative_eq;

    fn spec(kind: PolicyKind, k: usize) -> PolicySpec {
        PolicySpec::new(kind, k)
    }

    #[test]
    fn policy_spec_validation() {
        let mut s = spec(PolicyKind::Thompson, 3);
        s.validate(3).unwrap();
        s.prune_eps = 0.4; // >= 1/3
        assert!(s.validate(3).is_err());
        s.prune_eps = 0.01;
        s.pi1 = vec![0.005, 0.495, 0.5]; // below the prune floor
        assert!(s.validate(3).is_err());
        s.pi1 = vec![0.4, 0.3, 0.3];
        s.validate(3).unwrap();

        let mut g = spec(PolicyKind::EGreedy, 4);
        g.greedy_eps = 0.25; // = 1/K
        assert!(matches!(g.validate(4), Err(Error::BadEpsilon { .. })));
        g.greedy_eps = 0.2;
        g.validate(4).unwrap();
    }

    #[test]
    fn stopping_and_target_validation() {
        StoppingSpec { horizon: 4 }.validate(4).unwrap();
        assert!(StoppingSpec { horizon: 0 }.validate(4).is_err());
        assert!(StoppingSpec { horizon: 5 }.validate(4).is_err());

        TargetSpec::FixedArm { arm: 3 }.validate(3).unwrap();
        assert!(TargetSpec::FixedArm { arm: 0 }.validate(3).is_err());
        assert!(TargetSpec::FixedArm { arm: 4 }.validate(3).is_err());
    }

    #[test]
    fn thompson_symmetric_is_uniform() {
        let s = spec(PolicyKind::Thompson, 3);
        let mut rng = RngStream::new(100, 0);
        let pi = thompson_next(&[0.0; 3], &[1.0; 3], &s, false, &mut rng).unwrap();
        let se = (2.0 / 9.0 / s.orthant_draws as f64).sqrt();
        for &p in &pi {
            assert!((p - 1.0 / 3.0).abs() < 3.0 * se, "pi = {pi:?}");
        }
    }

    #[test]
    fn thompson_dominant_arm() {
        let s = spec(PolicyKind::Thompson, 3);
        let mut rng = RngStream::new(101, 0);
        let pi = thompson_next(&[10.0, 0.0, 0.0], &[1.0; 3], &s, false, &mut rng).unwrap();
        assert!(pi[0] > 0.999, "pi = {pi:?}");
    }

    #[test]
    fn thompson_location_invariance() {
        let s = spec(PolicyKind::Thompson, 3);
        let w = [0.4, -0.2, 0.1];
        let shifted: Vec<f64> = w.iter().map(|v| v + 3.75).collect();
        let omega = [0.5, 1.0, 2.0];
        let p1 = thompson_next(&w, &omega, &s, false, &mut RngStream::new(102, 0)).unwrap();
        let p2 = thompson_next(&shifted, &omega, &s, false, &mut RngStream::new(102, 0)).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn thompson_prunes_only_last_batch() {
        let mut s = spec(PolicyKind::Thompson, 3);
        s.prune_eps = 0.2;
        // Strong leader: one arm ends below 20% and gets pruned when last.
        let w = [1.0, 0.0, -1.0];
        let omega = [0.3, 0.3, 0.3];
        let mid = thompson_next(&w, &omega, &s, false, &mut RngStream::new(103, 0)).unwrap();
        let last = thompson_next(&w, &omega, &s, true, &mut RngStream::new(103, 0)).unwrap();
        assert!(mid.iter().all(|&p| p > 0.0));
        assert_eq!(last[2], 0.0);
        assert_relative_eq!(last.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn prune_examples() {
        let p = prune(&[0.005, 0.495, 0.5], 0.01).unwrap();
        assert_eq!(p[0], 0.0);
        assert_relative_eq!(p[1], 0.495 / 0.995, max_relative = 1e-14);
        assert_relative_eq!(p[2], 0.5 / 0.995, max_relative = 1e-14);
        assert_relative_eq!(p[1], 0.49748743718592964, max_relative = 1e-12);
        assert_relative_eq!(p[2], 0.5025125628140703, max_relative = 1e-12);

        // Nothing below threshold: unchanged.
        let q = prune(&[0.3, 0.3, 0.4], 0.01).unwrap();
        assert_eq!(q, vec![0.3, 0.3, 0.4]);

        // Borderline survivor.
        let r = prune(&[0.009, 0.991], 0.01).unwrap();
        assert_eq!(r, vec![0.0, 1.0]);

        // Idempotent.
        let p2 = prune(&p, 0.01).unwrap();
        assert_eq!(p, p2);

        assert!(matches!(
            prune(&[0.004, 0.005], 0.01),
            Err(Error::AllPruned { .. })
        ));
    }

    #[test]
    fn egreedy_examples() {
        let (pi, winner) = egreedy_next(&[0.2, 0.5, 0.1], 0.1).unwrap();
        assert_eq!(winner, 1);
        assert_relative_eq!(pi[0], 0.1, max_relative = 1e-15);
        assert_relative_eq!(pi[1], 0.8, max_relative = 1e-15);
        assert_relative_eq!(pi[2], 0.1, max_relative = 1e-15);

        // Ties go to the first arm.
        let (_, winner) = egreedy_next(&[0.5, 0.5, 0.1], 0.1).unwrap();
        assert_eq!(winner, 0);

        assert!(matches!(
            egreedy_next(&[0.0, 1.0], 0.5),
            Err(Error::BadEpsilon { .. })
        ));
        assert!(matches!(
            egreedy_next(&[0.0, 1.0], 0.0),
            Err(Error::BadEpsilon { .. })
        ));
    }

    #[test]
    fn stop_decision_fixed_horizon() {
        let s = StoppingSpec { horizon: 3 };
        assert!(!stop_decision(&s, 1));
        assert!(!stop_decision(&s, 2));
        assert!(stop_decision(&s, 3));
    }

    #[test]
    fn select_target_cases() {
        let eta = select_target(&TargetSpec::FixedArm { arm: 2 }, None, 3).unwrap();
        assert_eq!(eta, vec![0.0, 1.0, 0.0]);

        let eta = select_target(&TargetSpec::BestArm, Some(&[0.5, 0.5, 0.1]), 3).unwrap();
        assert_eq!(eta, vec![1.0, 0.0, 0.0]); // tie to the lowest index

        assert!(select_target(&TargetSpec::BestArm, None, 3).is_err());
    }

    /// Hand-built finite-mode trajectory with winners consistent with the
    /// recorded counts and means.
    fn toy_egreedy_trajectory() -> Trajectory {
        let params = ModelParams::new(vec![0.0; 2], vec![1.0, 1.0], vec![10, 10, 10]).unwrap();
        // Batch means chosen so arm 0 leads after batch 1 and batch 2.
        let batches = vec![
            BatchRecord {
                t: 1,
                pi: vec![0.5, 0.5],
                pi_hat: vec![0.6, 0.4],
                counts: vec![6.0, 4.0],
                x: vec![1.0, 0.2],
                sumsq: vec![10.0, 2.0],
            },
            BatchRecord {
                t: 2,
                pi: vec![0.9, 0.1],
                pi_hat: vec![0.8, 0.2],
                counts: vec![8.0, 2.0],
                x: vec![0.5, 0.1],
                sumsq: vec![6.0, 1.0],
            },
            BatchRecord {
                t: 3,
                pi: vec![0.9, 0.1],
                pi_hat: vec![0.9, 0.1],
                counts: vec![9.0, 1.0],
                x: vec![0.7, -0.3],
                sumsq: vec![7.0, 0.5],
            },
        ];
        Trajectory {
            params,
            batches,
            eta: vec![1.0, 0.0],
            sigma2_hat: vec![1.0, 1.0],
            winners: Some(vec![0, 0]),
        }
    }

    #[test]
    fn polyhedron_single_decision_structure() {
        let mut traj = toy_egreedy_trajectory();
        traj.batches.truncate(2);
        traj.winners = Some(vec![0]);
        let poly = egreedy_polyhedron(&traj, WeightSource::Realized, false).unwrap();
        assert_eq!(poly.a.nrows(), 1);
        assert_eq!(poly.a.ncols(), 4);
        // Row encodes W_{1,2} - W_{1,1} <= 0 over batch 1 only, normalized:
        // raw coefficients (-1, +1, 0, 0).
        let s = 1.0 / 2.0_f64.sqrt();
        assert_relative_eq!(poly.a[(0, 0)], -s, max_relative = 1e-12);
        assert_relative_eq!(poly.a[(0, 1)], s, max_relative = 1e-12);
        assert_eq!(poly.a[(0, 2)], 0.0);
        assert_eq!(poly.a[(0, 3)], 0.0);
        assert_eq!(poly.b[0], 0.0);
        assert_eq!(poly.provenance, vec![(1, 0, 1)]);
    }

    #[test]
    fn polyhedron_row_count_and_final_batch_columns() {
        let traj = toy_egreedy_trajectory();
        let poly = egreedy_polyhedron(&traj, WeightSource::Realized, true).unwrap();
        // T=3, K=2: 2 decisions x 1 loser each.
        assert_eq!(poly.a.nrows(), 2);
        // Final-batch columns identically zero.
        for row in 0..2 {
            assert_eq!(poly.a[(row, 4)], 0.0);
            assert_eq!(poly.a[(row, 5)], 0.0);
        }
    }

    #[test]
    fn polyhedron_feasible_for_generating_trajectory() {
        let traj = toy_egreedy_trajectory();
        for source in [WeightSource::Realized, WeightSource::Design] {
            let poly = egreedy_polyhedron(&traj, source, false).unwrap();
            let x = DVector::from_iterator(
                6,
                traj.batches.iter().flat_map(|b| b.x.iter().copied()),
            );
            let viol = poly.max_violation(&x);
            assert!(viol <= 1e-8, "violation {viol} under {source:?}");
        }
    }

    #[test]
    fn polyhedron_requires_winners() {
        let mut traj = toy_egreedy_trajectory();
        traj.winners = None;
        assert!(matches!(
            egreedy_polyhedron(&traj, WeightSource::Realized, false),
            Err(Error::MissingWinners)
        ));
    }

    #[test]
    fn polyhedron_rows_match_policy_comparisons() {
        // The row value at the observed data equals the normalized
        // difference of the running means the policy compared.
        let traj = toy_egreedy_trajectory();
        let poly = egreedy_polyhedron(&traj, WeightSource::Realized, false).unwrap();
        let x = DVector::from_iterator(
            6,
            traj.batches.iter().flat_map(|b| b.x.iter().copied()),
        );
        for (row, &(t, winner, loser)) in poly.provenance.iter().enumerate() {
            let (w, _) = crate::model::cumulative_stats(&traj, t, WeightSource::Realized).unwrap();
            let raw = w[loser] - w[winner];
            let value = (poly.a.row(row) * &x)[(0, 0)];
            // Same sign and both non-positive.
            assert!(raw <= 0.0);
            assert!(value <= 1e-12);
            assert!(raw * value >= 0.0);
        }
    }
}

//! Core model types and sufficient-statistic algebra for batched adaptive
//! Gaussian experiments.
//!
//! # Setting
//!
//! An experiment runs for `T` batches over `K` arms. Batch `t` contains `n_t`
//! units (`c_t = n_t / n` of the total `n`). Given the sampling probabilities
//! `pi_t` chosen for batch `t`, the vector of batch arm means satisfies
//!
//! ```text
//! X_t | pi_t  ~  N(mu, V_t / n),     V_t = diag(sigma2_k / (c_t pi_tk)).
//! ```
//!
//! Two weighting conventions coexist:
//!
//! * **Design** weights use the sampling probabilities `pi_tk` and the true
//!   variances `sigma2_k` (exact-Gaussian model).
//! * **Realized** weights use the observed counts `N_tk` (equivalently
//!   `pi_hat_tk = N_tk / n_t`) and plug-in variance estimates
//!   (finite-sample model).
//!
//! All inferential procedures in this crate are built from a small set of
//! statistics computed here:
//!
//! * running inverse-variance weighted means `W_t` and their variances
//!   `Omega_t` (what an adaptive policy looks at),
//! * the scalar "leftover" projection `L = sum_{t<T} sum_k c_t pi_tk X_tk /
//!   sigma2_k` with loading vector `lambda_k = sum_{t<T} c_t pi_tk /
//!   sigma2_k`, which is the only part of the first `T-1` batches reusable
//!   after conditioning on the policy's decisions,
//! * the full-precision sufficient statistic `S_k = sum_t n_t pi_tk X_tk /
//!   sigma2_k`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Which weighting convention to use when aggregating batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightSource {
    /// Sampling probabilities `pi` and true variances `sigma2`.
    Design,
    /// Observed counts (`pi_hat`) and estimated variances `sigma2_hat`.
    Realized,
}

/// Fixed parameters of the data-generating model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Arm means, length `K`.
    pub mu: Vec<f64>,
    /// Arm outcome variances, length `K`, all strictly positive.
    pub sigma2: Vec<f64>,
    /// Batch sizes `n_t`, length `T0`, all at least 1.
    pub batch_sizes: Vec<usize>,
    /// Total sample size `n = sum_t n_t`.
    pub n: usize,
    /// Batch fractions `c_t = n_t / n`; sums to 1 by construction.
    pub c: Vec<f64>,
}

impl ModelParams {
    /// Validates and derives `n` and `c`.
    ///
    /// Experiments of interest have `K >= 2` arms (enforced when parsing run
    /// configurations); single-arm parameter sets are accepted here because
    /// several diagnostic reductions use them.
    pub fn new(mu: Vec<f64>, sigma2: Vec<f64>, batch_sizes: Vec<usize>) -> Result<Self> {
        if mu.is_empty() {
            return Err(Error::InvalidArgument("mu must be non-empty".into()));
        }
        if sigma2.len() != mu.len() {
            return Err(Error::InvalidArgument(format!(
                "sigma2 has length {}, expected {}",
                sigma2.len(),
                mu.len()
            )));
        }
        for (k, &s2) in sigma2.iter().enumerate() {
            if s2 < 0.0 {
                return Err(Error::NegativeVariance { index: k, value: s2 });
            }
            if s2 == 0.0 || !s2.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "sigma2[{k}] = {s2} must be positive and finite"
                )));
            }
        }
        if batch_sizes.is_empty() {
            return Err(Error::InvalidArgument("batch_sizes must be non-empty".into()));
        }
        if batch_sizes.iter().any(|&b| b == 0) {
            return Err(Error::InvalidArgument("all batch sizes must be >= 1".into()));
        }
        let n: usize = batch_sizes.iter().sum();
        let c: Vec<f64> = batch_sizes.iter().map(|&b| b as f64 / n as f64).collect();
        Ok(Self {
            mu,
            sigma2,
            batch_sizes,
            n,
            c,
        })
    }

    /// Number of arms `K`.
    pub fn k(&self) -> usize {
        self.mu.len()
    }

    /// Planned horizon `T0`.
    pub fn horizon(&self) -> usize {
        self.batch_sizes.len()
    }
}

/// Everything recorded about one executed batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchRecord {
    /// Batch index, 1-based.
    pub t: usize,
    /// Sampling probabilities chosen by the policy (simplex).
    pub pi: Vec<f64>,
    /// Realized arm fractions `counts / n_t`; equals `pi` in exact mode.
    pub pi_hat: Vec<f64>,
    /// Units assigned per arm. Integers in finite-sample mode, `n_t * pi`
    /// in exact-Gaussian mode; sums to `n_t` either way.
    pub counts: Vec<f64>,
    /// Arm means; `x[k] = 0` whenever `counts[k] = 0`.
    pub x: Vec<f64>,
    /// Per-arm sums of squared outcomes (finite-sample mode; zeros in exact
    /// mode, where variances are known).
    pub sumsq: Vec<f64>,
}

/// A completed experiment: parameters, per-batch records, the inferential
/// target, and final variance estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Model parameters the experiment was run under.
    pub params: ModelParams,
    /// One record per executed batch, `t = 1..=T` in order.
    pub batches: Vec<BatchRecord>,
    /// Unit-norm target direction `eta` (chosen at the end, possibly
    /// data-dependently).
    pub eta: Vec<f64>,
    /// Final per-arm variance estimates; equal to `params.sigma2` in
    /// exact-Gaussian mode.
    pub sigma2_hat: Vec<f64>,
    /// For the epsilon-greedy policy: the greedy arm chosen after each of the
    /// first `T-1` batches (0-based arm indices). `None` for other policies.
    pub winners: Option<Vec<usize>>,
}

impl Trajectory {
    /// Number of executed batches `T`.
    pub fn t(&self) -> usize {
        self.batches.len()
    }

    /// Number of arms `K`.
    pub fn k(&self) -> usize {
        self.params.k()
    }

    /// Target value `eta' mu` implied by the model parameters.
    pub fn true_target(&self) -> f64 {
        dot(&self.eta, &self.params.mu)
    }

    /// Per-source view of batch `t`'s probabilities (0-based index).
    fn probs(&self, t: usize, source: WeightSource) -> &[f64] {
        match source {
            WeightSource::Design => &self.batches[t].pi,
            WeightSource::Realized => &self.batches[t].pi_hat,
        }
    }

    /// Per-source view of the arm variances.
    fn variances(&self, source: WeightSource) -> &[f64] {
        match source {
            WeightSource::Design => &self.params.sigma2,
            WeightSource::Realized => &self.sigma2_hat,
        }
    }

    /// Checks every structural invariant; used by the simulator (debug) and
    /// by tests.
    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        let t_len = self.batches.len();
        if t_len == 0 || t_len > self.params.horizon() {
            return Err(Error::InvalidArgument(format!(
                "trajectory has {t_len} batches for horizon {}",
                self.params.horizon()
            )));
        }
        let eta_norm = norm(&self.eta);
        if (eta_norm - 1.0).abs() > 1e-10 {
            return Err(Error::NotUnit { norm: eta_norm });
        }
        for (i, b) in self.batches.iter().enumerate() {
            let nt = self.params.batch_sizes[i] as f64;
            if b.t != i + 1 {
                return Err(Error::InvalidArgument(format!(
                    "batch index {} at position {i}",
                    b.t
                )));
            }
            for v in [&b.pi, &b.pi_hat, &b.counts, &b.x, &b.sumsq] {
                if v.len() != k {
                    return Err(Error::InvalidArgument(format!(
                        "batch {} vectors must have length {k}",
                        b.t
                    )));
                }
            }
            if b.pi.iter().any(|&p| p < 0.0) || (sum(&b.pi) - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "batch {} probabilities are not a simplex point",
                    b.t
                )));
            }
            if (sum(&b.counts) - nt).abs() > 1e-9 * nt.max(1.0) {
                return Err(Error::InvalidArgument(format!(
                    "batch {} counts sum to {}, expected {nt}",
                    b.t,
                    sum(&b.counts)
                )));
            }
            for arm in 0..k {
                if (b.pi_hat[arm] - b.counts[arm] / nt).abs() > 1e-9 {
                    return Err(Error::InvalidArgument(format!(
                        "batch {} pi_hat[{arm}] inconsistent with counts",
                        b.t
                    )));
                }
                if b.counts[arm] == 0.0 && b.x[arm] != 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "batch {} records a mean for empty arm {arm}",
                        b.t
                    )));
                }
            }
        }
        if let Some(w) = &self.winners {
            if w.len() + 1 != t_len || w.iter().any(|&a| a >= k) {
                return Err(Error::InvalidArgument(
                    "winners must list one valid arm per non-final batch".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Diagonal of the conditional batch covariance `V_t`, i.e.
/// `V_tk = sigma2_k / (c_t pi_tk)`.
///
/// Errors with [`Error::ZeroProbability`] if any `pi_tk` is zero; `batch` in
/// the error is 1-based and only meaningful when the caller passes it.
pub fn batch_variance(sigma2: &[f64], c_t: f64, pi_t: &[f64]) -> Result<Vec<f64>> {
    if pi_t.len() != sigma2.len() {
        return Err(Error::InvalidArgument(format!(
            "pi has length {}, expected {}",
            pi_t.len(),
            sigma2.len()
        )));
    }
    if c_t <= 0.0 {
        return Err(Error::InvalidArgument(format!("c_t = {c_t} must be positive")));
    }
    pi_t.iter()
        .zip(sigma2)
        .enumerate()
        .map(|(k, (&p, &s2))| {
            if p <= 0.0 {
                Err(Error::ZeroProbability { arm: k + 1, batch: 0 })
            } else {
                Ok(s2 / (c_t * p))
            }
        })
        .collect()
}

/// Running inverse-variance weighted means `W_t` and their variance diagonal
/// `Omega_t` through batch `t` (1-based), under the given weighting source.
///
/// ```text
/// W_tk     = sum_{s<=t} w_sk X_sk / sum_{s<=t} w_sk,
/// Omega_tk = sigma2_k / sum_{s<=t} n_s pi_sk,
/// ```
/// with `w_sk = c_s pi_sk` (design) or `w_sk = N_sk` (realized; then
/// `Omega_tk = sigma2_hat_tk / sum_{s<=t} N_sk` with the pooled variance
/// estimate through batch `t`). The per-arm outcome variance cancels from the
/// weights within an arm, so `W` is the same whether or not weights carry a
/// `1/sigma2_k` factor.
///
/// Errors with [`Error::EmptyArm`] when an arm has zero cumulative weight.
pub fn cumulative_stats(
    traj: &Trajectory,
    t: usize,
    source: WeightSource,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if t == 0 || t > traj.t() {
        return Err(Error::InvalidArgument(format!(
            "prefix length {t} outside 1..={}",
            traj.t()
        )));
    }
    let k = traj.k();
    let mut wsum = vec![0.0; k];
    let mut wx = vec![0.0; k];
    let mut info = vec![0.0; k]; // sum_s n_s pi_sk (effective observations)
    for s in 0..t {
        let probs = traj.probs(s, source);
        let nt = traj.params.batch_sizes[s] as f64;
        for arm in 0..k {
            let w = match source {
                WeightSource::Design => traj.params.c[s] * probs[arm],
                WeightSource::Realized => traj.batches[s].counts[arm],
            };
            wsum[arm] += w;
            wx[arm] += w * traj.batches[s].x[arm];
            info[arm] += nt * probs[arm];
        }
    }
    let sigma2 = match source {
        WeightSource::Design => traj.params.sigma2.clone(),
        WeightSource::Realized => pooled_variance_estimates(traj, t)?,
    };
    let mut w_t = vec![0.0; k];
    let mut omega = vec![0.0; k];
    for arm in 0..k {
        if wsum[arm] <= 0.0 || info[arm] <= 0.0 {
            return Err(Error::EmptyArm { arm: arm + 1, batch: t });
        }
        w_t[arm] = wx[arm] / wsum[arm];
        omega[arm] = sigma2[arm] / info[arm];
    }
    Ok((w_t, omega))
}

/// Pooled per-arm variance estimates through batch `t` (1-based):
/// `sigma2_hat_k = (sum_s sumsq_sk) / N_k  -  mean_k^2`, floored at zero,
/// where `N_k` and `mean_k` pool all outcomes on arm `k` in batches `1..=t`.
///
/// Errors with [`Error::EmptyArm`] when an arm has no observations.
pub fn pooled_variance_estimates(traj: &Trajectory, t: usize) -> Result<Vec<f64>> {
    let k = traj.k();
    let mut count = vec![0.0; k];
    let mut total = vec![0.0; k];
    let mut sumsq = vec![0.0; k];
    for s in 0..t {
        let b = &traj.batches[s];
        for arm in 0..k {
            count[arm] += b.counts[arm];
            total[arm] += b.counts[arm] * b.x[arm];
            sumsq[arm] += b.sumsq[arm];
        }
    }
    (0..k)
        .map(|arm| {
            if count[arm] <= 0.0 {
                return Err(Error::EmptyArm { arm: arm + 1, batch: t });
            }
            let mean = total[arm] / count[arm];
            Ok((sumsq[arm] / count[arm] - mean * mean).max(0.0))
        })
        .collect()
}

/// Leftover projection of the first `T-1` batches: returns `(L, lambda)` with
///
/// ```text
/// lambda_k = sum_{t<T} c_t pi_tk / sigma2_k,
/// L        = sum_{t<T} sum_k c_t pi_tk X_tk / sigma2_k,
/// ```
/// so `E[L] = lambda' mu` and `Var(L) = (sum_k lambda_k) / n`. For a
/// single-batch trajectory both are zero. These are the unscaled
/// (fraction-based) forms; the count-based forms are `n` times larger.
pub fn leftover_stats(traj: &Trajectory, source: WeightSource) -> Result<(f64, Vec<f64>)> {
    let k = traj.k();
    let sigma2 = traj.variances(source);
    let mut lambda = vec![0.0; k];
    let mut l = 0.0;
    for t in 0..traj.t().saturating_sub(1) {
        let probs = traj.probs(t, source);
        for arm in 0..k {
            let w = traj.params.c[t] * probs[arm] / sigma2[arm];
            lambda[arm] += w;
            l += w * traj.batches[t].x[arm];
        }
    }
    Ok((l, lambda))
}

/// Full-precision sufficient statistic over all `T` batches:
/// `S_k = sum_t n_t pi_tk X_tk / sigma2_k` (source-appropriate `pi` and
/// `sigma2`). Additive over batches.
pub fn sufficient_stat(traj: &Trajectory, source: WeightSource) -> Result<Vec<f64>> {
    let k = traj.k();
    let sigma2 = traj.variances(source);
    let mut s = vec![0.0; k];
    for t in 0..traj.t() {
        let probs = traj.probs(t, source);
        let nt = traj.params.batch_sizes[t] as f64;
        for arm in 0..k {
            s[arm] += nt * probs[arm] * traj.batches[t].x[arm] / sigma2[arm];
        }
    }
    Ok(s)
}

/// Bundle of the statistics above, computed once per trajectory.
#[derive(Debug, Clone)]
pub struct SuffStats {
    /// Full-precision statistic `S`, length `K`.
    pub s: Vec<f64>,
    /// Leftover scalar `L`.
    pub l: f64,
    /// Leftover loadings `lambda`, length `K`.
    pub lambda: Vec<f64>,
    /// `W_t` for each prefix `t = 1..=T`.
    pub w: Vec<Vec<f64>>,
    /// `Omega_t` diagonal for each prefix `t = 1..=T`.
    pub omega: Vec<Vec<f64>>,
}

impl SuffStats {
    /// Computes all statistics for the trajectory under one weighting source.
    pub fn compute(traj: &Trajectory, source: WeightSource) -> Result<Self> {
        let (l, lambda) = leftover_stats(traj, source)?;
        let s = sufficient_stat(traj, source)?;
        let mut w = Vec::with_capacity(traj.t());
        let mut omega = Vec::with_capacity(traj.t());
        for t in 1..=traj.t() {
            let (wt, om) = cumulative_stats(traj, t, source)?;
            w.push(wt);
            omega.push(om);
        }
        Ok(Self { s, l, lambda, w, omega })
    }
}

/// Deterministic orthonormal completion of a unit vector: returns a
/// `(K-1) x K` matrix whose rows, together with `eta`, form an orthonormal
/// basis of `R^K`.
///
/// Construction: Gram-Schmidt of the canonical basis `e_1, e_2, ...` against
/// `eta`, keeping vectors in order and skipping those that become numerically
/// dependent. Errors with [`Error::NotUnit`] when `eta` is not a unit vector
/// to 1e-10.
pub fn complete_basis(eta: &[f64]) -> Result<DMatrix<f64>> {
    let k = eta.len();
    let eta_norm = norm(eta);
    if (eta_norm - 1.0).abs() > 1e-10 {
        return Err(Error::NotUnit { norm: eta_norm });
    }
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k - 1);
    for j in 0..k {
        if rows.len() == k - 1 {
            break;
        }
        // Residual of e_j after removing the eta component and accepted rows.
        let mut v = vec![0.0; k];
        v[j] = 1.0;
        let proj = eta[j];
        for (i, val) in v.iter_mut().enumerate() {
            *val -= proj * eta[i];
        }
        for row in &rows {
            let p = dot(&v, row);
            for (i, val) in v.iter_mut().enumerate() {
                *val -= p * row[i];
            }
        }
        let vn = norm(&v);
        if vn > 1e-6 {
            for val in v.iter_mut() {
                *val /= vn;
            }
            rows.push(v);
        }
    }
    debug_assert_eq!(rows.len(), k - 1);
    Ok(DMatrix::from_fn(k - 1, k, |r, c| rows[r][c]))
}

/// Covariance (up to the `1/n` factor) of the leftover-adjusted final-batch
/// estimator: `V_T - V_T lambda lambda' V_T / (1'lambda + lambda' V_T lambda)`.
///
/// With `lambda = 0` this is just `V_T`.
pub(crate) fn leftover_covariance(v_t: &[f64], lambda: &[f64]) -> DMatrix<f64> {
    let k = v_t.len();
    let lam_sum: f64 = lambda.iter().sum();
    let mut cov = DMatrix::zeros(k, k);
    for i in 0..k {
        cov[(i, i)] = v_t[i];
    }
    if lam_sum <= 0.0 {
        return cov;
    }
    let vl = DVector::from_fn(k, |i, _| v_t[i] * lambda[i]);
    let denom = lam_sum + lambda.iter().zip(v_t).map(|(&l, &v)| l * l * v).sum::<f64>();
    cov - &vl * vl.transpose() / denom
}

/// Ratio of asymptotic variances `Var(eta' S*) / Var(eta' X_T)` between the
/// leftover-adjusted estimator and the last-batch-only estimator, for a fixed
/// design `pi_rows` (one simplex row per batch, the last row being the final
/// batch) under `params`.
///
/// Always in `(0, 1]`; equals 1 exactly when the pre-final batches carry no
/// weight (`lambda = 0`).
pub fn efficiency_gain(params: &ModelParams, pi_rows: &[Vec<f64>], eta: &[f64]) -> Result<f64> {
    let k = params.k();
    let t_len = pi_rows.len();
    if t_len == 0 || t_len > params.horizon() {
        return Err(Error::InvalidArgument(format!(
            "design has {t_len} rows for horizon {}",
            params.horizon()
        )));
    }
    let eta_norm = norm(eta);
    if (eta_norm - 1.0).abs() > 1e-10 {
        return Err(Error::NotUnit { norm: eta_norm });
    }
    let v_t = batch_variance(&params.sigma2, params.c[t_len - 1], &pi_rows[t_len - 1])?;
    let mut lambda = vec![0.0; k];
    for t in 0..t_len - 1 {
        for arm in 0..k {
            lambda[arm] += params.c[t] * pi_rows[t][arm] / params.sigma2[arm];
        }
    }
    let cov = leftover_covariance(&v_t, &lambda);
    let eta_v = DVector::from_column_slice(eta);
    let num = (eta_v.transpose() * &cov * &eta_v)[(0, 0)];
    let den: f64 = eta.iter().zip(&v_t).map(|(&e, &v)| e * e * v).sum();
    Ok(num / den)
}

/// Euclidean inner product.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Euclidean norm.
pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Sum of entries.
pub(crate) fn sum(a: &[f64]) -> f64 {
    a.iter().sum()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Builds an exact-mode trajectory from a design and batch means.
    pub(crate) fn exact_trajectory(
        params: ModelParams,
        pi_rows: &[Vec<f64>],
        x_rows: &[Vec<f64>],
        eta: Vec<f64>,
    ) -> Trajectory {
        let k = params.k();
        let batches = pi_rows
            .iter()
            .zip(x_rows)
            .enumerate()
            .map(|(i, (pi, x))| {
                let nt = params.batch_sizes[i] as f64;
                BatchRecord {
                    t: i + 1,
                    pi: pi.clone(),
                    pi_hat: pi.clone(),
                    counts: pi.iter().map(|&p| p * nt).collect(),
                    x: x.clone(),
                    sumsq: vec![0.0; k],
                }
            })
            .collect();
        let sigma2_hat = params.sigma2.clone();
        Trajectory {
            params,
            batches,
            eta,
            sigma2_hat,
            winners: None,
        }
    }

    fn equal_design_params() -> ModelParams {
        ModelParams::new(vec![0.0; 3], vec![1.0; 3], vec![100; 4]).unwrap()
    }

    #[test]
    fn batch_variance_examples() {
        let v = batch_variance(&[1.0, 1.0], 0.25, &[0.5, 0.5]).unwrap();
        assert_relative_eq!(v[0], 8.0, max_relative = 1e-12);
        assert_relative_eq!(v[1], 8.0, max_relative = 1e-12);

        let v = batch_variance(&[1.0], 0.5, &[1.0]).unwrap();
        assert_relative_eq!(v[0], 2.0, max_relative = 1e-12);

        let v = batch_variance(&[1.0], 0.25, &[0.8]).unwrap();
        assert_relative_eq!(v[0], 5.0, max_relative = 1e-12);
    }

    #[test]
    fn batch_variance_rejects_zero_probability() {
        let err = batch_variance(&[1.0, 1.0], 0.25, &[1.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::ZeroProbability { arm: 2, .. }));
    }

    #[test]
    fn model_params_derivations() {
        let p = ModelParams::new(vec![0.0, 1.0], vec![1.0, 2.0], vec![30, 70]).unwrap();
        assert_eq!(p.n, 100);
        assert_relative_eq!(p.c[0], 0.3, max_relative = 1e-15);
        assert_relative_eq!(p.c[1], 0.7, max_relative = 1e-15);
        assert_relative_eq!(sum(&p.c), 1.0, epsilon = 1e-12);

        assert!(ModelParams::new(vec![0.0], vec![-1.0], vec![10]).is_err());
        assert!(ModelParams::new(vec![0.0], vec![0.0], vec![10]).is_err());
        assert!(ModelParams::new(vec![0.0], vec![1.0], vec![0]).is_err());
        assert!(ModelParams::new(vec![0.0], vec![1.0, 2.0], vec![10]).is_err());
    }

    #[test]
    fn cumulative_stats_single_batch_is_raw_mean() {
        let params = ModelParams::new(vec![0.0; 2], vec![2.0, 3.0], vec![50, 50]).unwrap();
        let pi = vec![vec![0.4, 0.6], vec![0.5, 0.5]];
        let x = vec![vec![1.5, -0.5], vec![0.0, 0.0]];
        let traj = exact_trajectory(params, &pi, &x, vec![1.0, 0.0]);
        let (w, omega) = cumulative_stats(&traj, 1, WeightSource::Design).unwrap();
        assert_relative_eq!(w[0], 1.5, max_relative = 1e-12);
        assert_relative_eq!(w[1], -0.5, max_relative = 1e-12);
        // Omega_1k = sigma2_k / (n c_1 pi_1k).
        assert_relative_eq!(omega[0], 2.0 / (100.0 * 0.5 * 0.4), max_relative = 1e-12);
        assert_relative_eq!(omega[1], 3.0 / (100.0 * 0.5 * 0.6), max_relative = 1e-12);
    }

    #[test]
    fn cumulative_stats_equal_weights_give_plain_mean() {
        let params = equal_design_params();
        let pi = vec![vec![1.0 / 3.0; 3]; 4];
        let x = vec![
            vec![1.0, 2.0, 3.0],
            vec![2.0, 0.0, -1.0],
            vec![3.0, 4.0, 1.0],
            vec![-2.0, 2.0, 5.0],
        ];
        let traj = exact_trajectory(params, &pi, &x, vec![1.0, 0.0, 0.0]);
        let (w, _) = cumulative_stats(&traj, 4, WeightSource::Design).unwrap();
        assert_relative_eq!(w[0], 1.0, max_relative = 1e-12);
        assert_relative_eq!(w[1], 2.0, max_relative = 1e-12);
        assert_relative_eq!(w[2], 2.0, max_relative = 1e-12);
    }

    #[test]
    fn cumulative_stats_matches_weighted_average_oracle() {
        // Independent recomputation with explicit weights, unequal batches.
        let params = ModelParams::new(vec![0.0; 2], vec![1.0, 4.0], vec![40, 60, 100]).unwrap();
        let pi = vec![vec![0.3, 0.7], vec![0.8, 0.2], vec![0.5, 0.5]];
        let x = vec![vec![1.0, -1.0], vec![0.5, 2.0], vec![-0.25, 0.75]];
        let traj = exact_trajectory(params.clone(), &pi, &x, vec![1.0, 0.0]);
        let (w, omega) = cumulative_stats(&traj, 3, WeightSource::Design).unwrap();
        for arm in 0..2 {
            let mut num = 0.0;
            let mut den = 0.0;
            let mut info = 0.0;
            for t in 0..3 {
                num += params.c[t] * pi[t][arm] * x[t][arm];
                den += params.c[t] * pi[t][arm];
                info += params.batch_sizes[t] as f64 * pi[t][arm];
            }
            assert_relative_eq!(w[arm], num / den, max_relative = 1e-12);
            assert_relative_eq!(omega[arm], params.sigma2[arm] / info, max_relative = 1e-12);
        }
    }

    #[test]
    fn cumulative_stats_empty_arm_in_realized_mode() {
        let params = ModelParams::new(vec![0.0; 2], vec![1.0, 1.0], vec![10, 10]).unwrap();
        let mut traj = exact_trajectory(
            params,
            &[vec![0.5, 0.5], vec![0.5, 0.5]],
            &[vec![0.0, 0.0], vec![0.0, 0.0]],
            vec![1.0, 0.0],
        );
        // All ten units of batch 1 land on arm 1.
        traj.batches[0].counts = vec![10.0, 0.0];
        traj.batches[0].pi_hat = vec![1.0, 0.0];
        let err = cumulative_stats(&traj, 1, WeightSource::Realized).unwrap_err();
        assert!(matches!(err, Error::EmptyArm { arm: 2, batch: 1 }));
    }

    #[test]
    fn leftover_stats_single_term() {
        // T=2, K=1, c_1 = 0.5, pi = 1, sigma2 = 1, X_11 = 0.4.
        let params = ModelParams::new(vec![0.0], vec![1.0], vec![50, 50]).unwrap();
        let traj = exact_trajectory(
            params,
            &[vec![1.0], vec![1.0]],
            &[vec![0.4], vec![0.0]],
            vec![1.0],
        );
        let (l, lambda) = leftover_stats(&traj, WeightSource::Design).unwrap();
        assert_relative_eq!(lambda[0], 0.5, max_relative = 1e-15);
        assert_relative_eq!(l, 0.2, max_relative = 1e-12);
    }

    #[test]
    fn leftover_stats_single_batch_is_zero() {
        let params = ModelParams::new(vec![0.0], vec![1.0], vec![100]).unwrap();
        let traj = exact_trajectory(params, &[vec![1.0]], &[vec![1.3]], vec![1.0]);
        let (l, lambda) = leftover_stats(&traj, WeightSource::Design).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(lambda, vec![0.0]);
    }

    #[test]
    fn leftover_stats_equal_design() {
        // T=4, pi = 1/3, c = 1/4, sigma2 = 1 -> lambda_k = 3 * (1/4)(1/3) = 1/4.
        let params = equal_design_params();
        let pi = vec![vec![1.0 / 3.0; 3]; 4];
        let x = vec![vec![0.0; 3]; 4];
        let traj = exact_trajectory(params, &pi, &x, vec![1.0, 0.0, 0.0]);
        let (_, lambda) = leftover_stats(&traj, WeightSource::Design).unwrap();
        for arm in 0..3 {
            assert_relative_eq!(lambda[arm], 0.25, max_relative = 1e-12);
        }
    }

    #[test]
    fn leftover_stats_location_shift() {
        let params = ModelParams::new(vec![0.0; 2], vec![1.5, 0.5], vec![30, 30, 40]).unwrap();
        let pi = vec![vec![0.25, 0.75], vec![0.6, 0.4], vec![0.5, 0.5]];
        let x = vec![vec![0.3, -0.2], vec![1.1, 0.4], vec![0.0, 0.0]];
        let h = 0.7;
        let x_shift: Vec<Vec<f64>> = x
            .iter()
            .map(|row| row.iter().map(|&v| v + h).collect())
            .collect();
        let eta = vec![1.0, 0.0];
        let t0 = exact_trajectory(params.clone(), &pi, &x, eta.clone());
        let t1 = exact_trajectory(params, &pi, &x_shift, eta);
        let (l0, lam0) = leftover_stats(&t0, WeightSource::Design).unwrap();
        let (l1, lam1) = leftover_stats(&t1, WeightSource::Design).unwrap();
        assert_eq!(lam0, lam1);
        assert_relative_eq!(l1, l0 + h * sum(&lam0), max_relative = 1e-12);
    }

    #[test]
    fn sufficient_stat_identity_and_additivity() {
        let params = ModelParams::new(vec![0.0; 3], vec![1.0, 2.0, 0.5], vec![20, 30, 50]).unwrap();
        let pi = vec![
            vec![0.2, 0.3, 0.5],
            vec![0.6, 0.1, 0.3],
            vec![0.25, 0.25, 0.5],
        ];
        let x = vec![
            vec![0.4, -1.0, 2.0],
            vec![1.5, 0.5, -0.5],
            vec![0.1, 0.2, 0.3],
        ];
        let traj = exact_trajectory(params.clone(), &pi, &x, vec![0.0, 1.0, 0.0]);
        let s = sufficient_stat(&traj, WeightSource::Design).unwrap();

        // Coordinate identity to relative 1e-10.
        for arm in 0..3 {
            let direct: f64 = (0..3)
                .map(|t| {
                    params.batch_sizes[t] as f64 * pi[t][arm] * x[t][arm] / params.sigma2[arm]
                })
                .sum();
            assert_relative_eq!(s[arm], direct, max_relative = 1e-10);
        }

        // Matrix form: S = G Vinv X over the stacked batch-major vector.
        let k = 3;
        let t_len = 3;
        let mut s_mat = vec![0.0; k];
        for t in 0..t_len {
            for arm in 0..k {
                let vinv = params.batch_sizes[t] as f64 * pi[t][arm] / params.sigma2[arm];
                s_mat[arm] += vinv * x[t][arm];
            }
        }
        for arm in 0..k {
            assert_relative_eq!(s[arm], s_mat[arm], max_relative = 1e-10);
        }

        // Additivity: prefix contribution plus final-batch contribution.
        let prefix = exact_trajectory(params.clone(), &pi[..2], &x[..2], vec![0.0, 1.0, 0.0]);
        let s_prefix = sufficient_stat(&prefix, WeightSource::Design).unwrap();
        for arm in 0..k {
            let last =
                params.batch_sizes[2] as f64 * pi[2][arm] * x[2][arm] / params.sigma2[arm];
            assert_relative_eq!(s[arm], s_prefix[arm] + last, max_relative = 1e-10);
        }
    }

    #[test]
    fn suff_stats_bundle_consistency() {
        let params = ModelParams::new(vec![0.0; 2], vec![1.0, 2.0], vec![40, 60]).unwrap();
        let pi = vec![vec![0.5, 0.5], vec![0.3, 0.7]];
        let x = vec![vec![0.2, -0.1], vec![0.9, 0.4]];
        let traj = exact_trajectory(params, &pi, &x, vec![1.0, 0.0]);
        let stats = SuffStats::compute(&traj, WeightSource::Design).unwrap();
        assert_eq!(stats.w.len(), 2);
        assert_eq!(stats.omega.len(), 2);
        let s = sufficient_stat(&traj, WeightSource::Design).unwrap();
        assert_eq!(stats.s, s);
        let (l, lambda) = leftover_stats(&traj, WeightSource::Design).unwrap();
        assert_eq!(stats.l, l);
        assert_eq!(stats.lambda, lambda);
    }

    #[test]
    fn complete_basis_requires_unit_vector() {
        let err = complete_basis(&[1.0, 1.0]).unwrap_err();
        assert!(matches!(err, Error::NotUnit { .. }));
    }

    #[test]
    fn complete_basis_canonical_two_arm() {
        let b = complete_basis(&[1.0, 0.0]).unwrap();
        assert_eq!(b.nrows(), 1);
        assert_eq!(b.ncols(), 2);
        // Row is (0, 1) up to sign.
        assert!(b[(0, 0)].abs() < 1e-12);
        assert_relative_eq!(b[(0, 1)].abs(), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn complete_basis_diagonal_direction() {
        let s = 1.0 / 2.0_f64.sqrt();
        let b = complete_basis(&[s, s]).unwrap();
        // Row proportional to (1, -1)/sqrt(2).
        assert_relative_eq!(b[(0, 0)].abs(), s, max_relative = 1e-10);
        assert_relative_eq!(b[(0, 1)].abs(), s, max_relative = 1e-10);
        assert_relative_eq!(b[(0, 0)] + b[(0, 1)], 0.0, epsilon = 1e-10);
    }

    #[test]
    fn complete_basis_is_orthonormal_and_deterministic() {
        let raw = vec![0.8, -0.3, 0.1, 0.5, -0.2];
        let nrm = norm(&raw);
        let eta: Vec<f64> = raw.iter().map(|v| v / nrm).collect();
        let b = complete_basis(&eta).unwrap();
        let b2 = complete_basis(&eta).unwrap();
        assert_eq!(b, b2);
        assert_eq!(b.nrows(), 4);
        for r in 0..4 {
            let row: Vec<f64> = (0..5).map(|c| b[(r, c)]).collect();
            assert_relative_eq!(norm(&row), 1.0, epsilon = 1e-10);
            assert!(dot(&row, &eta).abs() < 1e-10);
            for r2 in 0..r {
                let row2: Vec<f64> = (0..5).map(|c| b[(r2, c)]).collect();
                assert!(dot(&row, &row2).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn efficiency_gain_no_leftover_is_one() {
        // Single batch: lambda = 0, so the ratio is exactly 1.
        let params = ModelParams::new(vec![0.0; 2], vec![1.0, 1.0], vec![100]).unwrap();
        let g = efficiency_gain(&params, &[vec![0.5, 0.5]], &[1.0, 0.0]).unwrap();
        assert_relative_eq!(g, 1.0, max_relative = 1e-14);
    }

    #[test]
    fn efficiency_gain_equal_design_example() {
        // T=4 equal batches, uniform design over K=3, unit variances,
        // eta = e_1: ratio = 0.75.
        let params = equal_design_params();
        let pi = vec![vec![1.0 / 3.0; 3]; 4];
        let g = efficiency_gain(&params, &pi, &[1.0, 0.0, 0.0]).unwrap();
        assert_relative_eq!(g, 0.75, max_relative = 1e-12);
    }

    #[test]
    fn efficiency_gain_matches_count_based_oracle() {
        // Independent route: invert the count-based information matrix
        // M_n = q_tilde q_tilde' / (sum q_tilde) + n V_T^{-1},
        // with q_tilde_k = (sum_{t<T} n_t pi_tk) / sigma2_k, and compare
        // n * eta' M_n^{-1} eta against the closed form to 1e-10.
        let designs: Vec<(ModelParams, Vec<Vec<f64>>)> = vec![
            (
                ModelParams::new(vec![0.0; 3], vec![1.0, 2.0, 0.5], vec![50, 150, 200]).unwrap(),
                vec![
                    vec![0.2, 0.5, 0.3],
                    vec![0.7, 0.1, 0.2],
                    vec![0.4, 0.4, 0.2],
                ],
            ),
            (
                ModelParams::new(vec![0.0; 2], vec![1.0, 1.0], vec![100, 300]).unwrap(),
                vec![vec![0.9, 0.1], vec![0.5, 0.5]],
            ),
        ];
        for (params, pi) in designs {
            let k = params.k();
            let t_len = pi.len();
            let n = params.n as f64;
            let mut q = vec![0.0; k];
            for t in 0..t_len - 1 {
                for arm in 0..k {
                    q[arm] += params.batch_sizes[t] as f64 * pi[t][arm] / params.sigma2[arm];
                }
            }
            let qsum = sum(&q);
            let v_t = batch_variance(&params.sigma2, params.c[t_len - 1], &pi[t_len - 1]).unwrap();
            let mut m_n = DMatrix::from_fn(k, k, |i, j| q[i] * q[j] / qsum);
            for i in 0..k {
                m_n[(i, i)] += n / v_t[i];
            }
            let inv = m_n.try_inverse().unwrap();
            for arm in 0..k {
                let eta: Vec<f64> = (0..k).map(|i| if i == arm { 1.0 } else { 0.0 }).collect();
                let gain = efficiency_gain(&params, &pi, &eta).unwrap();
                let oracle = n * inv[(arm, arm)] / v_t[arm];
                assert_relative_eq!(gain, oracle, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn efficiency_gain_monotone_in_target_loading() {
        // For eta = e_1 and fixed V_T, the ratio is non-increasing as
        // lambda_1 grows with the other loadings held fixed.
        let v_t = vec![12.0, 12.0, 12.0];
        let eta = DVector::from_column_slice(&[1.0, 0.0, 0.0]);
        let mut last = f64::INFINITY;
        for i in 0..40 {
            let lam1 = 0.05 * i as f64;
            let cov = leftover_covariance(&v_t, &[lam1, 0.3, 0.1]);
            let ratio = (eta.transpose() * &cov * &eta)[(0, 0)] / v_t[0];
            assert!(ratio <= last + 1e-12, "ratio increased at lambda_1 = {lam1}");
            assert!(ratio > 0.0 && ratio <= 1.0 + 1e-12);
            last = ratio;
        }
    }

    #[test]
    fn trajectory_validate_catches_violations() {
        let params = ModelParams::new(vec![0.0; 2], vec![1.0, 1.0], vec![10, 10]).unwrap();
        let pi = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        let x = vec![vec![0.1, 0.2], vec![0.3, 0.4]];
        let good = exact_trajectory(params.clone(), &pi, &x, vec![1.0, 0.0]);
        good.validate().unwrap();

        let mut bad = good.clone();
        bad.eta = vec![1.0, 1.0];
        assert!(bad.validate().is_err());

        let mut bad = good.clone();
        bad.batches[0].pi = vec![0.7, 0.2];
        assert!(bad.validate().is_err());

        let mut bad = good.clone();
        bad.batches[1].counts = vec![3.0, 3.0];
        assert!(bad.validate().is_err());

        let mut bad = good.clone();
        bad.batches[0].counts = vec![10.0, 0.0];
        bad.batches[0].pi_hat = vec![1.0, 0.0];
        assert!(bad.validate().is_err()); // x[1] nonzero with zero count

        let mut bad = good;
        bad.winners = Some(vec![0, 1]);
        assert!(bad.validate().is_err()); // wrong winners length
    }

    #[test]
    fn true_target_is_eta_dot_mu() {
        let params = ModelParams::new(vec![1.0, -2.0], vec![1.0, 1.0], vec![10]).unwrap();
        let traj = exact_trajectory(params, &[vec![0.5, 0.5]], &[vec![0.0, 0.0]], vec![0.0, 1.0]);
        assert_relative_eq!(traj.true_target(), -2.0, max_relative = 1e-15);
    }
}

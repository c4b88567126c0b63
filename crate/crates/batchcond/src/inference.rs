//! Interval estimation for adaptively chosen linear targets.
//!
//! Four procedures are provided, all consuming a realized [`Trajectory`]:
//!
//! * [`last_only_ci`] — discard every batch but the final one.  Valid because
//!   the final batch is Gaussian around `mu` conditional on its own
//!   assignment probabilities, but wasteful.
//! * [`leftover_ci`] — augment the final batch with the scalar leftover
//!   statistic `L`, the one linear summary of the earlier batches whose joint
//!   law with the final batch stays Gaussian conditional on the assignment
//!   sequence.  Strictly shorter intervals than `last_only` whenever any
//!   earlier sampling touched the target.
//! * [`pivot_ci`] — a per-arm pivot that *averages* the per-batch z-scores;
//!   its unconditional size is correct for fixed targets but it is not
//!   conditionally valid, and it over-rejects for adaptively chosen targets.
//!   Included as the comparison baseline.
//! * [`polyhedral_ci`] — exact conditional inference given the realized
//!   assignment polyhedron (epsilon-greedy designs), via a Gibbs sampler over
//!   the constrained Gaussian and likelihood-ratio reweighting across
//!   hypothesized target values.
//!
//! Estimated coverage targets the realized value `eta' mu`, where `eta` may
//! itself depend on the trajectory (adaptive best-arm targets).

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{
    batch_variance, complete_basis, cumulative_stats, leftover_covariance, leftover_stats,
    sufficient_stat, Trajectory, WeightSource,
};
use crate::policies::Polyhedron;
use crate::stochastics::{
    gibbs_constrained_gaussian, normal_quantile, reweighted_cdf, reweighted_cdf_stats,
    ConstrainedGaussianProblem,
};

/// The inference procedures, in canonical reporting order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Procedure {
    /// Final batch only.
    LastOnly,
    /// Final batch plus the leftover statistic, combined by GLS.
    Leftover,
    /// Averaged per-batch pivot (unconditional; fixed targets only).
    Pivot,
    /// Exact conditional inference on the assignment polyhedron.
    Polyhedral,
}

impl Procedure {
    /// All procedures in canonical order.
    pub const ALL: [Procedure; 4] = [
        Procedure::LastOnly,
        Procedure::Leftover,
        Procedure::Pivot,
        Procedure::Polyhedral,
    ];

    /// Stable identifier used in CSV output and config files.
    pub fn tag(self) -> &'static str {
        match self {
            Procedure::LastOnly => "last_only",
            Procedure::Leftover => "leftover",
            Procedure::Pivot => "pivot",
            Procedure::Polyhedral => "polyhedral",
        }
    }
}

impl std::str::FromStr for Procedure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last_only" => Ok(Procedure::LastOnly),
            "leftover" => Ok(Procedure::Leftover),
            "pivot" => Ok(Procedure::Pivot),
            "polyhedral" => Ok(Procedure::Polyhedral),
            other => Err(Error::Config(format!("unknown procedure `{other}`"))),
        }
    }
}

impl std::fmt::Display for Procedure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// A two-sided confidence interval with its point estimate.
#[derive(Debug, Clone)]
pub struct CIResult {
    pub procedure: Procedure,
    pub estimate: f64,
    pub lo: f64,
    pub hi: f64,
    pub alpha: f64,
    /// Set by [`CIResult::with_coverage`] once the realized target is known.
    pub covered: Option<bool>,
}

impl CIResult {
    pub fn length(&self) -> f64 {
        self.hi - self.lo
    }

    /// Record whether the interval covers `true_tau` (closed endpoints).
    pub fn with_coverage(mut self, true_tau: f64) -> Self {
        self.covered = Some(self.lo <= true_tau && true_tau <= self.hi);
        self
    }
}

/// Which distributional model the leftover estimator assumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeftoverMode {
    /// Exact-Gaussian batch means: design probabilities and known variances.
    Exact,
    /// Finite-sample mode: realized counts and pooled variance estimates.
    Finite,
}

impl LeftoverMode {
    fn source(self) -> WeightSource {
        match self {
            LeftoverMode::Exact => WeightSource::Design,
            LeftoverMode::Finite => WeightSource::Realized,
        }
    }
}

fn check_alpha(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    Ok(normal_quantile(1.0 - alpha / 2.0))
}

fn check_eta(traj: &Trajectory, eta: &[f64]) -> Result<()> {
    if eta.len() != traj.k() {
        return Err(Error::InvalidArgument(format!(
            "target has {} entries but the trajectory has {} arms",
            eta.len(),
            traj.k()
        )));
    }
    let norm = crate::model::norm(eta);
    if (norm - 1.0).abs() > 1e-10 {
        return Err(Error::NotUnit { norm });
    }
    Ok(())
}

fn source_variances(traj: &Trajectory, source: WeightSource) -> Result<Vec<f64>> {
    let sigma2 = match source {
        WeightSource::Design => traj.params.sigma2.clone(),
        WeightSource::Realized => traj.sigma2_hat.clone(),
    };
    for (k, &v) in sigma2.iter().enumerate() {
        if !(v > 0.0) {
            return Err(Error::NegativeVariance { index: k, value: v });
        }
    }
    Ok(sigma2)
}

fn source_probs(traj: &Trajectory, t_idx: usize, source: WeightSource) -> &[f64] {
    match source {
        WeightSource::Design => &traj.batches[t_idx].pi,
        WeightSource::Realized => &traj.batches[t_idx].pi_hat,
    }
}

// ---------------------------------------------------------------------------
// Last batch only
// ---------------------------------------------------------------------------

/// Interval from the final batch alone: `eta' X_T ± z sqrt(eta' (V_T/n) eta)`.
///
/// Errors with [`Error::ZeroProbability`] if `eta` loads on an arm the final
/// batch never sampled.
pub fn last_only_ci(
    traj: &Trajectory,
    eta: &[f64],
    alpha: f64,
    source: WeightSource,
) -> Result<CIResult> {
    let z = check_alpha(alpha)?;
    check_eta(traj, eta)?;
    let t_len = traj.t();
    let last = &traj.batches[t_len - 1];
    let sigma2 = source_variances(traj, source)?;
    let probs = source_probs(traj, t_len - 1, source);
    let n_t = traj.params.batch_sizes[t_len - 1] as f64;

    let mut est = 0.0;
    let mut var = 0.0;
    for k in 0..traj.k() {
        if eta[k] == 0.0 {
            continue;
        }
        if probs[k] <= 0.0 {
            return Err(Error::ZeroProbability {
                arm: k + 1,
                batch: t_len,
            });
        }
        est += eta[k] * last.x[k];
        var += eta[k] * eta[k] * sigma2[k] / (n_t * probs[k]);
    }
    let half = z * var.sqrt();
    Ok(CIResult {
        procedure: Procedure::LastOnly,
        estimate: est,
        lo: est - half,
        hi: est + half,
        alpha,
        covered: None,
    })
}

// ---------------------------------------------------------------------------
// Leftover GLS
// ---------------------------------------------------------------------------

struct LeftoverFit {
    s_star: Vec<f64>,
    /// Covariance of `s_star` including the 1/n factor.
    cov: DMatrix<f64>,
    /// Orthogonal projector onto the estimable space (identity when the
    /// combined information matrix has full rank).
    projector: DMatrix<f64>,
}

fn pseudo_inverse(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.iter().fold(0.0_f64, |a, &v| a.max(v));
    let tol = 1e-10 * smax.max(f64::MIN_POSITIVE);
    let pinv = svd
        .pseudo_inverse(tol)
        .map_err(|e| Error::InvalidArgument(format!("pseudo-inverse failed: {e}")))?;
    let projector = &pinv * m;
    Ok((pinv, projector))
}

fn leftover_fit(traj: &Trajectory, mode: LeftoverMode) -> Result<LeftoverFit> {
    let source = mode.source();
    let k = traj.k();
    let n = traj.params.n as f64;
    let t_len = traj.t();
    let (l_stat, lambda) = leftover_stats(traj, source)?;
    let lam_sum: f64 = lambda.iter().sum();
    let sigma2 = source_variances(traj, source)?;
    let probs_t = source_probs(traj, t_len - 1, source);
    let c_t = traj.params.c[t_len - 1];
    let x_t = &traj.batches[t_len - 1].x;

    let closed_form = mode == LeftoverMode::Exact && probs_t.iter().all(|&p| p > 0.0);
    if closed_form {
        // All final-batch variances are finite: rank-one update in closed form.
        let v_t = batch_variance(&sigma2, c_t, probs_t)?;
        let s_star = if lam_sum <= 0.0 {
            x_t.clone()
        } else {
            let lx: f64 = (0..k).map(|i| lambda[i] * x_t[i]).sum();
            let lvl: f64 = (0..k).map(|i| lambda[i] * lambda[i] * v_t[i]).sum();
            let denom = lam_sum + lvl;
            let shift = (l_stat - lx) / denom;
            (0..k).map(|i| x_t[i] + v_t[i] * lambda[i] * shift).collect()
        };
        let cov = leftover_covariance(&v_t, &lambda) / n;
        return Ok(LeftoverFit {
            s_star,
            cov,
            projector: DMatrix::identity(k, k),
        });
    }

    // Information form: M = lambda lambda' / (lambda' 1) + inv(V_T), where
    // arms absent from the final batch contribute zero information there.
    let mut m = DMatrix::zeros(k, k);
    let mut rhs = DVector::zeros(k);
    if lam_sum > 0.0 {
        for i in 0..k {
            for j in 0..k {
                m[(i, j)] += lambda[i] * lambda[j] / lam_sum;
            }
            rhs[i] += lambda[i] * l_stat / lam_sum;
        }
    }
    for i in 0..k {
        let info = c_t * probs_t[i] / sigma2[i];
        m[(i, i)] += info;
        rhs[i] += info * x_t[i];
    }
    let (pinv, projector) = pseudo_inverse(&m)?;
    let sol = &pinv * &rhs;
    Ok(LeftoverFit {
        s_star: sol.iter().copied().collect(),
        cov: pinv / n,
        projector,
    })
}

/// The leftover-GLS arm-mean estimate and its covariance (including 1/n).
///
/// In [`LeftoverMode::Exact`] with a fully supported final batch this is the
/// closed-form rank-one update of the final batch means; otherwise the
/// information-form system is solved by pseudo-inverse, and arms with no
/// information in any batch are flagged per-target by [`leftover_ci`].
pub fn leftover_estimate(traj: &Trajectory, mode: LeftoverMode) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let fit = leftover_fit(traj, mode)?;
    Ok((fit.s_star, fit.cov))
}

/// Leftover-GLS interval for `eta' mu`.
///
/// Errors with [`Error::DegenerateTarget`] if `eta` is not estimable, i.e.
/// it loads on directions with zero combined information.
pub fn leftover_ci(
    traj: &Trajectory,
    eta: &[f64],
    alpha: f64,
    mode: LeftoverMode,
) -> Result<CIResult> {
    let z = check_alpha(alpha)?;
    check_eta(traj, eta)?;
    let fit = leftover_fit(traj, mode)?;
    let k = traj.k();
    let eta_v = DVector::from_column_slice(eta);
    let resid = (&eta_v - &fit.projector * &eta_v).norm();
    if resid > 1e-8 {
        return Err(Error::DegenerateTarget);
    }
    let est: f64 = (0..k).map(|i| eta[i] * fit.s_star[i]).sum();
    let var = (eta_v.transpose() * &fit.cov * &eta_v)[(0, 0)];
    if var < -1e-12 {
        return Err(Error::NegativeVariance {
            index: 0,
            value: var,
        });
    }
    let half = z * var.max(0.0).sqrt();
    Ok(CIResult {
        procedure: Procedure::Leftover,
        estimate: est,
        lo: est - half,
        hi: est + half,
        alpha,
        covered: None,
    })
}

// ---------------------------------------------------------------------------
// Averaged pivot
// ---------------------------------------------------------------------------

/// Averaged per-batch pivot for a single arm mean.
///
/// `eta` must be a coordinate basis vector (the pivot is defined per arm);
/// anything else errors with [`Error::NonBasisTarget`].  Batches in which the
/// arm has zero weight contribute nothing to the average, but the `sqrt(T)`
/// normalization keeps the full horizon.
pub fn pivot_ci(
    traj: &Trajectory,
    eta: &[f64],
    alpha: f64,
    source: WeightSource,
) -> Result<CIResult> {
    let z = check_alpha(alpha)?;
    check_eta(traj, eta)?;
    let mut arm = None;
    for (k, &e) in eta.iter().enumerate() {
        if e == 0.0 {
            continue;
        }
        if (e - 1.0).abs() > 1e-12 || arm.is_some() {
            return Err(Error::NonBasisTarget);
        }
        arm = Some(k);
    }
    let arm = arm.ok_or(Error::NonBasisTarget)?;
    let sigma2 = source_variances(traj, source)?;
    let sigma = sigma2[arm].sqrt();

    let t_len = traj.t();
    let mut sum_w = 0.0;
    let mut sum_wx = 0.0;
    for t_idx in 0..t_len {
        let n_t = traj.params.batch_sizes[t_idx] as f64;
        let p = source_probs(traj, t_idx, source)[arm];
        if p <= 0.0 {
            continue;
        }
        let w = (n_t * p).sqrt() / sigma;
        sum_w += w;
        sum_wx += w * traj.batches[t_idx].x[arm];
    }
    if sum_w <= 0.0 {
        return Err(Error::ZeroProbability {
            arm: arm + 1,
            batch: t_len,
        });
    }
    let est = sum_wx / sum_w;
    let half = (t_len as f64).sqrt() * z / sum_w;
    Ok(CIResult {
        procedure: Procedure::Pivot,
        estimate: est,
        lo: est - half,
        hi: est + half,
        alpha,
        covered: None,
    })
}

// ---------------------------------------------------------------------------
// Polyhedral conditional inference
// ---------------------------------------------------------------------------

/// Orthonormal `(t_len - 1) x t_len` matrix whose rows are orthogonal to the
/// all-ones vector (Helmert contrasts).
pub(crate) fn batch_contrast(t_len: usize) -> DMatrix<f64> {
    DMatrix::from_fn(t_len - 1, t_len, |j, t| {
        let jj = (j + 1) as f64;
        let denom = (jj * (jj + 1.0)).sqrt();
        if t <= j {
            1.0 / denom
        } else if t == j + 1 {
            -jj / denom
        } else {
            0.0
        }
    })
}

fn check_rows_orthonormal(m: &DMatrix<f64>, label: &str) -> Result<()> {
    for i in 0..m.nrows() {
        for j in i..m.nrows() {
            let mut acc = 0.0;
            for c in 0..m.ncols() {
                acc += m[(i, c)] * m[(j, c)];
            }
            let want = if i == j { 1.0 } else { 0.0 };
            if (acc - want).abs() > 1e-8 {
                return Err(Error::InvalidArgument(format!(
                    "{label}: rows {i} and {j} are not orthonormal (inner product {acc})"
                )));
            }
        }
    }
    Ok(())
}

fn check_completion(eta: &[f64], eta_perp: &DMatrix<f64>) -> Result<()> {
    let k = eta.len();
    if eta_perp.nrows() + 1 != k || eta_perp.ncols() != k {
        return Err(Error::InvalidArgument(format!(
            "completion must be {}x{}, got {}x{}",
            k - 1,
            k,
            eta_perp.nrows(),
            eta_perp.ncols()
        )));
    }
    check_rows_orthonormal(eta_perp, "target completion")?;
    for i in 0..eta_perp.nrows() {
        let mut acc = 0.0;
        for c in 0..k {
            acc += eta_perp[(i, c)] * eta[c];
        }
        if acc.abs() > 1e-8 {
            return Err(Error::InvalidArgument(format!(
                "completion row {i} is not orthogonal to the target (inner product {acc})"
            )));
        }
    }
    Ok(())
}

fn check_contrast(c_mat: &DMatrix<f64>, t_len: usize) -> Result<()> {
    if c_mat.nrows() + 1 != t_len || c_mat.ncols() != t_len {
        return Err(Error::InvalidArgument(format!(
            "batch contrast must be {}x{}, got {}x{}",
            t_len - 1,
            t_len,
            c_mat.nrows(),
            c_mat.ncols()
        )));
    }
    check_rows_orthonormal(c_mat, "batch contrast")?;
    for i in 0..c_mat.nrows() {
        let acc: f64 = (0..t_len).map(|t| c_mat[(i, t)]).sum();
        if acc.abs() > 1e-8 {
            return Err(Error::InvalidArgument(format!(
                "batch contrast row {i} is not orthogonal to the ones vector (sum {acc})"
            )));
        }
    }
    Ok(())
}

pub(crate) struct TransformParts {
    pub g_tilde: DMatrix<f64>,
    pub g_tilde_perp: DMatrix<f64>,
    pub s_vec: DVector<f64>,
    pub x_stacked: DVector<f64>,
    pub problem: ConstrainedGaussianProblem,
}

fn transform_parts(
    traj: &Trajectory,
    eta: &[f64],
    poly: &Polyhedron,
    source: WeightSource,
    eta_perp: &DMatrix<f64>,
    c_contrast: &DMatrix<f64>,
) -> Result<TransformParts> {
    check_eta(traj, eta)?;
    let k = traj.k();
    let t_len = traj.t();
    let kt = k * t_len;
    check_completion(eta, eta_perp)?;
    check_contrast(c_contrast, t_len)?;
    if poly.a.ncols() != kt || poly.a.nrows() != poly.b.len() {
        return Err(Error::InvalidArgument(format!(
            "polyhedron shape {}x{} does not match a {}-batch, {}-arm trajectory",
            poly.a.nrows(),
            poly.a.ncols(),
            t_len,
            k
        )));
    }

    // Stacked batch-mean variances sigma^2_k / (n_t p_tk), batch-major.
    let sigma2 = source_variances(traj, source)?;
    let mut vdiag = vec![0.0; kt];
    for t_idx in 0..t_len {
        let n_t = traj.params.batch_sizes[t_idx] as f64;
        let probs = source_probs(traj, t_idx, source);
        for arm in 0..k {
            if probs[arm] <= 0.0 {
                return Err(Error::ZeroProbability {
                    arm: arm + 1,
                    batch: t_idx + 1,
                });
            }
            vdiag[t_idx * k + arm] = sigma2[arm] / (n_t * probs[arm]);
        }
    }

    let x_stacked = DVector::from_fn(kt, |i, _| traj.batches[i / k].x[i % k]);

    // Sufficient statistic S = G V^{-1} X and its (diagonal) covariance R.
    let s_vec = DVector::from_column_slice(&sufficient_stat(traj, source)?);
    let mut r_diag = vec![0.0; k];
    for (i, &v) in vdiag.iter().enumerate() {
        r_diag[i % k] += 1.0 / v;
    }

    let c_scalar = 1.0 / (0..k).map(|i| eta[i] * eta[i] / r_diag[i]).sum::<f64>();

    // offset = k' (eta_perp S) with k' = (1/c) eta' R eta_perp' (eta_perp R eta_perp')^{-1}.
    let u_perp = eta_perp * &s_vec;
    let r_eta = DVector::from_fn(k, |i, _| r_diag[i] * eta[i]);
    let a_vec = eta_perp * &r_eta;
    let b_mat = DMatrix::from_fn(k - 1, k - 1, |i, j| {
        (0..k).map(|l| eta_perp[(i, l)] * r_diag[l] * eta_perp[(j, l)]).sum()
    });
    let offset = if k > 1 {
        let chol = b_mat
            .cholesky()
            .ok_or_else(|| Error::InvalidArgument("completion information is singular".into()))?;
        let sol = chol.solve(&a_vec);
        (0..k - 1).map(|i| sol[i] * u_perp[i]).sum::<f64>() / c_scalar
    } else {
        0.0
    };

    let z1_obs = (0..k).map(|i| eta[i] * s_vec[i]).sum::<f64>() / c_scalar;

    // Stack H = [G V^{-1}; G_perp] and invert: H^{-1} = [G_tilde | G_tilde_perp].
    let pkt = (t_len - 1) * k;
    let mut h = DMatrix::zeros(kt, kt);
    for t_idx in 0..t_len {
        for arm in 0..k {
            h[(arm, t_idx * k + arm)] = 1.0 / vdiag[t_idx * k + arm];
        }
    }
    for j in 0..t_len - 1 {
        for t_idx in 0..t_len {
            let coef = c_contrast[(j, t_idx)];
            if coef != 0.0 {
                for arm in 0..k {
                    h[(k + j * k + arm, t_idx * k + arm)] = coef;
                }
            }
        }
    }
    let sv = h.singular_values();
    let smax = sv.iter().fold(0.0_f64, |a, &v| a.max(v));
    let smin = sv.iter().fold(f64::INFINITY, |a, &v| a.min(v));
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if cond > 1e12 {
        return Err(Error::SingularStack { cond });
    }
    // H inverts in closed form: columns of G_tilde must span G' (annihilated
    // by G_perp) with G V^{-1} G_tilde = I, giving G_tilde = G' R^{-1}; the
    // complement block is the G V^{-1}-annihilated part of G_perp',
    // G_tilde_perp = (I - G' R^{-1} G V^{-1}) G_perp'.  Far better conditioned
    // than a generic inverse of the badly row-scaled stack.
    let mut g_tilde = DMatrix::zeros(kt, k);
    for t_idx in 0..t_len {
        for arm in 0..k {
            g_tilde[(t_idx * k + arm, arm)] = 1.0 / r_diag[arm];
        }
    }
    // q[j, arm] = (G V^{-1} G_perp')[arm, j*k+arm] = sum_t C[j, t] / v_{t,arm}.
    let mut g_tilde_perp = DMatrix::zeros(kt, pkt);
    for j in 0..t_len.saturating_sub(1) {
        for arm in 0..k {
            let q: f64 = (0..t_len)
                .map(|t_idx| c_contrast[(j, t_idx)] / vdiag[t_idx * k + arm])
                .sum();
            for t_idx in 0..t_len {
                g_tilde_perp[(t_idx * k + arm, j * k + arm)] =
                    c_contrast[(j, t_idx)] - q / r_diag[arm];
            }
        }
    }

    // Constraint system in (Z1, Z2) coordinates: M [z1; z2] <= m.
    let eta_v = DVector::from_column_slice(eta);
    let a_g_eta = &poly.a * &g_tilde * &eta_v;
    let a_g_perp = &poly.a * &g_tilde_perp;
    let n_rows = poly.a.nrows();
    let mut m_mat = DMatrix::zeros(n_rows, 1 + pkt);
    for i in 0..n_rows {
        m_mat[(i, 0)] = c_scalar * a_g_eta[i];
        for j in 0..pkt {
            m_mat[(i, j + 1)] = a_g_perp[(i, j)];
        }
    }
    let s_resid = &s_vec - &eta_v * (0..k).map(|i| eta[i] * s_vec[i]).sum::<f64>();
    let m_rhs = &poly.b - &poly.a * &g_tilde * s_resid;

    // Z2 = G_perp X: mean zero, covariance G_perp V G_perp', independent of S.
    let mut g_perp = DMatrix::zeros(pkt, kt);
    for j in 0..t_len - 1 {
        for t_idx in 0..t_len {
            let coef = c_contrast[(j, t_idx)];
            if coef != 0.0 {
                for arm in 0..k {
                    g_perp[(j * k + arm, t_idx * k + arm)] = coef;
                }
            }
        }
    }
    let mut cov_z2 = DMatrix::zeros(pkt, pkt);
    for i in 0..pkt {
        for j in 0..pkt {
            let mut acc = 0.0;
            for (l, &v) in vdiag.iter().enumerate() {
                acc += g_perp[(i, l)] * v * g_perp[(j, l)];
            }
            cov_z2[(i, j)] = acc;
        }
    }
    let z2_obs = &g_perp * &x_stacked;

    let problem = ConstrainedGaussianProblem {
        c: c_scalar,
        offset,
        tau: 0.0,
        cov_z2,
        m_mat,
        m_rhs,
        z1_obs,
        z2_obs,
    };
    Ok(TransformParts {
        g_tilde,
        g_tilde_perp,
        s_vec,
        x_stacked,
        problem,
    })
}

/// Build the constrained-Gaussian problem for polyhedral inference, using the
/// canonical completions (deterministic Gram-Schmidt for the target, Helmert
/// contrasts for the batches).
///
/// The returned problem has `tau = 0`; the test and interval routines set the
/// hypothesized value.  Errors with [`Error::ZeroProbability`] if any
/// (batch, arm) weight is zero — every stacked coordinate needs a finite
/// variance — and with [`Error::SingularStack`] if the coordinate change is
/// ill-conditioned (condition number above 1e12).
pub fn polyhedral_transform(
    traj: &Trajectory,
    eta: &[f64],
    poly: &Polyhedron,
    source: WeightSource,
) -> Result<ConstrainedGaussianProblem> {
    let eta_perp = complete_basis(eta)?;
    let c_contrast = batch_contrast(traj.t());
    polyhedral_transform_with_completion(traj, eta, poly, source, &eta_perp, &c_contrast)
}

/// [`polyhedral_transform`] with caller-supplied orthonormal completions of
/// the target direction and of the ones vector over batches.  The conditional
/// law — and hence tests and intervals built from the output — does not
/// depend on these choices; this entry point exists to verify that.
pub fn polyhedral_transform_with_completion(
    traj: &Trajectory,
    eta: &[f64],
    poly: &Polyhedron,
    source: WeightSource,
    eta_perp: &DMatrix<f64>,
    c_contrast: &DMatrix<f64>,
) -> Result<ConstrainedGaussianProblem> {
    Ok(transform_parts(traj, eta, poly, source, eta_perp, c_contrast)?.problem)
}

/// Max-norm error of reconstructing the stacked batch means from the
/// transformed coordinates.  A diagnostic for the coordinate change; exact
/// arithmetic gives zero.
pub fn reconstruction_error(
    traj: &Trajectory,
    eta: &[f64],
    poly: &Polyhedron,
    source: WeightSource,
) -> Result<f64> {
    let eta_perp = complete_basis(eta)?;
    let c_contrast = batch_contrast(traj.t());
    let parts = transform_parts(traj, eta, poly, source, &eta_perp, &c_contrast)?;
    let rebuilt = &parts.g_tilde * &parts.s_vec + &parts.g_tilde_perp * &parts.problem.z2_obs;
    let err = (&rebuilt - &parts.x_stacked)
        .iter()
        .fold(0.0_f64, |a, &v| a.max(v.abs()));
    Ok(err)
}

/// Tuning for the constrained Gibbs sampler behind polyhedral inference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GibbsSpec {
    /// Retained draws per chain.
    pub n_draws: usize,
    /// Discarded warm-up sweeps per chain.
    pub burn_in: usize,
    /// Keep every `thin`-th sweep after warm-up.
    pub thin: usize,
    /// Minimum effective sample size before reweighting an existing chain is
    /// abandoned in favor of a fresh chain at the hypothesized value.
    pub ess_guard: f64,
}

impl Default for GibbsSpec {
    fn default() -> Self {
        GibbsSpec {
            n_draws: 4000,
            burn_in: 500,
            thin: 1,
            ess_guard: 200.0,
        }
    }
}

impl GibbsSpec {
    fn validate(&self) -> Result<()> {
        if self.n_draws == 0 || self.thin == 0 {
            return Err(Error::InvalidArgument(
                "gibbs draws and thinning must be positive".into(),
            ));
        }
        if !(self.ess_guard >= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "ess guard must be at least 1, got {}",
                self.ess_guard
            )));
        }
        Ok(())
    }
}

/// Conditional two-sided test of `tau = tau0` given the polyhedron.
///
/// Returns `(reject, lower_tail, upper_tail)` where the tails are the Monte
/// Carlo estimates of `P(Z1 <= z1_obs)` and `P(Z1 >= z1_obs)` under `tau0`.
pub fn polyhedral_test<R: Rng + ?Sized>(
    problem: &ConstrainedGaussianProblem,
    tau0: f64,
    alpha: f64,
    gibbs: &GibbsSpec,
    rng: &mut R,
) -> Result<(bool, f64, f64)> {
    check_alpha(alpha)?;
    gibbs.validate()?;
    let mut p = problem.clone();
    p.tau = tau0;
    let draws = gibbs_constrained_gaussian(&p, gibbs.n_draws, gibbs.burn_in, gibbs.thin, rng)?;
    let (f_hat, _) = reweighted_cdf(&draws, tau0, problem.z1_obs, problem.c, tau0)?;
    let reject = f_hat < alpha / 2.0 || f_hat > 1.0 - alpha / 2.0;
    Ok((reject, f_hat, 1.0 - f_hat))
}

struct ChainCache<'a, R: Rng + ?Sized> {
    problem: &'a ConstrainedGaussianProblem,
    gibbs: &'a GibbsSpec,
    rng: &'a mut R,
    chains: Vec<(f64, Vec<f64>)>,
}

/// Reweighting a chain tilted further than this (in units of the conditional
/// standard deviation `1/sqrt(c)`) from the hypothesized value is excluded
/// from the pool: past that distance the importance weights concentrate on a
/// handful of draws and both the estimate and its variance proxy degrade.
const POOL_DISTANCE: f64 = 2.6;

/// Fresh chains anchored at the solved root during polishing.  Each round
/// adds an unweighted chain exactly where the tail probability is evaluated,
/// shrinking the pooled error at the root by roughly `1/sqrt(rounds)`.
const POLISH_ROUNDS: usize = 4;

impl<'a, R: Rng + ?Sized> ChainCache<'a, R> {
    fn new(
        problem: &'a ConstrainedGaussianProblem,
        gibbs: &'a GibbsSpec,
        rng: &'a mut R,
    ) -> Self {
        ChainCache {
            problem,
            gibbs,
            rng,
            chains: Vec::new(),
        }
    }

    /// Draw a fresh chain at hypothesized value `tau` and add it to the pool.
    fn refresh(&mut self, tau: f64) -> Result<()> {
        let mut p = self.problem.clone();
        p.tau = tau;
        let draws = gibbs_constrained_gaussian(
            &p,
            self.gibbs.n_draws,
            self.gibbs.burn_in,
            self.gibbs.thin,
            self.rng,
        )?;
        self.chains.push((tau, draws));
        Ok(())
    }

    /// Inverse-variance pooling of every cached chain that reweights to `tau`
    /// reliably (within [`POOL_DISTANCE`] and with effective sample size at or
    /// above the guard).  `None` when no chain qualifies.
    fn pooled(&self, tau: f64) -> Result<Option<f64>> {
        let sqrt_c = self.problem.c.sqrt();
        let mut wsum = 0.0;
        let mut acc = 0.0;
        for (base, draws) in &self.chains {
            if (tau - base).abs() * sqrt_c > POOL_DISTANCE {
                continue;
            }
            let (prob, ess, var) =
                reweighted_cdf_stats(draws, *base, self.problem.z1_obs, self.problem.c, tau)?;
            if ess < self.gibbs.ess_guard {
                continue;
            }
            let w = 1.0 / (var + 1e-12);
            wsum += w;
            acc += w * prob;
        }
        Ok(if wsum > 0.0 { Some(acc / wsum) } else { None })
    }

    /// `P(Z1 <= z1_obs)` under hypothesized value `tau`, pooling the cached
    /// chains; a fresh chain is drawn at `tau` first whenever every cached
    /// chain is too far away or reweights below the effective-sample guard.
    fn cdf_at(&mut self, tau: f64) -> Result<f64> {
        if let Some(prob) = self.pooled(tau)? {
            return Ok(prob);
        }
        self.refresh(tau)?;
        match self.pooled(tau)? {
            Some(prob) => Ok(prob),
            // Unreachable in practice (an unweighted fresh chain always
            // qualifies), kept as a plain recompute rather than a panic.
            None => {
                let (base, draws) = self.chains.last().expect("chain just pushed");
                let (prob, _) =
                    reweighted_cdf(draws, *base, self.problem.z1_obs, self.problem.c, tau)?;
                Ok(prob)
            }
        }
    }
}

fn bisect<R: Rng + ?Sized>(
    cache: &mut ChainCache<'_, R>,
    target: f64,
    mut lo: f64,
    mut hi: f64,
    scale: f64,
) -> Result<f64> {
    while hi - lo > 1e-3 * scale {
        let mid = 0.5 * (lo + hi);
        if cache.cdf_at(mid)? >= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Solve `P_tau(Z1 <= z1_obs) = target` for `tau`.  The CDF is decreasing in
/// `tau`, so bracket around the pilot, bisect, then polish: the first pass may
/// lean on chains tilted far from the root, whose reweighted tail estimates
/// are noisy, so fresh chains are anchored at the solved root and the
/// bisection is repeated in a verified local bracket.
fn solve_root<R: Rng + ?Sized>(
    cache: &mut ChainCache<'_, R>,
    target: f64,
    pilot: f64,
    scale: f64,
    which: &'static str,
) -> Result<f64> {
    let mut lo = pilot - 6.0 * scale;
    let mut hi = pilot + 6.0 * scale;
    let mut g_lo = cache.cdf_at(lo)?;
    let mut g_hi = cache.cdf_at(hi)?;
    let mut doublings = 0usize;
    while g_lo < target {
        let width = hi - lo;
        lo -= width;
        doublings += 1;
        if doublings > 60 {
            return Err(Error::BracketFailure { which, doublings });
        }
        g_lo = cache.cdf_at(lo)?;
    }
    while g_hi > target {
        let width = hi - lo;
        hi += width;
        doublings += 1;
        if doublings > 60 {
            return Err(Error::BracketFailure { which, doublings });
        }
        g_hi = cache.cdf_at(hi)?;
    }
    let mut root = bisect(cache, target, lo, hi, scale)?;
    for round in 0..POLISH_ROUNDS {
        cache.refresh(root)?;
        // Re-solve inside a window around the current root, widening until the
        // window verifiably brackets the target but staying within pooling
        // range of the chain just anchored there.  If even the widest window
        // fails to bracket, keep the current root and let the next round's
        // fresh chain tighten the pooled estimates first.
        let mut half = if round == 0 { 0.75 * scale } else { 0.3 * scale };
        loop {
            if half > 2.4 * scale {
                break;
            }
            let plo = root - half;
            let phi = root + half;
            if cache.cdf_at(plo)? >= target && cache.cdf_at(phi)? <= target {
                root = bisect(cache, target, plo, phi, scale)?;
                break;
            }
            half *= 2.0;
        }
    }
    Ok(root)
}

/// Conditional confidence interval by test inversion over the polyhedron.
///
/// The point estimate is median-unbiased (the hypothesized value whose
/// conditional CDF at the observation equals 1/2), and the endpoints invert
/// the equal-tailed test at level `alpha`.  Chains drawn during the search
/// are cached and reweighted across nearby hypothesized values.
pub fn polyhedral_ci<R: Rng + ?Sized>(
    problem: &ConstrainedGaussianProblem,
    alpha: f64,
    gibbs: &GibbsSpec,
    rng: &mut R,
) -> Result<CIResult> {
    check_alpha(alpha)?;
    gibbs.validate()?;
    let scale = 1.0 / problem.c.sqrt();
    let pilot = problem.z1_obs - problem.offset;
    let mut cache = ChainCache::new(problem, gibbs, rng);
    let estimate = solve_root(&mut cache, 0.5, pilot, scale, "estimate")?;
    let lo = solve_root(&mut cache, 1.0 - alpha / 2.0, pilot, scale, "lower")?;
    let hi = solve_root(&mut cache, alpha / 2.0, pilot, scale, "upper")?;
    Ok(CIResult {
        procedure: Procedure::Polyhedral,
        estimate: estimate.clamp(lo, hi),
        lo,
        hi,
        alpha,
        covered: None,
    })
}

/// Recompute the greedy winner of each non-final batch from cumulative means
/// (lowest index wins ties) — the argmax sequence the polyhedron encodes.
pub fn greedy_winners(traj: &Trajectory, source: WeightSource) -> Result<Vec<usize>> {
    let mut winners = Vec::with_capacity(traj.t() - 1);
    for t in 1..traj.t() {
        let (w, _) = cumulative_stats(traj, t, source)?;
        let mut best = 0usize;
        for (i, &v) in w.iter().enumerate() {
            if v > w[best] {
                best = i;
            }
        }
        winners.push(best);
    }
    Ok(winners)
}

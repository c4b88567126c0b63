//! Random-number plumbing and the constrained-Gaussian sampling toolkit.
//!
//! Everything random in this crate flows through [`RngStream`], a
//! counter-based generator with explicit `(master_seed, stream_id)`
//! addressing: replicate `r` of a run always uses stream `r`, which makes
//! runs bit-reproducible and embarrassingly parallel at the same time.
//!
//! The heavier machinery here serves the selective-inference procedure:
//!
//! * [`draw_truncated_normal`] — exact rejection samplers for the truncated
//!   normal, including translated-exponential proposals for far tails (naive
//!   inverse-CDF sampling loses all precision beyond ~6 standard
//!   deviations).
//! * [`gibbs_constrained_gaussian`] — a coordinate Gibbs sampler for a
//!   Gaussian vector `(Z1, Z2)` restricted to a polyhedron `M Z <= m`, with
//!   `Z1 ~ N(tau + offset, 1/c)` independent of `Z2 ~ N(0, cov_z2)`. The
//!   covariance may be singular; degenerate directions are frozen at their
//!   observed values.
//! * [`reweighted_cdf`] — exponential-tilt importance reweighting that reuses
//!   one chain (drawn under `tau0`) to evaluate the conditional CDF under
//!   nearby `tau1`, with an effective-sample-size diagnostic.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use std::sync::LazyLock;

use crate::error::{Error, Result};

static STD_NORMAL: LazyLock<Normal> = LazyLock::new(|| Normal::new(0.0, 1.0).unwrap());

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    STD_NORMAL.cdf(x)
}

/// Standard normal survival function `1 - Phi(x)`, accurate in the upper
/// tail.
pub fn normal_sf(x: f64) -> f64 {
    STD_NORMAL.sf(x)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    STD_NORMAL.pdf(x)
}

/// Standard normal quantile function.
pub fn normal_quantile(p: f64) -> f64 {
    STD_NORMAL.inverse_cdf(p)
}

/// A deterministic, independently addressable random stream.
///
/// Two streams with the same `(master_seed, stream_id)` produce identical
/// draw sequences; distinct ids give statistically independent streams.
#[derive(Debug, Clone)]
pub struct RngStream {
    rng: ChaCha12Rng,
    master_seed: u64,
    stream_id: u64,
}

impl RngStream {
    /// Creates stream `stream_id` of the generator seeded by `master_seed`.
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(master_seed);
        rng.set_stream(stream_id);
        Self {
            rng,
            master_seed,
            stream_id,
        }
    }

    /// Master seed this stream was created from.
    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    /// Stream id within the master seed.
    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest);
    }
}

/// Draws from `N(mean, diag(var))`. Zero-variance coordinates return their
/// mean exactly; the stream is advanced by one normal per coordinate
/// regardless, so consumption does not depend on the variance values.
pub fn draw_mvn_diag<R: Rng + ?Sized>(mean: &[f64], var: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    if mean.len() != var.len() {
        return Err(Error::InvalidArgument(format!(
            "mean length {} != var length {}",
            mean.len(),
            var.len()
        )));
    }
    for (k, &v) in var.iter().enumerate() {
        if v < 0.0 {
            return Err(Error::NegativeVariance { index: k, value: v });
        }
    }
    Ok(mean
        .iter()
        .zip(var)
        .map(|(&m, &v)| {
            let z: f64 = rng.sample(StandardNormal);
            m + v.sqrt() * z
        })
        .collect())
}

/// Monte Carlo estimate of the orthant probabilities
/// `Q_k = P(argmax_j X_j = k)` for `X ~ N(nu, diag(lambda))`, using
/// `n_draws` common random draws. Ties go to the lowest index, and the
/// returned vector sums to exactly 1 (any floating residual is added to the
/// largest entry).
pub fn orthant_probability<R: Rng + ?Sized>(
    nu: &[f64],
    lambda: &[f64],
    n_draws: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let k = nu.len();
    if k == 0 || lambda.len() != k {
        return Err(Error::InvalidArgument(
            "nu and lambda must be non-empty and of equal length".into(),
        ));
    }
    if n_draws == 0 {
        return Err(Error::InvalidArgument("n_draws must be >= 1".into()));
    }
    for (idx, &v) in lambda.iter().enumerate() {
        if v < 0.0 {
            return Err(Error::NegativeVariance { index: idx, value: v });
        }
    }
    let sd: Vec<f64> = lambda.iter().map(|&v| v.sqrt()).collect();
    let mut counts = vec![0u64; k];
    let mut z = vec![0.0; k];
    for _ in 0..n_draws {
        for j in 0..k {
            let e: f64 = rng.sample(StandardNormal);
            z[j] = nu[j] + sd[j] * e;
        }
        let mut best = 0;
        for j in 1..k {
            if z[j] > z[best] {
                best = j;
            }
        }
        counts[best] += 1;
    }
    let mut probs: Vec<f64> = counts.iter().map(|&c| c as f64 / n_draws as f64).collect();
    let total: f64 = probs.iter().sum();
    if total != 1.0 {
        let mut imax = 0;
        for j in 1..k {
            if probs[j] > probs[imax] {
                imax = j;
            }
        }
        probs[imax] += 1.0 - total;
    }
    Ok(probs)
}

/// Draws one variate from `N(mean, sd^2)` conditioned on `[lo, hi]`.
///
/// Exact rejection samplers throughout (no inverse-CDF in the tails):
/// plain rejection near the bulk, translated-exponential proposals for
/// one-sided tails past 0.45, and uniform proposals with the appropriate
/// log-concave acceptance ratio for thin two-sided slices.
pub fn draw_truncated_normal<R: Rng + ?Sized>(
    mean: f64,
    sd: f64,
    lo: f64,
    hi: f64,
    rng: &mut R,
) -> Result<f64> {
    if !(sd > 0.0) {
        return Err(Error::InvalidArgument(format!("sd = {sd} must be positive")));
    }
    if !(lo < hi) {
        return Err(Error::EmptyInterval { lo, hi });
    }
    let a = (lo - mean) / sd;
    let b = (hi - mean) / sd;
    Ok(mean + sd * draw_std_truncated(a, b, rng))
}

/// Standardized truncated-normal draw on `[a, b]`.
fn draw_std_truncated<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    if a == f64::NEG_INFINITY && b == f64::INFINITY {
        return rng.sample(StandardNormal);
    }
    if b == f64::INFINITY {
        return draw_lower_truncated(a, rng);
    }
    if a == f64::NEG_INFINITY {
        return -draw_lower_truncated(-b, rng);
    }
    if a > 0.0 {
        same_sign_slice(a, b, rng)
    } else if b < 0.0 {
        -same_sign_slice(-b, -a, rng)
    } else {
        central_slice(a, b, rng)
    }
}

/// Standard normal conditioned on `[a, infinity)`.
fn draw_lower_truncated<R: Rng + ?Sized>(a: f64, rng: &mut R) -> f64 {
    if a < 0.45 {
        // Cheap: at least Phi-bar(0.45) ~ 33% of plain draws land in range.
        loop {
            let z: f64 = rng.sample(StandardNormal);
            if z >= a {
                return z;
            }
        }
    }
    // Translated-exponential proposal with the optimal rate.
    let alpha = (a + (a * a + 4.0).sqrt()) / 2.0;
    loop {
        let u = open_unit(rng);
        let z = a - u.ln() / alpha;
        let d = z - alpha;
        if rng.random::<f64>() <= (-0.5 * d * d).exp() {
            return z;
        }
    }
}

/// Standard normal conditioned on `[a, b]` with `a <= 0 <= b`.
fn central_slice<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    let width = b - a;
    if width >= (2.0 * std::f64::consts::PI).sqrt() {
        // Wide interval around the mode: plain rejection is efficient.
        loop {
            let z: f64 = rng.sample(StandardNormal);
            if z >= a && z <= b {
                return z;
            }
        }
    }
    // Narrow interval: uniform proposal, acceptance ratio peaks at the mode.
    loop {
        let z = a + width * rng.random::<f64>();
        if rng.random::<f64>() <= (-0.5 * z * z).exp() {
            return z;
        }
    }
}

/// Standard normal conditioned on `[a, b]` with `0 < a < b`, both finite.
fn same_sign_slice<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    // Fraction of the [a, inf) tail mass lying beyond b.
    let r = sf_ratio(b, a);
    if r <= 0.8 {
        // The slice holds >= 20% of the tail: sample the tail, retry over b.
        for _ in 0..10_000 {
            let z = draw_lower_truncated(a, rng);
            if z <= b {
                return z;
            }
        }
        // Unreachable in practice; fall through to the slice sampler.
    }
    // Thin slice: uniform proposal, acceptance exp((a^2 - z^2)/2) <= 1.
    loop {
        let z = a + (b - a) * rng.random::<f64>();
        if rng.random::<f64>() <= (0.5 * (a * a - z * z)).exp() {
            return z;
        }
    }
}

/// `Phi-bar(b) / Phi-bar(a)` for `0 < a < b`, stable far into the tail.
fn sf_ratio(b: f64, a: f64) -> f64 {
    if a > 30.0 {
        // Mills-ratio asymptotics; avoids the erfc underflow region.
        ((a * a - b * b) / 2.0).exp() * a / b
    } else {
        let sa = normal_sf(a);
        let sb = normal_sf(b);
        if sa <= 0.0 {
            0.0
        } else {
            sb / sa
        }
    }
}

/// A uniform draw in the open interval `(0, 1]`, safe to take logs of.
fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    1.0 - rng.random::<f64>()
}

/// A Gaussian vector constrained to a polyhedron, in the coordinates used by
/// the selective-inference procedure.
///
/// The law is `Z = (Z1, Z2)` with `Z1 ~ N(tau + offset, 1/c)` independent of
/// `Z2 ~ N(0, cov_z2)`, conditioned on `M Z <= m`. Column 0 of `M` multiplies
/// `Z1`; the remaining columns multiply `Z2`.
#[derive(Debug, Clone)]
pub struct ConstrainedGaussianProblem {
    /// Precision of `Z1` (so `Var(Z1) = 1/c`); strictly positive.
    pub c: f64,
    /// Nuisance-induced shift: `E[Z1] = tau + offset`.
    pub offset: f64,
    /// Hypothesized target value.
    pub tau: f64,
    /// Covariance of `Z2`; symmetric positive semi-definite, possibly
    /// singular.
    pub cov_z2: DMatrix<f64>,
    /// Constraint matrix, one row per face; `1 + dim(Z2)` columns.
    pub m_mat: DMatrix<f64>,
    /// Constraint right-hand side.
    pub m_rhs: DVector<f64>,
    /// Observed value of `Z1`.
    pub z1_obs: f64,
    /// Observed value of `Z2`; the sampler initializes here.
    pub z2_obs: DVector<f64>,
}

impl ConstrainedGaussianProblem {
    /// Feasibility slack of a point: `max_i (M z - m)_i`, or `-inf` with no
    /// constraints.
    pub fn violation(&self, z1: f64, z2: &DVector<f64>) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for i in 0..self.m_mat.nrows() {
            let mut acc = self.m_mat[(i, 0)] * z1;
            for j in 0..z2.len() {
                acc += self.m_mat[(i, j + 1)] * z2[j];
            }
            worst = worst.max(acc - self.m_rhs[i]);
        }
        worst
    }

    /// Checks the structural invariants: `c > 0`, `cov_z2` symmetric (1e-10)
    /// and PSD (eigenvalues >= -1e-8 * scale), shapes consistent, and the
    /// observed point feasible to 1e-8.
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "c = {} must be positive",
                self.c
            )));
        }
        let d = self.cov_z2.nrows();
        if self.cov_z2.ncols() != d || self.z2_obs.len() != d {
            return Err(Error::InvalidArgument(
                "cov_z2 must be square and match z2_obs".into(),
            ));
        }
        if self.m_mat.nrows() != self.m_rhs.len()
            || (self.m_mat.nrows() > 0 && self.m_mat.ncols() != d + 1)
        {
            return Err(Error::InvalidArgument(
                "constraint matrix shape mismatch".into(),
            ));
        }
        let scale = self
            .cov_z2
            .iter()
            .fold(0.0_f64, |acc, &v| acc.max(v.abs()))
            .max(1.0);
        for i in 0..d {
            for j in 0..i {
                if (self.cov_z2[(i, j)] - self.cov_z2[(j, i)]).abs() > 1e-10 * scale {
                    return Err(Error::InvalidArgument(
                        "cov_z2 is not symmetric to tolerance".into(),
                    ));
                }
            }
        }
        if d > 0 {
            let eig = self.cov_z2.clone().symmetric_eigenvalues();
            let lmax = eig.iter().fold(0.0_f64, |acc, &v| acc.max(v));
            if eig.iter().any(|&v| v < -1e-8 * lmax.max(1.0)) {
                return Err(Error::InvalidArgument(
                    "cov_z2 has a significantly negative eigenvalue".into(),
                ));
            }
        }
        let violation = self.violation(self.z1_obs, &self.z2_obs);
        if violation > 1e-8 {
            return Err(Error::InfeasibleStart { violation });
        }
        Ok(())
    }
}

/// Retained output of a Gibbs run.
#[derive(Debug, Clone)]
pub struct GibbsRun {
    /// Retained `Z1` draws, in chain order.
    pub z1: Vec<f64>,
    /// Full `Z2` states for the retained draws; populated only on request.
    pub z2: Vec<DVector<f64>>,
}

/// Coordinate Gibbs sampler for [`ConstrainedGaussianProblem`], returning
/// `n_draws` retained `Z1` values after `burn_in` sweeps, keeping every
/// `thin`-th sweep thereafter.
///
/// The sampler whitens `Z2` through its eigendecomposition; eigendirections
/// with eigenvalue below `1e-12 * lambda_max` carry no randomness and stay
/// frozen at their observed component. Each coordinate update draws from the
/// exact truncated-normal full conditional, with bounds scanned from the
/// active constraint rows, so every retained state is feasible.
pub fn gibbs_constrained_gaussian<R: Rng + ?Sized>(
    problem: &ConstrainedGaussianProblem,
    n_draws: usize,
    burn_in: usize,
    thin: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    Ok(gibbs_constrained_gaussian_states(problem, n_draws, burn_in, thin, rng, false)?.z1)
}

/// As [`gibbs_constrained_gaussian`], optionally materializing the full `Z2`
/// states of the retained draws (used by diagnostics and tests).
pub fn gibbs_constrained_gaussian_states<R: Rng + ?Sized>(
    problem: &ConstrainedGaussianProblem,
    n_draws: usize,
    burn_in: usize,
    thin: usize,
    rng: &mut R,
    keep_z2: bool,
) -> Result<GibbsRun> {
    if thin == 0 {
        return Err(Error::InvalidArgument("thin must be >= 1".into()));
    }
    if n_draws == 0 {
        return Err(Error::InvalidArgument("n_draws must be >= 1".into()));
    }
    problem.validate()?;

    let d = problem.cov_z2.nrows();
    let n_rows = problem.m_mat.nrows();

    // Whiten Z2: columns of `basis` map unit-variance coordinates to Z2
    // space; `frozen` is the observed component in the null space.
    let m2 = if n_rows > 0 {
        problem.m_mat.columns(1, d).into_owned()
    } else {
        DMatrix::zeros(0, d)
    };
    let (mut basis, frozen, mut zeta_obs) = whiten(&problem.cov_z2, &problem.z2_obs, &m2);
    let r = basis.ncols();

    // Orient each whitened direction by its image in constraint space
    // (largest-magnitude entry of M2 * column made positive, ties to the
    // lowest row). The conditional law is orientation-free, but fixing the
    // orientation makes the chain itself invariant to the sign conventions of
    // the eigendecomposition and to orthogonal re-parameterizations of Z2, so
    // equivalent problems produce identical draws from identical streams.
    for q in 0..r {
        // Image of the direction in constraint space; invariant (up to the
        // overall sign being fixed here) under orthogonal re-parameterizations
        // of Z2, so the decisive row is the same for equivalent problems.
        let image: Vec<f64> = (0..n_rows)
            .map(|i| (0..d).map(|j| problem.m_mat[(i, j + 1)] * basis[(j, q)]).sum())
            .collect();
        let max_abs = image.iter().fold(0.0_f64, |a, &v| a.max(v.abs()));
        // The lowest row within a whisker of the maximal magnitude decides the
        // sign; the band keeps the choice stable when several rows tie in
        // magnitude with mixed signs and roundoff would otherwise reorder them.
        let decisive = image
            .iter()
            .copied()
            .find(|v| v.abs() >= max_abs * (1.0 - 1e-6))
            .unwrap_or(0.0);
        if decisive < 0.0 {
            for j in 0..d {
                basis[(j, q)] = -basis[(j, q)];
            }
            zeta_obs[q] = -zeta_obs[q];
        }
    }

    // Constraints in (z1, zeta) coordinates: row i is
    //   m0_i z1 + (m2 basis)_i zeta <= m_i - (m2 frozen)_i.
    let mut cmat = DMatrix::zeros(n_rows, 1 + r);
    let mut crhs = DVector::zeros(n_rows);
    for i in 0..n_rows {
        cmat[(i, 0)] = problem.m_mat[(i, 0)];
        let mut fixed = 0.0;
        for j in 0..d {
            fixed += problem.m_mat[(i, j + 1)] * frozen[j];
        }
        crhs[i] = problem.m_rhs[i] - fixed;
        for q in 0..r {
            let mut acc = 0.0;
            for j in 0..d {
                acc += problem.m_mat[(i, j + 1)] * basis[(j, q)];
            }
            cmat[(i, q + 1)] = acc;
        }
    }
    // Coefficients that are pure roundoff (a coordinate exactly orthogonal to
    // a row, computed inexactly) would turn into astronomically distant,
    // arbitrarily signed bounds when the slack is divided by them, and whether
    // a ghost survives depends on parameterization roundoff. Snap them to the
    // zero they represent so row membership is decided identically for
    // equivalent problems.
    for i in 0..n_rows {
        let rmax = (0..=r).fold(0.0_f64, |acc, l| acc.max(cmat[(i, l)].abs()));
        if rmax == 0.0 {
            continue;
        }
        for l in 0..=r {
            if cmat[(i, l)].abs() <= 1e-12 * rmax {
                cmat[(i, l)] = 0.0;
            }
        }
    }

    let mut state = DVector::zeros(1 + r);
    state[0] = problem.z1_obs;
    for q in 0..r {
        state[q + 1] = zeta_obs[q];
    }
    // The original-space feasibility check ran in validate(); re-check in
    // whitened coordinates to catch projection error.
    let mut start_violation = f64::NEG_INFINITY;
    for i in 0..n_rows {
        let mut acc = 0.0;
        for l in 0..=r {
            acc += cmat[(i, l)] * state[l];
        }
        start_violation = start_violation.max(acc - crhs[i]);
    }
    if n_rows > 0 && start_violation > 1e-8 {
        return Err(Error::InfeasibleStart {
            violation: start_violation,
        });
    }

    let z1_mean = problem.tau + problem.offset;
    let z1_sd = (1.0 / problem.c).sqrt();

    let total_sweeps = burn_in + n_draws * thin;
    let mut out_z1 = Vec::with_capacity(n_draws);
    let mut out_z2 = Vec::new();
    let mut kept = 0usize;
    for sweep in 0..total_sweeps {
        for coord in 0..=r {
            let (mean, sd) = if coord == 0 {
                (z1_mean, z1_sd)
            } else {
                (0.0, 1.0)
            };
            let mut lb = f64::NEG_INFINITY;
            let mut ub = f64::INFINITY;
            for i in 0..n_rows {
                let coef = cmat[(i, coord)];
                if coef == 0.0 {
                    continue;
                }
                let mut partial = 0.0;
                for l in 0..=r {
                    if l != coord {
                        partial += cmat[(i, l)] * state[l];
                    }
                }
                let slack = crhs[i] - partial;
                if coef > 0.0 {
                    ub = ub.min(slack / coef);
                } else {
                    lb = lb.max(slack / coef);
                }
            }
            if lb >= ub {
                // Roundoff pinched the interval shut; hold the midpoint.
                state[coord] = 0.5 * (lb + ub);
            } else {
                state[coord] = draw_truncated_normal(mean, sd, lb, ub, rng)?;
            }
        }
        if sweep >= burn_in && (sweep - burn_in) % thin == thin - 1 {
            out_z1.push(state[0]);
            if keep_z2 {
                let mut z2 = frozen.clone();
                for j in 0..d {
                    for q in 0..r {
                        z2[j] += basis[(j, q)] * state[q + 1];
                    }
                }
                out_z2.push(z2);
            }
            kept += 1;
            if kept == n_draws {
                break;
            }
        }
    }
    Ok(GibbsRun {
        z1: out_z1,
        z2: out_z2,
    })
}

/// Eigen-whitening of a PSD covariance: returns `(basis, frozen, zeta_obs)`
/// where `basis` has one column per non-degenerate eigendirection scaled by
/// the eigenvalue square root, `frozen` is the observed component in the
/// degenerate subspace, and `zeta_obs` are the whitened observed coordinates.
///
/// `m2` holds the constraint columns that multiply `Z2` (zero rows when the
/// problem is unconstrained). Within a repeated-eigenvalue cluster the
/// decomposition's basis is arbitrary, so two orthogonal parameterizations of
/// the same problem would whiten to different coordinates and the chain would
/// lose its stream-for-stream reproducibility. Re-diagonalizing each cluster
/// against a weighted Gram matrix of its constraint images (plus the observed
/// point's outer product) restores a shared basis: the form conjugates by
/// exactly the in-cluster rotation separating the two decompositions, so its
/// eigenvectors undo it.
fn whiten(
    cov: &DMatrix<f64>,
    obs: &DVector<f64>,
    m2: &DMatrix<f64>,
) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
    let d = cov.nrows();
    if d == 0 {
        return (
            DMatrix::zeros(0, 0),
            DVector::zeros(0),
            DVector::zeros(0),
        );
    }
    let eig = cov.clone().symmetric_eigen();
    let lmax = eig.eigenvalues.iter().fold(0.0_f64, |acc, &v| acc.max(v));
    let tol = 1e-12 * lmax.max(f64::MIN_POSITIVE);
    let mut active: Vec<usize> = (0..d).filter(|&i| eig.eigenvalues[i] > tol).collect();
    // Canonical order (descending eigenvalue) so the whitened coordinates do
    // not depend on the decomposition routine's internal ordering.
    active.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());
    let r = active.len();

    let mut units = DMatrix::zeros(d, r);
    let mut lams = vec![0.0; r];
    for (q, &i) in active.iter().enumerate() {
        units.set_column(q, &eig.eigenvectors.column(i).into_owned());
        lams[q] = eig.eigenvalues[i];
    }

    // Clusters are split where the descending eigenvalues gap by more than a
    // whisker; merging nearly-equal eigenvalues perturbs the represented
    // covariance by at most that whisker, far below any sampling tolerance.
    if m2.nrows() > 0 && r > 1 {
        let cluster_tol = 1e-9 * lmax.max(f64::MIN_POSITIVE);
        let mut start = 0usize;
        for q in 1..=r {
            if q < r && lams[q - 1] - lams[q] <= cluster_tol {
                continue;
            }
            let m = q - start;
            if m >= 2 {
                let u = units.columns(start, m).into_owned();
                let b = m2 * &u;
                // Distinct row weights break constraint symmetries (rows that
                // swap under an in-cluster rotation), and the observed-point
                // term breaks symmetries that fix the constraint set but move
                // the observation; without them the Gram itself can have
                // repeated eigenvalues and leave the basis undetermined.
                let mut s: DMatrix<f64> = DMatrix::zeros(m, m);
                for i in 0..b.nrows() {
                    let w_row = 1.0 / (i + 1) as f64;
                    for p in 0..m {
                        for q2 in 0..m {
                            s[(p, q2)] += w_row * b[(i, p)] * b[(i, q2)];
                        }
                    }
                }
                let v = u.transpose() * obs;
                for p in 0..m {
                    for q2 in 0..m {
                        s[(p, q2)] += v[p] * v[q2];
                    }
                }
                let se = s.symmetric_eigen();
                let mut order: Vec<usize> = (0..m).collect();
                order.sort_by(|&i, &j| {
                    se.eigenvalues[j].partial_cmp(&se.eigenvalues[i]).unwrap()
                });
                let mut w = DMatrix::zeros(m, m);
                for (pos, &i) in order.iter().enumerate() {
                    w.set_column(pos, &se.eigenvectors.column(i).into_owned());
                }
                let rotated = &u * &w;
                for pos in 0..m {
                    units.set_column(start + pos, &rotated.column(pos).into_owned());
                }
                let mean_lam = lams[start..q].iter().sum::<f64>() / m as f64;
                for lam in &mut lams[start..q] {
                    *lam = mean_lam;
                }
            }
            start = q;
        }
    }

    let mut basis = DMatrix::zeros(d, r);
    let mut zeta_obs = DVector::zeros(r);
    let mut projection = DVector::zeros(d);
    for q in 0..r {
        let col = units.column(q);
        let root = lams[q].sqrt();
        let coord = col.dot(obs);
        zeta_obs[q] = coord / root;
        for j in 0..d {
            basis[(j, q)] = col[j] * root;
            projection[j] += col[j] * coord;
        }
    }
    let frozen = obs - projection;
    (basis, frozen, zeta_obs)
}

/// Importance-reweighted conditional CDF estimate.
///
/// Given `draws` of `Z1` from the constrained law at `tau0`, estimates
/// `P_{tau1}(Z1 <= z1_obs)` by exponential tilting with weights
/// `w_i = exp(c (tau1 - tau0) z_i)` (max-subtracted for stability). Returns
/// the estimate together with the effective sample size
/// `(sum w)^2 / sum w^2`.
pub fn reweighted_cdf(
    draws: &[f64],
    tau0: f64,
    z1_obs: f64,
    c: f64,
    tau1: f64,
) -> Result<(f64, f64)> {
    let (prob, ess, _) = reweighted_cdf_stats(draws, tau0, z1_obs, c, tau1)?;
    Ok((prob, ess))
}

/// As [`reweighted_cdf`], additionally returning the delta-method variance
/// estimate of the self-normalized estimator,
/// `sum_i (w_i / sum w)^2 (1{z_i <= obs} - estimate)^2`.
pub fn reweighted_cdf_stats(
    draws: &[f64],
    tau0: f64,
    z1_obs: f64,
    c: f64,
    tau1: f64,
) -> Result<(f64, f64, f64)> {
    if draws.is_empty() {
        return Err(Error::InvalidArgument("no draws to reweight".into()));
    }
    let shift = c * (tau1 - tau0);
    let max_arg = draws
        .iter()
        .map(|&z| shift * z)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut wsum = 0.0;
    let mut wsq = 0.0;
    let mut below = 0.0;
    let mut wsq_below = 0.0;
    for &z in draws {
        let w = (shift * z - max_arg).exp();
        wsum += w;
        wsq += w * w;
        if z <= z1_obs {
            below += w;
            wsq_below += w * w;
        }
    }
    let prob = below / wsum;
    let ess = wsum * wsum / wsq;
    let var = ((1.0 - prob) * (1.0 - prob) * wsq_below
        + prob * prob * (wsq - wsq_below))
        / (wsum * wsum);
    Ok((prob, ess, var))
}

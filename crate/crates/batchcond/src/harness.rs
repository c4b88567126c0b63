//! Replication engine: drive the simulator and the inference procedures over
//! many independent streams, then reduce to the summary tables and the
//! conditional-coverage diagnostics.
//!
//! Everything here is deterministic given `(config, seed)`: replicate `r`
//! draws from `RngStream::new(seed, r)`, the simulator consumes the stream
//! first and the polyhedral sampler continues it, and output rows are ordered
//! by `(rep_id, procedure)` regardless of the parallel schedule.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::inference::{
    greedy_winners, last_only_ci, leftover_ci, pivot_ci, polyhedral_ci, polyhedral_transform,
    CIResult, GibbsSpec, LeftoverMode, Procedure,
};
use crate::model::{ModelParams, Trajectory, WeightSource};
use crate::policies::{egreedy_polyhedron, PolicyKind, PolicySpec, StoppingSpec, TargetSpec};
use crate::simulator::{run_experiment_finite, run_experiment_gaussian, OutcomeLaw};
use crate::stochastics::{normal_quantile, RngStream};

/// Which data-generating model a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutcomeKind {
    /// Exact-Gaussian batch means with known variances (design weights).
    Exact,
    /// Finite-sample individual outcomes `mu_k ± 1` (realized weights).
    Rademacher,
    /// Finite-sample Gaussian individual outcomes (realized weights).
    Gaussian,
}

impl OutcomeKind {
    pub fn source(self) -> WeightSource {
        match self {
            OutcomeKind::Exact => WeightSource::Design,
            _ => WeightSource::Realized,
        }
    }

    fn leftover_mode(self) -> LeftoverMode {
        match self {
            OutcomeKind::Exact => LeftoverMode::Exact,
            _ => LeftoverMode::Finite,
        }
    }
}

/// A fully validated run description.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub params: ModelParams,
    pub outcome: OutcomeKind,
    pub policy: PolicySpec,
    pub target: TargetSpec,
    /// Requested procedures, stored in canonical order without duplicates.
    pub procedures: Vec<Procedure>,
    pub alpha: f64,
    pub gibbs: GibbsSpec,
    pub reps: u64,
    pub seed: u64,
    pub parallel: usize,
}

fn parse_f64_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|tok| {
            tok.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("{key}: cannot parse `{tok}` as a number")))
        })
        .collect()
}

fn parse_usize_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|tok| {
            tok.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("{key}: cannot parse `{tok}` as an integer")))
        })
        .collect()
}

fn parse_scalar<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse::<T>()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
}

/// Parse the flat `section.key = value` config format.
///
/// Lines may carry `#` comments; unknown or duplicate keys are errors, as are
/// combinations the engine cannot honor (polyhedral inference with a
/// non-greedy policy, Rademacher outcomes with variances other than 1, fewer
/// than two arms).
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut map: HashMap<String, String> = HashMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected `key = value`", lineno + 1))
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if map.insert(key.clone(), value).is_some() {
            return Err(Error::Config(format!("duplicate key `{key}`")));
        }
    }

    let mut take = |k: &str| map.remove(k);

    let mu = parse_f64_list(
        "model.mu",
        &take("model.mu")
            .ok_or_else(|| Error::Config("missing required key `model.mu`".into()))?,
    )?;
    let k = mu.len();
    if k < 2 {
        return Err(Error::Config(format!(
            "model.mu: need at least two arms, got {k}"
        )));
    }
    let batch_sizes = parse_usize_list(
        "model.batch_sizes",
        &take("model.batch_sizes")
            .ok_or_else(|| Error::Config("missing required key `model.batch_sizes`".into()))?,
    )?;
    let outcome = match take("model.outcome")
        .ok_or_else(|| Error::Config("missing required key `model.outcome`".into()))?
        .as_str()
    {
        "exact" => OutcomeKind::Exact,
        "rademacher" => OutcomeKind::Rademacher,
        "gaussian" => OutcomeKind::Gaussian,
        other => {
            return Err(Error::Config(format!(
                "model.outcome: expected exact|rademacher|gaussian, got `{other}`"
            )))
        }
    };
    let sigma2 = match take("model.sigma2") {
        Some(v) => {
            let s = parse_f64_list("model.sigma2", &v)?;
            if outcome == OutcomeKind::Rademacher && s.iter().any(|&x| x != 1.0) {
                return Err(Error::Config(
                    "model.sigma2: rademacher outcomes have variance exactly 1".into(),
                ));
            }
            s
        }
        None => {
            if outcome == OutcomeKind::Rademacher {
                vec![1.0; k]
            } else {
                return Err(Error::Config("missing required key `model.sigma2`".into()));
            }
        }
    };
    let params = ModelParams::new(mu, sigma2, batch_sizes)?;

    let policy_kind = match take("policy.kind")
        .ok_or_else(|| Error::Config("missing required key `policy.kind`".into()))?
        .as_str()
    {
        "thompson" => PolicyKind::Thompson,
        "egreedy" => PolicyKind::EGreedy,
        other => {
            return Err(Error::Config(format!(
                "policy.kind: expected thompson|egreedy, got `{other}`"
            )))
        }
    };
    let mut policy = PolicySpec::new(policy_kind, k);
    if let Some(v) = take("policy.prune_eps") {
        policy.prune_eps = parse_scalar("policy.prune_eps", &v)?;
    }
    if let Some(v) = take("policy.greedy_eps") {
        policy.greedy_eps = parse_scalar("policy.greedy_eps", &v)?;
    }
    if let Some(v) = take("policy.pi1") {
        policy.pi1 = parse_f64_list("policy.pi1", &v)?;
    }
    if let Some(v) = take("policy.orthant_draws") {
        policy.orthant_draws = parse_scalar("policy.orthant_draws", &v)?;
    }
    policy.validate(k)?;

    let target = match take("target.kind")
        .ok_or_else(|| Error::Config("missing required key `target.kind`".into()))?
        .as_str()
    {
        "fixed_arm" => {
            let arm: usize = parse_scalar(
                "target.arm",
                &take("target.arm").ok_or_else(|| {
                    Error::Config("target.kind = fixed_arm requires `target.arm`".into())
                })?,
            )?;
            TargetSpec::FixedArm { arm }
        }
        "best_arm" => TargetSpec::BestArm,
        other => {
            return Err(Error::Config(format!(
                "target.kind: expected fixed_arm|best_arm, got `{other}`"
            )))
        }
    };
    target.validate(k)?;

    let mut procedures = Vec::new();
    let proc_list =
        take("inference.procedures").unwrap_or_else(|| "last_only,leftover,pivot".into());
    for tok in proc_list.split(',') {
        let p: Procedure = tok.trim().parse()?;
        if !procedures.contains(&p) {
            procedures.push(p);
        }
    }
    procedures.sort_by_key(|p| Procedure::ALL.iter().position(|q| q == p).unwrap());
    if procedures.is_empty() {
        return Err(Error::Config("inference.procedures: empty list".into()));
    }
    if procedures.contains(&Procedure::Polyhedral) && policy.kind != PolicyKind::EGreedy {
        return Err(Error::Config(
            "polyhedral inference requires an epsilon-greedy policy".into(),
        ));
    }
    let alpha = match take("inference.alpha") {
        Some(v) => parse_scalar("inference.alpha", &v)?,
        None => 0.05,
    };
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!(
            "inference.alpha must lie in (0, 1), got {alpha}"
        )));
    }

    let mut gibbs = GibbsSpec::default();
    if let Some(v) = take("gibbs.n_draws") {
        gibbs.n_draws = parse_scalar("gibbs.n_draws", &v)?;
    }
    if let Some(v) = take("gibbs.burn_in") {
        gibbs.burn_in = parse_scalar("gibbs.burn_in", &v)?;
    }
    if let Some(v) = take("gibbs.thin") {
        gibbs.thin = parse_scalar("gibbs.thin", &v)?;
    }
    if let Some(v) = take("gibbs.ess_guard") {
        gibbs.ess_guard = parse_scalar("gibbs.ess_guard", &v)?;
    }

    let reps: u64 = match take("run.reps") {
        Some(v) => parse_scalar("run.reps", &v)?,
        None => 1000,
    };
    if reps < 1 {
        return Err(Error::Config("run.reps must be at least 1".into()));
    }
    let seed: u64 = match take("run.seed") {
        Some(v) => parse_scalar("run.seed", &v)?,
        None => 0,
    };
    let parallel: usize = match take("run.parallel") {
        Some(v) => parse_scalar("run.parallel", &v)?,
        None => 1,
    };
    if parallel < 1 {
        return Err(Error::Config("run.parallel must be at least 1".into()));
    }

    if let Some(key) = map.keys().next() {
        return Err(Error::Config(format!("unknown key `{key}`")));
    }

    Ok(RunConfig {
        params,
        outcome,
        policy,
        target,
        procedures,
        alpha,
        gibbs,
        reps,
        seed,
        parallel,
    })
}

/// One line of `records.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateRecord {
    pub rep_id: u64,
    pub procedure: Procedure,
    pub t: usize,
    /// 1-based arm the realized target selects; 0 if the replicate failed
    /// before a target existed.
    pub eta_arm: usize,
    pub true_tau: Option<f64>,
    pub estimate: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub length: Option<f64>,
    pub covered: Option<bool>,
    /// Count of non-final batches each arm won, per arm.
    pub winner_counts: Vec<u64>,
    /// `ok` or the kebab-case token of the error that stopped the procedure.
    pub status: String,
}

impl ReplicateRecord {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

fn failure_record(
    rep_id: u64,
    procedure: Procedure,
    t: usize,
    eta_arm: usize,
    true_tau: Option<f64>,
    winner_counts: &[u64],
    err: &Error,
) -> ReplicateRecord {
    ReplicateRecord {
        rep_id,
        procedure,
        t,
        eta_arm,
        true_tau,
        estimate: None,
        ci_lo: None,
        ci_hi: None,
        length: None,
        covered: None,
        winner_counts: winner_counts.to_vec(),
        status: err.status_token().to_string(),
    }
}

fn ok_record(
    rep_id: u64,
    t: usize,
    eta_arm: usize,
    true_tau: f64,
    winner_counts: &[u64],
    ci: &CIResult,
) -> ReplicateRecord {
    ReplicateRecord {
        rep_id,
        procedure: ci.procedure,
        t,
        eta_arm,
        true_tau: Some(true_tau),
        estimate: Some(ci.estimate),
        ci_lo: Some(ci.lo),
        ci_hi: Some(ci.hi),
        length: Some(ci.length()),
        covered: ci.covered,
        winner_counts: winner_counts.to_vec(),
        status: "ok".to_string(),
    }
}

fn winner_counts(traj: &Trajectory, source: WeightSource, k: usize) -> Vec<u64> {
    let winners = match &traj.winners {
        Some(w) => w.clone(),
        None => greedy_winners(traj, source).unwrap_or_default(),
    };
    let mut counts = vec![0u64; k];
    for w in winners {
        if w < k {
            counts[w] += 1;
        }
    }
    counts
}

fn run_one_rep(config: &RunConfig, rep: u64) -> Vec<ReplicateRecord> {
    let mut rng = RngStream::new(config.seed, rep);
    let stopping = StoppingSpec {
        horizon: config.params.horizon(),
    };
    let t_len = config.params.horizon();
    let k = config.params.k();
    let sim = match config.outcome {
        OutcomeKind::Exact => run_experiment_gaussian(
            &config.params,
            &config.policy,
            &stopping,
            &config.target,
            &mut rng,
        ),
        OutcomeKind::Rademacher => run_experiment_finite(
            &config.params,
            &config.policy,
            &stopping,
            &config.target,
            OutcomeLaw::RademacherShifted,
            &mut rng,
        ),
        OutcomeKind::Gaussian => run_experiment_finite(
            &config.params,
            &config.policy,
            &stopping,
            &config.target,
            OutcomeLaw::Gaussian,
            &mut rng,
        ),
    };

    let traj = match sim {
        Ok(t) => t,
        Err(e) => {
            let zeros = vec![0u64; k];
            return config
                .procedures
                .iter()
                .map(|&p| failure_record(rep, p, t_len, 0, None, &zeros, &e))
                .collect();
        }
    };

    let source = config.outcome.source();
    let eta_arm = traj
        .eta
        .iter()
        .position(|&e| (e - 1.0).abs() < 1e-9)
        .map(|i| i + 1)
        .unwrap_or(0);
    let true_tau = traj.true_target();
    let counts = winner_counts(&traj, source, k);
    let best_arm_target = matches!(config.target, TargetSpec::BestArm);

    let mut out = Vec::with_capacity(config.procedures.len());
    for &proc in &config.procedures {
        let res = match proc {
            Procedure::LastOnly => last_only_ci(&traj, &traj.eta, config.alpha, source),
            Procedure::Leftover => leftover_ci(
                &traj,
                &traj.eta,
                config.alpha,
                config.outcome.leftover_mode(),
            ),
            Procedure::Pivot => pivot_ci(&traj, &traj.eta, config.alpha, source),
            Procedure::Polyhedral => egreedy_polyhedron(&traj, source, best_arm_target)
                .and_then(|poly| polyhedral_transform(&traj, &traj.eta, &poly, source))
                .and_then(|problem| polyhedral_ci(&problem, config.alpha, &config.gibbs, &mut rng)),
        };
        out.push(match res {
            Ok(ci) => {
                let ci = ci.with_coverage(true_tau);
                ok_record(rep, t_len, eta_arm, true_tau, &counts, &ci)
            }
            Err(e) => failure_record(rep, proc, t_len, eta_arm, Some(true_tau), &counts, &e),
        });
    }
    out
}

/// Run all replicates and return their records ordered by
/// `(rep_id, procedure)`.  With `config.parallel > 1` the replicates are
/// distributed over a thread pool; the output is identical to a serial run
/// because every replicate owns its stream and rows are re-assembled in
/// replicate order.
pub fn replicate(config: &RunConfig) -> Result<Vec<ReplicateRecord>> {
    let rep_ids: Vec<u64> = (0..config.reps).collect();
    let nested: Vec<Vec<ReplicateRecord>> = if config.parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.parallel)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        pool.install(|| {
            rep_ids
                .par_iter()
                .map(|&r| run_one_rep(config, r))
                .collect()
        })
    } else {
        rep_ids.iter().map(|&r| run_one_rep(config, r)).collect()
    };
    Ok(nested.into_iter().flatten().collect())
}

/// One line of `summary.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub procedure: Procedure,
    pub rejection_rate: f64,
    pub mc_se: f64,
    pub median_length: f64,
    /// Median of the per-replicate length ratio against `last_only`; present
    /// only when `last_only` also ran.
    pub median_rel_length_vs_last: Option<f64>,
    pub reps_used: u64,
}

/// Median with the average-of-middle-two convention for even counts.
fn median(xs: &mut [f64]) -> f64 {
    assert!(!xs.is_empty());
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Reduce records to one summary row per procedure (canonical order).
///
/// Rejection is the fraction of succeeded replicates whose interval excludes
/// the realized true target; failed rows are excluded from every statistic.
/// The relative-length column is the median of the per-replicate ratios
/// against `last_only`, computed over replicates where both procedures
/// succeeded — not the ratio of the two medians.
pub fn summarize(records: &[ReplicateRecord]) -> Vec<SummaryRow> {
    let mut last_lengths: HashMap<u64, f64> = HashMap::new();
    for r in records {
        if r.procedure == Procedure::LastOnly && r.is_ok() {
            if let Some(len) = r.length {
                last_lengths.insert(r.rep_id, len);
            }
        }
    }
    let have_last = records.iter().any(|r| r.procedure == Procedure::LastOnly);

    let mut rows = Vec::new();
    for proc in Procedure::ALL {
        let ok: Vec<&ReplicateRecord> = records
            .iter()
            .filter(|r| r.procedure == proc && r.is_ok())
            .collect();
        let present = records.iter().any(|r| r.procedure == proc);
        if !present {
            continue;
        }
        let reps_used = ok.len() as u64;
        if reps_used == 0 {
            rows.push(SummaryRow {
                procedure: proc,
                rejection_rate: f64::NAN,
                mc_se: f64::NAN,
                median_length: f64::NAN,
                median_rel_length_vs_last: None,
                reps_used: 0,
            });
            continue;
        }
        let rejections = ok.iter().filter(|r| r.covered == Some(false)).count();
        let p = rejections as f64 / reps_used as f64;
        let mc_se = (p * (1.0 - p) / reps_used as f64).sqrt();
        let mut lengths: Vec<f64> = ok.iter().filter_map(|r| r.length).collect();
        let median_length = median(&mut lengths);
        let median_rel = if have_last {
            let mut ratios: Vec<f64> = ok
                .iter()
                .filter_map(|r| {
                    let len = r.length?;
                    let base = last_lengths.get(&r.rep_id)?;
                    Some(len / base)
                })
                .collect();
            if ratios.is_empty() {
                None
            } else {
                Some(median(&mut ratios))
            }
        } else {
            None
        };
        rows.push(SummaryRow {
            procedure: proc,
            rejection_rate: p,
            mc_se,
            median_length,
            median_rel_length_vs_last: median_rel,
            reps_used,
        });
    }
    rows
}

/// Failure accounting over a record set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FailureBudget {
    pub total_rows: u64,
    /// Structural skips: the realized design left the target outside what the
    /// procedure can estimate — the target loads on an arm with no final-batch
    /// data (zero-probability) or falls outside the leftover span
    /// (degenerate-target).  Deterministic given the trajectory, so excluded
    /// from rates and from the abnormal budget.
    pub structural: u64,
    /// Everything else that is not `ok`.
    pub abnormal: u64,
}

/// Count failures and enforce the run-level budget: abnormal failures above
/// 0.1% of rows fail the run.
pub fn check_failure_budget(records: &[ReplicateRecord]) -> Result<FailureBudget> {
    let total_rows = records.len() as u64;
    let mut structural = 0u64;
    let mut abnormal = 0u64;
    for r in records {
        if r.is_ok() {
            continue;
        }
        if r.status == "zero-probability" || r.status == "degenerate-target" {
            structural += 1;
        } else {
            abnormal += 1;
        }
    }
    let budget = FailureBudget {
        total_rows,
        structural,
        abnormal,
    };
    if total_rows > 0 && (abnormal as f64) / (total_rows as f64) > 0.001 {
        return Err(Error::Config(format!(
            "abnormal failure fraction {:.4}% exceeds the 0.1% budget ({} of {} rows)",
            100.0 * abnormal as f64 / total_rows as f64,
            abnormal,
            total_rows
        )));
    }
    Ok(budget)
}

/// One row of the conditional-coverage table.
#[derive(Debug, Clone, PartialEq)]
pub struct BinRow {
    pub procedure: Procedure,
    /// Number of non-final batches the conditioning arm won.
    pub winner_count: usize,
    pub reps: u64,
    pub coverage: f64,
    /// Simultaneous binomial band around nominal coverage: a procedure with
    /// exact conditional coverage stays inside every populated bin's band
    /// with 95% probability (Bonferroni over populated bins).
    pub band_lo: f64,
    pub band_hi: f64,
}

/// Coverage conditioned on how often `arm` (1-based) won a non-final batch.
///
/// Bins run over 0..T-1 wins; only succeeded rows count.  The band is
/// centered at the nominal level `1 - alpha` and sized by the per-bin
/// replicate count, with a Bonferroni correction over the populated bins of
/// each procedure so the bands are simultaneous at 95%.
pub fn conditional_bins(records: &[ReplicateRecord], arm: usize, alpha: f64) -> Result<Vec<BinRow>> {
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let k = records[0].winner_counts.len();
    if arm == 0 || arm > k {
        return Err(Error::InvalidArgument(format!(
            "arm must be between 1 and {k}, got {arm}"
        )));
    }
    let t_len = records[0].t;
    let nominal = 1.0 - alpha;
    let mut rows = Vec::new();
    for proc in Procedure::ALL {
        let ok: Vec<&ReplicateRecord> = records
            .iter()
            .filter(|r| r.procedure == proc && r.is_ok())
            .collect();
        if ok.is_empty() {
            continue;
        }
        let mut per_bin: Vec<(u64, u64)> = vec![(0, 0); t_len]; // (reps, covered)
        for r in &ok {
            let wins = r.winner_counts[arm - 1] as usize;
            if wins < t_len {
                per_bin[wins].0 += 1;
                if r.covered == Some(true) {
                    per_bin[wins].1 += 1;
                }
            }
        }
        let populated = per_bin.iter().filter(|(n, _)| *n > 0).count();
        if populated == 0 {
            continue;
        }
        let z = normal_quantile(1.0 - 0.05 / (2.0 * populated as f64));
        for (bin, &(n, cov)) in per_bin.iter().enumerate() {
            if n == 0 {
                continue;
            }
            let half = z * (nominal * alpha / n as f64).sqrt();
            rows.push(BinRow {
                procedure: proc,
                winner_count: bin,
                reps: n,
                coverage: cov as f64 / n as f64,
                band_lo: nominal - half,
                band_hi: nominal + half,
            });
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// CSV emission and parsing
// ---------------------------------------------------------------------------

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => String::new(),
    }
}

/// Serialize records with the fixed column order.  `k` fixes the number of
/// winner-count columns (needed when `records` is empty).
pub fn records_to_csv(records: &[ReplicateRecord], k: usize) -> String {
    let mut out = String::new();
    out.push_str("rep_id,procedure,T,eta_arm,true_tau,estimate,ci_lo,ci_hi,length,covered");
    for arm in 1..=k {
        out.push_str(&format!(",winner_count_arm{arm}"));
    }
    out.push_str(",status\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}",
            r.rep_id,
            r.procedure,
            r.t,
            r.eta_arm,
            fmt_opt(r.true_tau),
            fmt_opt(r.estimate),
            fmt_opt(r.ci_lo),
            fmt_opt(r.ci_hi),
            fmt_opt(r.length),
            match r.covered {
                Some(true) => "1",
                Some(false) => "0",
                None => "",
            },
        ));
        for arm in 0..k {
            out.push_str(&format!(",{}", r.winner_counts.get(arm).copied().unwrap_or(0)));
        }
        out.push(',');
        out.push_str(&r.status);
        out.push('\n');
    }
    out
}

fn parse_opt(tok: &str, what: &str) -> Result<Option<f64>> {
    if tok.is_empty() {
        return Ok(None);
    }
    tok.parse::<f64>()
        .map(Some)
        .map_err(|_| Error::Config(format!("records csv: bad {what} `{tok}`")))
}

/// Parse a `records.csv` produced by [`records_to_csv`].
pub fn records_from_csv(text: &str) -> Result<Vec<ReplicateRecord>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Config("records csv: empty input".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    let k = cols
        .iter()
        .filter(|c| c.starts_with("winner_count_arm"))
        .count();
    let expect = 10 + k + 1;
    if cols.len() != expect || cols[0] != "rep_id" || cols[expect - 1] != "status" {
        return Err(Error::Config("records csv: unrecognized header".into()));
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != expect {
            return Err(Error::Config(format!(
                "records csv: line {} has {} fields, expected {}",
                i + 2,
                f.len(),
                expect
            )));
        }
        let covered = match f[9] {
            "" => None,
            "1" => Some(true),
            "0" => Some(false),
            other => {
                return Err(Error::Config(format!(
                    "records csv: bad covered flag `{other}`"
                )))
            }
        };
        let mut winner_counts = Vec::with_capacity(k);
        for arm in 0..k {
            winner_counts.push(f[10 + arm].parse::<u64>().map_err(|_| {
                Error::Config(format!("records csv: bad winner count `{}`", f[10 + arm]))
            })?);
        }
        records.push(ReplicateRecord {
            rep_id: f[0]
                .parse()
                .map_err(|_| Error::Config(format!("records csv: bad rep_id `{}`", f[0])))?,
            procedure: f[1].parse()?,
            t: f[2]
                .parse()
                .map_err(|_| Error::Config(format!("records csv: bad T `{}`", f[2])))?,
            eta_arm: f[3]
                .parse()
                .map_err(|_| Error::Config(format!("records csv: bad eta_arm `{}`", f[3])))?,
            true_tau: parse_opt(f[4], "true_tau")?,
            estimate: parse_opt(f[5], "estimate")?,
            ci_lo: parse_opt(f[6], "ci_lo")?,
            ci_hi: parse_opt(f[7], "ci_hi")?,
            length: parse_opt(f[8], "length")?,
            covered,
            winner_counts,
            status: f[expect - 1].to_string(),
        });
    }
    Ok(records)
}

pub fn summary_to_csv(rows: &[SummaryRow]) -> String {
    let mut out =
        String::from("procedure,rejection_rate,mc_se,median_length,median_rel_length_vs_last,reps_used\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.procedure,
            r.rejection_rate,
            r.mc_se,
            r.median_length,
            fmt_opt(r.median_rel_length_vs_last),
            r.reps_used
        ));
    }
    out
}

pub fn bins_to_csv(rows: &[BinRow]) -> String {
    let mut out = String::from("procedure,winner_count,reps,coverage,band_lo,band_hi\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.procedure, r.winner_count, r.reps, r.coverage, r.band_lo, r.band_hi
        ));
    }
    out
}

/// Simulate without inference and render the per-batch dump: one line per
/// batch holding `rep_id, t`, then K columns each of design probabilities,
/// realized probabilities, counts, and batch means.
pub fn simulate_dump(config: &RunConfig) -> Result<String> {
    let mut out = String::new();
    let stopping = StoppingSpec {
        horizon: config.params.horizon(),
    };
    for rep in 0..config.reps {
        let mut rng = RngStream::new(config.seed, rep);
        let traj = match config.outcome {
            OutcomeKind::Exact => run_experiment_gaussian(
                &config.params,
                &config.policy,
                &stopping,
                &config.target,
                &mut rng,
            )?,
            OutcomeKind::Rademacher => run_experiment_finite(
                &config.params,
                &config.policy,
                &stopping,
                &config.target,
                OutcomeLaw::RademacherShifted,
                &mut rng,
            )?,
            OutcomeKind::Gaussian => run_experiment_finite(
                &config.params,
                &config.policy,
                &stopping,
                &config.target,
                OutcomeLaw::Gaussian,
                &mut rng,
            )?,
        };
        for b in &traj.batches {
            out.push_str(&format!("{rep},{}", b.t));
            for v in &b.pi {
                out.push_str(&format!(",{v}"));
            }
            for v in &b.pi_hat {
                out.push_str(&format!(",{v}"));
            }
            for v in &b.counts {
                out.push_str(&format!(",{v}"));
            }
            for v in &b.x {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
    }
    Ok(out)
}

//! Exact diagnostics: policy divergences, the safe-improvement bound and
//! numeric checks of the two supporting inequalities.

use serde::{Deserialize, Serialize};

use crate::dataset::format_float;
use crate::error::{CdsError, Result};
use crate::learner::EmpiricalBehaviorPolicy;
use crate::mdp::{exact_policy_evaluation, state_occupancy, MultiTaskMdp, OccupancyMeasure, TabularPolicy};

/// Uniform mass mixed into a behavior row before a KL or D_CQL that would
/// otherwise be infinite.
pub const KL_SMOOTHING: f64 = 1e-6;

/// `Σ p(x) (p(x)/q(x) - 1)`.
pub fn d_cql(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(CdsError::InvalidSpec(format!("d_cql on lengths {} and {}", p.len(), q.len())));
    }
    let mut total = 0.0;
    for (pi, qi) in p.iter().zip(q) {
        if *pi > 0.0 {
            if *qi <= 0.0 {
                return Err(CdsError::SupportViolation(*pi));
            }
            total += pi * (pi / qi - 1.0);
        }
    }
    Ok(total)
}

/// Half the L1 distance.
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// `KL(p ‖ q)`; infinite when `p` leaves the support of `q`.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (pi, qi) in p.iter().zip(q) {
        if *pi > 0.0 {
            if *qi <= 0.0 {
                return f64::INFINITY;
            }
            total += pi * (pi / qi).ln();
        }
    }
    total
}

fn smooth(q: &[f64], eps: f64) -> Vec<f64> {
    let u = eps / q.len() as f64;
    q.iter().map(|x| (1.0 - eps) * x + u).collect()
}

fn leaves_support(p: &[f64], q: &[f64]) -> bool {
    p.iter().zip(q).any(|(a, b)| *a > 0.0 && *b <= 0.0)
}

fn policy_task(policy: &TabularPolicy, task: usize) -> usize {
    if policy.num_tasks == 1 {
        0
    } else {
        task
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub task: usize,
    /// Occupancy-weighted mean KL.
    pub average: f64,
    pub per_state: Vec<f64>,
    /// Normalized state weights the average used.
    pub weights: Vec<f64>,
    pub smoothing: f64,
    /// States whose behavior row was smoothed.
    pub smoothed_states: Vec<usize>,
}

/// `E_{s~occupancy}[KL(π(·|s) ‖ π_β(·|s))]`. Unobserved behavior states count
/// as uniform; a behavior row without support for the policy's actions is
/// mixed with [`KL_SMOOTHING`] uniform mass.
pub fn kl_policy_divergence(
    policy: &TabularPolicy,
    behavior: &EmpiricalBehaviorPolicy,
    occupancy: &OccupancyMeasure,
    task: usize,
) -> Result<DivergenceReport> {
    let (ns, na) = (behavior.num_states, behavior.num_actions);
    if policy.num_states != ns || policy.num_actions != na || occupancy.dist.len() != ns {
        return Err(CdsError::InvalidSpec("policy, behavior and occupancy shapes differ".into()));
    }
    if task >= behavior.num_tasks {
        return Err(CdsError::OutOfRange(format!("task {task}")));
    }
    let pt = policy_task(policy, task);
    let weights = occupancy.normalized();
    let uniform = vec![1.0 / na as f64; na];
    let mut per_state = vec![0.0; ns];
    let mut smoothed_states = Vec::new();
    let mut average = 0.0;
    for s in 0..ns {
        let p = policy.row(pt, s);
        let q = if behavior.is_observed(task, s) { behavior.row(task, s) } else { &uniform[..] };
        per_state[s] = if leaves_support(p, q) {
            smoothed_states.push(s);
            kl(p, &smooth(q, KL_SMOOTHING))
        } else {
            kl(p, q)
        };
        average += weights[s] * per_state[s];
    }
    Ok(DivergenceReport {
        task,
        average,
        per_state,
        weights,
        smoothing: KL_SMOOTHING,
        smoothed_states,
    })
}

/// Serializes non-finite floats as the strings `inf`, `-inf` and `nan`.
mod ext_float {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else if x.is_nan() {
            s.serialize_str("nan")
        } else if *x > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("not a float: {other}"))),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpiConstants {
    pub c_sample: f64,
    /// Taken from the MDP when absent.
    pub r_max: Option<f64>,
    /// Coefficient of the divergence bonus.
    pub alpha: f64,
}

impl Default for SpiConstants {
    fn default() -> Self {
        SpiConstants {
            c_sample: 1.0,
            r_max: None,
            alpha: 1.0,
        }
    }
}

impl SpiConstants {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_sample.is_finite() && self.c_sample > 0.0) {
            return Err(CdsError::config("constants.c_sample", "must be positive"));
        }
        if let Some(r) = self.r_max {
            if !r.is_finite() {
                return Err(CdsError::config("constants.r_max", "must be finite"));
            }
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(CdsError::config("constants.alpha", "must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    pub c_sample: f64,
    pub r_max: f64,
    pub discount: f64,
    pub alpha: f64,
}

/// Every term of `ζ = sampling - (α ε + (J(π_β*) - J(π_β)))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub task: usize,
    #[serde(with = "ext_float")]
    pub sampling_error_term: f64,
    pub divergence_bonus: f64,
    pub improvement_term_a: f64,
    #[serde(with = "ext_float")]
    pub zeta: f64,
    pub constants: BoundConstants,
    /// `E_{s~d^{π*}}[D_CQL(π*, π_β*)(s)]`.
    pub epsilon: f64,
    /// `|D^eff(s)|`.
    pub counts: Vec<f64>,
    pub per_state_dcql: Vec<f64>,
    /// Normalized `d^{π*}`.
    pub occupancy: Vec<f64>,
    pub smoothed_states: Vec<usize>,
    pub j_pi_star: f64,
    pub j_behavior: f64,
    /// `J(π*) - J(π_β) ≥ -ζ`.
    pub holds: bool,
}

impl BoundReport {
    pub fn composed_zeta(&self) -> f64 {
        self.sampling_error_term - (self.divergence_bonus + self.improvement_term_a)
    }
}

/// Sampling term `C/(1-γ)² Σ_s d(s) √((D(s)+1)/n(s))`; infinite when a state
/// with `d(s) > 0` has no data.
pub fn sampling_error_term(c_sample: f64, discount: f64, d: &[f64], dcql: &[f64], counts: &[f64]) -> f64 {
    let mut total = 0.0;
    for ((w, dv), n) in d.iter().zip(dcql).zip(counts) {
        if *w <= 0.0 {
            continue;
        }
        if *n <= 0.0 {
            return f64::INFINITY;
        }
        total += w * ((dv + 1.0) / n).sqrt();
    }
    c_sample / ((1.0 - discount) * (1.0 - discount)) * total
}

/// Bound terms for task `task` with all expectations under the true MDP;
/// `counts` holds `|D^eff(s)|`.
pub fn spi_bound(
    mdp: &MultiTaskMdp,
    pi_star: &TabularPolicy,
    pi_behavior: &TabularPolicy,
    pi_behavior_star: &TabularPolicy,
    counts: &[f64],
    task: usize,
    constants: &SpiConstants,
) -> Result<BoundReport> {
    constants.validate()?;
    let ns = mdp.num_states;
    for p in [pi_star, pi_behavior, pi_behavior_star] {
        if p.num_states != ns || p.num_actions != mdp.num_actions {
            return Err(CdsError::InvalidPolicy("policy shape does not match the MDP".into()));
        }
    }
    let occupancy = state_occupancy(mdp, pi_star, task)?.normalized();
    if counts.len() != ns {
        return Err(CdsError::InvalidSpec(format!("{} counts for {ns} states", counts.len())));
    }
    let counts = counts.to_vec();
    let (ps, pb) = (policy_task(pi_star, task), policy_task(pi_behavior_star, task));
    let mut per_state_dcql = vec![0.0; ns];
    let mut smoothed_states = Vec::new();
    for s in 0..ns {
        let (p, q) = (pi_star.row(ps, s), pi_behavior_star.row(pb, s));
        per_state_dcql[s] = match d_cql(p, q) {
            Ok(v) => v,
            Err(_) => {
                smoothed_states.push(s);
                d_cql(p, &smooth(q, KL_SMOOTHING))?
            }
        };
    }
    let epsilon: f64 = occupancy.iter().zip(&per_state_dcql).map(|(d, v)| d * v).sum();
    let sampling = sampling_error_term(constants.c_sample, mdp.discount, &occupancy, &per_state_dcql, &counts);
    let j_pi_star = exact_policy_evaluation(mdp, pi_star, task)?;
    let j_behavior = exact_policy_evaluation(mdp, pi_behavior, task)?;
    let j_behavior_star = exact_policy_evaluation(mdp, pi_behavior_star, task)?;
    let divergence_bonus = constants.alpha * epsilon;
    let improvement_term_a = j_behavior_star - j_behavior;
    let zeta = sampling - (divergence_bonus + improvement_term_a);
    Ok(BoundReport {
        task,
        sampling_error_term: sampling,
        divergence_bonus,
        improvement_term_a,
        zeta,
        constants: BoundConstants {
            c_sample: constants.c_sample,
            r_max: constants.r_max.unwrap_or_else(|| mdp.r_max()),
            discount: mdp.discount,
            alpha: constants.alpha,
        },
        epsilon,
        counts,
        per_state_dcql,
        occupancy,
        smoothed_states,
        j_pi_star,
        j_behavior,
        holds: j_pi_star - j_behavior >= -zeta,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Entry {
    pub alpha: f64,
    /// `C R_max/(1-γ) D_TV ≤ α D_CQL`.
    pub condition: bool,
    /// Present only when the condition holds.
    pub improvement: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Report {
    pub tv: f64,
    #[serde(with = "ext_float")]
    pub dcql: f64,
    /// Smallest α meeting the condition.
    #[serde(with = "ext_float")]
    pub threshold: f64,
    /// `π* = π_β*` on every visited state.
    pub degenerate: bool,
    pub j_behavior_star: f64,
    pub j_behavior: f64,
    pub entries: Vec<Lemma1Entry>,
}

impl Lemma1Report {
    /// No entry whose condition held saw `J(π_β*) < J(π_β)`.
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.improvement != Some(false))
    }
}

/// `(E_d[D_TV], E_d[D_CQL])` of `p` against `q` under weights `d`; the D_CQL
/// average is infinite when support fails on a state with positive weight.
pub fn occupancy_divergences(p: &TabularPolicy, q: &TabularPolicy, d: &[f64], task: usize) -> (f64, f64) {
    let (pt, qt) = (policy_task(p, task), policy_task(q, task));
    let mut tv = 0.0;
    let mut dc = 0.0;
    for (s, w) in d.iter().enumerate() {
        if *w <= 0.0 {
            continue;
        }
        tv += w * tv_distance(p.row(pt, s), q.row(qt, s));
        dc += match d_cql(p.row(pt, s), q.row(qt, s)) {
            Ok(v) => w * v,
            Err(_) => f64::INFINITY,
        };
    }
    (tv, dc)
}

/// Checks, per α, that `J(π_β*) ≥ J(π_β)` in `empirical` whenever
/// `C R_max/(1-γ) E_{d^{π*}}[D_TV(π*, π_β*)] ≤ α E_{d^{π*}}[D_CQL(π*, π_β*)]`.
/// Policies narrower than the empirical MDP are padded with uniform rows.
#[allow(clippy::too_many_arguments)]
pub fn check_lemma1(
    empirical: &MultiTaskMdp,
    task: usize,
    pi_star: &TabularPolicy,
    pi_behavior_star: &TabularPolicy,
    pi_behavior: &TabularPolicy,
    alphas: &[f64],
    c: f64,
    r_max: f64,
) -> Result<Lemma1Report> {
    let ns = empirical.num_states;
    let (pi_star, pbs, pb) = (pi_star.padded(ns), pi_behavior_star.padded(ns), pi_behavior.padded(ns));
    let d = state_occupancy(empirical, &pi_star, task)?.normalized();
    let (tv, dcql) = occupancy_divergences(&pi_star, &pbs, &d, task);
    let lhs = c * r_max / (1.0 - empirical.discount) * tv;
    let degenerate = tv == 0.0 && dcql == 0.0;
    let threshold = if lhs <= 0.0 {
        0.0
    } else if dcql == 0.0 {
        f64::INFINITY
    } else {
        lhs / dcql
    };
    let j_behavior_star = exact_policy_evaluation(empirical, &pbs, task)?;
    let j_behavior = exact_policy_evaluation(empirical, &pb, task)?;
    let entries = alphas
        .iter()
        .map(|&alpha| {
            let rhs = if alpha == 0.0 { 0.0 } else { alpha * dcql };
            let condition = lhs <= rhs;
            Lemma1Entry {
                alpha,
                condition,
                improvement: condition.then_some(j_behavior_star >= j_behavior),
            }
        })
        .collect();
    Ok(Lemma1Report {
        tv,
        dcql,
        threshold,
        degenerate,
        j_behavior_star,
        j_behavior,
        entries,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma2Report {
    /// `E_d[√((D+1)/n)]`.
    pub lhs: f64,
    /// `√(1+ε) E_d[√(1/n)]`, the stated right-hand side.
    pub rhs: f64,
    /// `√(1+ε) √(E_d[1/n])`, the Cauchy-Schwarz right-hand side.
    pub cauchy_schwarz_rhs: f64,
    /// `lhs ≤ rhs (1 + 1e-12)`.
    pub holds: bool,
    pub cauchy_schwarz_holds: bool,
}

pub const LEMMA2_TOLERANCE: f64 = 1e-12;

/// Evaluates both sides of the sampling-error inequality with and without
/// distribution shift.
///
/// The stated form moves `E_d` inside a square root on the wrong side of
/// Jensen's inequality and can fail; the Cauchy-Schwarz form
/// `E_d[√((D+1)/n)] ≤ √(E_d[D+1]) √(E_d[1/n])` always holds.
pub fn check_lemma2(d: &[f64], dcql: &[f64], counts: &[f64], epsilon: f64) -> Result<Lemma2Report> {
    if d.len() != dcql.len() || d.len() != counts.len() || d.is_empty() {
        return Err(CdsError::Precondition("d, D and n must have the same nonzero length".into()));
    }
    let mass: f64 = d.iter().sum();
    if d.iter().any(|w| *w < 0.0) || (mass - 1.0).abs() > 1e-9 {
        return Err(CdsError::Precondition("d must be a distribution".into()));
    }
    if dcql.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(CdsError::Precondition("D values must be finite and nonnegative".into()));
    }
    if d.iter().zip(counts).any(|(w, n)| *w > 0.0 && *n <= 0.0) {
        return Err(CdsError::Precondition("every state with d(s) > 0 needs n(s) > 0".into()));
    }
    let mean_d: f64 = d.iter().zip(dcql).map(|(w, v)| w * v).sum();
    if mean_d > epsilon * (1.0 + LEMMA2_TOLERANCE) + LEMMA2_TOLERANCE {
        return Err(CdsError::Precondition(format!("E_d[D] = {mean_d} exceeds epsilon = {epsilon}")));
    }
    let mut lhs = 0.0;
    let mut inv_sqrt = 0.0;
    let mut inv = 0.0;
    for ((w, v), n) in d.iter().zip(dcql).zip(counts) {
        if *w <= 0.0 {
            continue;
        }
        lhs += w * ((v + 1.0) / n).sqrt();
        inv_sqrt += w / n.sqrt();
        inv += w / n;
    }
    let root = (1.0 + epsilon).sqrt();
    let rhs = root * inv_sqrt;
    let cs = root * inv.sqrt();
    Ok(Lemma2Report {
        lhs,
        rhs,
        cauchy_schwarz_rhs: cs,
        holds: lhs <= rhs * (1.0 + LEMMA2_TOLERANCE),
        cauchy_schwarz_holds: lhs <= cs * (1.0 + LEMMA2_TOLERANCE),
    })
}

/// Per-task outcome of one run, the input row of a scenario comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub strategy: String,
    pub seed: u64,
    pub j: Vec<f64>,
    pub kl: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub strategy: String,
    /// `None` for the cross-task average.
    pub task: Option<usize>,
    pub j: f64,
    pub kl: f64,
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub strategies: Vec<String>,
    pub num_tasks: usize,
    pub rows: Vec<ScenarioRow>,
}

/// Averages runs of each strategy (in first-seen order) per task, then across tasks.
pub fn scenario_report(runs: &[RunSummary]) -> Result<ScenarioReport> {
    let first = runs.first().ok_or_else(|| CdsError::Precondition("no runs to compare".into()))?;
    let num_tasks = first.j.len();
    if runs.iter().any(|r| r.j.len() != num_tasks || r.kl.len() != num_tasks) {
        return Err(CdsError::Precondition("runs disagree on the number of tasks".into()));
    }
    let mut strategies: Vec<String> = Vec::new();
    for r in runs {
        if !strategies.contains(&r.strategy) {
            strategies.push(r.strategy.clone());
        }
    }
    let mut rows = Vec::new();
    for name in &strategies {
        let group: Vec<&RunSummary> = runs.iter().filter(|r| &r.strategy == name).collect();
        let n = group.len() as f64;
        let mut js = Vec::with_capacity(num_tasks);
        let mut kls = Vec::with_capacity(num_tasks);
        for task in 0..num_tasks {
            let j = group.iter().map(|r| r.j[task]).sum::<f64>() / n;
            let kl = group.iter().map(|r| r.kl[task]).sum::<f64>() / n;
            js.push(j);
            kls.push(kl);
            rows.push(ScenarioRow {
                strategy: name.clone(),
                task: Some(task),
                j,
                kl,
                runs: group.len(),
            });
        }
        rows.push(ScenarioRow {
            strategy: name.clone(),
            task: None,
            j: js.iter().sum::<f64>() / num_tasks as f64,
            kl: kls.iter().sum::<f64>() / num_tasks as f64,
            runs: group.len(),
        });
    }
    Ok(ScenarioReport {
        strategies,
        num_tasks,
        rows,
    })
}

pub const SCENARIO_HEADER: &str = "strategy,task,J,D_KL,runs";

impl ScenarioReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(SCENARIO_HEADER);
        out.push('\n');
        for r in &self.rows {
            let task = r.task.map_or_else(|| "mean".to_string(), |t| t.to_string());
            out.push_str(&format!("{},{},{},{},{}\n", r.strategy, task, format_float(r.j), format_float(r.kl), r.runs));
        }
        out
    }

    pub fn row(&self, strategy: &str, task: Option<usize>) -> Option<&ScenarioRow> {
        self.rows.iter().find(|r| r.strategy == strategy && r.task == task)
    }
}

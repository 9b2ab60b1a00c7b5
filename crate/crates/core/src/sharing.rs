//! Data-sharing strategies: which relabeled transitions from other tasks enter
//! a task's effective dataset, and with what weight.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::relabel;
use crate::dataset::{format_float, TaskDataset, Transition};
use crate::envs::SkillTag;
use crate::error::{CdsError, Result};
use crate::learner::{ConservativeQTable, EmpiricalBehaviorPolicy, WeightRule};
use crate::analysis::occupancy_divergences;
use crate::mdp::{empirical_mdp, exact_policy_evaluation, state_occupancy, MultiTaskMdp, TabularPolicy};
use crate::rng::rng_from;

pub const TEMPERATURE_DECAY: f64 = 0.995;
pub const TEMPERATURE_INIT: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SharingStrategy {
    NoShare,
    ShareAll,
    Skill { skills: SkillTag },
    Hipi,
    CdsBasic,
    CdsQuantile { k: f64 },
    CdsWeighted { k: f64, tau_min: f64, tau_max: f64 },
}

impl SharingStrategy {
    pub fn tag(&self) -> &'static str {
        match self {
            SharingStrategy::NoShare => "no-share",
            SharingStrategy::ShareAll => "share-all",
            SharingStrategy::Skill { .. } => "skill",
            SharingStrategy::Hipi => "hipi",
            SharingStrategy::CdsBasic => "cds-basic",
            SharingStrategy::CdsQuantile { .. } => "cds-quantile",
            SharingStrategy::CdsWeighted { .. } => "cds-weighted",
        }
    }

    pub fn validate(&self, num_tasks: usize) -> Result<()> {
        match self {
            SharingStrategy::CdsQuantile { k } => check_k(*k),
            SharingStrategy::CdsWeighted { k, tau_min, tau_max } => {
                check_k(*k)?;
                if !(*tau_min > 0.0 && tau_min <= tau_max && !tau_min.is_nan() && !tau_max.is_nan()) {
                    return Err(CdsError::config("strategy.tau_min", "need 0 < tau_min <= tau_max"));
                }
                Ok(())
            }
            SharingStrategy::Skill { skills } if skills.num_tasks() != num_tasks => Err(CdsError::config(
                "strategy.skills",
                format!("{} labels for {num_tasks} tasks", skills.num_tasks()),
            )),
            _ => Ok(()),
        }
    }

    pub fn is_hard(&self) -> bool {
        !matches!(self, SharingStrategy::CdsWeighted { .. })
    }
}

fn check_k(k: f64) -> Result<()> {
    if (0.0..=100.0).contains(&k) {
        Ok(())
    } else {
        Err(CdsError::config("strategy.k", format!("{k} outside [0, 100]")))
    }
}

impl fmt::Display for SharingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SharingStrategy::CdsQuantile { k } => write!(f, "cds-quantile:{k}"),
            SharingStrategy::CdsWeighted { k, tau_min, tau_max } => {
                write!(f, "cds-weighted:{k}:{tau_min}:{tau_max}")
            }
            other => f.write_str(other.tag()),
        }
    }
}

/// Parses `no-share`, `share-all`, `hipi`, `cds-basic`, `cds-quantile[:k]` and
/// `cds-weighted[:k[:tau_min:tau_max]]`. Skill routing needs labels and is
/// only available from a config file.
impl FromStr for SharingStrategy {
    type Err = CdsError;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let name = parts.next().unwrap_or_default();
        let nums: Vec<f64> = parts
            .map(|p| p.parse::<f64>().map_err(|_| CdsError::config("strategy", format!("bad number `{p}` in `{s}`"))))
            .collect::<Result<_>>()?;
        let strategy = match (name, nums.as_slice()) {
            ("no-share", []) => SharingStrategy::NoShare,
            ("share-all", []) => SharingStrategy::ShareAll,
            ("hipi", []) => SharingStrategy::Hipi,
            ("cds-basic", []) => SharingStrategy::CdsBasic,
            ("cds-quantile", []) => SharingStrategy::CdsQuantile { k: 50.0 },
            ("cds-quantile", [k]) => SharingStrategy::CdsQuantile { k: *k },
            ("cds-weighted", []) => SharingStrategy::CdsWeighted {
                k: 50.0,
                tau_min: 1.0,
                tau_max: 50.0,
            },
            ("cds-weighted", [k]) => SharingStrategy::CdsWeighted {
                k: *k,
                tau_min: 1.0,
                tau_max: 50.0,
            },
            ("cds-weighted", [k, lo, hi]) => SharingStrategy::CdsWeighted {
                k: *k,
                tau_min: *lo,
                tau_max: *hi,
            },
            _ => return Err(CdsError::config("strategy", format!("unknown strategy `{s}`"))),
        };
        Ok(strategy)
    }
}

/// `D_i^eff`: original data plus admitted relabeled transitions, each with a weight.
#[derive(Clone, Debug, PartialEq)]
pub struct EffectiveDataset {
    pub task: usize,
    pub transitions: Vec<Transition>,
    /// In `(0, 1]`; 1 for hard admission.
    pub weights: Vec<f64>,
}

impl EffectiveDataset {
    pub fn original(d: &TaskDataset) -> Self {
        EffectiveDataset {
            task: d.task,
            transitions: d.transitions.clone(),
            weights: vec![1.0; d.transitions.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Origin task of every transition.
    pub fn provenance(&self) -> impl Iterator<Item = usize> + '_ {
        self.transitions.iter().map(|t| t.origin_task)
    }

    /// Weighted visit count `|D^eff(s)|` per state.
    pub fn state_counts(&self, num_states: usize) -> Vec<f64> {
        let mut n = vec![0.0; num_states];
        for (t, w) in self.transitions.iter().zip(&self.weights) {
            n[t.s] += w;
        }
        n
    }
}

/// Per-task running temperature for soft CDS weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveTemperature {
    pub tau: Vec<f64>,
    pub decay: f64,
    pub tau_min: f64,
    pub tau_max: f64,
}

impl AdaptiveTemperature {
    pub fn new(num_tasks: usize, tau_min: f64, tau_max: f64) -> Self {
        AdaptiveTemperature {
            tau: vec![TEMPERATURE_INIT.clamp(tau_min, tau_max); num_tasks],
            decay: TEMPERATURE_DECAY,
            tau_min,
            tau_max,
        }
    }

    pub fn get(&self, task: usize) -> f64 {
        self.tau[task]
    }

    /// `τ ← clip(decay·τ + (1 - decay)·mean|Δ|)`; an empty batch leaves τ unchanged.
    pub fn update(&mut self, task: usize, deltas: &[f64]) {
        if deltas.is_empty() {
            return;
        }
        let mean = deltas.iter().map(|d| d.abs()).sum::<f64>() / deltas.len() as f64;
        let next = self.decay * self.tau[task] + (1.0 - self.decay) * mean;
        self.tau[task] = next.clamp(self.tau_min, self.tau_max);
    }
}

/// Nearest-rank percentile: element `ceil(k/100 · n) - 1` of the sorted values.
pub fn percentile(values: &[f64], k: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(CdsError::EmptyDataset("percentile of an empty list".into()));
    }
    check_k(k)?;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[nearest_rank_index(sorted.len(), k)])
}

fn nearest_rank_index(n: usize, k: f64) -> usize {
    // multiply first: 30 / 100 * 10 rounds to 3.0000000000000004
    let rank = (k * n as f64 / 100.0).ceil() as usize;
    rank.clamp(1, n) - 1
}

/// `P_k%` of `Q̂(s,a,i)` over the pairs of `D_i`.
pub fn quantile_threshold(q: &ConservativeQTable, target: usize, d_i: &[Transition], k: f64) -> Result<f64> {
    if d_i.is_empty() {
        return Err(CdsError::EmptyDataset(format!("task {target} has no original data")));
    }
    let values: Vec<f64> = d_i.iter().map(|t| q.conservative(target, t.s, t.a)).collect();
    percentile(&values, k)
}

/// `Δ = Q̂(s,a,i) - P_k%{Q̂(s',a',i) : (s',a') ∈ D_i}`; admitted iff `Δ ≥ 0`.
pub fn cds_delta_quantile(q: &ConservativeQTable, t: &Transition, target: usize, d_i: &[Transition], k: f64) -> Result<f64> {
    Ok(q.conservative(target, t.s, t.a) - quantile_threshold(q, target, d_i, k)?)
}

fn expect(row: &[f64], values: &[f64]) -> f64 {
    row.iter().zip(values).map(|(p, v)| p * v).sum()
}

/// `E_{s~D_i}[E_π Q̂(s,·,i) - E_{π_β} Q̂(s,·,i)]`, the dataset bracket of the basic rule.
pub fn basic_dataset_term(
    q: &ConservativeQTable,
    policy: &TabularPolicy,
    target: usize,
    d_i: &[Transition],
    behavior: &EmpiricalBehaviorPolicy,
    behavior_task: usize,
) -> Result<f64> {
    if d_i.is_empty() {
        return Err(CdsError::EmptyDataset(format!("task {target} has no original data")));
    }
    let pt = if policy.num_tasks == 1 { 0 } else { target };
    let mut total = 0.0;
    for t in d_i {
        let row = q.conservative_row(target, t.s);
        total += expect(policy.row(pt, t.s), &row) - expect(behavior.row(behavior_task, t.s), &row);
    }
    Ok(total / d_i.len() as f64)
}

/// Difference of the CQL regularizer with and without the candidate `(s, a)`:
/// `E_{s'~D_i}[E_π Q̂(s') - E_{π_β} Q̂(s')] - (E_π Q̂(s,·) - Q̂(s,a))`.
pub fn cds_delta_basic(
    q: &ConservativeQTable,
    policy: &TabularPolicy,
    t: &Transition,
    target: usize,
    d_i: &[Transition],
) -> Result<f64> {
    let behavior = EmpiricalBehaviorPolicy::from_weighted(
        q.num_states,
        q.num_actions,
        vec![d_i.iter().map(|t| (t.s, t.a, 1.0)).collect::<Vec<_>>()],
    )?;
    let first = basic_dataset_term(q, policy, target, d_i, &behavior, 0)?;
    Ok(first - basic_candidate_term(q, policy, t, target))
}

fn basic_candidate_term(q: &ConservativeQTable, policy: &TabularPolicy, t: &Transition, target: usize) -> f64 {
    let pt = if policy.num_tasks == 1 { 0 } else { target };
    let row = q.conservative_row(target, t.s);
    expect(policy.row(pt, t.s), &row) - row[t.a]
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `σ(Δ / τ_i)`.
pub fn cds_weight(delta: f64, temperature: &AdaptiveTemperature, task: usize) -> f64 {
    sigmoid(delta / temperature.get(task))
}

/// Task with the largest `Q̂(s, a, ·)`, lowest id on ties.
pub fn hipi_route(q: &ConservativeQTable, t: &Transition) -> usize {
    let mut best = 0;
    for i in 1..q.num_tasks {
        if q.conservative(i, t.s, t.a) > q.conservative(best, t.s, t.a) {
            best = i;
        }
    }
    best
}

pub fn skill_route(tags: &SkillTag, origin: usize, target: usize) -> bool {
    match (tags.skill(origin), tags.skill(target)) {
        (Some(a), Some(b)) => a == b,
        _ => false,
    }
}

/// One admission decision for a candidate transition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmissionRecord {
    /// Index of the transition in its origin dataset.
    pub index: usize,
    pub origin: usize,
    pub target: usize,
    pub delta: Option<f64>,
    pub weight: f64,
    pub admitted: bool,
}

pub const ADMISSION_HEADER: &str = "index,origin,target,delta,weight,admitted";

pub fn admissions_to_csv(records: &[AdmissionRecord]) -> String {
    let mut out = String::from(ADMISSION_HEADER);
    out.push('\n');
    for r in records {
        let delta = r.delta.map(format_float).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.index,
            r.origin,
            r.target,
            delta,
            format_float(r.weight),
            if r.admitted { 1 } else { 0 }
        ));
    }
    out
}

/// Mutable sharing state carried across rounds of one run.
#[derive(Clone, Debug)]
pub struct SharingState {
    pub temperature: Option<AdaptiveTemperature>,
    pub rule: WeightRule,
    /// Whether task `i`'s original data is weighted in the current round.
    pub weight_original: Vec<bool>,
    rng: ChaCha8Rng,
}

impl SharingState {
    pub fn new(strategy: &SharingStrategy, num_tasks: usize, rule: WeightRule, seed: u64) -> Self {
        let temperature = match strategy {
            SharingStrategy::CdsWeighted { tau_min, tau_max, .. } => {
                Some(AdaptiveTemperature::new(num_tasks, *tau_min, *tau_max))
            }
            _ => None,
        };
        SharingState {
            temperature,
            rule,
            weight_original: vec![false; num_tasks],
            rng: rng_from(seed),
        }
    }

    /// Draws the per-task coin for weighting original data this round.
    pub fn begin_round(&mut self) {
        if self.temperature.is_some() && self.rule == WeightRule::RelabeledPlusHalfOriginal {
            for flag in &mut self.weight_original {
                *flag = self.rng.gen_bool(0.5);
            }
        }
    }
}

/// Builds `D_i^eff` for `target` under `strategy`.
///
/// The output lists `D_i` first, then candidates by origin task in ascending
/// order, each in dataset order. Records cover every candidate from the other
/// tasks.
pub fn build_effective_dataset(
    strategy: &SharingStrategy,
    q: &ConservativeQTable,
    policy: &TabularPolicy,
    raw: &[TaskDataset],
    target: usize,
    mdp: &MultiTaskMdp,
    state: &mut SharingState,
) -> Result<(EffectiveDataset, Vec<AdmissionRecord>)> {
    let d_i = raw
        .get(target)
        .ok_or_else(|| CdsError::OutOfRange(format!("target task {target}")))?;
    if d_i.is_empty() {
        return Err(CdsError::EmptyDataset(format!("task {target} has no original data")));
    }
    let mut out = EffectiveDataset::original(d_i);
    let mut records = Vec::new();

    // rule-specific precomputation
    let threshold = match strategy {
        SharingStrategy::CdsQuantile { k } | SharingStrategy::CdsWeighted { k, .. } => {
            Some(quantile_threshold(q, target, &d_i.transitions, *k)?)
        }
        _ => None,
    };
    let basic_first = match strategy {
        SharingStrategy::CdsBasic => {
            let behavior = EmpiricalBehaviorPolicy::from_weighted(
                q.num_states,
                q.num_actions,
                vec![d_i.transitions.iter().map(|t| (t.s, t.a, 1.0)).collect::<Vec<_>>()],
            )?;
            Some(basic_dataset_term(q, policy, target, &d_i.transitions, &behavior, 0)?)
        }
        _ => None,
    };

    let mut deltas = Vec::new();
    for (origin, d_j) in raw.iter().enumerate() {
        if origin == target {
            continue;
        }
        for (index, t) in d_j.transitions.iter().enumerate() {
            let rel = relabel(t, target, mdp)?;
            let (delta, weight, admitted) = match strategy {
                SharingStrategy::NoShare => (None, 0.0, false),
                SharingStrategy::ShareAll => (None, 1.0, true),
                SharingStrategy::Skill { skills } => {
                    let ok = skill_route(skills, t.origin_task, target);
                    (None, if ok { 1.0 } else { 0.0 }, ok)
                }
                SharingStrategy::Hipi => {
                    let ok = hipi_route(q, &rel) == target;
                    (None, if ok { 1.0 } else { 0.0 }, ok)
                }
                SharingStrategy::CdsBasic => {
                    let d = basic_first.unwrap() - basic_candidate_term(q, policy, &rel, target);
                    (Some(d), if d >= 0.0 { 1.0 } else { 0.0 }, d >= 0.0)
                }
                SharingStrategy::CdsQuantile { .. } => {
                    let d = q.conservative(target, rel.s, rel.a) - threshold.unwrap();
                    (Some(d), if d >= 0.0 { 1.0 } else { 0.0 }, d >= 0.0)
                }
                SharingStrategy::CdsWeighted { .. } => {
                    let d = q.conservative(target, rel.s, rel.a) - threshold.unwrap();
                    let temp = state.temperature.as_ref().expect("weighted strategy carries a temperature");
                    deltas.push(d);
                    (Some(d), cds_weight(d, temp, target).max(f64::MIN_POSITIVE), true)
                }
            };
            if admitted {
                out.transitions.push(rel);
                out.weights.push(weight);
            }
            records.push(AdmissionRecord {
                index,
                origin,
                target,
                delta,
                weight,
                admitted,
            });
        }
    }

    if let Some(temp) = state.temperature.as_mut() {
        let thr = threshold.expect("weighted strategy has a threshold");
        if state.weight_original[target] {
            for (t, w) in out.transitions.iter().zip(out.weights.iter_mut()).take(d_i.len()) {
                let d = q.conservative(target, t.s, t.a) - thr;
                *w = cds_weight(d, temp, target).max(f64::MIN_POSITIVE);
            }
        }
        temp.update(target, &deltas);
    }
    Ok((out, records))
}

/// Exhaustive solution of the relabeling objective on a tiny instance.
#[derive(Clone, Debug)]
pub struct RelabelSolution {
    /// Indices into the candidate list.
    pub subset: Vec<usize>,
    /// Single-task policy over the states of `empirical`.
    pub policy: TabularPolicy,
    /// Behavior policy of `D_i ∪ S`, padded to `empirical`.
    pub behavior: TabularPolicy,
    pub empirical: MultiTaskMdp,
    pub objective: f64,
}

pub const RELABEL_MAX_CANDIDATES: usize = 12;

fn behavior_of(data: &[Transition], num_states: usize, num_actions: usize) -> Result<TabularPolicy> {
    let b = EmpiricalBehaviorPolicy::from_weighted(num_states, num_actions, vec![data.iter().map(|t| (t.s, t.a, 1.0)).collect::<Vec<_>>()])?;
    Ok(b.to_policy())
}

/// `J_{M_D}(π) - α E_{s~d^π}[D_CQL(π, π_β^D)(s)]` in the empirical MDP of `data`;
/// `-∞` when `π` leaves the behavior support on a visited state.
pub fn relabel_objective(base: &MultiTaskMdp, task: usize, data: &[Transition], policy: &TabularPolicy, alpha: f64) -> Result<f64> {
    let m = empirical_mdp(data, base)?;
    let behavior = behavior_of(data, base.num_states, base.num_actions)?.task_slice(0).padded(m.num_states);
    objective_in(&m, task, &policy.padded(m.num_states), &behavior, alpha)
}

fn objective_in(m: &MultiTaskMdp, task: usize, policy: &TabularPolicy, behavior: &TabularPolicy, alpha: f64) -> Result<f64> {
    let j = exact_policy_evaluation(m, policy, task)?;
    if alpha == 0.0 {
        return Ok(j);
    }
    let d = state_occupancy(m, policy, task)?.normalized();
    let (_, dc) = occupancy_divergences(policy, behavior, &d, task);
    Ok(j - alpha * dc)
}

fn deterministic_policies(num_states: usize, num_actions: usize) -> Vec<TabularPolicy> {
    let total = num_actions.pow(num_states as u32);
    (0..total)
        .map(|mut code| {
            let actions: Vec<usize> = (0..num_states)
                .map(|_| {
                    let a = code % num_actions;
                    code /= num_actions;
                    a
                })
                .collect();
            TabularPolicy::deterministic(num_actions, &[actions])
        })
        .collect()
}

/// Maximizes the relabeling objective over every subset `S` of `candidates`
/// and every policy in the deterministic set together with the behavior
/// policies of all subsets. Ties keep the first maximizer, subsets in bitmask
/// order.
pub fn solve_relabel_objective(
    base: &MultiTaskMdp,
    task: usize,
    d_i: &[Transition],
    candidates: &[Transition],
    alpha: f64,
) -> Result<RelabelSolution> {
    if candidates.len() > RELABEL_MAX_CANDIDATES {
        return Err(CdsError::InvalidSpec(format!(
            "{} candidates; exhaustive search supports at most {RELABEL_MAX_CANDIDATES}",
            candidates.len()
        )));
    }
    if d_i.is_empty() {
        return Err(CdsError::EmptyDataset(format!("task {task} has no original data")));
    }
    let (ns, na) = (base.num_states, base.num_actions);
    let subsets: Vec<Vec<usize>> = (0..1usize << candidates.len())
        .map(|mask| (0..candidates.len()).filter(|k| mask >> k & 1 == 1).collect())
        .collect();
    let data_of = |subset: &[usize]| -> Vec<Transition> {
        let mut data = d_i.to_vec();
        data.extend(subset.iter().map(|&k| candidates[k]));
        data
    };
    let mut pool = deterministic_policies(ns, na);
    for subset in &subsets {
        pool.push(behavior_of(&data_of(subset), ns, na)?);
    }
    let mut best: Option<RelabelSolution> = None;
    for subset in &subsets {
        let data = data_of(subset);
        let m = empirical_mdp(&data, base)?;
        let behavior = behavior_of(&data, ns, na)?.padded(m.num_states);
        for pi in &pool {
            let pi = pi.padded(m.num_states);
            let value = objective_in(&m, task, &pi, &behavior, alpha)?;
            if best.as_ref().is_none_or(|b| value > b.objective) {
                best = Some(RelabelSolution {
                    subset: subset.clone(),
                    policy: pi,
                    behavior: behavior.clone(),
                    empirical: m.clone(),
                    objective: value,
                });
            }
        }
    }
    best.ok_or_else(|| CdsError::InvalidSpec("empty search space".into()))
}

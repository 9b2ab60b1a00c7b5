//! Learner invariants measured on the scenario datasets.
//!
//! Both checks use mu = pi with a softmax policy at temperature 1. That is the
//! setting in which the penalty targets the evaluated policy; with a greedy
//! policy the gap below is nonnegative by construction.

use cds_core::config::ExperimentConfig;
use cds_core::harness::generate_datasets;
use cds_core::learner::{
    conservatism_gap, cql_fitted_iteration, estimate_behavior_policy, extract_policy, EmpiricalBehaviorPolicy, LearnerConfig,
    MuMode, ProblemDims,
};
use cds_core::sharing::EffectiveDataset;
use cds_core::Result;

const SCENARIOS: [&str; 2] = [include_str!("../../../configs/corridor.toml"), include_str!("../../../configs/grid.toml")];

struct Scenario {
    name: String,
    dims: ProblemDims,
    data: Vec<EffectiveDataset>,
    behavior: EmpiricalBehaviorPolicy,
    learner: LearnerConfig,
}

fn scenarios(seeds: std::ops::Range<u64>) -> Vec<Scenario> {
    let mut out = Vec::new();
    for text in SCENARIOS {
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        let env = cfg.environment.build().unwrap();
        for seed in seeds.clone() {
            let raw = generate_datasets(&cfg, &env, seed).unwrap();
            let dims = ProblemDims::from_mdp(&env.mdp);
            out.push(Scenario {
                name: format!("{} seed {seed}", cfg.name),
                dims,
                data: raw.iter().map(EffectiveDataset::original).collect(),
                behavior: estimate_behavior_policy(&raw, dims.num_states, dims.num_actions).unwrap(),
                learner: cfg.learner.clone(),
            });
        }
    }
    out
}

fn fit(sc: &Scenario, beta: f64) -> Result<(cds_core::learner::ConservativeQTable, cds_core::mdp::TabularPolicy)> {
    let cfg = LearnerConfig {
        beta,
        mu_mode: MuMode::CurrentPolicy,
        policy_temperature: 1.0,
        ..sc.learner.clone()
    };
    let q = cql_fitted_iteration(&sc.dims, &sc.data, &cfg, 0)?;
    let pi = extract_policy(&q, 1.0);
    Ok((q, pi))
}

#[test]
fn conservatism_gap_nonpositive_for_large_beta() {
    let mut worst = f64::NEG_INFINITY;
    for sc in scenarios(0..6) {
        for beta in [1.0, 2.0] {
            let (q, pi) = fit(&sc, beta).unwrap();
            for task in 0..sc.dims.num_tasks {
                let gap = conservatism_gap(&q, &pi, &sc.behavior, task);
                assert!(gap <= 1e-6, "{} beta {beta} task {task}: gap {gap}", sc.name);
                worst = worst.max(gap);
            }
        }
    }
    println!("largest gap over scenario datasets: {worst:.3e}");
}

#[test]
fn penalty_is_monotone_over_beta_grid() {
    let mut problems = Vec::new();
    for sc in scenarios(0..6) {
        let mut prev: Option<Vec<f64>> = None;
        for beta in [0.0, 0.5, 1.0, 5.0] {
            let (q, pi) = match fit(&sc, beta) {
                Ok(fit) => fit,
                Err(e) => {
                    problems.push(format!("{} beta {beta}: {e}", sc.name));
                    break;
                }
            };
            let values: Vec<f64> = (0..sc.dims.num_tasks)
                .map(|task| {
                    let d = sc.behavior.state_distribution(task).normalized();
                    (0..sc.dims.num_states)
                        .map(|s| d[s] * pi.row(task, s).iter().zip(q.row(task, s)).map(|(p, v)| p * v).sum::<f64>())
                        .sum()
                })
                .collect();
            if let Some(prev) = &prev {
                for (task, (a, b)) in prev.iter().zip(&values).enumerate() {
                    if b > a {
                        problems.push(format!("{} task {task}: E[Q] rose from {a:.6} to {b:.6} at beta {beta}", sc.name));
                    }
                }
            }
            prev = Some(values);
        }
    }
    for p in &problems {
        println!("{p}");
    }
    assert!(problems.is_empty(), "{} monotonicity violations", problems.len());
}

//! Experiment configuration, read from TOML and validated before any work.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::SpiConstants;
use crate::datagen::BehaviorConfig;
use crate::envs::{build_corridor_tritask, build_multigoal_grid, corridor, CorridorTriTaskSpec, GridLayout, MultiGoalGridSpec};
use crate::error::{CdsError, Result};
use crate::learner::LearnerConfig;
use crate::mdp::MultiTaskMdp;
use crate::sharing::SharingStrategy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EnvironmentSpec {
    CorridorTriTask(CorridorTriTaskSpec),
    MultiGoalGrid(MultiGoalGridSpec),
}

/// A built environment.
#[derive(Clone, Debug)]
pub struct Environment {
    pub mdp: MultiTaskMdp,
    pub layout: Option<GridLayout>,
    pub task_names: Vec<String>,
}

impl EnvironmentSpec {
    pub fn build(&self) -> Result<Environment> {
        match self {
            EnvironmentSpec::CorridorTriTask(spec) => Ok(Environment {
                mdp: build_corridor_tritask(spec)?,
                layout: None,
                task_names: corridor::TASK_NAMES.iter().map(|s| s.to_string()).collect(),
            }),
            EnvironmentSpec::MultiGoalGrid(spec) => {
                let (mdp, layout) = build_multigoal_grid(spec)?;
                Ok(Environment {
                    mdp,
                    layout: Some(layout),
                    task_names: spec.goals.iter().map(|(x, y)| format!("goal-{x}-{y}")).collect(),
                })
            }
        }
    }

    pub fn num_tasks(&self) -> usize {
        match self {
            EnvironmentSpec::CorridorTriTask(_) => 3,
            EnvironmentSpec::MultiGoalGrid(spec) => spec.goals.len(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Recipe {
    MediumReplay,
    Medium,
    Expert,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecipe {
    pub task: usize,
    pub recipe: Recipe,
    pub size: usize,
    /// Offset mixed into the datagen substream for this dataset.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitKind {
    Undirected,
    Directed,
}

/// Task-agnostic grid play data split across goals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaySpec {
    pub trajectories: usize,
    pub horizon: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    pub split: SplitKind,
}

fn default_noise() -> f64 {
    0.2
}

/// A strategy given either as a short string (`"cds-quantile:50"`) or a table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StrategySpec {
    Name(String),
    Full(SharingStrategy),
}

impl StrategySpec {
    pub fn resolve(&self) -> Result<SharingStrategy> {
        match self {
            StrategySpec::Name(s) => s.parse(),
            StrategySpec::Full(s) => Ok(s.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlOccupancy {
    /// Empirical state distribution of the effective dataset.
    Dataset,
    /// Discounted occupancy of the learned policy in the true MDP.
    Policy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub seeds: Vec<u64>,
    pub kl_occupancy: KlOccupancy,
    /// Sampled episodes per task in `evaluate`, on top of the exact return.
    pub episodes: usize,
    pub horizon: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            seeds: (0..6).collect(),
            kl_occupancy: KlOccupancy::Dataset,
            episodes: 100,
            horizon: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub environment: EnvironmentSpec,
    #[serde(default)]
    pub datasets: Vec<DatasetRecipe>,
    #[serde(default)]
    pub play: Option<PlaySpec>,
    #[serde(default)]
    pub behavior: BehaviorConfig,
    #[serde(default)]
    pub learner: LearnerConfig,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<StrategySpec>,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub constants: SpiConstants,
}

fn default_strategies() -> Vec<StrategySpec> {
    ["no-share", "share-all", "cds-quantile:50"]
        .iter()
        .map(|s| StrategySpec::Name(s.to_string()))
        .collect()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let field = field_in_message(&msg).unwrap_or_else(|| "config".to_string());
            CdsError::config(field, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CdsError::config("config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CdsError::Format(e.to_string()))
    }

    pub fn strategies(&self) -> Result<Vec<SharingStrategy>> {
        self.strategies.iter().map(StrategySpec::resolve).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(CdsError::config("name", "must be a non-empty name without path separators"));
        }
        let env = self
            .environment
            .build()
            .map_err(|e| CdsError::config("environment", e.to_string()))?;
        let n = env.mdp.num_tasks;
        match (&self.play, self.datasets.is_empty()) {
            (Some(play), true) => {
                if env.layout.is_none() {
                    return Err(CdsError::config("play", "play data needs a grid environment"));
                }
                if play.trajectories < n || play.horizon == 0 {
                    return Err(CdsError::config("play.trajectories", "need at least one trajectory per task and a positive horizon"));
                }
                if !(0.0..=1.0).contains(&play.noise) {
                    return Err(CdsError::config("play.noise", "must lie in [0, 1]"));
                }
            }
            (None, false) => {
                let mut seen = vec![false; n];
                for (k, d) in self.datasets.iter().enumerate() {
                    if d.task >= n {
                        return Err(CdsError::config(
                            format!("datasets[{k}].task"),
                            format!("task {} does not exist; the environment has {n}", d.task),
                        ));
                    }
                    if seen[d.task] {
                        return Err(CdsError::config(format!("datasets[{k}].task"), format!("task {} listed twice", d.task)));
                    }
                    if d.size == 0 {
                        return Err(CdsError::config(format!("datasets[{k}].size"), "must be positive"));
                    }
                    seen[d.task] = true;
                }
                if let Some(missing) = seen.iter().position(|s| !s) {
                    return Err(CdsError::config("datasets", format!("no dataset for task {missing}")));
                }
            }
            (Some(_), false) => return Err(CdsError::config("play", "give either `datasets` or `play`, not both")),
            (None, true) => return Err(CdsError::config("datasets", "missing; give `datasets` or `play`")),
        }
        self.behavior.validate()?;
        self.learner.validate()?;
        self.constants.validate()?;
        if self.strategies.is_empty() {
            return Err(CdsError::config("strategies", "must not be empty"));
        }
        for (k, s) in self.strategies.iter().enumerate() {
            let strategy = s
                .resolve()
                .map_err(|e| CdsError::config(format!("strategies[{k}]"), e.to_string()))?;
            strategy
                .validate(n)
                .map_err(|e| CdsError::config(format!("strategies[{k}]"), e.to_string()))?;
        }
        if self.evaluation.seeds.is_empty() {
            return Err(CdsError::config("evaluation.seeds", "must not be empty"));
        }
        if self.evaluation.horizon == 0 {
            return Err(CdsError::config("evaluation.horizon", "must be positive"));
        }
        Ok(())
    }
}

fn field_in_message(msg: &str) -> Option<String> {
    let start = msg.find('`')? + 1;
    let end = start + msg[start..].find('`')?;
    Some(msg[start..end].to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    const CORRIDOR: &str = r#"
name = "corridor"
seed = 3

[environment]
kind = "corridor-tri-task"
length = 9
jump_cell = 6

[[datasets]]
task = 0
recipe = "medium-replay"
size = 500

[[datasets]]
task = 1
recipe = "medium"
size = 300

[[datasets]]
task = 2
recipe = "expert"
size = 50
"#;

    #[test]
    fn parses_and_defaults() {
        let cfg = ExperimentConfig::from_toml(CORRIDOR).unwrap();
        assert_eq!(cfg.datasets.len(), 3);
        assert_eq!(cfg.learner, LearnerConfig::default());
        assert_eq!(cfg.strategies().unwrap().len(), 3);
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn missing_environment_names_field() {
        let text = CORRIDOR.replace("[environment]\nkind = \"corridor-tri-task\"\nlength = 9\njump_cell = 6\n", "");
        match ExperimentConfig::from_toml(&text) {
            Err(CdsError::Config { field, .. }) => assert_eq!(field, "environment"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_task_id_names_field() {
        let text = CORRIDOR.replace("task = 2", "task = 7");
        match ExperimentConfig::from_toml(&text) {
            Err(CdsError::Config { field, .. }) => assert_eq!(field, "datasets[2].task"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = CORRIDOR.replace("seed = 3", "seed = 3\nsed = 4");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(CdsError::Config { .. })));
        let text = format!("{CORRIDOR}\n[learner]\nbeta = 1.0\nbeat = 2.0\n");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(CdsError::Config { .. })));
    }

    #[test]
    fn strategy_tables_accepted() {
        // top-level keys precede tables in TOML
        let text = format!(
            "strategies = [\"no-share\", {{ kind = \"cds-quantile\", k = 90.0 }}, {{ kind = \"skill\", skills = {{ labels = [\"move\", \"move\", \"hop\"] }} }}]\n{CORRIDOR}"
        );
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        let s = cfg.strategies().unwrap();
        assert_eq!(s[1], SharingStrategy::CdsQuantile { k: 90.0 });
        assert_eq!(s[2].tag(), "skill");
    }

    proptest::proptest! {
        #[test]
        fn malformed_configs_are_config_errors(cut in 0usize..400, drop in 0usize..30, mode in 0u8..3) {
            let text = match mode {
                0 => CORRIDOR.chars().take(cut).collect::<String>(),
                1 => CORRIDOR.lines().enumerate().filter(|(k, _)| *k != drop).map(|(_, l)| format!("{l}\n")).collect(),
                _ => CORRIDOR.replacen(|c: char| c.is_ascii_digit(), "x", 1 + cut % 5),
            };
            if let Err(e) = ExperimentConfig::from_toml(&text) {
                proptest::prop_assert_eq!(e.exit_code(), 2, "{}", e);
            }
        }
    }
}

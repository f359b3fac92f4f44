//! Run configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{HarnessError, HarnessLevel};
use crate::belief::{BeliefConfig, DEFAULT_PARTICLES, DEFAULT_SWEEPS};
use crate::planning::QuestionBudgetPolicy;
use crate::reflection::{GateSettings, CALIBRATION_WINDOW, DEFAULT_ALPHA, DEFAULT_COOLDOWN, DEFAULT_DELTA_MIN, DEFAULT_STREAK, DEFAULT_TAU};
use crate::world::BoardConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Budgets {
    pub shots: usize,
    pub questions: usize,
}

impl Default for Budgets {
    fn default() -> Self {
        let b = BoardConfig::default();
        Budgets { shots: b.shot_budget, questions: b.question_budget }
    }
}

/// Question policies by layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default, deny_unknown_fields)]
pub struct BucketPolicies {
    pub planning: QuestionBudgetPolicy,
    pub reflection: QuestionBudgetPolicy,
}

impl Default for BucketPolicies {
    fn default() -> Self {
        BucketPolicies { planning: QuestionBudgetPolicy::two_bucket(), reflection: QuestionBudgetPolicy::three_bucket() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default, deny_unknown_fields)]
pub struct LlmConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mock_file: Option<PathBuf>,
}

pub const DEFAULT_MODEL: &str = "llama3.2";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default, deny_unknown_fields)]
pub struct RunConfig {
    /// `L1`, `L2`, `L3-off`, `L3-on` or `L4`.
    pub level: String,
    pub tau: f64,
    pub alpha: f64,
    pub streak: usize,
    pub cooldown_turns: usize,
    pub delta_min: f64,
    pub particles: usize,
    pub sweeps: usize,
    pub epsilon: f64,
    pub budgets: Budgets,
    pub bucket_policy: BucketPolicies,
    /// Run the reflection layers with the planning layer's question policy.
    pub shared_question_policy: bool,
    pub llm: LlmConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            level: "L2".to_string(),
            tau: DEFAULT_TAU,
            alpha: DEFAULT_ALPHA,
            streak: DEFAULT_STREAK,
            cooldown_turns: DEFAULT_COOLDOWN,
            delta_min: DEFAULT_DELTA_MIN,
            particles: DEFAULT_PARTICLES,
            sweeps: DEFAULT_SWEEPS,
            epsilon: BoardConfig::default().noise_epsilon,
            budgets: Budgets::default(),
            bucket_policy: BucketPolicies::default(),
            shared_question_policy: false,
            llm: LlmConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let config: RunConfig = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        RunConfig::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        HarnessLevel::parse(&self.level, self.tau)?;
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau {} outside [0, 1]", self.tau));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha {} outside (0, 1]", self.alpha));
        }
        if self.particles == 0 {
            return bad("particles must be positive".into());
        }
        for policy in [&self.bucket_policy.planning, &self.bucket_policy.reflection] {
            policy.validate(self.budgets.questions).map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        self.base_board().validate().map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Board settings every game starts from; boards may override the size.
    pub fn base_board(&self) -> BoardConfig {
        BoardConfig {
            shot_budget: self.budgets.shots,
            question_budget: self.budgets.questions,
            noise_epsilon: self.epsilon,
            ..BoardConfig::default()
        }
    }

    pub fn belief(&self) -> BeliefConfig {
        BeliefConfig { particles: self.particles, sweeps: self.sweeps }
    }

    pub fn gate(&self, tau: f64) -> GateSettings {
        GateSettings { tau, streak: self.streak, delta_min: self.delta_min, cooldown_turns: self.cooldown_turns }
    }

    pub fn window(&self) -> usize {
        CALIBRATION_WINDOW
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_the_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
        let text = serde_json::to_string(&RunConfig::default()).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), RunConfig::default());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_json(r#"{"tau": 1.5}"#).is_err());
        assert!(RunConfig::from_json(r#"{"level": "L9"}"#).is_err());
        assert!(RunConfig::from_json(r#"{"questionQuota": 3}"#).is_err());
        assert!(RunConfig::from_json(r#"{"budgets": {"shots": 40, "questions": 3}}"#).is_err());
        let c = RunConfig::from_json(r#"{"level": "L4", "tau": 1.0, "llm": {"mockFile": "m.json"}}"#).unwrap();
        assert_eq!(c.llm.mock_file.as_deref(), Some(Path::new("m.json")));
    }

    #[test]
    fn defaults_match_the_documented_values() {
        let c = RunConfig::default();
        assert_eq!((c.tau, c.alpha, c.streak, c.cooldown_turns, c.delta_min), (0.72, 0.25, 2, 3, 0.01));
        assert_eq!((c.particles, c.sweeps, c.epsilon), (DEFAULT_PARTICLES, DEFAULT_SWEEPS, 0.1));
        assert_eq!((c.budgets.shots, c.budgets.questions), (40, 15));
    }
}

//! Seeded random search over session configuration fields.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::orchestrator::{SessionConfig, SessionSummary};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SweepError {
    #[error("invalid sweep space: {0}")]
    InvalidSpace(String),
    #[error("parameter `{name}` does not name a session config field")]
    UnknownField { name: String },
    #[error("value {value} does not fit config field `{name}`: {reason}")]
    BadValue { name: String, value: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ParamKind {
    RealRange { lo: f64, hi: f64 },
    IntRange { lo: i64, hi: i64 },
    Categorical { choices: Vec<Value> },
}

/// A swept parameter. `name` is a dotted path into the session config, for
/// example `agents.coder.temperature.hi` or `max_autofix`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: ParamKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    #[default]
    MeanTotalScore,
    TopScore,
}

impl Objective {
    pub fn of(self, summary: &SessionSummary) -> f64 {
        match self {
            Objective::MeanTotalScore => summary.mean_best_score,
            Objective::TopScore => summary.top_score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpace {
    pub params: Vec<ParamSpec>,
    #[serde(default)]
    pub objective: Objective,
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
}

fn lookup<'a>(root: &'a mut Value, path: &str) -> Option<&'a mut Value> {
    path.split('.').try_fold(root, |v, key| v.as_object_mut()?.get_mut(key))
}

/// Writes `value` at the dotted path `name`, going through the serialized
/// config so that every field reachable in the config file can be swept.
pub fn apply_param(config: &SessionConfig, name: &str, value: &Value) -> Result<SessionConfig, SweepError> {
    let mut tree = serde_json::to_value(config).expect("config serializes");
    let slot = lookup(&mut tree, name).ok_or_else(|| SweepError::UnknownField { name: name.into() })?;
    *slot = value.clone();
    serde_json::from_value(tree).map_err(|e| SweepError::BadValue {
        name: name.into(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

impl SweepSpace {
    pub fn validate(&self, base: &SessionConfig) -> Result<(), SweepError> {
        if self.trials == 0 {
            return Err(SweepError::InvalidSpace("trials must be >= 1".into()));
        }
        let mut tree = serde_json::to_value(base).expect("config serializes");
        for p in &self.params {
            if lookup(&mut tree, &p.name).is_none() {
                return Err(SweepError::UnknownField { name: p.name.clone() });
            }
            let ok = match &p.kind {
                ParamKind::RealRange { lo, hi } => lo.is_finite() && hi.is_finite() && lo <= hi,
                ParamKind::IntRange { lo, hi } => lo <= hi,
                ParamKind::Categorical { choices } => !choices.is_empty(),
            };
            if !ok {
                return Err(SweepError::InvalidSpace(format!("empty range for `{}`", p.name)));
            }
        }
        Ok(())
    }

    /// Parameter values for every trial. Ranges are sampled uniformly;
    /// categorical choices walk a seeded permutation so that every choice
    /// appears once the trial count reaches the number of choices.
    pub fn sample(&self) -> Vec<BTreeMap<String, Value>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let orders: Vec<Vec<usize>> = self
            .params
            .iter()
            .map(|p| match &p.kind {
                ParamKind::Categorical { choices } => {
                    let mut order: Vec<usize> = (0..choices.len()).collect();
                    order.shuffle(&mut rng);
                    order
                }
                _ => Vec::new(),
            })
            .collect();
        (0..self.trials)
            .map(|t| {
                self.params
                    .iter()
                    .zip(&orders)
                    .map(|(p, order)| {
                        let v = match &p.kind {
                            ParamKind::RealRange { lo, hi } => Value::from(if lo == hi { *lo } else { rng.gen_range(*lo..=*hi) }),
                            ParamKind::IntRange { lo, hi } => Value::from(rng.gen_range(*lo..=*hi)),
                            ParamKind::Categorical { choices } => choices[order[t % order.len()]].clone(),
                        };
                        (p.name.clone(), v)
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub params: BTreeMap<String, Value>,
    pub objective: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<SessionSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub objective: Objective,
    pub best: usize,
    pub best_params: BTreeMap<String, Value>,
    pub best_config: SessionConfig,
    pub trials: Vec<Trial>,
}

/// Runs one session per sampled trial through `runner`. Failed trials score
/// 0; ties go to the earliest trial.
pub fn sweep(
    space: &SweepSpace,
    base: &SessionConfig,
    mut runner: impl FnMut(&SessionConfig) -> Result<SessionSummary, String>,
) -> Result<SweepReport, SweepError> {
    space.validate(base)?;
    let mut trials = Vec::with_capacity(space.trials);
    let mut configs = Vec::with_capacity(space.trials);
    for (index, params) in space.sample().into_iter().enumerate() {
        let mut config = base.clone();
        for (name, value) in &params {
            config = apply_param(&config, name, value)?;
        }
        if base.session_id.is_some() {
            config.session_id = Some(format!("{}-trial-{index}", base.session_id.as_deref().unwrap_or_default()));
        }
        let trial = match runner(&config) {
            Ok(summary) => Trial {
                index,
                params,
                objective: space.objective.of(&summary),
                error: None,
                summary: Some(summary),
            },
            Err(e) => {
                tracing::warn!(trial = index, error = %e, "sweep trial failed");
                Trial {
                    index,
                    params,
                    objective: 0.0,
                    error: Some(e),
                    summary: None,
                }
            }
        };
        trials.push(trial);
        configs.push(config);
    }
    let best = trials
        .iter()
        .enumerate()
        .fold(0, |b, (i, t)| if t.objective > trials[b].objective { i } else { b });
    Ok(SweepReport {
        objective: space.objective,
        best,
        best_params: trials[best].params.clone(),
        best_config: configs.swap_remove(best),
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn space(params: Vec<ParamSpec>, trials: usize, seed: u64) -> SweepSpace {
        SweepSpace {
            params,
            objective: Objective::MeanTotalScore,
            trials,
            seed,
        }
    }

    #[test]
    fn dotted_paths_reach_nested_fields() {
        let base = SessionConfig::default();
        let c = apply_param(&base, "agents.coder.temperature.hi", &json!(0.9)).unwrap();
        assert_eq!(c.agents.coder.temperature.hi, 0.9);
        let c = apply_param(&base, "max_autofix", &json!(2)).unwrap();
        assert_eq!(c.max_autofix, 2);
        assert!(matches!(apply_param(&base, "nope", &json!(1)), Err(SweepError::UnknownField { .. })));
        assert!(matches!(apply_param(&base, "max_autofix", &json!("x")), Err(SweepError::BadValue { .. })));
    }

    #[test]
    fn sampling_is_seeded_and_in_bounds() {
        let s = space(
            vec![
                ParamSpec {
                    name: "agents.coder.temperature.hi".into(),
                    kind: ParamKind::RealRange { lo: 0.5, hi: 1.3 },
                },
                ParamSpec {
                    name: "agents.coder.candidates".into(),
                    kind: ParamKind::IntRange { lo: 3, hi: 4 },
                },
                ParamSpec {
                    name: "max_autofix".into(),
                    kind: ParamKind::Categorical { choices: vec![json!(1), json!(2), json!(3)] },
                },
            ],
            9,
            7,
        );
        let a = s.sample();
        assert_eq!(a, s.sample());
        for t in &a {
            let hi = t["agents.coder.temperature.hi"].as_f64().unwrap();
            assert!((0.5..=1.3).contains(&hi));
            assert!((3..=4).contains(&t["agents.coder.candidates"].as_i64().unwrap()));
        }
        let first_three: std::collections::BTreeSet<i64> = a[..3].iter().map(|t| t["max_autofix"].as_i64().unwrap()).collect();
        assert_eq!(first_three.len(), 3);
    }

    #[test]
    fn best_trial_wins_and_failures_score_zero() {
        let s = space(
            vec![ParamSpec {
                name: "max_autofix".into(),
                kind: ParamKind::Categorical { choices: vec![json!(1), json!(2), json!(3)] },
            }],
            3,
            1,
        );
        let report = sweep(&s, &SessionConfig::default(), |c| match c.max_autofix {
            1 => Err("boom".into()),
            n => Ok(SessionSummary {
                mean_best_score: n as f64 * 10.0,
                ..SessionSummary::default()
            }),
        })
        .unwrap();
        assert_eq!(report.best_config.max_autofix, 3);
        assert!(report.trials.iter().all(|t| t.objective <= report.trials[report.best].objective));
        let failed = report.trials.iter().find(|t| t.error.is_some()).unwrap();
        assert_eq!(failed.objective, 0.0);
        let single = sweep(&space(vec![], 1, 0), &SessionConfig::default(), |_| Ok(SessionSummary::default())).unwrap();
        assert_eq!(single.best, 0);
        assert!(sweep(&space(vec![], 0, 0), &SessionConfig::default(), |_| Ok(SessionSummary::default())).is_err());
    }
}

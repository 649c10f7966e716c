//! Effective run configuration, persisted verbatim as `config.json`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::de::DEConfig;
use crate::fitness::EvalBudget;
use crate::ga::GAConfig;
use crate::hyperspace::{Domain, SpaceSpec, SPACE_DOC_VERSION};
use crate::worker::WorkerPolicy;

pub const CONTINUOUS_TEMPLATE: &str = "continuous-box";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    De,
    Ga,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::De => "de",
            Algorithm::Ga => "ga",
        })
    }
}

/// Evaluator selector: `surrogate`, `sphere`, `rastrigin` or
/// `worker:<command line>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EvaluatorSpec {
    Surrogate,
    Sphere,
    Rastrigin,
    Worker(Vec<String>),
}

impl EvaluatorSpec {
    pub fn is_continuous(&self) -> bool {
        matches!(self, EvaluatorSpec::Sphere | EvaluatorSpec::Rastrigin)
    }
}

impl FromStr for EvaluatorSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "surrogate" => Ok(EvaluatorSpec::Surrogate),
            "sphere" => Ok(EvaluatorSpec::Sphere),
            "rastrigin" => Ok(EvaluatorSpec::Rastrigin),
            _ => match s.strip_prefix("worker:") {
                Some(cmd) => {
                    let argv: Vec<String> = cmd.split_whitespace().map(str::to_owned).collect();
                    if argv.is_empty() {
                        Err("worker evaluator needs a command after `worker:`".into())
                    } else {
                        Ok(EvaluatorSpec::Worker(argv))
                    }
                }
                None => Err(format!(
                    "unknown evaluator `{s}` (expected surrogate, sphere, rastrigin or worker:<command>)"
                )),
            },
        }
    }
}

impl fmt::Display for EvaluatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvaluatorSpec::Surrogate => f.write_str("surrogate"),
            EvaluatorSpec::Sphere => f.write_str("sphere"),
            EvaluatorSpec::Rastrigin => f.write_str("rastrigin"),
            EvaluatorSpec::Worker(argv) => write!(f, "worker:{}", argv.join(" ")),
        }
    }
}

impl Serialize for EvaluatorSpec {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EvaluatorSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinuousConfig {
    pub dims: usize,
    /// Box is `[-bound, bound]` in every dimension.
    pub bound: f64,
}

impl Default for ContinuousConfig {
    fn default() -> Self {
        Self {
            dims: 10,
            bound: 5.12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub evaluator: EvaluatorSpec,
    pub de: DEConfig,
    pub ga: GAConfig,
    pub budget: EvalBudget,
    /// Seed of the surrogate's hidden optimum.
    pub surrogate_seed: u64,
    pub worker: WorkerPolicy,
    /// Declares worker scores reproducible so they may be cached.
    pub worker_deterministic: bool,
    /// Memoize deterministic evaluators.
    pub cache: bool,
    pub record_wallclock: bool,
    pub continuous: ContinuousConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::De,
            evaluator: EvaluatorSpec::Surrogate,
            de: DEConfig::default(),
            ga: GAConfig::default(),
            budget: EvalBudget::default(),
            surrogate_seed: 0,
            worker: WorkerPolicy::default(),
            worker_deterministic: false,
            cache: true,
            record_wallclock: true,
            continuous: ContinuousConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn seed(&self) -> u64 {
        match self.algorithm {
            Algorithm::De => self.de.seed,
            Algorithm::Ga => self.ga.seed,
        }
    }

    pub fn population_size(&self) -> usize {
        match self.algorithm {
            Algorithm::De => self.de.population_size,
            Algorithm::Ga => self.ga.population_size,
        }
    }

    pub fn max_generations(&self) -> u64 {
        match self.algorithm {
            Algorithm::De => self.de.max_generations,
            Algorithm::Ga => self.ga.max_generations,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpace {
    pub version: u32,
    pub template: String,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// What `space.json` holds: a gene space, or a real box for benchmark runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SearchSpace {
    Discrete(SpaceSpec),
    Continuous(BoxSpace),
}

impl SearchSpace {
    pub fn continuous(cfg: &ContinuousConfig) -> Self {
        SearchSpace::Continuous(BoxSpace {
            version: SPACE_DOC_VERSION,
            template: CONTINUOUS_TEMPLATE.into(),
            lower: vec![-cfg.bound; cfg.dims],
            upper: vec![cfg.bound; cfg.dims],
        })
    }

    pub fn domain(&self) -> Domain {
        match self {
            SearchSpace::Discrete(s) => s.domain(),
            SearchSpace::Continuous(b) => Domain {
                lower: b.lower.clone(),
                upper: b.upper.clone(),
                integral: false,
            },
        }
    }

    pub fn as_discrete(&self) -> Option<&SpaceSpec> {
        match self {
            SearchSpace::Discrete(s) => Some(s),
            SearchSpace::Continuous(_) => None,
        }
    }

    pub fn to_document(&self) -> String {
        match self {
            SearchSpace::Discrete(s) => s.to_document(),
            SearchSpace::Continuous(_) => {
                let mut s = serde_json::to_string_pretty(self).expect("space serializes");
                s.push('\n');
                s
            }
        }
    }
}

//! Hyperparameter search for fixed-topology CNNs: differential evolution
//! (rand/1 or layerwise donors) and a genetic-algorithm baseline.

pub mod cli;
pub mod config;
pub mod de;
pub mod engine;
pub mod fitness;
pub mod ga;
pub mod hyperspace;
pub mod runlog;
pub mod worker;

pub use config::{Algorithm, EvaluatorSpec, RunConfig, SearchSpace};
pub use de::{evolve, DEConfig, MutationScheme};
pub use engine::{Individual, Population, RunOptions, RunResult};
pub use fitness::{EvalBudget, EvalError, Evaluator, FitnessScore, Metrics};
pub use ga::{evolve_ga, GAConfig};
pub use hyperspace::{default_space, Genotype, Phenotype, SpaceSpec};

//! Differential evolution over integer-encoded (or real) genotypes.
//!
//! Two donor constructions are available. `StandardRand1` is classic
//! DE/rand/1: `v = x_r1 + F (x_r2 - x_r3)`. `Layerwise` is the per-dimension
//! variant for categorical genes: each component is copied from `x_r1` with
//! probability `F` and otherwise set to `|x_r2 - x_r3|`. Both are followed by
//! boundary repair, binomial crossover and greedy `<=` selection.
//!
//! The generational loop is synchronous: every trial of generation `g` is
//! built from the generation `g - 1` population, the trials are evaluated as
//! one batch and selection runs after the batch joins.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{
    stream_rng, Checkpoint, EngineError, GenerationSink, Individual, Population, Problem,
    RunOptions, RunResult, RunState,
};
use crate::hyperspace::{Domain, Genotype};
use crate::worker::EvalPhase;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutationScheme {
    StandardRand1,
    Layerwise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DEConfig {
    pub population_size: usize,
    pub max_generations: u64,
    pub scale_factor: f64,
    pub crossover_rate: f64,
    pub mutation_scheme: MutationScheme,
    pub seed: u64,
}

impl Default for DEConfig {
    fn default() -> Self {
        Self {
            population_size: 10,
            max_generations: 10,
            scale_factor: 0.6,
            crossover_rate: 0.9,
            mutation_scheme: MutationScheme::StandardRand1,
            seed: 0,
        }
    }
}

impl DEConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.population_size < 4 {
            return Err(EngineError::Config(format!(
                "population size {} is below 4",
                self.population_size
            )));
        }
        if self.max_generations == 0 {
            return Err(EngineError::Config("max_generations must be positive".into()));
        }
        if !(self.scale_factor > 0.0 && self.scale_factor <= 1.0) {
            return Err(EngineError::Config(format!(
                "scale factor {} outside (0, 1]",
                self.scale_factor
            )));
        }
        if !(0.0..=1.0).contains(&self.crossover_rate) {
            return Err(EngineError::Config(format!(
                "crossover rate {} outside [0, 1]",
                self.crossover_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum DeError {
    #[error("population of {0} is too small; mutation needs at least 4 members")]
    PopulationTooSmall(usize),
    #[error("no pair x_r2 != x_r3 found for target {target} after {attempts} draws")]
    Degenerate { target: usize, attempts: usize },
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("individual has no fitness")]
    MissingFitness,
}

/// N genotypes drawn uniformly from the domain, slot `i` from stream `(0, i)`.
pub fn init_population(domain: &Domain, size: usize, seed: u64) -> Population {
    Population {
        individuals: (0..size)
            .map(|i| Individual::new(domain.sample(&mut stream_rng(seed, 0, i as u64))))
            .collect(),
        generation: 0,
    }
}

/// Three distinct indices, all different from `target`.
pub fn pick_three<R: Rng + ?Sized>(n: usize, target: usize, rng: &mut R) -> [usize; 3] {
    let picked = sample(rng, n - 1, 3);
    let shift = |k: usize| if k >= target { k + 1 } else { k };
    [shift(picked.index(0)), shift(picked.index(1)), shift(picked.index(2))]
}

fn check_size(pop: &Population) -> Result<(), DeError> {
    if pop.len() < 4 {
        Err(DeError::PopulationTooSmall(pop.len()))
    } else {
        Ok(())
    }
}

/// DE/rand/1 donor, repaired into the domain.
pub fn mutate_rand1<R: Rng + ?Sized>(
    pop: &Population,
    target: usize,
    scale: f64,
    domain: &Domain,
    rng: &mut R,
) -> Result<Genotype, DeError> {
    check_size(pop)?;
    let [r1, r2, r3] = pick_three(pop.len(), target, rng);
    let x = |r: usize| &pop.individuals[r].genotype.0;
    let donor: Vec<f64> = x(r1)
        .iter()
        .zip(x(r2).iter().zip(x(r3)))
        .map(|(&a, (&b, &c))| a + scale * (b - c))
        .collect();
    domain
        .repair(&Genotype(donor))
        .map_err(|_| DeError::DimensionMismatch(domain.dimension(), pop.individuals[r1].genotype.len()))
}

/// Per-dimension donor: `x_r1[j]` when a fresh uniform `r <= F`, otherwise
/// `|x_r2[j] - x_r3[j]|`. Requires `x_r2 != x_r3`; the index triple is
/// redrawn up to `N^2` times before giving up.
pub fn mutate_layerwise<R: Rng + ?Sized>(
    pop: &Population,
    target: usize,
    scale: f64,
    domain: &Domain,
    rng: &mut R,
) -> Result<Genotype, DeError> {
    check_size(pop)?;
    let n = pop.len();
    let max_attempts = n * n;
    let x = |r: usize| &pop.individuals[r].genotype.0;
    let mut triple = None;
    for _ in 0..max_attempts {
        let t = pick_three(n, target, rng);
        if x(t[1]) != x(t[2]) {
            triple = Some(t);
            break;
        }
    }
    let [r1, r2, r3] = triple.ok_or(DeError::Degenerate {
        target,
        attempts: max_attempts,
    })?;
    let donor: Vec<f64> = (0..x(r1).len())
        .map(|j| {
            let r: f64 = rng.random();
            if r <= scale {
                x(r1)[j]
            } else {
                (x(r2)[j] - x(r3)[j]).abs()
            }
        })
        .collect();
    domain
        .repair(&Genotype(donor))
        .map_err(|_| DeError::DimensionMismatch(domain.dimension(), x(r1).len()))
}

/// Binomial crossover with one forced donor dimension `delta`, drawn before
/// the per-dimension coin flips. Every dimension consumes one uniform draw.
pub fn crossover_binomial<R: Rng + ?Sized>(
    target: &Genotype,
    donor: &Genotype,
    rate: f64,
    rng: &mut R,
) -> Result<Genotype, DeError> {
    if target.len() != donor.len() {
        return Err(DeError::DimensionMismatch(target.len(), donor.len()));
    }
    let delta = rng.random_range(0..target.len());
    Ok(Genotype(
        target
            .0
            .iter()
            .zip(&donor.0)
            .enumerate()
            .map(|(j, (&t, &v))| {
                let u: f64 = rng.random();
                if u <= rate || j == delta {
                    v
                } else {
                    t
                }
            })
            .collect(),
    ))
}

/// Greedy selection; the trial wins ties.
pub fn select(target: &Individual, trial: &Individual) -> Result<Individual, DeError> {
    match (target.fitness, trial.fitness) {
        (Some(ft), Some(fu)) if ft <= fu => Ok(trial.clone()),
        (Some(_), Some(_)) => Ok(target.clone()),
        _ => Err(DeError::MissingFitness),
    }
}

pub fn evolve(
    problem: &dyn Problem,
    cfg: &DEConfig,
    opts: &RunOptions,
    sink: &mut dyn GenerationSink,
) -> Result<RunResult, EngineError> {
    evolve_from(problem, cfg, opts, sink, None)
}

/// Runs (or continues, given a checkpoint) up to `cfg.max_generations`.
pub fn evolve_from(
    problem: &dyn Problem,
    cfg: &DEConfig,
    opts: &RunOptions,
    sink: &mut dyn GenerationSink,
    checkpoint: Option<Checkpoint>,
) -> Result<RunResult, EngineError> {
    cfg.validate()?;
    let domain = problem.domain().clone();
    let mut state = RunState::new(problem, opts, sink);
    let mut pop = match checkpoint {
        Some(cp) => state.restore(cp, cfg.population_size)?,
        None => state.initialize(cfg.population_size, cfg.seed)?,
    };

    while pop.generation < cfg.max_generations {
        let generation = pop.generation + 1;
        let mut trial_slots = Vec::with_capacity(pop.len());
        let mut trials = Vec::with_capacity(pop.len());
        for i in 0..pop.len() {
            let mut rng = stream_rng(cfg.seed, generation, i as u64);
            let donor = match cfg.mutation_scheme {
                MutationScheme::StandardRand1 => {
                    mutate_rand1(&pop, i, cfg.scale_factor, &domain, &mut rng)
                }
                MutationScheme::Layerwise => {
                    mutate_layerwise(&pop, i, cfg.scale_factor, &domain, &mut rng)
                }
            };
            let donor = match donor {
                Ok(d) => d,
                Err(DeError::Degenerate { .. }) => {
                    // The other members are all identical: no difference
                    // vector exists, so the target carries over unchanged.
                    log::debug!("generation {generation} slot {i}: degenerate population, target kept");
                    continue;
                }
                Err(e) => return Err(EngineError::Config(e.to_string())),
            };
            let trial = crossover_binomial(&pop.individuals[i].genotype, &donor, cfg.crossover_rate, &mut rng)
                .map_err(|e| EngineError::Config(e.to_string()))?;
            debug_assert!(domain.contains(&trial));
            trial_slots.push(i);
            trials.push(trial);
        }

        let mut next = pop.clone();
        next.generation = generation;
        let results = state.evaluate(&trials);
        for ((i, trial), (id, result)) in trial_slots.into_iter().zip(trials).zip(results) {
            match result {
                Ok(score) => {
                    let trial = Individual {
                        genotype: trial,
                        fitness: Some(score.value),
                        metrics: score.metrics,
                        eval_id: Some(id),
                    };
                    next.individuals[i] = select(&pop.individuals[i], &trial)
                        .map_err(|e| EngineError::Config(e.to_string()))?;
                }
                // Failed trial: the target survives unchanged.
                Err(err) => state.fail(generation, i, EvalPhase::Trial, &err),
            }
        }
        pop = next;
        state.complete_generation(&pop)?;
    }

    let config = serde_json::to_value(cfg).expect("config serializes");
    Ok(state.into_result("de", config, pop))
}

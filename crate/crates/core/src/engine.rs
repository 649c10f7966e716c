//! Machinery shared by the DE and GA drivers: individuals and populations,
//! the problem abstraction, seeded stream splitting, batched (optionally
//! parallel) evaluation, failure handling and per-generation bookkeeping.

use std::error::Error as StdError;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fitness::{EvalBudget, EvalError, Evaluator, FitnessScore, Metrics};
use crate::hyperspace::{Domain, Genotype, Phenotype, SpaceError, SpaceSpec};
use crate::worker::{eval_failure_policy, EvalPhase, FailureAction};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub genotype: Genotype,
    #[serde(default)]
    pub fitness: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Metrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_id: Option<u64>,
}

impl Individual {
    pub fn new(genotype: Genotype) -> Self {
        Self {
            genotype,
            fitness: None,
            metrics: None,
            eval_id: None,
        }
    }

    pub fn with_fitness(genotype: Genotype, fitness: f64) -> Self {
        Self {
            fitness: Some(fitness),
            ..Self::new(genotype)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub individuals: Vec<Individual>,
    pub generation: u64,
}

impl Population {
    pub fn len(&self) -> usize {
        self.individuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.individuals.is_empty()
    }

    /// Highest-fitness member; the lowest index wins ties.
    pub fn best(&self) -> Option<&Individual> {
        self.individuals
            .iter()
            .filter(|ind| ind.fitness.is_some())
            .fold(None, |best: Option<&Individual>, ind| match best {
                Some(b) if b.fitness >= ind.fitness => Some(b),
                _ => Some(ind),
            })
    }

    pub fn mean_fitness(&self) -> f64 {
        let vals: Vec<f64> = self.individuals.iter().filter_map(|i| i.fitness).collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// What the drivers optimize: a repair domain plus a scoring function over
/// genotypes.
pub trait Problem: Sync {
    fn domain(&self) -> &Domain;

    fn evaluate(&self, g: &Genotype) -> Result<FitnessScore, EvalError>;

    fn space(&self) -> Option<&SpaceSpec> {
        None
    }

    fn decode(&self, g: &Genotype) -> Option<Phenotype> {
        self.space().and_then(|s| s.decode(g).ok())
    }
}

/// A discrete space scored through an [`Evaluator`] on decoded phenotypes.
pub struct SpaceProblem<'a> {
    space: &'a SpaceSpec,
    domain: Domain,
    evaluator: &'a dyn Evaluator,
    budget: EvalBudget,
}

impl<'a> SpaceProblem<'a> {
    pub fn new(space: &'a SpaceSpec, evaluator: &'a dyn Evaluator, budget: EvalBudget) -> Self {
        Self {
            space,
            domain: space.domain(),
            evaluator,
            budget,
        }
    }
}

impl Problem for SpaceProblem<'_> {
    fn domain(&self) -> &Domain {
        &self.domain
    }

    fn evaluate(&self, g: &Genotype) -> Result<FitnessScore, EvalError> {
        let p = self.space.decode(g)?;
        self.evaluator.evaluate(&p, &self.budget)
    }

    fn space(&self) -> Option<&SpaceSpec> {
        Some(self.space)
    }
}

pub type Objective = fn(&[f64]) -> Result<FitnessScore, EvalError>;

/// A real box scored directly on the raw vector (benchmark mode; no rounding).
pub struct BoxProblem {
    domain: Domain,
    objective: Objective,
}

impl BoxProblem {
    pub fn new(domain: Domain, objective: Objective) -> Self {
        Self { domain, objective }
    }
}

impl Problem for BoxProblem {
    fn domain(&self) -> &Domain {
        &self.domain
    }

    fn evaluate(&self, g: &Genotype) -> Result<FitnessScore, EvalError> {
        (self.objective)(g.values())
    }
}

/// Child stream for `(generation, slot)`. Generation 0 is initialization.
/// Each individual's operator draws come from its own stream, so evaluation
/// order and parallelism never shift them, and a run resumed at generation
/// `g` replays exactly.
pub fn stream_rng(seed: u64, generation: u64, slot: u64) -> ChaCha8Rng {
    debug_assert!(slot < 1 << 32 && generation < 1 << 32);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((generation << 32) | slot);
    rng
}

/// Scores `genotypes` with up to `parallelism` concurrent jobs. Results come
/// back in input order.
pub fn evaluate_batch(
    problem: &dyn Problem,
    genotypes: &[Genotype],
    parallelism: usize,
) -> Vec<Result<FitnessScore, EvalError>> {
    let score = |g: &Genotype| {
        problem.evaluate(g).and_then(|s| {
            if s.value.is_finite() {
                Ok(s)
            } else {
                Err(EvalError::NonFiniteFitness(s.value))
            }
        })
    };
    let workers = parallelism.max(1).min(genotypes.len());
    if workers <= 1 {
        return genotypes.iter().map(score).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<FitnessScore, EvalError>>>> =
        Mutex::new(vec![None; genotypes.len()]);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                let Some(g) = genotypes.get(k) else { break };
                let r = score(g);
                slots.lock().unwrap()[k] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every job joined"))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: u64,
    pub best_fitness: f64,
    pub mean_fitness: f64,
    /// Evaluation requests issued so far, failures included.
    pub evaluations: u64,
    pub wallclock_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub generation: u64,
    pub slot: usize,
    pub phase: EvalPhase,
    pub message: String,
}

/// Receives each completed generation (population after selection).
pub trait GenerationSink {
    fn record(
        &mut self,
        population: &Population,
        record: &GenerationRecord,
        failures: &[FailureRecord],
        best: &Individual,
    ) -> Result<(), Box<dyn StdError + Send + Sync>>;
}

/// Discards everything.
pub struct NullSink;

impl GenerationSink for NullSink {
    fn record(
        &mut self,
        _: &Population,
        _: &GenerationRecord,
        _: &[FailureRecord],
        _: &Individual,
    ) -> Result<(), Box<dyn StdError + Send + Sync>> {
        Ok(())
    }
}

/// Enough state to continue a run after its last completed generation.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub population: Population,
    pub best: Individual,
    pub evaluations: u64,
    pub history: Vec<GenerationRecord>,
    pub failures: Vec<FailureRecord>,
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub parallelism: usize,
    /// When false, `wallclock_secs` is recorded as 0 so histories are
    /// byte-reproducible.
    pub record_wallclock: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            parallelism: 1,
            record_wallclock: true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunResult {
    pub algorithm: String,
    pub best: Individual,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_phenotype: Option<Phenotype>,
    pub history: Vec<GenerationRecord>,
    pub evaluations: u64,
    pub failures: Vec<FailureRecord>,
    pub final_population: Population,
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub space: Option<SpaceSpec>,
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("initialization of slot {slot} failed {attempts} times, last error: {last}")]
    InitAborted {
        slot: usize,
        attempts: u32,
        last: EvalError,
    },
    #[error("checkpoint does not fit this run: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error("run log: {0}")]
    Sink(Box<dyn StdError + Send + Sync>),
}

/// Bookkeeping for one run: evaluation ids, history, failures, best-so-far
/// and the clock.
pub(crate) struct RunState<'a> {
    pub problem: &'a dyn Problem,
    opts: &'a RunOptions,
    sink: &'a mut dyn GenerationSink,
    pub evaluations: u64,
    pub history: Vec<GenerationRecord>,
    pub failures: Vec<FailureRecord>,
    /// Failures since the last completed generation.
    unreported: Vec<FailureRecord>,
    pub best: Option<Individual>,
    started: Instant,
    elapsed_offset: f64,
}

impl<'a> RunState<'a> {
    pub fn new(
        problem: &'a dyn Problem,
        opts: &'a RunOptions,
        sink: &'a mut dyn GenerationSink,
    ) -> Self {
        Self {
            problem,
            opts,
            sink,
            evaluations: 0,
            history: Vec::new(),
            failures: Vec::new(),
            unreported: Vec::new(),
            best: None,
            started: Instant::now(),
            elapsed_offset: 0.0,
        }
    }

    /// Restores counters from a checkpoint and returns its population.
    pub fn restore(&mut self, cp: Checkpoint, expected_size: usize) -> Result<Population, EngineError> {
        if cp.population.len() != expected_size {
            return Err(EngineError::Checkpoint(format!(
                "population has {} members, configuration expects {expected_size}",
                cp.population.len()
            )));
        }
        let domain = self.problem.domain();
        for ind in &cp.population.individuals {
            if !domain.contains(&ind.genotype) || ind.fitness.is_none() {
                return Err(EngineError::Checkpoint(
                    "population member out of range or unevaluated".into(),
                ));
            }
        }
        self.evaluations = cp.evaluations;
        self.elapsed_offset = cp.history.last().map_or(0.0, |r| r.wallclock_secs);
        self.history = cp.history;
        self.failures = cp.failures;
        self.best = Some(cp.best);
        Ok(cp.population)
    }

    /// Scores a batch, assigning evaluation ids in input order.
    pub fn evaluate(&mut self, genotypes: &[Genotype]) -> Vec<(u64, Result<FitnessScore, EvalError>)> {
        let first = self.evaluations + 1;
        self.evaluations += genotypes.len() as u64;
        evaluate_batch(self.problem, genotypes, self.opts.parallelism)
            .into_iter()
            .enumerate()
            .map(|(k, r)| (first + k as u64, r))
            .collect()
    }

    /// Samples and evaluates `n` individuals from the generation-0 streams,
    /// resampling failed slots as the failure policy dictates.
    pub fn initialize(&mut self, n: usize, seed: u64) -> Result<Population, EngineError> {
        let domain = self.problem.domain().clone();
        let mut rngs: Vec<ChaCha8Rng> = (0..n).map(|i| stream_rng(seed, 0, i as u64)).collect();
        let mut genotypes: Vec<Genotype> = rngs.iter_mut().map(|r| domain.sample(r)).collect();
        let mut done: Vec<Option<Individual>> = vec![None; n];
        let mut attempts = vec![0u32; n];
        let mut failures = Vec::new();
        loop {
            let pending: Vec<usize> = (0..n).filter(|&i| done[i].is_none()).collect();
            if pending.is_empty() {
                break;
            }
            let batch: Vec<Genotype> = pending.iter().map(|&i| genotypes[i].clone()).collect();
            for (&i, (id, result)) in pending.iter().zip(self.evaluate(&batch)) {
                attempts[i] += 1;
                match result {
                    Ok(score) => {
                        done[i] = Some(Individual {
                            genotype: genotypes[i].clone(),
                            fitness: Some(score.value),
                            metrics: score.metrics,
                            eval_id: Some(id),
                        });
                    }
                    Err(err) => {
                        log::warn!("initial evaluation of slot {i} failed (attempt {}): {err}", attempts[i]);
                        failures.push(FailureRecord {
                            generation: 0,
                            slot: i,
                            phase: EvalPhase::Initialization,
                            message: err.to_string(),
                        });
                        match eval_failure_policy(EvalPhase::Initialization, attempts[i]) {
                            FailureAction::Resample => genotypes[i] = domain.sample(&mut rngs[i]),
                            FailureAction::Abort | FailureAction::KeepTarget => {
                                return Err(EngineError::InitAborted {
                                    slot: i,
                                    attempts: attempts[i],
                                    last: err,
                                })
                            }
                        }
                    }
                }
            }
        }
        self.failures.extend(failures.iter().cloned());
        self.unreported.extend(failures);
        let population = Population {
            individuals: done.into_iter().map(|d| d.expect("all slots evaluated")).collect(),
            generation: 0,
        };
        self.best = population.best().cloned();
        Ok(population)
    }

    pub fn fail(&mut self, generation: u64, slot: usize, phase: EvalPhase, err: &EvalError) {
        log::warn!("generation {generation} slot {slot}: {phase:?} evaluation failed: {err}");
        let rec = FailureRecord {
            generation,
            slot,
            phase,
            message: err.to_string(),
        };
        self.failures.push(rec.clone());
        self.unreported.push(rec);
    }

    /// Records a completed generation and forwards it to the sink.
    pub fn complete_generation(&mut self, population: &Population) -> Result<(), EngineError> {
        let generation_best = population.best().expect("population is evaluated").clone();
        match &self.best {
            Some(b) if b.fitness >= generation_best.fitness => {}
            _ => self.best = Some(generation_best.clone()),
        }
        let wallclock_secs = if self.opts.record_wallclock {
            self.elapsed_offset + self.started.elapsed().as_secs_f64()
        } else {
            0.0
        };
        let record = GenerationRecord {
            generation: population.generation,
            best_fitness: generation_best.fitness.unwrap(),
            mean_fitness: population.mean_fitness(),
            evaluations: self.evaluations,
            wallclock_secs,
        };
        log::info!(
            "generation {} best {:.6} mean {:.6}",
            record.generation,
            record.best_fitness,
            record.mean_fitness
        );
        self.sink
            .record(population, &record, &self.unreported, self.best.as_ref().unwrap())
            .map_err(EngineError::Sink)?;
        self.unreported.clear();
        self.history.push(record);
        Ok(())
    }

    pub fn into_result(self, algorithm: &str, config: serde_json::Value, population: Population) -> RunResult {
        let best = self.best.expect("run evaluated at least one individual");
        RunResult {
            algorithm: algorithm.to_owned(),
            best_phenotype: self.problem.decode(&best.genotype),
            best,
            history: self.history,
            evaluations: self.evaluations,
            failures: self.failures,
            final_population: population,
            config,
            space: self.problem.space().cloned(),
        }
    }
}

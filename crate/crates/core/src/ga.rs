//! Simple generational GA baseline: tournament selection, one-point
//! crossover, uniform-reset mutation and elitism, over the same genotypes,
//! evaluators and logging as DE.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{
    stream_rng, Checkpoint, EngineError, GenerationSink, Individual, Population, Problem,
    RunOptions, RunResult, RunState,
};
use crate::hyperspace::{Domain, Genotype};
use crate::worker::EvalPhase;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GAConfig {
    pub population_size: usize,
    pub max_generations: u64,
    pub crossover_prob: f64,
    pub mutation_prob: f64,
    pub tournament_size: usize,
    pub elitism_count: usize,
    pub seed: u64,
}

impl Default for GAConfig {
    fn default() -> Self {
        Self {
            population_size: 15,
            max_generations: 10,
            crossover_prob: 0.9,
            mutation_prob: 0.1,
            tournament_size: 3,
            elitism_count: 1,
            seed: 0,
        }
    }
}

impl GAConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let err = |m: String| Err(EngineError::Config(m));
        if self.population_size == 0 || self.max_generations == 0 || self.tournament_size == 0 {
            return err("population size, generations and tournament size must be positive".into());
        }
        if self.elitism_count >= self.population_size {
            return err(format!(
                "elitism count {} must be below population size {}",
                self.elitism_count, self.population_size
            ));
        }
        if self.tournament_size > self.population_size {
            return err(format!(
                "tournament size {} exceeds population size {}",
                self.tournament_size, self.population_size
            ));
        }
        for (name, p) in [("crossover", self.crossover_prob), ("mutation", self.mutation_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return err(format!("{name} probability {p} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GaError {
    #[error("cannot select from an empty population")]
    EmptyPopulation,
    #[error("tournament member has no fitness")]
    MissingFitness,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("one-point crossover needs at least 2 genes, got {0}")]
    TooShort(usize),
}

/// Best of `k` members drawn uniformly with replacement; the earliest draw
/// wins fitness ties.
pub fn tournament_select<'p, R: Rng + ?Sized>(
    pop: &'p Population,
    k: usize,
    rng: &mut R,
) -> Result<&'p Individual, GaError> {
    if pop.is_empty() {
        return Err(GaError::EmptyPopulation);
    }
    let mut best: Option<&Individual> = None;
    for _ in 0..k.max(1) {
        let cand = &pop.individuals[rng.random_range(0..pop.len())];
        let f = cand.fitness.ok_or(GaError::MissingFitness)?;
        if best.is_none_or(|b| f > b.fitness.unwrap()) {
            best = Some(cand);
        }
    }
    Ok(best.unwrap())
}

/// With probability `prob`, swaps suffixes after a cut `c` uniform in
/// `1..d`; otherwise returns copies of the parents.
pub fn one_point_crossover<R: Rng + ?Sized>(
    a: &Genotype,
    b: &Genotype,
    prob: f64,
    rng: &mut R,
) -> Result<(Genotype, Genotype), GaError> {
    if a.len() != b.len() {
        return Err(GaError::DimensionMismatch(a.len(), b.len()));
    }
    let d = a.len();
    if d < 2 {
        return Err(GaError::TooShort(d));
    }
    let apply = rng.random::<f64>() < prob;
    if !apply {
        return Ok((a.clone(), b.clone()));
    }
    let cut = rng.random_range(1..d);
    let child = |x: &Genotype, y: &Genotype| {
        Genotype(x.0[..cut].iter().chain(&y.0[cut..]).copied().collect())
    };
    Ok((child(a, b), child(b, a)))
}

/// Each component is independently redrawn from its range with
/// probability `p`.
pub fn mutate_reset<R: Rng + ?Sized>(g: &Genotype, domain: &Domain, p: f64, rng: &mut R) -> Genotype {
    Genotype(
        g.0.iter()
            .enumerate()
            .map(|(j, &v)| {
                if rng.random::<f64>() < p {
                    domain.sample_component(j, rng)
                } else {
                    v
                }
            })
            .collect(),
    )
}

pub fn evolve_ga(
    problem: &dyn Problem,
    cfg: &GAConfig,
    opts: &RunOptions,
    sink: &mut dyn GenerationSink,
) -> Result<RunResult, EngineError> {
    evolve_ga_from(problem, cfg, opts, sink, None)
}

/// Breeding for generation `g` draws from stream `(g, 0)`. Children whose
/// evaluation fails are replaced by the previous occupant of their slot.
pub fn evolve_ga_from(
    problem: &dyn Problem,
    cfg: &GAConfig,
    opts: &RunOptions,
    sink: &mut dyn GenerationSink,
    checkpoint: Option<Checkpoint>,
) -> Result<RunResult, EngineError> {
    cfg.validate()?;
    let domain = problem.domain().clone();
    let n = cfg.population_size;
    let mut state = RunState::new(problem, opts, sink);
    let mut pop = match checkpoint {
        Some(cp) => state.restore(cp, n)?,
        None => state.initialize(n, cfg.seed)?,
    };
    let internal = |e: GaError| EngineError::Config(e.to_string());

    while pop.generation < cfg.max_generations {
        let generation = pop.generation + 1;
        let mut rng = stream_rng(cfg.seed, generation, 0);

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            pop.individuals[b]
                .fitness
                .partial_cmp(&pop.individuals[a].fitness)
                .expect("finite fitness")
        });
        let elites: Vec<Individual> = order[..cfg.elitism_count]
            .iter()
            .map(|&i| pop.individuals[i].clone())
            .collect();

        let mut children = Vec::with_capacity(n - elites.len());
        while children.len() < n - elites.len() {
            let a = tournament_select(&pop, cfg.tournament_size, &mut rng).map_err(internal)?;
            let b = tournament_select(&pop, cfg.tournament_size, &mut rng).map_err(internal)?;
            let (c1, c2) = if domain.dimension() >= 2 {
                one_point_crossover(&a.genotype, &b.genotype, cfg.crossover_prob, &mut rng)
                    .map_err(internal)?
            } else {
                (a.genotype.clone(), b.genotype.clone())
            };
            children.push(mutate_reset(&c1, &domain, cfg.mutation_prob, &mut rng));
            if children.len() < n - elites.len() {
                children.push(mutate_reset(&c2, &domain, cfg.mutation_prob, &mut rng));
            }
        }

        let results = state.evaluate(&children);
        let mut next = elites;
        for (child, (id, result)) in children.into_iter().zip(results) {
            let slot = next.len();
            match result {
                Ok(score) => next.push(Individual {
                    genotype: child,
                    fitness: Some(score.value),
                    metrics: score.metrics,
                    eval_id: Some(id),
                }),
                Err(err) => {
                    state.fail(generation, slot, EvalPhase::Trial, &err);
                    next.push(pop.individuals[slot].clone());
                }
            }
        }
        pop = Population {
            individuals: next,
            generation,
        };
        state.complete_generation(&pop)?;
    }

    let config = serde_json::to_value(cfg).expect("config serializes");
    Ok(state.into_result("ga", config, pop))
}

//! Fitness evaluation: the evaluator contract, built-in evaluators, the
//! memoizing cache wrapper and classification metrics.
//!
//! Scores are always higher-is-better. Loss-style evaluators negate.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hyperspace::{GeneKind, Phenotype, SpaceError, SpaceSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("invalid phenotype: {0}")]
    InvalidPhenotype(#[from] SpaceError),
    #[error("non-finite input component {0}")]
    NonFiniteInput(usize),
    #[error("evaluator returned non-finite fitness {0}")]
    NonFiniteFitness(f64),
    #[error("evaluation timed out after {0} s")]
    Timeout(u64),
    #[error("worker failure: {0}")]
    Worker(String),
    #[error("evaluator reported: {0}")]
    Reported(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("label vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("label vectors are empty")]
    Empty,
    #[error("label {label} is outside [0, {classes})")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("confusion matrix must be square and non-empty")]
    BadConfusion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitnessScore {
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Metrics>,
}

impl FitnessScore {
    pub fn new(value: f64) -> Self {
        Self {
            value,
            metrics: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EvalBudget {
    pub epochs: u32,
    pub seed: u64,
}

impl Default for EvalBudget {
    fn default() -> Self {
        Self { epochs: 1, seed: 0 }
    }
}

/// Anything that can score a phenotype.
pub trait Evaluator: Send + Sync {
    fn evaluate(&self, p: &Phenotype, budget: &EvalBudget) -> Result<FitnessScore, EvalError>;

    /// Identical `(p, budget)` always yields a bitwise-identical score.
    fn is_deterministic(&self) -> bool;

    fn name(&self) -> &str;
}

/// Confusion matrix (rows true, columns predicted) with derived statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub confusion: Vec<Vec<u64>>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl Metrics {
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Result<Self, MetricsError> {
        let k = confusion.len();
        if k == 0 || confusion.iter().any(|row| row.len() != k) {
            return Err(MetricsError::BadConfusion);
        }
        let total: u64 = confusion.iter().flatten().sum();
        let trace: u64 = (0..k).map(|c| confusion[c][c]).sum();
        let mut precision = Vec::with_capacity(k);
        let mut recall = Vec::with_capacity(k);
        let mut f1 = Vec::with_capacity(k);
        for c in 0..k {
            let tp = confusion[c][c];
            let predicted: u64 = confusion.iter().map(|row| row[c]).sum();
            let actual: u64 = confusion[c].iter().sum();
            let p = ratio(tp, predicted);
            let r = ratio(tp, actual);
            precision.push(p);
            recall.push(r);
            f1.push(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) });
        }
        Ok(Self {
            macro_precision: mean(&precision),
            macro_recall: mean(&recall),
            macro_f1: mean(&f1),
            accuracy: ratio(trace, total),
            confusion,
            precision,
            recall,
            f1,
        })
    }

    pub fn classes(&self) -> usize {
        self.confusion.len()
    }
}

pub fn compute_metrics(
    y_true: &[usize],
    y_pred: &[usize],
    classes: usize,
) -> Result<Metrics, MetricsError> {
    if y_true.len() != y_pred.len() {
        return Err(MetricsError::LengthMismatch(y_true.len(), y_pred.len()));
    }
    if y_true.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut confusion = vec![vec![0u64; classes]; classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if let Some(&label) = [t, p].iter().find(|&&l| l >= classes) {
            return Err(MetricsError::LabelOutOfRange { label, classes });
        }
        confusion[t][p] += 1;
    }
    Metrics::from_confusion(confusion)
}

/// Desk-scale stand-in for model training: a weighted level-proximity score
/// against a hidden target phenotype derived from `hidden_seed`. The target
/// is the unique global optimum with score exactly 1.0.
#[derive(Clone, Debug)]
pub struct SurrogateEvaluator {
    space: SpaceSpec,
    target: Vec<usize>,
    weights: Vec<f64>,
}

impl SurrogateEvaluator {
    pub fn new(space: SpaceSpec, hidden_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(hidden_seed);
        let target = space
            .genes
            .iter()
            .map(|g| rng.random_range(0..g.levels.len()))
            .collect();
        let weights = space
            .genes
            .iter()
            .map(|_| rng.random_range(0.5..1.5))
            .collect();
        Self {
            space,
            target,
            weights,
        }
    }

    pub fn target(&self) -> Phenotype {
        self.space.phenotype_from_indices(&self.target)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn score_indices(&self, idx: &[usize]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (j, gene) in self.space.genes.iter().enumerate() {
            let sim = match gene.kind {
                GeneKind::Categorical => {
                    if idx[j] == self.target[j] {
                        1.0
                    } else {
                        0.0
                    }
                }
                GeneKind::Ordinal if gene.levels.len() == 1 => 1.0,
                GeneKind::Ordinal => {
                    1.0 - idx[j].abs_diff(self.target[j]) as f64 / gene.max_index() as f64
                }
            };
            num += self.weights[j] * sim;
            den += self.weights[j];
        }
        num / den
    }
}

impl Evaluator for SurrogateEvaluator {
    fn evaluate(&self, p: &Phenotype, _budget: &EvalBudget) -> Result<FitnessScore, EvalError> {
        let g = self.space.encode(p)?;
        let idx: Vec<usize> = g.0.iter().map(|&v| v as usize).collect();
        Ok(FitnessScore::new(self.score_indices(&idx)))
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn name(&self) -> &str {
        "surrogate"
    }
}

/// Convenience form of [`SurrogateEvaluator`] for one-off scoring.
pub fn surrogate_evaluate(
    p: &Phenotype,
    space: &SpaceSpec,
    hidden_seed: u64,
) -> Result<FitnessScore, EvalError> {
    SurrogateEvaluator::new(space.clone(), hidden_seed).evaluate(p, &EvalBudget::default())
}

fn check_finite(x: &[f64]) -> Result<(), EvalError> {
    match x.iter().position(|v| !v.is_finite()) {
        Some(j) => Err(EvalError::NonFiniteInput(j)),
        None => Ok(()),
    }
}

/// Negated sphere function; maximum 0 at the origin.
pub fn sphere(x: &[f64]) -> Result<FitnessScore, EvalError> {
    check_finite(x)?;
    Ok(FitnessScore::new(-x.iter().map(|v| v * v).sum::<f64>()))
}

/// Negated Rastrigin function; maximum 0 at the origin.
pub fn rastrigin(x: &[f64]) -> Result<FitnessScore, EvalError> {
    check_finite(x)?;
    let sum: f64 = x.iter().map(|v| v * v - 10.0 * (2.0 * PI * v).cos()).sum();
    Ok(FitnessScore::new(-(10.0 * x.len() as f64 + sum)))
}

#[derive(Debug, Error)]
#[error("evaluator `{0}` is not deterministic and cannot be cached")]
pub struct NotCacheable(pub String);

/// Memoizes a deterministic evaluator. Failures are not cached.
pub struct CachedEvaluator<E> {
    inner: E,
    entries: Mutex<HashMap<String, FitnessScore>>,
    calls: AtomicU64,
    hits: AtomicU64,
}

impl<E: Evaluator> CachedEvaluator<E> {
    pub fn new(inner: E) -> Result<Self, NotCacheable> {
        if !inner.is_deterministic() {
            return Err(NotCacheable(inner.name().to_owned()));
        }
        Ok(Self {
            inner,
            entries: Mutex::new(HashMap::new()),
            calls: AtomicU64::new(0),
            hits: AtomicU64::new(0),
        })
    }

    /// Calls that reached the wrapped evaluator.
    pub fn underlying_calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }

    fn key(p: &Phenotype, budget: &EvalBudget) -> String {
        format!("{}|{}|{}", p.canonical_key(), budget.epochs, budget.seed)
    }
}

pub fn cached<E: Evaluator>(ev: E) -> Result<CachedEvaluator<E>, NotCacheable> {
    CachedEvaluator::new(ev)
}

impl<E: Evaluator> Evaluator for CachedEvaluator<E> {
    fn evaluate(&self, p: &Phenotype, budget: &EvalBudget) -> Result<FitnessScore, EvalError> {
        let key = Self::key(p, budget);
        if let Some(hit) = self.entries.lock().unwrap().get(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(hit.clone());
        }
        // Evaluated outside the lock; concurrent misses on one key may both
        // run and store identical values.
        self.calls.fetch_add(1, Ordering::Relaxed);
        let score = self.inner.evaluate(p, budget)?;
        self.entries.lock().unwrap().insert(key, score.clone());
        Ok(score)
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn name(&self) -> &str {
        self.inner.name()
    }
}

impl<E: Evaluator + ?Sized> Evaluator for &E {
    fn evaluate(&self, p: &Phenotype, budget: &EvalBudget) -> Result<FitnessScore, EvalError> {
        (**self).evaluate(p, budget)
    }

    fn is_deterministic(&self) -> bool {
        (**self).is_deterministic()
    }

    fn name(&self) -> &str {
        (**self).name()
    }
}

impl<E: Evaluator + ?Sized> Evaluator for Box<E> {
    fn evaluate(&self, p: &Phenotype, budget: &EvalBudget) -> Result<FitnessScore, EvalError> {
        (**self).evaluate(p, budget)
    }

    fn is_deterministic(&self) -> bool {
        (**self).is_deterministic()
    }

    fn name(&self) -> &str {
        (**self).name()
    }
}

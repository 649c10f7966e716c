//! Mixed categorical/ordinal search spaces and the integer genotype encoding.
//!
//! A [`SpaceSpec`] is an ordered list of genes. Each gene owns a finite list
//! of levels; a genotype stores one real-coded level index per gene. Operators
//! work on the real values, [`SpaceSpec::repair`] clamps them back into the
//! index box and [`SpaceSpec::decode`] rounds (half-up) to concrete levels.

use std::collections::HashSet;
use std::fmt;

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Number;
use thiserror::Error;

/// Version written to and required from space documents.
pub const SPACE_DOC_VERSION: u32 = 1;

/// Fixed 16-weight-layer VGG-style layout with VGG-16 pooling.
pub const VGG16_TEMPLATE: &str = "vgg16-fixed-pool";

/// Convolution layers per VGG-16 block.
const VGG16_BLOCK_DEPTHS: [usize; 5] = [2, 2, 3, 3, 3];
/// Stock VGG-16 filter counts, used when a space leaves a block's width unset.
const VGG16_BLOCK_FILTERS: [u32; 5] = [64, 128, 256, 512, 512];
const VGG16_FC_LAYERS: usize = 2;

#[derive(Clone, Debug, Error, PartialEq)]
pub enum SpaceError {
    #[error("space document parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unsupported space document version {0} (expected {SPACE_DOC_VERSION})")]
    Version(u32),
    #[error("space declares no genes")]
    NoGenes,
    #[error("duplicate gene name `{0}`")]
    DuplicateGene(String),
    #[error("gene `{0}` has no levels")]
    EmptyLevels(String),
    #[error("gene `{gene}` lists level `{level}` more than once")]
    DuplicateLevel { gene: String, level: String },
    #[error("ordinal gene `{gene}`: {reason}")]
    InvalidOrdinal { gene: String, reason: String },
    #[error("genotype has {got} components but the space has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("genotype component {index} is not finite ({value})")]
    NonFinite { index: usize, value: f64 },
    #[error("phenotype assigns unknown gene `{0}`")]
    UnknownGene(String),
    #[error("phenotype has no assignment for gene `{0}`")]
    MissingGene(String),
    #[error("`{value}` is not a level of gene `{gene}`")]
    InvalidLevel { gene: String, value: String },
}

/// One admissible gene value: a number for ordinal genes, usually text for
/// categorical ones.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Level {
    Number(Number),
    Text(String),
}

impl Level {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Level::Number(n) => n.as_f64(),
            Level::Text(_) => None,
        }
    }
}

impl PartialEq for Level {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            // 16 and 16.0 name the same level.
            (Level::Number(a), Level::Number(b)) => a.as_f64() == b.as_f64(),
            (Level::Text(a), Level::Text(b)) => a == b,
            _ => false,
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Level::Number(n) => write!(f, "{n}"),
            Level::Text(s) => f.write_str(s),
        }
    }
}

impl From<&str> for Level {
    fn from(s: &str) -> Self {
        Level::Text(s.to_owned())
    }
}

impl From<u64> for Level {
    fn from(v: u64) -> Self {
        Level::Number(v.into())
    }
}

impl From<f64> for Level {
    fn from(v: f64) -> Self {
        Level::Number(Number::from_f64(v).expect("finite level"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneKind {
    Categorical,
    Ordinal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneSpec {
    pub name: String,
    pub kind: GeneKind,
    pub levels: Vec<Level>,
    /// Template slot this gene configures, e.g. `conv_block_3.filter_size`.
    #[serde(default)]
    pub scope: String,
}

impl GeneSpec {
    pub fn categorical(name: &str, levels: &[&str]) -> Self {
        Self {
            name: name.to_owned(),
            kind: GeneKind::Categorical,
            levels: levels.iter().map(|&l| Level::from(l)).collect(),
            scope: name.to_owned(),
        }
    }

    pub fn ordinal<L: Into<Level> + Copy>(name: &str, levels: &[L]) -> Self {
        Self {
            name: name.to_owned(),
            kind: GeneKind::Ordinal,
            levels: levels.iter().map(|&l| l.into()).collect(),
            scope: name.to_owned(),
        }
    }

    pub fn with_scope(mut self, scope: &str) -> Self {
        self.scope = scope.to_owned();
        self
    }

    pub fn max_index(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn index_of(&self, value: &Level) -> Option<usize> {
        self.levels.iter().position(|l| l == value)
    }

    fn validate(&self) -> Result<(), SpaceError> {
        if self.levels.is_empty() {
            return Err(SpaceError::EmptyLevels(self.name.clone()));
        }
        for (i, level) in self.levels.iter().enumerate() {
            if self.levels[..i].contains(level) {
                return Err(SpaceError::DuplicateLevel {
                    gene: self.name.clone(),
                    level: level.to_string(),
                });
            }
        }
        if self.kind == GeneKind::Ordinal {
            let mut prev = f64::NEG_INFINITY;
            for level in &self.levels {
                let v = level.as_f64().ok_or_else(|| SpaceError::InvalidOrdinal {
                    gene: self.name.clone(),
                    reason: format!("level `{level}` is not a number"),
                })?;
                if v <= prev {
                    return Err(SpaceError::InvalidOrdinal {
                        gene: self.name.clone(),
                        reason: "levels must be strictly increasing".into(),
                    });
                }
                prev = v;
            }
        }
        Ok(())
    }
}

/// Real-coded level indices, one component per gene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Genotype(pub Vec<f64>);

impl Genotype {
    pub fn zeros(d: usize) -> Self {
        Genotype(vec![0.0; d])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for Genotype {
    fn from(v: Vec<f64>) -> Self {
        Genotype(v)
    }
}

/// A concrete hyperparameter assignment, keyed by gene name in space order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Phenotype {
    pub assignments: IndexMap<String, Level>,
}

impl Phenotype {
    pub fn get(&self, gene: &str) -> Option<&Level> {
        self.assignments.get(gene)
    }

    pub fn set(&mut self, gene: &str, value: impl Into<Level>) {
        self.assignments.insert(gene.to_owned(), value.into());
    }

    /// Canonical serialization: keys sorted, so assignment order never matters.
    pub fn canonical_key(&self) -> String {
        let sorted: std::collections::BTreeMap<&String, &Level> = self.assignments.iter().collect();
        serde_json::to_string(&sorted).expect("phenotype serializes")
    }

    /// Renders the phenotype into the template's layer list. Slots are looked
    /// up by gene scope; slots the space does not cover keep VGG-16 defaults.
    pub fn layers(&self, space: &SpaceSpec) -> Option<Vec<Layer>> {
        if space.template != VGG16_TEMPLATE {
            return None;
        }
        let by_scope: IndexMap<&str, &Level> = space
            .genes
            .iter()
            .filter_map(|g| self.get(&g.name).map(|v| (g.scope.as_str(), v)))
            .collect();
        let lookup = |keys: &[String], fallback: String| -> String {
            keys.iter()
                .find_map(|k| by_scope.get(k.as_str()).map(|v| v.to_string()))
                .unwrap_or(fallback)
        };

        let mut layers = Vec::new();
        for (b, &depth) in VGG16_BLOCK_DEPTHS.iter().enumerate() {
            let block = b + 1;
            let slot = |param: &str| {
                [
                    format!("conv_block_{block}.{param}"),
                    format!("global.{param}"),
                ]
            };
            let kernel = lookup(&slot("filter_size"), "3x3".into());
            let filters = lookup(&slot("num_filters"), VGG16_BLOCK_FILTERS[b].to_string());
            let activation = lookup(&slot("activation"), "ReLU".into());
            for _ in 0..depth {
                layers.push(Layer::Conv {
                    block,
                    kernel: kernel.clone(),
                    filters: filters.clone(),
                    activation: activation.clone(),
                });
            }
            layers.push(Layer::MaxPool { block });
        }
        layers.push(Layer::Flatten);
        for fc in 1..=VGG16_FC_LAYERS {
            let slot = |param: &str| [format!("fc_{fc}.{param}"), format!("global.{param}")];
            layers.push(Layer::Dense {
                units: lookup(&slot("num_neurons"), "4096".into()),
                activation: lookup(&slot("activation"), "ReLU".into()),
            });
            layers.push(Layer::Dropout {
                rate: lookup(&slot("dropout"), "0.5".into()),
            });
        }
        layers.push(Layer::Output {
            optimizer: lookup(&["global.optimizer".into()], "Adam".into()),
        });
        Some(layers)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "layer", rename_all = "snake_case")]
pub enum Layer {
    Conv {
        block: usize,
        kernel: String,
        filters: String,
        activation: String,
    },
    MaxPool {
        block: usize,
    },
    Flatten,
    Dense {
        units: String,
        activation: String,
    },
    Dropout {
        rate: String,
    },
    /// Softmax classifier head; the optimizer is reported here for display.
    Output {
        optimizer: String,
    },
}

impl Layer {
    /// Layers carrying trainable weights (the "16" in VGG-16).
    pub fn is_weighted(&self) -> bool {
        matches!(self, Layer::Conv { .. } | Layer::Dense { .. } | Layer::Output { .. })
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layer::Conv {
                block,
                kernel,
                filters,
                activation,
            } => write!(f, "conv{block}  {filters} filters {kernel} {activation}"),
            Layer::MaxPool { block } => write!(f, "pool{block}  max 2x2 stride 2"),
            Layer::Flatten => f.write_str("flatten"),
            Layer::Dense { units, activation } => write!(f, "dense  {units} units {activation}"),
            Layer::Dropout { rate } => write!(f, "dropout  {rate}"),
            Layer::Output { optimizer } => write!(f, "output  softmax (optimizer {optimizer})"),
        }
    }
}

/// Per-dimension box the operators repair into. Discrete spaces use the
/// integer index box `[0, levels-1]`; benchmark runs use a real box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub integral: bool,
}

impl Domain {
    pub fn continuous(dims: usize, lo: f64, hi: f64) -> Self {
        Self {
            lower: vec![lo; dims],
            upper: vec![hi; dims],
            integral: false,
        }
    }

    pub fn dimension(&self) -> usize {
        self.lower.len()
    }

    fn check(&self, g: &Genotype) -> Result<(), SpaceError> {
        if g.len() != self.dimension() {
            return Err(SpaceError::DimensionMismatch {
                expected: self.dimension(),
                got: g.len(),
            });
        }
        match g.0.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(SpaceError::NonFinite {
                index,
                value: g.0[index],
            }),
            None => Ok(()),
        }
    }

    /// Clamps every component into its bounds. In-range components are left
    /// bit-for-bit unchanged.
    pub fn repair(&self, g: &Genotype) -> Result<Genotype, SpaceError> {
        self.check(g)?;
        Ok(Genotype(
            g.0.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .map(|(&v, (&lo, &hi))| v.clamp(lo, hi))
                .collect(),
        ))
    }

    pub fn contains(&self, g: &Genotype) -> bool {
        g.len() == self.dimension()
            && g
                .0
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(&v, (&lo, &hi))| v >= lo && v <= hi)
    }

    /// Uniform draw of one component: an integer index for discrete
    /// domains, a real in `[lo, hi]` otherwise.
    pub fn sample_component<R: Rng + ?Sized>(&self, j: usize, rng: &mut R) -> f64 {
        let (lo, hi) = (self.lower[j], self.upper[j]);
        if self.integral {
            rng.random_range(lo as i64..=hi as i64) as f64
        } else {
            rng.random_range(lo..=hi)
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Genotype {
        Genotype((0..self.dimension()).map(|j| self.sample_component(j, rng)).collect())
    }
}

#[derive(Deserialize, Serialize)]
struct SpaceDocument {
    version: u32,
    template: String,
    genes: Vec<GeneSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpaceSpec {
    pub template: String,
    pub genes: Vec<GeneSpec>,
}

impl SpaceSpec {
    pub fn new(template: impl Into<String>, genes: Vec<GeneSpec>) -> Result<Self, SpaceError> {
        if genes.is_empty() {
            return Err(SpaceError::NoGenes);
        }
        let mut seen = HashSet::new();
        for gene in &genes {
            if !seen.insert(gene.name.as_str()) {
                return Err(SpaceError::DuplicateGene(gene.name.clone()));
            }
            gene.validate()?;
        }
        Ok(Self {
            template: template.into(),
            genes,
        })
    }

    pub fn dimension(&self) -> usize {
        self.genes.len()
    }

    pub fn gene(&self, name: &str) -> Option<&GeneSpec> {
        self.genes.iter().find(|g| g.name == name)
    }

    /// Number of distinct phenotypes.
    pub fn combinations(&self) -> u128 {
        self.genes.iter().map(|g| g.levels.len() as u128).product()
    }

    pub fn domain(&self) -> Domain {
        Domain {
            lower: vec![0.0; self.dimension()],
            upper: self.genes.iter().map(|g| g.max_index() as f64).collect(),
            integral: true,
        }
    }

    pub fn repair(&self, g: &Genotype) -> Result<Genotype, SpaceError> {
        self.domain().repair(g)
    }

    /// Rounds each component to the nearest index (half-up), clamps into
    /// range and returns the level indices.
    pub fn level_indices(&self, g: &Genotype) -> Result<Vec<usize>, SpaceError> {
        self.domain().check(g)?;
        Ok(g.0
            .iter()
            .zip(&self.genes)
            .map(|(&v, gene)| round_half_up(v).clamp(0.0, gene.max_index() as f64) as usize)
            .collect())
    }

    pub fn decode(&self, g: &Genotype) -> Result<Phenotype, SpaceError> {
        let indices = self.level_indices(g)?;
        Ok(self.phenotype_from_indices(&indices))
    }

    /// `indices` must be in range; used by decode and by enumeration.
    pub fn phenotype_from_indices(&self, indices: &[usize]) -> Phenotype {
        Phenotype {
            assignments: self
                .genes
                .iter()
                .zip(indices)
                .map(|(gene, &i)| (gene.name.clone(), gene.levels[i].clone()))
                .collect(),
        }
    }

    pub fn encode(&self, p: &Phenotype) -> Result<Genotype, SpaceError> {
        if let Some(unknown) = p.assignments.keys().find(|k| self.gene(k).is_none()) {
            return Err(SpaceError::UnknownGene(unknown.clone()));
        }
        self.genes
            .iter()
            .map(|gene| {
                let value = p
                    .get(&gene.name)
                    .ok_or_else(|| SpaceError::MissingGene(gene.name.clone()))?;
                gene.index_of(value)
                    .map(|i| i as f64)
                    .ok_or_else(|| SpaceError::InvalidLevel {
                        gene: gene.name.clone(),
                        value: value.to_string(),
                    })
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Genotype)
    }

    /// Checks that `p` assigns exactly the space's genes, each to a level.
    pub fn validate_phenotype(&self, p: &Phenotype) -> Result<(), SpaceError> {
        self.encode(p).map(|_| ())
    }

    pub fn to_document(&self) -> String {
        let doc = SpaceDocument {
            version: SPACE_DOC_VERSION,
            template: self.template.clone(),
            genes: self.genes.clone(),
        };
        let mut out = serde_json::to_string_pretty(&doc).expect("space serializes");
        out.push('\n');
        out
    }

    /// Enumerates every phenotype in index order (last gene fastest).
    pub fn enumerate(&self) -> impl Iterator<Item = Vec<usize>> + '_ {
        let total = self.combinations();
        (0..total).map(move |mut k| {
            let mut idx = vec![0usize; self.dimension()];
            for (j, gene) in self.genes.iter().enumerate().rev() {
                let n = gene.levels.len() as u128;
                idx[j] = (k % n) as usize;
                k /= n;
            }
            idx
        })
    }
}

impl Serialize for SpaceSpec {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        SpaceDocument {
            version: SPACE_DOC_VERSION,
            template: self.template.clone(),
            genes: self.genes.clone(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for SpaceSpec {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let doc = SpaceDocument::deserialize(deserializer)?;
        if doc.version != SPACE_DOC_VERSION {
            return Err(serde::de::Error::custom(SpaceError::Version(doc.version)));
        }
        SpaceSpec::new(doc.template, doc.genes).map_err(serde::de::Error::custom)
    }
}

fn round_half_up(v: f64) -> f64 {
    let floor = v.floor();
    if v - floor >= 0.5 {
        floor + 1.0
    } else {
        floor
    }
}

/// Parses and validates a space document.
pub fn load_space(text: &str) -> Result<SpaceSpec, SpaceError> {
    let doc: SpaceDocument = serde_json::from_str(text).map_err(|e| SpaceError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    if doc.version != SPACE_DOC_VERSION {
        return Err(SpaceError::Version(doc.version));
    }
    SpaceSpec::new(doc.template, doc.genes)
}

const FILTER_SIZES: [&str; 2] = ["3x3", "5x5"];
const FILTER_COUNTS: [u64; 6] = [16, 32, 64, 128, 256, 512];
const ACTIVATIONS: [&str; 3] = ["ReLU", "SELU", "ELU"];
const OPTIMIZERS: [&str; 4] = ["SGD", "Adam", "Adagrad", "Adamax"];
const DROPOUTS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
const NEURONS: [u64; 3] = [128, 256, 512];

/// The layer-wise default space: filter size and count per conv block,
/// global activation, optimizer and dropout, and the width of each hidden
/// FC layer (d = 15).
pub fn default_space() -> SpaceSpec {
    let mut genes = Vec::new();
    for block in 1..=VGG16_BLOCK_DEPTHS.len() {
        genes.push(GeneSpec::categorical(
            &format!("conv_block_{block}.filter_size"),
            &FILTER_SIZES,
        ));
        genes.push(GeneSpec::ordinal(
            &format!("conv_block_{block}.num_filters"),
            &FILTER_COUNTS,
        ));
    }
    genes.push(GeneSpec::categorical("global.activation", &ACTIVATIONS));
    genes.push(GeneSpec::categorical("global.optimizer", &OPTIMIZERS));
    genes.push(GeneSpec::ordinal("global.dropout", &DROPOUTS));
    for fc in 1..=VGG16_FC_LAYERS {
        genes.push(GeneSpec::ordinal(&format!("fc_{fc}.num_neurons"), &NEURONS));
    }
    SpaceSpec::new(VGG16_TEMPLATE, genes).expect("default space is valid")
}

/// Six-gene layout with one global value per hyperparameter (FS, NOF, ACT,
/// OPT, DP, NON); 2160 combinations.
pub fn compact_space() -> SpaceSpec {
    let genes = vec![
        GeneSpec::categorical("FS", &FILTER_SIZES).with_scope("global.filter_size"),
        GeneSpec::ordinal("NOF", &FILTER_COUNTS).with_scope("global.num_filters"),
        GeneSpec::categorical("ACT", &ACTIVATIONS).with_scope("global.activation"),
        GeneSpec::categorical("OPT", &OPTIMIZERS).with_scope("global.optimizer"),
        GeneSpec::ordinal("DP", &DROPOUTS).with_scope("global.dropout"),
        GeneSpec::ordinal("NON", &NEURONS).with_scope("global.num_neurons"),
    ];
    SpaceSpec::new(VGG16_TEMPLATE, genes).expect("compact space is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// 2 x 3 x 4 = 24 configurations.
    fn toy_space() -> SpaceSpec {
        SpaceSpec::new(
            "toy",
            vec![
                GeneSpec::categorical("a", &["x", "y"]),
                GeneSpec::ordinal("b", &[1u64, 2, 3]),
                GeneSpec::categorical("c", &["p", "q", "r", "s"]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn default_space_matches_table() {
        let s = default_space();
        assert_eq!(s.dimension(), 15);
        let act = s.gene("global.activation").unwrap();
        assert_eq!(act.levels, vec![Level::from("ReLU"), "SELU".into(), "ELU".into()]);
        assert_eq!(s.gene("global.optimizer").unwrap().levels.len(), 4);
        assert_eq!(s.gene("conv_block_3.num_filters").unwrap().levels.len(), 6);
        for gene in s.genes.iter().filter(|g| g.kind == GeneKind::Ordinal) {
            let vals: Vec<f64> = gene.levels.iter().map(|l| l.as_f64().unwrap()).collect();
            assert!(vals.windows(2).all(|w| w[0] < w[1]), "{}", gene.name);
        }
    }

    #[test]
    fn load_single_gene_document() {
        let doc = r#"{"version":1,"template":"t","genes":[
            {"name":"act","kind":"categorical","levels":["a","b","c"],"scope":"global.activation"}]}"#;
        let s = load_space(doc).unwrap();
        assert_eq!(s.dimension(), 1);
        assert_eq!(s.genes[0].scope, "global.activation");
    }

    #[test]
    fn load_rejects_bad_documents() {
        let dup = r#"{"version":1,"template":"t","genes":[
            {"name":"a","kind":"ordinal","levels":[1,2],"scope":""},
            {"name":"a","kind":"ordinal","levels":[1,2],"scope":""}]}"#;
        assert_eq!(load_space(dup), Err(SpaceError::DuplicateGene("a".into())));

        let empty = r#"{"version":1,"template":"t","genes":[{"name":"a","kind":"categorical","levels":[]}]}"#;
        assert_eq!(load_space(empty), Err(SpaceError::EmptyLevels("a".into())));

        let dup_level = r#"{"version":1,"template":"t","genes":[{"name":"a","kind":"ordinal","levels":[16,16.0]}]}"#;
        assert!(matches!(load_space(dup_level), Err(SpaceError::DuplicateLevel { .. })));

        let unsorted = r#"{"version":1,"template":"t","genes":[{"name":"a","kind":"ordinal","levels":[2,1]}]}"#;
        assert!(matches!(load_space(unsorted), Err(SpaceError::InvalidOrdinal { .. })));

        let v2 = r#"{"version":2,"template":"t","genes":[{"name":"a","kind":"ordinal","levels":[1]}]}"#;
        assert_eq!(load_space(v2), Err(SpaceError::Version(2)));

        let broken = "{\"version\":1,\n\"genes\": [ }";
        match load_space(broken) {
            Err(SpaceError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn default_space_round_trips_through_document() {
        let s = default_space();
        assert_eq!(load_space(&s.to_document()).unwrap(), s);
        let c = compact_space();
        assert_eq!(load_space(&c.to_document()).unwrap(), c);
        assert!(s.to_document().contains("\"version\": 1"));
    }

    #[test]
    fn decode_rounds_and_clamps() {
        let s = SpaceSpec::new(
            "t",
            vec![
                GeneSpec::ordinal("four", &[1u64, 2, 3, 4]),
                GeneSpec::categorical("three", &["a", "b", "c"]),
            ],
        )
        .unwrap();
        let p = s.decode(&Genotype(vec![2.6, -1.7])).unwrap();
        assert_eq!(p.get("four"), Some(&Level::from(4u64)));
        assert_eq!(p.get("three"), Some(&Level::from("a")));
        // half-up
        assert_eq!(s.level_indices(&Genotype(vec![0.5, 1.5])).unwrap(), vec![1, 2]);
        assert_eq!(s.level_indices(&Genotype(vec![0.49999999999999994, 1.4999])).unwrap(), vec![0, 1]);
    }

    #[test]
    fn decode_rejects_bad_input() {
        let s = toy_space();
        assert_eq!(
            s.decode(&Genotype(vec![0.0, 1.0])),
            Err(SpaceError::DimensionMismatch { expected: 3, got: 2 })
        );
        assert!(matches!(
            s.decode(&Genotype(vec![0.0, f64::NAN, 0.0])),
            Err(SpaceError::NonFinite { index: 1, .. })
        ));
        assert!(matches!(
            s.repair(&Genotype(vec![f64::INFINITY, 0.0, 0.0])),
            Err(SpaceError::NonFinite { index: 0, .. })
        ));
    }

    #[test]
    fn encode_examples() {
        let s = default_space();
        let first = s.phenotype_from_indices(&[0; 15]);
        assert_eq!(s.encode(&first).unwrap(), Genotype::zeros(15));

        let mut p = first.clone();
        p.set("global.activation", "ELU");
        let g = s.encode(&p).unwrap();
        let j = s.genes.iter().position(|g| g.name == "global.activation").unwrap();
        assert_eq!(g.0[j], 2.0);

        let mut bad = first.clone();
        bad.set("global.activation", "tanh");
        assert!(matches!(s.encode(&bad), Err(SpaceError::InvalidLevel { .. })));
        let mut extra = first.clone();
        extra.set("global.momentum", 0.9);
        assert_eq!(s.encode(&extra), Err(SpaceError::UnknownGene("global.momentum".into())));
        let mut missing = first;
        missing.assignments.shift_remove("fc_2.num_neurons");
        assert_eq!(s.encode(&missing), Err(SpaceError::MissingGene("fc_2.num_neurons".into())));
    }

    #[test]
    fn toy_space_round_trip_is_exhaustive() {
        let s = toy_space();
        let all: Vec<_> = s.enumerate().collect();
        assert_eq!(all.len(), 24);
        for idx in all {
            let p = s.phenotype_from_indices(&idx);
            assert_eq!(s.decode(&s.encode(&p).unwrap()).unwrap(), p);
        }
    }

    #[test]
    fn repair_examples() {
        let s = default_space();
        let g = Genotype(vec![1.0; 15]);
        assert_eq!(s.repair(&g).unwrap(), g);
        let j = 1; // conv_block_1.num_filters: 6 levels
        let mut over = Genotype::zeros(15);
        over.0[j] = 7.2;
        assert_eq!(s.repair(&over).unwrap().0[j], 5.0);
    }

    #[test]
    fn vgg_template_has_sixteen_weight_layers() {
        for s in [default_space(), compact_space()] {
            let p = s.phenotype_from_indices(&vec![1; s.dimension()]);
            let layers = p.layers(&s).unwrap();
            assert_eq!(layers.iter().filter(|l| l.is_weighted()).count(), 16);
            assert_eq!(layers.iter().filter(|l| matches!(l, Layer::MaxPool { .. })).count(), 5);
        }
        let c = compact_space();
        let mut p = c.phenotype_from_indices(&[0; 6]);
        p.set("ACT", "ELU");
        let layers = p.layers(&c).unwrap();
        assert!(layers.iter().all(|l| match l {
            Layer::Conv { activation, .. } => activation == "ELU",
            _ => true,
        }));
    }

    proptest! {
        #[test]
        fn repair_is_idempotent_and_in_range(values in proptest::collection::vec(-20.0f64..20.0, 15)) {
            let s = default_space();
            let once = s.repair(&Genotype(values.clone())).unwrap();
            prop_assert_eq!(s.repair(&once).unwrap(), once.clone());
            prop_assert!(s.domain().contains(&once));
            for (v, r) in values.iter().zip(&once.0) {
                if s.domain().contains(&Genotype(vec![*v; 15])) { prop_assert_eq!(v, r); }
            }
        }

        #[test]
        fn default_space_round_trip(seed_idx in proptest::collection::vec(0usize..6, 15)) {
            let s = default_space();
            let idx: Vec<usize> = seed_idx.iter().zip(&s.genes).map(|(i, g)| i % g.levels.len()).collect();
            let p = s.phenotype_from_indices(&idx);
            prop_assert_eq!(s.decode(&s.encode(&p).unwrap()).unwrap(), p);
        }

        #[test]
        fn decode_ignores_sub_half_perturbations(idx in proptest::collection::vec(0usize..2, 15), eps in -0.49f64..0.49) {
            let s = default_space();
            let g = Genotype(idx.iter().map(|&i| i as f64).collect());
            let shifted = Genotype(g.0.iter().map(|v| v + eps).collect());
            prop_assert_eq!(s.decode(&shifted).unwrap(), s.decode(&g).unwrap());
        }
    }
}

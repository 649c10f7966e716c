//! Run directories: persistence, resume and reports.
//!
//! ```text
//! <run>/config.json          effective RunConfig
//! <run>/space.json           space document
//! <run>/history.csv          one row per completed generation
//! <run>/generations/genNNNN.json
//! <run>/best.json            written last; marks the run complete
//! ```
//!
//! Every file is written to a temporary sibling and renamed into place, so a
//! crash leaves either the old or the new content. History rows are the
//! source of truth for how many generations completed; snapshots beyond the
//! last row are discarded on reopen.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{RunConfig, SearchSpace};
use crate::engine::{
    Checkpoint, FailureRecord, GenerationRecord, GenerationSink, Individual, Population, RunResult,
};
use crate::fitness::Metrics;
use crate::hyperspace::{Genotype, Layer, Phenotype};

pub const HISTORY_HEADER: &str = "generation,best_fitness,mean_fitness,evals,wallclock_secs";
const CONFIG_FILE: &str = "config.json";
const SPACE_FILE: &str = "space.json";
const HISTORY_FILE: &str = "history.csv";
const GENERATIONS_DIR: &str = "generations";
const BEST_FILE: &str = "best.json";

#[derive(Debug, Error)]
pub enum RunLogError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{0} is not compatible with this run: {1}")]
    Incompatible(PathBuf, String),
    #[error("run in {0} is already complete")]
    AlreadyComplete(PathBuf),
    #[error("generation {got} does not follow generation {last}")]
    IndexGap { last: u64, got: u64 },
    #[error("run in {0} is incomplete (no best.json)")]
    Incomplete(PathBuf),
    #[error("run in {0} has no history")]
    MissingHistory(PathBuf),
    #[error("{0} is not a run directory or a group of runs")]
    NotARun(PathBuf),
    #[error("compare needs at least 2 runs, got {0}")]
    TooFewRuns(usize),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RunLogError + '_ {
    move |source| RunLogError::Io {
        path: path.to_owned(),
        source,
    }
}

fn read(path: &Path) -> Result<String, RunLogError> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, RunLogError> {
    serde_json::from_str(&read(path)?).map_err(|e| RunLogError::Parse {
        path: path.to_owned(),
        message: e.to_string(),
    })
}

/// Writes `contents` to `path.tmp`, then renames it over `path`.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), RunLogError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(value).expect("serializes");
    s.push(b'\n');
    s
}

pub fn format_history_row(r: &GenerationRecord) -> String {
    format!(
        "{},{:.6},{:.6},{},{:.6}\n",
        r.generation, r.best_fitness, r.mean_fitness, r.evaluations, r.wallclock_secs
    )
}

/// A history row as text fields; readers keep the printed values verbatim.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub generation: String,
    pub best_fitness: String,
    pub mean_fitness: String,
    pub evals: String,
    pub wallclock_secs: String,
}

pub fn read_history(run_dir: &Path) -> Result<Vec<HistoryRow>, RunLogError> {
    let path = run_dir.join(HISTORY_FILE);
    let text = read(&path)?;
    let mut lines = text.lines();
    if lines.next() != Some(HISTORY_HEADER) {
        return Err(RunLogError::Parse {
            path,
            message: "missing or unexpected header".into(),
        });
    }
    lines
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(k, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 || f[0].parse::<u64>() != Ok(k as u64 + 1) {
                return Err(RunLogError::Parse {
                    path: path.clone(),
                    message: format!("bad row {}: `{line}`", k + 1),
                });
            }
            Ok(HistoryRow {
                generation: f[0].into(),
                best_fitness: f[1].into(),
                mean_fitness: f[2].into(),
                evals: f[3].into(),
                wallclock_secs: f[4].into(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Snapshot {
    pub generation: u64,
    pub record: GenerationRecord,
    pub best: Individual,
    #[serde(default)]
    pub failures: Vec<FailureRecord>,
    pub individuals: Vec<Individual>,
}

/// Final summary, written when a run completes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BestRecord {
    pub algorithm: String,
    pub evaluator: String,
    pub fitness: f64,
    pub genotype: Genotype,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phenotype: Option<Phenotype>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Metrics>,
    pub generations: u64,
    pub evaluations: u64,
    pub failures: usize,
}

pub struct RunLog {
    dir: PathBuf,
    completed: u64,
}

fn snapshot_name(generation: u64) -> String {
    format!("gen{generation:04}.json")
}

fn is_empty_dir(dir: &Path) -> Result<bool, RunLogError> {
    Ok(fs::read_dir(dir).map_err(io_err(dir))?.next().is_none())
}

/// Creates a run directory, or reopens an unfinished one written with the
/// same configuration and space.
pub fn open_run(dir: &Path, config: &RunConfig, space: &SearchSpace) -> Result<RunLog, RunLogError> {
    if !dir.exists() || is_empty_dir(dir)? {
        fs::create_dir_all(dir.join(GENERATIONS_DIR)).map_err(io_err(dir))?;
        write_atomic(&dir.join(CONFIG_FILE), config.to_json().as_bytes())?;
        write_atomic(&dir.join(SPACE_FILE), space.to_document().as_bytes())?;
        write_atomic(&dir.join(HISTORY_FILE), format!("{HISTORY_HEADER}\n").as_bytes())?;
        return Ok(RunLog {
            dir: dir.to_owned(),
            completed: 0,
        });
    }
    if !dir.join(CONFIG_FILE).exists() {
        return Err(RunLogError::Incompatible(
            dir.to_owned(),
            "directory is not empty and holds no run".into(),
        ));
    }
    let on_disk: RunConfig = read_json(&dir.join(CONFIG_FILE))?;
    if &on_disk != config {
        return Err(RunLogError::Incompatible(dir.to_owned(), "configuration differs".into()));
    }
    let on_disk: SearchSpace = read_json(&dir.join(SPACE_FILE))?;
    if &on_disk != space {
        return Err(RunLogError::Incompatible(dir.to_owned(), "search space differs".into()));
    }
    if dir.join(BEST_FILE).exists() {
        return Err(RunLogError::AlreadyComplete(dir.to_owned()));
    }
    let completed = read_history(dir)?.len() as u64;
    let gens = dir.join(GENERATIONS_DIR);
    for entry in fs::read_dir(&gens).map_err(io_err(&gens))? {
        let path = entry.map_err(io_err(&gens))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let stale = match name.strip_prefix("gen").and_then(|n| n.strip_suffix(".json")) {
            Some(num) => num.parse::<u64>().map_or(true, |g| g > completed),
            None => true,
        };
        if stale {
            log::warn!("removing leftover {}", path.display());
            fs::remove_file(&path).map_err(io_err(&path))?;
        }
    }
    Ok(RunLog {
        dir: dir.to_owned(),
        completed,
    })
}

impl RunLog {
    /// Reopens an unfinished run from its own `config.json` and `space.json`.
    pub fn resume(dir: &Path) -> Result<(RunLog, RunConfig, SearchSpace), RunLogError> {
        if !dir.join(CONFIG_FILE).exists() {
            return Err(RunLogError::NotARun(dir.to_owned()));
        }
        let config: RunConfig = read_json(&dir.join(CONFIG_FILE))?;
        let space: SearchSpace = read_json(&dir.join(SPACE_FILE))?;
        let log = open_run(dir, &config, &space)?;
        Ok((log, config, space))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn completed_generations(&self) -> u64 {
        self.completed
    }

    pub fn append_generation(
        &mut self,
        population: &Population,
        record: &GenerationRecord,
        failures: &[FailureRecord],
        best: &Individual,
    ) -> Result<(), RunLogError> {
        if population.generation != self.completed + 1 || record.generation != population.generation {
            return Err(RunLogError::IndexGap {
                last: self.completed,
                got: population.generation,
            });
        }
        let snapshot = Snapshot {
            generation: population.generation,
            record: record.clone(),
            best: best.clone(),
            failures: failures.to_vec(),
            individuals: population.individuals.clone(),
        };
        let path = self
            .dir
            .join(GENERATIONS_DIR)
            .join(snapshot_name(population.generation));
        write_atomic(&path, &pretty(&snapshot))?;

        let history = self.dir.join(HISTORY_FILE);
        let mut text = read(&history)?;
        text.push_str(&format_history_row(record));
        write_atomic(&history, text.as_bytes())?;
        self.completed += 1;
        Ok(())
    }

    /// State after the last completed generation, if any.
    pub fn checkpoint(&self) -> Result<Option<Checkpoint>, RunLogError> {
        if self.completed == 0 {
            return Ok(None);
        }
        let mut history = Vec::new();
        let mut failures = Vec::new();
        let mut last = None;
        for g in 1..=self.completed {
            let snap: Snapshot = read_json(&self.dir.join(GENERATIONS_DIR).join(snapshot_name(g)))?;
            history.push(snap.record.clone());
            failures.extend(snap.failures.iter().cloned());
            last = Some(snap);
        }
        let last = last.unwrap();
        Ok(Some(Checkpoint {
            population: Population {
                individuals: last.individuals,
                generation: last.generation,
            },
            best: last.best,
            evaluations: last.record.evaluations,
            history,
            failures,
        }))
    }

    pub fn finish(&mut self, result: &RunResult, evaluator: &str) -> Result<(), RunLogError> {
        let best = BestRecord {
            algorithm: result.algorithm.clone(),
            evaluator: evaluator.to_owned(),
            fitness: result.best.fitness.unwrap_or(f64::NAN),
            genotype: result.best.genotype.clone(),
            phenotype: result.best_phenotype.clone(),
            metrics: result.best.metrics.clone(),
            generations: self.completed,
            evaluations: result.evaluations,
            failures: result.failures.len(),
        };
        write_atomic(&self.dir.join(BEST_FILE), &pretty(&best))
    }
}

impl GenerationSink for RunLog {
    fn record(
        &mut self,
        population: &Population,
        record: &GenerationRecord,
        failures: &[FailureRecord],
        best: &Individual,
    ) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
        self.append_generation(population, record, failures, best)
            .map_err(Into::into)
    }
}

pub fn read_best(run_dir: &Path) -> Result<BestRecord, RunLogError> {
    let path = run_dir.join(BEST_FILE);
    if !path.exists() {
        return Err(RunLogError::Incomplete(run_dir.to_owned()));
    }
    read_json(&path)
}

#[derive(Clone, Debug, Serialize)]
struct BestPhenotypeFile<'a> {
    fitness: f64,
    genotype: &'a Genotype,
    #[serde(skip_serializing_if = "Option::is_none")]
    phenotype: Option<&'a Phenotype>,
    #[serde(skip_serializing_if = "Option::is_none")]
    layers: Option<Vec<Layer>>,
}

/// Writes the report bundle for a completed run into `out` and returns the
/// names of the files written.
pub fn report(run_dir: &Path, out: &Path) -> Result<Vec<String>, RunLogError> {
    let best = read_best(run_dir)?;
    let history = read_history(run_dir)?;
    if history.is_empty() {
        return Err(RunLogError::MissingHistory(run_dir.to_owned()));
    }
    let config: RunConfig = read_json(&run_dir.join(CONFIG_FILE))?;
    let space: SearchSpace = read_json(&run_dir.join(SPACE_FILE))?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut written = Vec::new();
    let mut notes = Vec::new();

    let mut curve = String::from("generation,best,mean\n");
    for row in &history {
        writeln!(curve, "{},{},{}", row.generation, row.best_fitness, row.mean_fitness).unwrap();
    }
    write_atomic(&out.join("curve.csv"), curve.as_bytes())?;
    written.push("curve.csv".to_owned());

    let title = format!(
        "{} generation-wise fitness ({})",
        config.algorithm.to_string().to_uppercase(),
        best.evaluator
    );
    write_atomic(&out.join("curve.svg"), render_curve_svg(&history, &title).as_bytes())?;
    written.push("curve.svg".to_owned());

    let layers = match (&space, &best.phenotype) {
        (SearchSpace::Discrete(s), Some(p)) => p.layers(s),
        _ => None,
    };
    let best_file = BestPhenotypeFile {
        fitness: best.fitness,
        genotype: &best.genotype,
        phenotype: best.phenotype.as_ref(),
        layers: layers.clone(),
    };
    write_atomic(&out.join("best_phenotype.json"), &pretty(&best_file))?;
    written.push("best_phenotype.json".to_owned());

    write_atomic(&out.join("best_table.txt"), best_table(&best, layers.as_deref()).as_bytes())?;
    written.push("best_table.txt".to_owned());

    match &best.metrics {
        Some(m) => {
            write_atomic(&out.join("confusion.csv"), confusion_csv(m).as_bytes())?;
            written.push("confusion.csv".to_owned());
        }
        None => notes.push("confusion.csv skipped: the best individual carries no metrics".to_owned()),
    }

    let mut index = String::new();
    writeln!(index, "run: {}", run_dir.display()).unwrap();
    writeln!(index, "algorithm: {}", config.algorithm).unwrap();
    if config.algorithm == crate::config::Algorithm::Ga {
        writeln!(index, "note: GA is a conventional baseline (tournament, one-point, reset, elitism)").unwrap();
    }
    writeln!(index, "evaluator: {}", best.evaluator).unwrap();
    writeln!(index, "score: higher is better").unwrap();
    writeln!(index, "generations: {}", history.len()).unwrap();
    writeln!(index, "best fitness: {:.6}", best.fitness).unwrap();
    writeln!(index, "files:").unwrap();
    for f in &written {
        writeln!(index, "  {f}").unwrap();
    }
    for n in &notes {
        writeln!(index, "{n}").unwrap();
    }
    write_atomic(&out.join("index.txt"), index.as_bytes())?;
    written.push("index.txt".to_owned());
    Ok(written)
}

fn best_table(best: &BestRecord, layers: Option<&[Layer]>) -> String {
    let mut t = String::new();
    writeln!(t, "best fitness: {:.6}", best.fitness).unwrap();
    match &best.phenotype {
        Some(p) => {
            let width = p.assignments.keys().map(|k| k.len()).max().unwrap_or(0).max(13);
            writeln!(t, "{:<width$}  value", "hyperparameter").unwrap();
            writeln!(t, "{}  {}", "-".repeat(width), "-".repeat(10)).unwrap();
            for (k, v) in &p.assignments {
                writeln!(t, "{k:<width$}  {v}").unwrap();
            }
        }
        None => {
            writeln!(t, "dimension  value").unwrap();
            for (j, v) in best.genotype.values().iter().enumerate() {
                writeln!(t, "{j:<9}  {v}").unwrap();
            }
        }
    }
    if let Some(layers) = layers {
        writeln!(t, "\nlayers:").unwrap();
        for (i, l) in layers.iter().enumerate() {
            writeln!(t, "{:>3}  {l}", i + 1).unwrap();
        }
    }
    t
}

fn confusion_csv(m: &Metrics) -> String {
    let k = m.classes();
    let mut s = String::from("true\\pred");
    for c in 0..k {
        write!(s, ",{c}").unwrap();
    }
    s.push('\n');
    for (c, row) in m.confusion.iter().enumerate() {
        write!(s, "{c}").unwrap();
        for v in row {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    s
}

/// Line plot of best and mean fitness. Polylines are drawn in data
/// coordinates (x = generation, y = fitness) under a single transform, so
/// the `points` attributes carry the history values verbatim.
pub fn render_curve_svg(history: &[HistoryRow], title: &str) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const LEFT: f64 = 70.0;
    const RIGHT: f64 = 20.0;
    const TOP: f64 = 40.0;
    const BOTTOM: f64 = 50.0;
    let num = |s: &str| s.parse::<f64>().unwrap_or(0.0);
    let xs: Vec<f64> = history.iter().map(|r| num(&r.generation)).collect();
    let ys: Vec<f64> = history
        .iter()
        .flat_map(|r| [num(&r.best_fitness), num(&r.mean_fitness)])
        .collect();
    let widen = |lo: f64, hi: f64| if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
    let (x0, x1) = widen(
        xs.iter().copied().fold(f64::INFINITY, f64::min),
        xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    );
    let (y0, y1) = widen(
        ys.iter().copied().fold(f64::INFINITY, f64::min),
        ys.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    );
    let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    let (sx, sy) = (pw / (x1 - x0), ph / (y1 - y0));
    let points = |pick: fn(&HistoryRow) -> &str| {
        history
            .iter()
            .map(|r| format!("{},{}", r.generation, pick(r)))
            .collect::<Vec<_>>()
            .join(" ")
    };

    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#).unwrap();
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#, W / 2.0, xml_escape(title)).unwrap();
    writeln!(s, r#"<line x1="{LEFT}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, TOP + ph, LEFT + pw, TOP + ph).unwrap();
    writeln!(s, r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}" stroke="black"/>"#, TOP + ph).unwrap();
    for (v, y) in [(y0, TOP + ph), (y1, TOP)] {
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="11">{v:.4}</text>"#, LEFT - 6.0, y + 4.0).unwrap();
    }
    for (v, x) in [(x0, LEFT), (x1, LEFT + pw)] {
        writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{v}</text>"#, TOP + ph + 16.0).unwrap();
    }
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">generation</text>"#, LEFT + pw / 2.0, H - 12.0).unwrap();
    writeln!(s, r#"<text x="16" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 16 {})">fitness</text>"#, TOP + ph / 2.0, TOP + ph / 2.0).unwrap();
    writeln!(s, r#"<g transform="translate({LEFT} {}) scale({sx} {}) translate({} {})">"#, TOP + ph, -sy, -x0, -y0).unwrap();
    writeln!(s, r##"<polyline id="best" fill="none" stroke="#1f77b4" stroke-width="2" vector-effect="non-scaling-stroke" points="{}"/>"##, points(|r| &r.best_fitness)).unwrap();
    writeln!(s, r##"<polyline id="mean" fill="none" stroke="#ff7f0e" stroke-width="2" stroke-dasharray="6 4" vector-effect="non-scaling-stroke" points="{}"/>"##, points(|r| &r.mean_fitness)).unwrap();
    writeln!(s, "</g>").unwrap();
    writeln!(s, r##"<text x="{}" y="{}" font-family="sans-serif" font-size="11" fill="#1f77b4">best</text>"##, LEFT + pw - 80.0, TOP + 14.0).unwrap();
    writeln!(s, r##"<text x="{}" y="{}" font-family="sans-serif" font-size="11" fill="#ff7f0e">mean</text>"##, LEFT + pw - 40.0, TOP + 14.0).unwrap();
    writeln!(s, "</svg>").unwrap();
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub label: String,
    pub algorithm: String,
    pub runs: usize,
    pub best_fitness: f64,
    pub mean_best_fitness: f64,
    pub metrics: Option<(f64, f64, f64, f64)>,
}

fn is_run_dir(dir: &Path) -> bool {
    dir.join(CONFIG_FILE).is_file()
}

fn dir_label(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn compare_row(entry: &Path) -> Result<CompareRow, RunLogError> {
    let members: Vec<PathBuf> = if is_run_dir(entry) {
        vec![entry.to_owned()]
    } else {
        let mut subs: Vec<PathBuf> = fs::read_dir(entry)
            .map_err(|_| RunLogError::NotARun(entry.to_owned()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| is_run_dir(p))
            .collect();
        subs.sort();
        if subs.is_empty() {
            return Err(RunLogError::NotARun(entry.to_owned()));
        }
        subs
    };
    let bests = members
        .iter()
        .map(|m| read_best(m))
        .collect::<Result<Vec<_>, _>>()?;
    let top = bests
        .iter()
        .fold(&bests[0], |a, b| if b.fitness > a.fitness { b } else { a });
    let mean = bests.iter().map(|b| b.fitness).sum::<f64>() / bests.len() as f64;
    let algorithms: Vec<&str> = bests.iter().map(|b| b.algorithm.as_str()).collect();
    let algorithm = if algorithms.iter().all(|a| *a == algorithms[0]) {
        algorithms[0].to_owned()
    } else {
        "mixed".to_owned()
    };
    Ok(CompareRow {
        label: dir_label(entry),
        algorithm,
        runs: bests.len(),
        best_fitness: top.fitness,
        mean_best_fitness: mean,
        metrics: top
            .metrics
            .as_ref()
            .map(|m| (m.macro_precision, m.macro_recall, m.macro_f1, m.accuracy)),
    })
}

/// Tabulates completed runs (or directories of runs), best first, and
/// writes `compare.csv` and `compare.txt` into `out`.
pub fn compare(entries: &[PathBuf], out: &Path) -> Result<Vec<CompareRow>, RunLogError> {
    if entries.len() < 2 {
        return Err(RunLogError::TooFewRuns(entries.len()));
    }
    let mut rows = entries
        .iter()
        .map(|e| compare_row(e))
        .collect::<Result<Vec<_>, _>>()?;
    rows.sort_by(|a, b| b.best_fitness.total_cmp(&a.best_fitness));

    let header = [
        "label", "algorithm", "runs", "best_fitness", "mean_best_fitness",
        "macro_precision", "macro_recall", "macro_f1", "accuracy",
    ];
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut c = vec![
                r.label.clone(),
                r.algorithm.clone(),
                r.runs.to_string(),
                format!("{:.6}", r.best_fitness),
                format!("{:.6}", r.mean_best_fitness),
            ];
            match r.metrics {
                Some((p, rc, f, a)) => c.extend([p, rc, f, a].iter().map(|v| format!("{v:.6}"))),
                None => c.extend(std::iter::repeat_n(String::new(), 4)),
            }
            c
        })
        .collect();

    let mut csv = header.join(",");
    csv.push('\n');
    for c in &cells {
        csv.push_str(&c.join(","));
        csv.push('\n');
    }

    let widths: Vec<usize> = (0..header.len())
        .map(|i| cells.iter().map(|c| c[i].len()).chain([header[i].len()]).max().unwrap())
        .collect();
    let line = |c: &[&str]| {
        c.iter()
            .zip(&widths)
            .map(|(s, w)| format!("{s:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_owned()
    };
    let mut txt = line(&header);
    txt.push('\n');
    for c in &cells {
        let refs: Vec<&str> = c.iter().map(String::as_str).collect();
        txt.push_str(&line(&refs));
        txt.push('\n');
    }

    fs::create_dir_all(out).map_err(io_err(out))?;
    write_atomic(&out.join("compare.csv"), csv.as_bytes())?;
    write_atomic(&out.join("compare.txt"), txt.as_bytes())?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hyperspace::default_space;

    fn record(g: u64, best: f64) -> GenerationRecord {
        GenerationRecord {
            generation: g,
            best_fitness: best,
            mean_fitness: best / 2.0,
            evaluations: 10 * g,
            wallclock_secs: 0.0,
        }
    }

    fn pop(g: u64, best: f64) -> Population {
        Population {
            individuals: vec![Individual::with_fitness(Genotype(vec![0.0; 15]), best)],
            generation: g,
        }
    }

    fn space() -> SearchSpace {
        SearchSpace::Discrete(default_space())
    }

    #[test]
    fn fresh_directory_gets_four_artifacts() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        let log = open_run(&dir, &RunConfig::default(), &space()).unwrap();
        assert_eq!(log.completed_generations(), 0);
        for f in ["config.json", "space.json", "history.csv", "generations"] {
            assert!(dir.join(f).exists(), "{f}");
        }
        assert_eq!(fs::read_to_string(dir.join("history.csv")).unwrap(), format!("{HISTORY_HEADER}\n"));
    }

    #[test]
    fn reopen_checks_compatibility() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path();
        open_run(dir, &RunConfig::default(), &space()).unwrap();
        let other = SearchSpace::Discrete(crate::hyperspace::compact_space());
        assert!(matches!(
            open_run(dir, &RunConfig::default(), &other),
            Err(RunLogError::Incompatible(..))
        ));
        let mut cfg = RunConfig::default();
        cfg.de.seed = 99;
        assert!(matches!(open_run(dir, &cfg, &space()), Err(RunLogError::Incompatible(..))));
        assert!(open_run(dir, &RunConfig::default(), &space()).is_ok());

        let junk = tmp.path().join("junk");
        fs::create_dir_all(&junk).unwrap();
        fs::write(junk.join("notes.txt"), "hi").unwrap();
        assert!(matches!(
            open_run(&junk, &RunConfig::default(), &space()),
            Err(RunLogError::Incompatible(..))
        ));
    }

    #[test]
    fn appends_and_rejects_gaps() {
        let tmp = tempfile::tempdir().unwrap();
        let mut log = open_run(tmp.path(), &RunConfig::default(), &space()).unwrap();
        let best = Individual::with_fitness(Genotype(vec![0.0; 15]), 0.5);
        for g in 1..=10 {
            log.append_generation(&pop(g, 0.5), &record(g, 0.5), &[], &best).unwrap();
        }
        assert!(matches!(
            log.append_generation(&pop(12, 0.5), &record(12, 0.5), &[], &best),
            Err(RunLogError::IndexGap { last: 10, got: 12 })
        ));
        assert_eq!(read_history(tmp.path()).unwrap().len(), 10);
        assert_eq!(fs::read_dir(tmp.path().join("generations")).unwrap().count(), 10);
        let cp = log.checkpoint().unwrap().unwrap();
        assert_eq!(cp.history.len(), 10);
        assert_eq!(cp.evaluations, 100);
    }

    #[test]
    fn interrupted_write_leaves_parseable_directory() {
        let tmp = tempfile::tempdir().unwrap();
        let mut log = open_run(tmp.path(), &RunConfig::default(), &space()).unwrap();
        let best = Individual::with_fitness(Genotype(vec![0.0; 15]), 0.5);
        for g in 1..=3 {
            log.append_generation(&pop(g, 0.5), &record(g, 0.5), &[], &best).unwrap();
        }
        // Killed after the gen-4 temp file was written but before rename, and
        // another kill after the gen-5 snapshot landed but before its row.
        let gens = tmp.path().join("generations");
        fs::write(gens.join("gen0004.json.tmp"), "{partial").unwrap();
        fs::copy(gens.join("gen0003.json"), gens.join("gen0005.json")).unwrap();
        fs::write(tmp.path().join("history.csv.tmp"), "garbage").unwrap();

        assert_eq!(read_history(tmp.path()).unwrap().len(), 3);
        let log = open_run(tmp.path(), &RunConfig::default(), &space()).unwrap();
        assert_eq!(log.completed_generations(), 3);
        let names: Vec<String> = fs::read_dir(&gens)
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names.len(), 3, "{names:?}");
        assert!(log.checkpoint().unwrap().is_some());
    }

    #[test]
    fn completed_run_refuses_resume() {
        let tmp = tempfile::tempdir().unwrap();
        open_run(tmp.path(), &RunConfig::default(), &space()).unwrap();
        fs::write(tmp.path().join("best.json"), "{}").unwrap();
        assert!(matches!(
            RunLog::resume(tmp.path()),
            Err(RunLogError::AlreadyComplete(_))
        ));
        let msg = RunLog::resume(tmp.path()).err().unwrap().to_string();
        assert!(msg.contains("already complete"));
    }

    fn row(g: u32, best: &str) -> HistoryRow {
        HistoryRow {
            generation: g.to_string(),
            best_fitness: best.into(),
            mean_fitness: "0.100000".into(),
            evals: "0".into(),
            wallclock_secs: "0.000000".into(),
        }
    }

    #[test]
    fn svg_polyline_carries_best_column() {
        let rows = vec![row(1, "0.500000"), row(2, "0.750000"), row(3, "0.750000")];
        let svg = render_curve_svg(&rows, "t");
        let start = svg.find(r#"id="best""#).unwrap();
        let pts = &svg[start..];
        let pts = &pts[pts.find("points=\"").unwrap() + 8..];
        let pts = &pts[..pts.find('"').unwrap()];
        let ys: Vec<&str> = pts.split(' ').map(|p| p.split(',').nth(1).unwrap()).collect();
        assert_eq!(ys, vec!["0.500000", "0.750000", "0.750000"]);
        // Flat single-point curves still produce a finite transform.
        let flat = render_curve_svg(&[row(1, "0.100000")], "t");
        assert!(!flat.contains("inf") && !flat.contains("NaN"));
    }

    #[test]
    fn compare_needs_two_runs() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(
            compare(&[tmp.path().to_owned()], tmp.path()),
            Err(RunLogError::TooFewRuns(1))
        ));
    }
}

//! Reference evaluation worker speaking protocol v1 on stdin/stdout.
//!
//! Scores phenotypes with the built-in surrogate. The `--*-on-id` flags
//! inject faults for exercising the engine's failure handling.

use std::io::{self, BufRead, Write};
use std::path::PathBuf;
use std::sync::mpsc;
use std::time::Duration;

use clap::Parser;
use evoline::fitness::{Evaluator, SurrogateEvaluator};
use evoline::hyperspace::{default_space, load_space};
use evoline::worker::{EngineMessage, EvalResult, MetricsPayload, WorkerMessage, PROTOCOL_VERSION};

#[derive(Debug, Parser)]
#[command(name = "evoline-worker", about = "Surrogate evaluation worker (protocol v1)")]
struct Args {
    /// Space document; defaults to the built-in VGG-16 space.
    #[arg(long)]
    space: Option<PathBuf>,
    /// Seed of the surrogate's hidden optimum.
    #[arg(long, default_value_t = 0)]
    hidden_seed: u64,
    /// Protocol version announced in the hello.
    #[arg(long, default_value_t = PROTOCOL_VERSION)]
    protocol: u32,
    /// Never send the hello.
    #[arg(long)]
    no_hello: bool,
    /// Attach a synthetic confusion matrix with this many classes.
    #[arg(long)]
    metrics: Option<usize>,
    /// Sleep before each reply.
    #[arg(long, default_value_t = 0)]
    delay_ms: u64,
    /// Answer every request with an error.
    #[arg(long)]
    fail_all: bool,
    #[arg(long)]
    crash_on_id: Option<u64>,
    #[arg(long)]
    fail_on_id: Option<u64>,
    #[arg(long)]
    hang_on_id: Option<u64>,
    #[arg(long)]
    wrong_id_on_id: Option<u64>,
    #[arg(long)]
    garbage_on_id: Option<u64>,
}

/// Confusion matrix with 100 samples per class whose diagonal share is
/// `accuracy`; misses go to the next class.
fn synthetic_confusion(classes: usize, accuracy: f64) -> Vec<Vec<u64>> {
    let hit = (accuracy.clamp(0.0, 1.0) * 100.0).round() as u64;
    (0..classes)
        .map(|c| {
            let mut row = vec![0u64; classes];
            row[c] += hit;
            row[(c + 1) % classes] += 100 - hit;
            row
        })
        .collect()
}

fn main() -> io::Result<()> {
    let args = Args::parse();
    let space = match &args.space {
        Some(path) => match load_space(&std::fs::read_to_string(path)?) {
            Ok(s) => s,
            Err(e) => {
                eprintln!("evoline-worker: {}: {e}", path.display());
                std::process::exit(2);
            }
        },
        None => default_space(),
    };
    let evaluator = SurrogateEvaluator::new(space, args.hidden_seed);
    let stdout = io::stdout();
    let mut out = stdout.lock();
    if !args.no_hello {
        let hello = WorkerMessage::Hello {
            protocol: args.protocol,
            name: "evoline-worker".into(),
        };
        out.write_all(hello.to_line().as_bytes())?;
        out.flush()?;
    }

    // Lines arrive over a channel so a hung worker still notices the engine
    // closing its input and exits instead of lingering.
    let (tx, rx) = mpsc::channel::<String>();
    std::thread::spawn(move || {
        for line in io::stdin().lock().lines() {
            let Ok(line) = line else { break };
            if tx.send(line).is_err() {
                break;
            }
        }
    });

    while let Ok(line) = rx.recv() {
        if line.trim().is_empty() {
            continue;
        }
        let req = match EngineMessage::parse(&line) {
            Ok(EngineMessage::Shutdown) => return Ok(()),
            Ok(EngineMessage::Eval(req)) => req,
            Err(e) => {
                let msg = WorkerMessage::Error {
                    id: None,
                    message: e.to_string(),
                };
                out.write_all(msg.to_line().as_bytes())?;
                out.flush()?;
                continue;
            }
        };
        let id = req.id;
        if args.crash_on_id == Some(id) {
            std::process::exit(17);
        }
        if args.hang_on_id == Some(id) {
            while rx.recv().is_ok() {}
            return Ok(());
        }
        if args.delay_ms > 0 {
            std::thread::sleep(Duration::from_millis(args.delay_ms));
        }
        let reply = if args.garbage_on_id == Some(id) {
            "this is not json\n".to_owned()
        } else if args.fail_all || args.fail_on_id == Some(id) {
            WorkerMessage::Error {
                id: Some(id),
                message: format!("injected failure for request {id}"),
            }
            .to_line()
        } else {
            match evaluator.evaluate(&req.phenotype, &req.budget) {
                Ok(score) => WorkerMessage::Result(EvalResult {
                    id: if args.wrong_id_on_id == Some(id) { id + 1000 } else { id },
                    fitness: score.value,
                    metrics: args.metrics.map(|k| MetricsPayload {
                        accuracy: Some(score.value),
                        confusion: Some(synthetic_confusion(k.max(1), score.value)),
                    }),
                })
                .to_line(),
                Err(e) => WorkerMessage::Error {
                    id: Some(id),
                    message: e.to_string(),
                }
                .to_line(),
            }
        };
        out.write_all(reply.as_bytes())?;
        out.flush()?;
    }
    Ok(())
}

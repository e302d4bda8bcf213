use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ingredient_core::decision::{Method, WindowsOn};
use ingredient_core::pipeline::{self, EvalReport, RunConfig};
use ingredient_core::Result;

#[derive(Parser)]
#[command(name = "ingr", version, about = "Multi-ingredient food image recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Algorithm {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Baseline,
}

#[derive(Clone, Copy, ValueEnum)]
enum Windows {
    Original,
    Segment,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    algorithm: Option<Algorithm>,
    #[arg(long)]
    top_n: Option<usize>,
    /// Image the sliding windows are cut from.
    #[arg(long)]
    windows_on: Option<Windows>,
}

#[derive(Subcommand)]
enum Command {
    /// Predict the ingredient set of every dataset image.
    Recognize(Common),
    /// Segment images and time the segmentation.
    Segment(Common),
    /// Remove redundant blocks from a trained model.
    Prune(Common),
    /// Train or fine-tune a single-ingredient classifier.
    Train(Common),
    /// Top-n sweep (multi-label) or per-class metrics (single-label).
    Eval(Common),
}

fn config(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(a) = c.algorithm {
        cfg.method = match a {
            Algorithm::One => Method::Algorithm1,
            Algorithm::Two => Method::Algorithm2,
            Algorithm::Baseline => Method::Baseline,
        };
    }
    if let Some(n) = c.top_n {
        cfg.recognize.decision.top_n = n;
    }
    if let Some(w) = c.windows_on {
        cfg.recognize.windows_on = match w {
            Windows::Original => WindowsOn::Original,
            Windows::Segment => WindowsOn::Segment,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Recognize(c) => {
            let cfg = config(&c)?;
            let r = pipeline::cmd_recognize(&cfg)?;
            for line in &r.records {
                println!("{line}");
            }
            if let Some(a) = r.aggregate {
                let (avg, med) = (a.average, a.median);
                println!("average\tP {:.4} R {:.4} F1 {:.4}", avg.precision, avg.recall, avg.f1);
                println!("median\tP {:.4} R {:.4} F1 {:.4}", med.precision, med.recall, med.f1);
            }
        }
        Command::Segment(c) => {
            let cfg = config(&c)?;
            let r = pipeline::cmd_segment(&cfg)?;
            for t in &r.images {
                println!("{}\tk={}\tsegments={}\t{:.4}s", t.image, t.k, t.segments, t.mean_seconds);
            }
            println!("mean\t{:.4}s", r.mean_seconds);
        }
        Command::Prune(c) => {
            let cfg = config(&c)?;
            let log = pipeline::cmd_prune(&cfg)?;
            print!("{}", log.to_csv());
            println!("stop: {}", log.stop);
        }
        Command::Train(c) => {
            let cfg = config(&c)?;
            let (log, report) = pipeline::cmd_train(&cfg)?;
            println!("loss {:.4} -> {:.4}", log.initial_loss, log.final_loss);
            println!("accuracy {:.4}", report.accuracy);
        }
        Command::Eval(c) => {
            let cfg = config(&c)?;
            match pipeline::cmd_eval(&cfg)? {
                EvalReport::Sweep(rows) => print!("{}", pipeline::sweep_csv(&rows)),
                EvalReport::Classification {
                    report,
                    subset_mean_recall,
                } => {
                    print!("{}", report.to_csv());
                    if let Some(r) = subset_mean_recall {
                        println!("subset_mean_recall,{r:.6}");
                    }
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

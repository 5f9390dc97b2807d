use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ensemble_fusion::pipeline::{
    cmd_consensus, cmd_eval, cmd_fuse, cmd_simulate, run_pipeline, thread_pool, Algorithm, Overrides,
    PipelineInput, Workspace,
};
use ensemble_fusion::synth::{reference_scenario, ScenarioSpec};
use ensemble_fusion::{Error, ErrorKind};

#[derive(Parser)]
#[command(name = "efuse", version, about = "Detection ensemble fusion and source weighting")]
struct Cli {
    /// Worker threads (default: all cores). Output does not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ScenarioArgs {
    /// Reference scenario: three_good, two_good_one_poison, long_tail_gated.
    #[arg(long)]
    scenario: String,
    /// Replace the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace the scenario's image count.
    #[arg(long)]
    images: Option<usize>,
}

#[derive(Args)]
struct TuneArgs {
    /// Clustering and suppression IoU threshold.
    #[arg(long)]
    iou_threshold: Option<f64>,
    /// Evaluation confidence threshold.
    #[arg(long)]
    confidence_threshold: Option<f64>,
    /// key=value manifest override, e.g. gate.vehicle=0.6; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl TuneArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            iou_threshold: self.iou_threshold,
            confidence_threshold: self.confidence_threshold,
            set: self.set.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario with a ready manifest.
    Simulate {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse all sources with one algorithm.
    Fuse {
        #[arg(long)]
        manifest: PathBuf,
        /// nms, soft-nms, wbf, knowledge-vote or consensus-wbf.
        #[arg(long)]
        algorithm: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        tune: TuneArgs,
    },
    /// Score sources, fuse with the resulting weights and emit pseudo-labels.
    Consensus {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also compute exact Shapley values.
        #[arg(long)]
        shapley: bool,
        #[command(flatten)]
        tune: TuneArgs,
    },
    /// Evaluate a detection file against the manifest's ground truth.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        tune: TuneArgs,
    },
    /// simulate, fuse with every algorithm, consensus and eval in one go.
    Pipeline {
        #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
        scenario: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        images: Option<usize>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        shapley: bool,
        #[command(flatten)]
        tune: TuneArgs,
    },
}

fn scenario(name: &str, seed: Option<u64>, images: Option<usize>) -> Result<ScenarioSpec, Error> {
    let mut spec = reference_scenario(name)?;
    if let Some(s) = seed {
        spec = spec.with_seed(s);
    }
    if let Some(n) = images {
        spec = spec.with_images(n);
    }
    Ok(spec)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Simulate { scenario: s, out } => {
            let manifest = cmd_simulate(&scenario(&s.scenario, s.seed, s.images)?, &out)?;
            println!("wrote {}", manifest.display());
        }
        Command::Fuse {
            manifest,
            algorithm,
            out,
            tune,
        } => {
            let algo: Algorithm = algorithm.parse()?;
            let ws = Workspace::load(&manifest, &tune.overrides())?;
            let summary = cmd_fuse(&ws, algo, &out)?;
            println!("{}: {} boxes over {} images", summary.algorithm, summary.output_boxes, summary.images);
        }
        Command::Consensus {
            manifest,
            out,
            shapley,
            tune,
        } => {
            let ws = Workspace::load(&manifest, &tune.overrides())?;
            let outcome = cmd_consensus(&ws, shapley, &out)?;
            for (id, a) in &outcome.report.alpha {
                println!("{}: alpha {a:.6}", outcome.report.source_names[id]);
            }
            println!("target: alpha {:.6}", outcome.report.alpha_extended);
        }
        Command::Eval {
            manifest,
            detections,
            out,
            tune,
        } => {
            let ws = Workspace::load(&manifest, &tune.overrides())?;
            let e = cmd_eval(&ws, &detections, &out)?;
            let a = &e.metrics.aggregate;
            println!(
                "P {:.4} R {:.4} mAP50 {:.4} mAP50-95 {:.4}",
                a.precision, a.recall, a.map50, a.map5095
            );
        }
        Command::Pipeline {
            scenario: name,
            seed,
            images,
            manifest,
            out,
            shapley,
            tune,
        } => {
            let input = match (name, manifest) {
                (Some(n), _) => PipelineInput::Scenario(scenario(&n, seed, images)?),
                (None, Some(m)) => PipelineInput::Manifest(m),
                (None, None) => return Err(Error::Config("pipeline needs --scenario or --manifest".into())),
            };
            let outcome = run_pipeline(&input, &tune.overrides(), shapley, &out)?;
            println!("method     P       R       mAP50   mAP50-95");
            for r in &outcome.rows {
                println!(
                    "{:<10} {:.4}  {:.4}  {:.4}  {:.4}",
                    r.method, r.precision, r.recall, r.map50, r.map5095
                );
            }
            let t = outcome.timings;
            println!(
                "timing: nms {:.3}s, consensus {:.3}s, ratio {:.2}",
                t.nms_secs,
                t.consensus_secs,
                t.ratio()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = thread_pool(cli.threads).and_then(|pool| pool.install(|| run(cli)));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.kind();
            eprintln!("error: {:#}", anyhow::Error::new(e));
            if kind == ErrorKind::Internal {
                eprintln!("this is a bug; please report it with the input that triggered it");
            }
            ExitCode::from(kind.exit_code() as u8)
        }
    }
}

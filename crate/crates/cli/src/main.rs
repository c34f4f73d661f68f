//! `latdial`: prepare, pretrain, train jointly, generate and evaluate.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dialogue_core::pipeline::{
    evaluate_dumps, generate, prepare, pretrain, train_joint, DumpSpec, Overrides, PipelineError, PipelineResult, RunConfig, Stage,
    Variant, Which,
};

#[derive(Debug, Parser)]
#[command(name = "latdial", version, about = "Latent-pattern guided dialogue generation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// latent-sentence, sample-pos or generate-pos.
    #[arg(long, global = true)]
    variant: Option<String>,
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    k_s: Option<usize>,
    #[arg(long, global = true)]
    clusters: Option<usize>,
    #[arg(long, global = true)]
    k_p: Option<usize>,
    #[arg(long, global = true)]
    joint_epochs: Option<usize>,
    #[arg(long, global = true)]
    beam: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the candidate set and label the corpus.
    Prepare,
    /// Pretrain the latent predictor or the generator.
    Pretrain {
        /// predictor or generator.
        #[arg(long)]
        which: String,
    },
    /// Fine-tune both models with REINFORCE.
    TrainJoint {
        /// Continue from the last saved joint epoch.
        #[arg(long)]
        resume: bool,
    },
    /// Write a generation dump for a file of posts, one per line.
    Generate {
        /// Defaults to the prepared training posts.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        /// pretrained or joint.
        #[arg(long, default_value = "joint")]
        stage: String,
    },
    /// Score generation dumps against the corpus.
    Evaluate {
        /// `LABEL=PATH` or a bare path; repeat for a sweep.
        #[arg(long = "dump", required = true)]
        dumps: Vec<String>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn load_config(g: &Global) -> PipelineResult<RunConfig> {
    let path = g
        .config
        .as_deref()
        .ok_or_else(|| PipelineError::Usage("--config is required".into()))?;
    let overrides = Overrides {
        seed: g.seed,
        variant: g.variant.as_deref().map(str::parse::<Variant>).transpose()?,
        corpus: g.corpus.clone(),
        out_dir: g.out_dir.clone(),
        k_s: g.k_s,
        clusters: g.clusters,
        k_p: g.k_p,
        joint_epochs: g.joint_epochs,
        beam: g.beam,
    };
    RunConfig::load(path, &overrides)
}

fn run(cli: Cli) -> PipelineResult<()> {
    let cfg = load_config(&cli.global)?;
    match cli.command {
        Command::Prepare => {
            let s = prepare(&cfg)?;
            println!("pairs {}", s.pairs);
            println!("examples {}", s.examples);
            println!("vocabulary {}", s.vocabulary);
            println!("tags {}", s.tags);
            println!("candidates {}", s.candidates);
            println!(
                "label counts {}",
                s.label_counts.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
            );
        }
        Command::Pretrain { which } => {
            let which: Which = which.parse()?;
            let s = pretrain(&cfg, which)?;
            for (epoch, loss) in s.losses.iter().enumerate() {
                println!("epoch {epoch} loss {loss:.6}");
            }
            println!("accuracy {}", s.accuracy);
        }
        Command::TrainJoint { resume } => {
            for e in train_joint(&cfg, resume)? {
                let ed = e.mean_edit_distance.map_or_else(|| "-".to_string(), |d| format!("{d:.4}"));
                println!(
                    "epoch {} q {:.4} gen_loss {:.4} edit_distance {ed}",
                    e.epoch, e.mean_q, e.mean_gen_loss
                );
            }
        }
        Command::Generate { input, output, stage } => {
            let stage: Stage = stage.parse()?;
            let (path, rows) = generate(&cfg, input.as_deref(), output.as_deref(), stage)?;
            println!("{} rows written to {}", rows.len(), path.display());
        }
        Command::Evaluate { dumps, output } => {
            let dumps = dumps.iter().map(|d| d.parse::<DumpSpec>()).collect::<PipelineResult<Vec<_>>>()?;
            for (label, report) in evaluate_dumps(&cfg, &dumps, output.as_deref())? {
                let json = serde_json::to_string(&report).map_err(|e| PipelineError::Data(e.to_string()))?;
                println!("{label} {json}");
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
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

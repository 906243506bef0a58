use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use segcl::checkpoint;
use segcl::report::{ordering_study, plot_curves, tabulate};
use segcl::segmodel::TokenInit;
use segcl::taskstream::{build_stream, save_stream, StreamMode};
use segcl::trainer::{evaluate_checkpoint, run_continual, Components, TrainConfig};
use segcl::runlog::StepReport;
use segcl::Device;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "segcl", version, about = "Continual semantic segmentation on synthetic task streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every step of a task stream.
    Run(RunArgs),
    /// Evaluate a checkpoint on a saved stream.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory written by `segcl data`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Generate a task stream and save it to disk.
    Data {
        #[command(flatten)]
        train: TrainOverrides,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tables, ordering studies and plots from run directories.
    Report {
        #[command(subcommand)]
        command: ReportCommand,
    },
    /// Print the detector state stored in a checkpoint.
    DumpDetector {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Subcommand)]
enum ReportCommand {
    /// Final old/new/all mIoU per variant, mean ± std over seeds.
    Tabulate {
        runs: Vec<PathBuf>,
        /// Also write the matrix as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train under several class orderings and summarise final mIoU.
    Orders {
        #[command(flatten)]
        train: TrainOverrides,
        /// Number of orderings (seeds 0..n).
        #[arg(long, default_value_t = 5)]
        n: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-step old/new/all curves as SVG files.
    Plot {
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainOverrides {
    /// TOML training configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from a named variant: full, no-mkd, no-mkd-dec, no-der, finetune.
    #[arg(long)]
    preset: Option<String>,
    /// Disable a component (repeatable): mkd, der, dec or bacs.
    #[arg(long, value_parser = ["mkd", "der", "dec", "bacs"])]
    ablate: Vec<String>,
    #[arg(long)]
    token_init: Option<TokenInit>,
    #[arg(long)]
    mode: Option<StreamMode>,
    /// Training and scene seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    train: TrainOverrides,
    /// Output directory for checkpoints and the metrics file.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl TrainOverrides {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        if let Some(p) = &self.preset {
            cfg.components = Components::preset(p)?;
        }
        for part in &self.ablate {
            cfg.components.ablate(part)?;
        }
        if let Some(t) = self.token_init {
            cfg.token_init = t;
        }
        if let Some(m) = self.mode {
            cfg.stream.mode = m;
        }
        if let Some(s) = self.seed {
            cfg = cfg.with_seed(s);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_report(r: &StepReport) {
    let pct = |v: Option<f64>| v.map_or_else(|| "N/A".to_string(), |x| format!("{:.2}", 100.0 * x));
    println!(
        "step {}: old {} new {} all {}",
        r.step,
        pct(r.scores.old),
        pct(r.scores.new),
        pct(r.scores.all)
    );
    let per: Vec<String> = r.per_class_iou.iter().map(|v| pct(*v)).collect();
    println!("  per-class IoU: {}", per.join(" "));
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => {
            let cfg = args.train.resolve()?;
            log::info!("variant {} seed {}", cfg.components.label(), cfg.seed);
            let outcome = run_continual(&cfg, args.out.as_deref())?;
            for r in outcome.reports() {
                print_report(r);
            }
            if let Some(p) = &outcome.final_checkpoint {
                println!("final checkpoint: {}", p.display());
            }
        }
        Command::Eval { checkpoint, data } => {
            let r = evaluate_checkpoint(&checkpoint, &data)
                .with_context(|| format!("evaluating {}", checkpoint.display()))?;
            print_report(&r);
        }
        Command::Data { train, out } => {
            let cfg = train.resolve()?;
            let stream = build_stream(&cfg.stream)?;
            save_stream(&stream, &out)?;
            println!("wrote {} steps to {}", stream.num_steps(), out.display());
        }
        Command::Report { command } => match command {
            ReportCommand::Tabulate { runs, csv } => {
                if runs.is_empty() {
                    bail!("no run directories given");
                }
                let m = tabulate(&runs)?;
                print!("{}", m.to_text());
                if let Some(p) = csv {
                    std::fs::write(&p, m.to_csv())?;
                }
            }
            ReportCommand::Orders { train, n, out } => {
                let cfg = train.resolve()?;
                let seeds: Vec<u64> = (0..n).collect();
                let study = ordering_study(&cfg, &seeds, out.as_deref())?;
                print!("{}", study.to_csv());
            }
            ReportCommand::Plot { runs, out } => {
                for (path, _) in plot_curves(&runs, &out)? {
                    println!("{}", path.display());
                }
            }
        },
        Command::DumpDetector { checkpoint } => {
            let ckpt = checkpoint::load(&checkpoint, &Device::Cpu)?;
            let det = &ckpt.detector;
            println!(
                "projection width {}, encoder width {}, steps {}",
                det.config().proj_width,
                det.enc_width(),
                det.current_step()
            );
            for (t, p) in det.prototypes().iter().enumerate() {
                println!("prototype {}: {} pixels, norm {:.4}", t + 1, p.count, p.norm());
            }
        }
    }
    Ok(())
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use scenegen::causal::RankingMode;
use scenegen::diffusion::MaskMode;
use scenegen_cli::commands::{self, MethodInput};
use scenegen_cli::config::{Overrides, RunConfig};
use scenegen_cli::error::CliError;
use scenegen_cli::plot::render_svg;

#[derive(Parser)]
#[command(name = "scenegen", version, about = "Causally guided diffusion for closed-loop traffic scenario generation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML config, or a run.json whose embedded config is reused.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores). Outputs do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// causal, distance, random or all.
    #[arg(long, global = true)]
    ranking: Option<RankingMode>,
    /// ttc or none.
    #[arg(long, global = true)]
    mask: Option<MaskMode>,
    #[arg(long, global = true)]
    guidance_scale: Option<f64>,
    /// Number of controllable agents.
    #[arg(long, global = true)]
    nc: Option<usize>,
    /// Steps committed per closed-loop replan.
    #[arg(long, global = true)]
    replan_period: Option<usize>,
    /// Steer every agent with cost gradients, not just the ranked ones.
    #[arg(long, global = true)]
    no_guidance_masking: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Datagen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the denoiser on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-loop generation on the evaluation split.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score generated rollouts against the dataset references.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        /// `label=dir` of a `generate` output; repeatable.
        #[arg(long = "gen")]
        methods: Vec<MethodInput>,
        /// Also score the references themselves as a method.
        #[arg(long)]
        with_reference: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a scene, and optionally a generated rollout, as SVG.
    Plot {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        traj: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the causal structure the sampler uses on one scene.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
    },
}

fn load_config(g: &Global) -> Result<RunConfig, CliError> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: g.seed,
        workers: g.workers,
        ranking: g.ranking,
        mask: g.mask,
        guidance_scale: g.guidance_scale,
        nc: g.nc,
        replan_period: g.replan_period,
        no_guidance_masking: g.no_guidance_masking,
    });
    cfg.check()?;
    Ok(cfg)
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    std::fs::write(path, text).map_err(CliError::io(path))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(&cli.global)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    pool.install(|| match cli.command {
        Command::Datagen { out } => {
            let m = commands::datagen(&cfg, &out)?;
            eprintln!("wrote {} scenes to {}", m.outputs.len() - 1, out.display());
            Ok(())
        }
        Command::Train { data, out } => {
            commands::train(&cfg, &data, &out)?;
            eprintln!("wrote {}", out.join(commands::CHECKPOINT_FILE).display());
            Ok(())
        }
        Command::Generate { checkpoint, data, out } => {
            let m = commands::generate(&cfg, &checkpoint, &data, &out)?;
            eprintln!("wrote {} rollouts to {}", m.outputs.len(), out.display());
            Ok(())
        }
        Command::Evaluate {
            data,
            methods,
            with_reference,
            out,
        } => {
            let (_, summary) = commands::evaluate(&cfg, &data, &methods, with_reference, &out)?;
            print!("{}", commands::summary_table(&summary));
            Ok(())
        }
        Command::Plot { scene, traj, out } => {
            let s = commands::load_scene(&scene)?;
            let t = match traj {
                Some(p) => {
                    let text = std::fs::read(&p).map_err(CliError::io(&p))?;
                    let g: commands::GeneratedScene = serde_json::from_slice(&text).map_err(CliError::json(&p))?;
                    Some(g.trajectory.ok_or_else(|| {
                        CliError::Data(format!("{}: rollout failed: {}", p.display(), g.error.unwrap_or_default()))
                    })?)
                }
                None => None,
            };
            write_file(&out, &render_svg(&s, t.as_ref()))
        }
        Command::Inspect { checkpoint, scene } => {
            let report = commands::inspect(&cfg, &checkpoint, &scene)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            Ok(())
        }
    })
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

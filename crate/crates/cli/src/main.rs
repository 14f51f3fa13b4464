use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use depflow::dae::{severity_probe, speaker_probe, DaeModel};
use depflow::detector::DetectorConfig;
use depflow::gen::FlowTts;
use depflow::pipeline::{Check, Experiment, ExperimentConfig, LoadedWorld, StageOutcome, ROOT_ENV, STAGES};
use depflow::severity::PrototypeBank;
use depflow::world::{generate_world, write_frames, write_world, Split, WorldConfig};

#[derive(Parser)]
#[command(name = "depflow", version, about = "Staged severity-conditioned generation and augmentation experiments")]
struct Cli {
    /// Experiment directory.
    #[arg(long, global = true, env = ROOT_ENV)]
    root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Full-size configuration.
    Default,
    /// Tiny configuration for a quick end-to-end check.
    Smoke,
}

#[derive(Subcommand)]
enum Command {
    /// Create an experiment directory with default configs.
    Init {
        #[arg(long, value_enum, default_value = "default")]
        preset: Preset,
        #[arg(long)]
        id: Option<String>,
    },
    /// Run one stage, or `all`.
    Run {
        stage: String,
        /// Rebuild even if complete, or after a config change.
        #[arg(long)]
        force: bool,
    },
    /// Show stage completion.
    Status,
    /// Re-verify a completed experiment.
    Reproduce {
        #[arg(long)]
        json: bool,
    },
    /// Print a stored report.
    Report {
        #[arg(long)]
        kind: String,
    },
    #[command(subcommand)]
    World(WorldCmd),
    #[command(subcommand)]
    Dae(DaeCmd),
    #[command(subcommand)]
    Tts(TtsCmd),
    #[command(subcommand)]
    Proto(ProtoCmd),
    #[command(subcommand)]
    Detector(DetectorCmd),
}

#[derive(Subcommand)]
enum WorldCmd {
    /// Generate a world from a config file into a directory.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum DaeCmd {
    Train {
        #[arg(long)]
        force: bool,
    },
    /// Write one JSON line per world utterance with `d` and `d_norm`.
    Encode {
        #[arg(long)]
        out: PathBuf,
    },
    /// Speaker probe accuracy and severity probe ROC-AUC on held-out subjects.
    Probe,
}

#[derive(Subcommand)]
enum TtsCmd {
    Pretrain {
        #[arg(long)]
        force: bool,
    },
    Finetune {
        #[arg(long)]
        force: bool,
    },
    /// Synthesize frames for a token sequence.
    Sample {
        /// Comma-separated token ids.
        #[arg(long, value_delimiter = ',')]
        text_ids: Vec<usize>,
        #[arg(long)]
        speaker: usize,
        /// Severity score mapped through the prototype bank.
        #[arg(long, conflicts_with = "severity_embedding")]
        severity: Option<f64>,
        /// JSON array holding a condition vector.
        #[arg(long)]
        severity_embedding: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ProtoCmd {
    Build {
        #[arg(long)]
        force: bool,
    },
}

#[derive(Subcommand)]
enum DetectorCmd {
    Train {
        #[arg(long)]
        force: bool,
    },
    /// Print the stored augmentation comparison.
    Eval,
    /// Compare detector configs (one `.toml` per setting) over seeds.
    Compare {
        #[arg(long)]
        configs: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn root(cli_root: &Option<PathBuf>) -> Result<PathBuf> {
    cli_root
        .clone()
        .with_context(|| format!("no experiment root: pass --root or set {ROOT_ENV}"))
}

fn open(cli_root: &Option<PathBuf>) -> Result<Experiment> {
    Ok(Experiment::open(&root(cli_root)?)?)
}

fn run_stage(cli_root: &Option<PathBuf>, stage: &str, force: bool) -> Result<()> {
    let mut exp = open(cli_root)?;
    let stages: Vec<&str> = if stage == "all" { STAGES.to_vec() } else { vec![stage] };
    for s in stages {
        let outcome = exp.run_stage(s, force)?;
        let rec = &exp.manifest.stages[s];
        match outcome {
            StageOutcome::Ran => println!("{s}: done in {:.1}s", rec.seconds),
            StageOutcome::UpToDate => println!("{s}: up to date"),
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<depflow::Error>().map(|e| e.exit_code()).unwrap_or(2);
            ExitCode::from(code as u8)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Init { preset, id } => {
            let cfg = match preset {
                Preset::Default => ExperimentConfig::default(),
                Preset::Smoke => ExperimentConfig::smoke(),
            };
            let root = root(&cli.root)?;
            Experiment::init(&root, &cfg, id)?;
            println!("initialized {}", root.display());
        }
        Command::Run { stage, force } => run_stage(&cli.root, &stage, force)?,
        Command::Status => {
            let exp = open(&cli.root)?;
            for s in exp.status()? {
                let state = match (s.completed, s.config_changed, s.stale) {
                    (false, _, _) => "pending",
                    (true, true, _) => "config changed",
                    (true, false, true) => "stale",
                    (true, false, false) => "complete",
                };
                println!("{:<14} {state}", s.stage);
            }
        }
        Command::Reproduce { json } => {
            let exp = open(&cli.root)?;
            let report = exp.reproduce()?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                for c in &report.checks {
                    let (tag, detail) = match &c.check {
                        Check::Verified { detail } => ("ok", detail),
                        Check::Mismatch { detail } => ("MISMATCH", detail),
                        Check::Missing { detail } => ("MISSING", detail),
                    };
                    println!("{:<14} {:<34} {tag:<8} {detail}", c.stage, c.what);
                }
            }
            if !report.ok() {
                eprintln!("reproduce failed for: {:?}", report.failed_stages());
                return Ok(ExitCode::from(2));
            }
        }
        Command::Report { kind } => {
            let exp = open(&cli.root)?;
            println!("{}", serde_json::to_string_pretty(&exp.report(&kind)?)?);
        }
        Command::World(WorldCmd::Generate { config, out }) => {
            let cfg = match config {
                Some(p) => WorldConfig::load(&p)?,
                None => WorldConfig::default(),
            };
            let world = generate_world(&cfg)?;
            write_world(&world, &out)?;
            println!("{} utterances from {} subjects -> {}", world.utterances.len(), world.subjects.len(), out.display());
        }
        Command::Dae(DaeCmd::Train { force }) => run_stage(&cli.root, "dae", force)?,
        Command::Dae(DaeCmd::Encode { out }) => {
            let exp = open(&cli.root)?;
            let (world, dae) = world_and_dae(&exp)?;
            let emb = dae.encode_many(&world.utterances.iter().map(|u| &u.frames).collect::<Vec<_>>())?;
            let mut f = std::io::BufWriter::new(fs::File::create(&out).with_context(|| out.display().to_string())?);
            for (u, e) in world.utterances.iter().zip(emb) {
                let line = serde_json::json!({ "id": u.id, "subject_id": u.subject_id, "d": e.d, "d_norm": e.d_norm });
                writeln!(f, "{line}")?;
            }
        }
        Command::Dae(DaeCmd::Probe) => {
            let exp = open(&cli.root)?;
            let (world, dae) = world_and_dae(&exp)?;
            let held = world.splits(&[Split::Dev, Split::Test]);
            let auc = severity_probe(&dae, &world.split(Split::Train), &held)?;
            println!("speaker probe accuracy {:.4}", speaker_probe(&dae, &held)?);
            match auc {
                Some(a) => println!("severity probe ROC-AUC {a:.4}"),
                None => println!("severity probe ROC-AUC undefined (single class)"),
            }
        }
        Command::Tts(TtsCmd::Pretrain { force }) => run_stage(&cli.root, "tts-pretrain", force)?,
        Command::Tts(TtsCmd::Finetune { force }) => run_stage(&cli.root, "tts-finetune", force)?,
        Command::Tts(TtsCmd::Sample {
            text_ids,
            speaker,
            severity,
            severity_embedding,
            seed,
            out,
        }) => {
            let exp = open(&cli.root)?;
            require(&exp, "tts-finetune")?;
            let model = FlowTts::load(&exp.root.join("tts_finetune.ckpt"))?;
            let cond: Option<Vec<f64>> = match (severity, severity_embedding) {
                (Some(s), _) => {
                    require(&exp, "proto")?;
                    Some(PrototypeBank::load(&exp.root.join("proto.json"))?.condition(s)?)
                }
                (None, Some(p)) => Some(serde_json::from_str(&fs::read_to_string(&p).with_context(|| p.display().to_string())?)?),
                (None, None) => None,
            };
            let (frames, durations) = model.sample(&text_ids, speaker, cond.as_deref(), seed)?;
            write_frames(&out, &frames)?;
            println!("{} frames, durations {:?} -> {}", frames.nrows(), durations, out.display());
        }
        Command::Proto(ProtoCmd::Build { force }) => run_stage(&cli.root, "proto", force)?,
        Command::Detector(DetectorCmd::Train { force }) => run_stage(&cli.root, "detector", force)?,
        Command::Detector(DetectorCmd::Eval) => {
            let exp = open(&cli.root)?;
            let rep = exp.report("augmentation")?;
            println!("{}", serde_json::to_string_pretty(&rep["table"])?);
        }
        Command::Detector(DetectorCmd::Compare { configs, seeds, out }) => {
            let exp = open(&cli.root)?;
            let cfgs = read_detector_configs(&configs)?;
            let table = exp.compare_detectors(&cfgs, &(0..seeds).collect::<Vec<_>>())?;
            fs::write(&out, serde_json::to_string_pretty(&table)?).with_context(|| out.display().to_string())?;
            print!("{}", table.to_csv());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn require(exp: &Experiment, stage: &str) -> Result<()> {
    if !exp.completed(stage) {
        return Err(depflow::Error::Prerequisite(stage.into()).into());
    }
    Ok(())
}

fn world_and_dae(exp: &Experiment) -> Result<(LoadedWorld, DaeModel)> {
    require(exp, "dae")?;
    Ok((
        LoadedWorld::load(&exp.root.join("world"))?,
        DaeModel::load(&exp.root.join("dae.ckpt"))?,
    ))
}

fn read_detector_configs(dir: &Path) -> Result<Vec<DetectorConfig>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| dir.display().to_string())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    paths.sort();
    if paths.len() < 2 {
        bail!("{} holds {} detector configs; need at least two", dir.display(), paths.len());
    }
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).with_context(|| p.display().to_string())?;
            Ok(DetectorConfig::from_text(&text, &p.display().to_string())?)
        })
        .collect()
}

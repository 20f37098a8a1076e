use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use semvlp_core::encoder::{EncoderConfig, Mode};
use semvlp_core::finetune::Task;
use semvlp_core::pretrain::ModeMix;
use semvlp_core::synthworld::{Split, Vocab};
use semvlp_harness::attention::{dump_attention, DumpFilter};
use semvlp_harness::gradcheck::gradcheck;
use semvlp_harness::run::{self, load_corpus, RunDir};
use semvlp_harness::sweeps;
use semvlp_harness::{HarnessError, Result, RunConfig};

#[derive(Parser)]
#[command(
    name = "semvlp",
    version,
    about = "Dual-mode vision-language encoder: corpus, pretraining, fine-tuning and ablations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON); the desk-scale defaults when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Single,
    Two,
    Alternate,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Vqa,
    Retrieval,
    Nlvr,
    Gqa2stage,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Vqa => Task::Vqa,
            TaskArg::Retrieval => Task::Retrieval,
            TaskArg::Nlvr => Task::Nlvr,
            TaskArg::Gqa2stage => Task::Gqa2Stage,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus into the configured directory.
    GenCorpus(Common),
    /// Pretrain (or resume from --checkpoint) under a mode mix.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Overrides the config mode mix.
        #[arg(long)]
        mode: Option<ModeArg>,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Fine-tune a pretrained checkpoint on one task.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long)]
        task: TaskArg,
        #[arg(long, default_value = "single")]
        mode: ModeArg,
    },
    /// Evaluate a fine-tuned checkpoint on dev and test.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long)]
        task: TaskArg,
        #[arg(long, default_value = "single")]
        mode: ModeArg,
    },
    /// Split-layer sweep: two-stream pretraining and QA per value.
    LsSweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated split layers; the config list when omitted.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<usize>>,
    },
    /// Pretraining mode-mix ablation (single only, two only, alternate).
    AblateModes(Common),
    /// Fine-tune in both modes from one checkpoint and mark the dev argmax.
    ModeSweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Restrict to one task; the config list when omitted.
        #[arg(long)]
        task: Option<TaskArg>,
    },
    /// Write every attention matrix of one example as JSON.
    DumpAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, default_value = "single")]
        mode: ModeArg,
        /// Index of the record within the split.
        #[arg(long, default_value_t = 0)]
        example: usize,
        #[arg(long, default_value = "dev")]
        split: SplitArg,
        /// Keep only this 1-based layer.
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        head: Option<usize>,
    },
    /// Finite-difference check of every parameter group in both modes.
    Gradcheck(Common),
    /// Print the effective configuration as JSON (a starting point for --config).
    ShowConfig {
        #[command(flatten)]
        common: Common,
        /// Start from the seconds-scale smoke-test configuration.
        #[arg(long)]
        tiny: bool,
    },
}

fn config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::desk(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn encoder_mode(m: ModeArg) -> Result<Mode> {
    match m {
        ModeArg::Single => Ok(Mode::SingleStream),
        ModeArg::Two => Ok(Mode::TwoStream),
        ModeArg::Alternate => Err(HarnessError::Usage("--mode alternate only applies to pretrain".into())),
    }
}

fn print(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_params(path: &Path) -> Result<semvlp_core::encoder::SharedParams> {
    if !path.exists() {
        return Err(HarnessError::Usage(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(semvlp_core::checkpoint::load(path)?.params)
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenCorpus(common) => {
            let cfg = config(&common)?;
            let hash = run::gen_corpus(&cfg)?;
            print(&serde_json::json!({"dir": cfg.corpus.dir, "corpus_hash": hash}))
        }
        Command::Pretrain {
            common,
            mode,
            checkpoint,
        } => {
            let mut cfg = config(&common)?;
            if let Some(m) = mode {
                cfg.pretrain.mode_mix = match m {
                    ModeArg::Single => ModeMix::SingleOnly,
                    ModeArg::Two => ModeMix::TwoOnly,
                    ModeArg::Alternate => ModeMix::Alternate,
                };
            }
            print(&run::pretrain(&cfg, checkpoint.as_deref())?)
        }
        Command::Finetune {
            common,
            checkpoint,
            task,
            mode,
        } => {
            let cfg = config(&common)?;
            print(&run::finetune(&cfg, &checkpoint, task.into(), encoder_mode(mode)?)?)
        }
        Command::Eval {
            common,
            checkpoint,
            task,
            mode,
        } => {
            let cfg = config(&common)?;
            print(&run::eval(&cfg, &checkpoint, task.into(), encoder_mode(mode)?)?)
        }
        Command::LsSweep { common, values } => {
            let cfg = config(&common)?;
            let values = values.unwrap_or_else(|| cfg.sweep.split_layers.clone());
            print(&sweeps::ls_sweep(&cfg, &values)?)
        }
        Command::AblateModes(common) => print(&sweeps::ablate_modes(&config(&common)?)?),
        Command::ModeSweep {
            common,
            checkpoint,
            task,
        } => {
            let mut cfg = config(&common)?;
            if let Some(t) = task {
                cfg.sweep.tasks = vec![t.into()];
            }
            print(&sweeps::mode_sweep(&cfg, &checkpoint)?)
        }
        Command::DumpAttention {
            common,
            checkpoint,
            mode,
            example,
            split,
            layer,
            head,
        } => {
            let cfg = config(&common)?;
            let mode = encoder_mode(mode)?;
            let params = load_params(&checkpoint)?;
            let (corpus, _) = load_corpus(&cfg, params.config.vocab_size)?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Dev => Split::Dev,
                SplitArg::Test => Split::Test,
            };
            let records = corpus.split(split);
            let record = records.get(example).ok_or_else(|| {
                HarnessError::Usage(format!(
                    "example {example} outside the {} records of that split",
                    records.len()
                ))
            })?;
            let dump = dump_attention(&params, &corpus.vocab, record, mode, DumpFilter { layer, head })?;
            let dir = RunDir::claim(&cfg.out_dir)?;
            let path = dir.join(&format!("attention_{}_{}.json", mode, record.scene.scene_id));
            std::fs::write(&path, serde_json::to_string(&dump)?).map_err(|e| HarnessError::io(&path, e))?;
            print(&serde_json::json!({"path": path, "maps": dump.maps.len()}))
        }
        Command::ShowConfig { common, tiny } => {
            let cfg = match (tiny, &common.config) {
                (true, None) => {
                    let mut cfg = RunConfig::tiny();
                    cfg.seed = common.seed.unwrap_or(cfg.seed);
                    cfg.out_dir = common.out.clone().unwrap_or(cfg.out_dir);
                    cfg
                }
                (true, Some(_)) => return Err(HarnessError::Usage("--tiny and --config are exclusive".into())),
                (false, _) => config(&common)?,
            };
            print(&cfg)
        }
        Command::Gradcheck(common) => {
            let (encoder, seed) = match &common.config {
                Some(path) => {
                    let cfg = RunConfig::load(path)?;
                    (cfg.encoder, common.seed.unwrap_or(cfg.seed))
                }
                None => (EncoderConfig::tiny(Vocab::standard().len()), common.seed.unwrap_or(0)),
            };
            let report = gradcheck(&encoder, seed, None)?;
            for mode in Mode::BOTH {
                eprintln!("{mode}: worst relative error {:.3e}", report.worst(mode));
            }
            print(&report)?;
            match report.failures().as_slice() {
                [] => Ok(()),
                bad => Err(HarnessError::Invariant(format!(
                    "gradient mismatch in {}",
                    bad.iter()
                        .map(|g| format!("{} ({})", g.group, g.mode))
                        .collect::<Vec<_>>()
                        .join(", ")
                ))),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

//! `dance` command line.
//!
//! Exit codes: 0 success, 1 usage, 2 validation, 3 runtime.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::archspace::{count_params, LayerMask};
use crate::diffcore::Module;
use crate::error::{Error, Result};
use crate::evalbench::{
    ablation_run, evaluate_accuracy, fine_grid, coarse_grid, sensitivity_sweep, sweep_constraints, write_ablation_csv,
    write_sensitivity_csv, Evaluated, Pretrained, SensitivityAxis,
};
use crate::harness::card::{parse_card, render_card};
use crate::harness::checkpoint::{check_config_hash, load_checkpoint, save_checkpoint, Checkpoint, HashCheck};
use crate::harness::config::ExperimentConfig;
use crate::harness::data::{load_dataset, Splits};
use crate::harness::metrics::{JsonlSink, MetricsSink};
use crate::trainer::{
    stage1_pretrain, stage2_distribution_learning, stage3_finetune, write_back, SearchModel, StageIo, TrainState,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "dance", about = "Constraint-aware feature-dimension search over a weight-shared SuperNet")]
pub struct Cli {
    /// Experiment config (flat dotted keys).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for checkpoints, metrics, cards and CSVs.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Load checkpoints even when their config hash differs.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GridArg {
    Coarse,
    Fine,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run training stages.
    Train {
        #[arg(long, value_enum, default_value = "all")]
        stage: StageArg,
        /// Deployment constraint for stage 3.
        #[arg(long, allow_negative_numbers = true)]
        constraint: Option<f64>,
    },
    /// Print the deployment architecture card for a constraint.
    Sample {
        #[arg(long, allow_negative_numbers = true)]
        constraint: f64,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Accuracy of a checkpoint, optionally restricted to a card's masks.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        card: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Baseline comparison over a constraint grid; writes sweep.csv.
    Sweep {
        #[arg(long, value_enum)]
        grid: Option<GridArg>,
    },
    /// Single-component ablation grid; writes ablation.csv.
    Ablate,
    /// Sensitivity sweep along one axis; writes sensitivity_<axis>.csv.
    Sensitivity {
        #[arg(long)]
        axis: String,
        /// Comma-separated grid (defaults per axis).
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        values: Option<Vec<f64>>,
    },
    /// Dump per-layer score breakdowns of a checkpoint.
    Inspect {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Range(_) | Error::Input(_) | Error::Format { .. } => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{e}");
                    EXIT_USAGE
                }
            };
        }
    };
    match execute(&cli, out, err) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

struct Ctx {
    config: ExperimentConfig,
    out_dir: PathBuf,
    force: bool,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn splits(&self) -> Result<Splits> {
        load_dataset(&self.config.data, self.config.seed)
    }

    fn load(&self, explicit: Option<&Path>, err: &mut dyn Write) -> Result<Checkpoint> {
        let path = match explicit {
            Some(p) => p.to_path_buf(),
            None => ["stage3.ckpt", "stage2.ckpt", "stage1.ckpt"]
                .iter()
                .map(|n| self.path(n))
                .find(|p| p.exists())
                .ok_or_else(|| Error::Input(format!("no checkpoint found in {}", self.out_dir.display())))?,
        };
        let ck = load_checkpoint(&path)?;
        if check_config_hash(&ck, self.config.hash(), self.force)? == HashCheck::Forced {
            let _ = writeln!(err, "warning: {} was written with a different config", path.display());
        }
        Ok(ck)
    }

    fn load_stage(&self, stage: u8, err: &mut dyn Write) -> Result<Checkpoint> {
        let path = self.path(&format!("stage{stage}.ckpt"));
        if !path.exists() {
            return Err(Error::Input(format!("{} not found; run `train --stage {stage}` first", path.display())));
        }
        self.load(Some(&path), err)
    }

    fn save(&self, stage: u8, model: &SearchModel, state: &TrainState, masks: Option<Vec<LayerMask>>) -> Result<()> {
        save_checkpoint(
            &Checkpoint {
                config_hash: self.config.hash(),
                stage,
                model: model.clone(),
                state: state.clone(),
                masks,
            },
            &self.path(&format!("stage{stage}.ckpt")),
        )
    }
}

fn check_constraint(c: f64) -> Result<()> {
    if c > 0.0 && c <= 1.0 {
        Ok(())
    } else {
        Err(Error::Range(format!("constraint {c} outside (0, 1]")))
    }
}

fn execute(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => {
            let loaded = ExperimentConfig::load(p)?;
            for w in &loaded.warnings {
                let _ = writeln!(err, "warning: {w}");
            }
            loaded.config
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(o) = &cli.out {
        config.out_dir = o.clone();
    }
    let ctx = Ctx {
        out_dir: config.out_dir.clone(),
        config,
        force: cli.force,
    };
    std::fs::create_dir_all(&ctx.out_dir)?;
    match &cli.command {
        Command::Train { stage, constraint } => train(&ctx, *stage, *constraint, out, err),
        Command::Sample { constraint, checkpoint } => {
            check_constraint(*constraint)?;
            let ck = ctx.load(checkpoint.as_deref(), err)?;
            let splits = ctx.splits()?;
            let masks = ck.model.deploy_masks(&splits.val.x, *constraint)?;
            let header = vec![
                format!("constraint {constraint}"),
                format!("seed {}", ctx.config.seed),
                format!("params {}", count_params(&ck.model.net, Some(&masks))?),
            ];
            write!(out, "{}", render_card(&masks, &header))?;
            Ok(())
        }
        Command::Evaluate { checkpoint, card, split } => {
            let ck = ctx.load(checkpoint.as_deref(), err)?;
            let splits = ctx.splits()?;
            let data = match split {
                SplitArg::Train => &splits.train,
                SplitArg::Val => &splits.val,
                SplitArg::Test => &splits.test,
            };
            let masks = match (card, &ck.masks) {
                (Some(p), _) => Some(parse_card(&std::fs::read_to_string(p)?, ck.model.net.widths())?),
                (None, m) => m.clone(),
            };
            let acc = evaluate_accuracy(Evaluated::SuperNet(&ck.model.net, masks.as_deref()), data)?;
            writeln!(out, "accuracy {acc}")?;
            Ok(())
        }
        Command::Sweep { grid } => {
            let mut spec = ctx.config.sweep.clone();
            match grid {
                Some(GridArg::Coarse) => spec.constraints = coarse_grid(),
                Some(GridArg::Fine) => spec.constraints = fine_grid(),
                None => {}
            }
            let mut artifacts = Vec::new();
            for &seed in &spec.seeds {
                let splits = load_dataset(&ctx.config.data, seed)?;
                let exp = ctx.config.experiment(splits.train.input_dim());
                let pre = exp.pretrain(seed, &splits)?;
                let model = exp.search(&pre, &splits, seed, &exp.weights, &exp.gate, &exp.train)?;
                artifacts.push(crate::evalbench::Artifact { seed, model, splits });
            }
            let exp = ctx.config.experiment(artifacts[0].splits.train.input_dim());
            let result = sweep_constraints(&spec, &artifacts, &exp.train)?;
            let path = ctx.path("sweep.csv");
            result.write_csv(&path)?;
            writeln!(out, "wrote {} ({} rows)", path.display(), result.records.len())?;
            Ok(())
        }
        Command::Ablate => {
            let pretrained = pretrain_all(&ctx)?;
            let exp = ctx.config.experiment(pretrained[0].splits.train.input_dim());
            let records = ablation_run(&ctx.config.ablation, &exp, &pretrained)?;
            let path = ctx.path("ablation.csv");
            write_ablation_csv(&path, &records)?;
            writeln!(out, "wrote {} ({} rows)", path.display(), records.len())?;
            Ok(())
        }
        Command::Sensitivity { axis, values } => {
            let axis: SensitivityAxis = axis.parse()?;
            let grid = values.clone().unwrap_or_else(|| axis.default_grid());
            if axis == SensitivityAxis::Tau && grid.iter().any(|&t| t <= 0.0) {
                return Err(Error::Range("temperature must be > 0".into()));
            }
            let pretrained = pretrain_all(&ctx)?;
            let exp = ctx.config.experiment(pretrained[0].splits.train.input_dim());
            let records = sensitivity_sweep(axis, &grid, &exp, &pretrained, ctx.config.deploy_constraint)?;
            let path = ctx.path(&format!("sensitivity_{}.csv", axis.as_str()));
            write_sensitivity_csv(&path, &records)?;
            writeln!(out, "wrote {} ({} rows)", path.display(), records.len())?;
            Ok(())
        }
        Command::Inspect { checkpoint } => {
            let ck = ctx.load(checkpoint.as_deref(), err)?;
            writeln!(out, "stage {} epoch {} params {}", ck.stage, ck.state.epoch, ck.model.net.num_scalars())?;
            for st in &ck.model.importance {
                let s = st.current_score(&ck.model.score_weights);
                writeln!(out, "layer {} width {}", st.layer, st.width())?;
                for i in 0..st.width() {
                    writeln!(
                        out,
                        "  dim {i:3} static {:.6} dynamic {:.6} feature {:.6} corr {:.6} score {:.6}",
                        s.static_part[i], s.dynamic_part[i], s.feature_part[i], s.corr_part[i], s.values[i]
                    )?;
                }
            }
            Ok(())
        }
    }
}

fn pretrain_all(ctx: &Ctx) -> Result<Vec<Pretrained>> {
    ctx.config
        .sweep
        .seeds
        .iter()
        .map(|&seed| {
            let splits = load_dataset(&ctx.config.data, seed)?;
            let exp = ctx.config.experiment(splits.train.input_dim());
            let model = exp.pretrain(seed, &splits)?;
            Ok(Pretrained { seed, model, splits })
        })
        .collect()
}

fn train(ctx: &Ctx, stage: StageArg, constraint: Option<f64>, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let cfg = &ctx.config;
    let constraint = constraint.unwrap_or(cfg.deploy_constraint);
    check_constraint(constraint)?;
    let splits = ctx.splits()?;
    let metrics_path = ctx.path("metrics.jsonl");
    let fresh_metrics = matches!(stage, StageArg::One | StageArg::All);
    let mut sink: Box<dyn MetricsSink> = if fresh_metrics {
        Box::new(JsonlSink::create(&metrics_path)?)
    } else {
        Box::new(JsonlSink::append(&metrics_path)?)
    };

    let run1 = matches!(stage, StageArg::One | StageArg::All);
    let run2 = matches!(stage, StageArg::Two | StageArg::All);
    let run3 = matches!(stage, StageArg::Three | StageArg::All);

    let (mut model, mut state) = if run1 {
        let exp = cfg.experiment(splits.train.input_dim());
        let model = SearchModel::new(exp.net, exp.gate, exp.weights, cfg.seed)?;
        (model, TrainState::new(cfg.seed, cfg.train.weight_decay))
    } else if run2 {
        let resume = ctx.path("stage2.ckpt");
        let ck = if resume.exists() {
            let ck = ctx.load(Some(&resume), err)?;
            if ck.state.stage == 2 && !ck.state.stopped && ck.state.epoch < cfg.train.stage2_epochs {
                writeln!(err, "resuming stage 2 at epoch {}", ck.state.epoch)?;
                ck
            } else {
                ctx.load_stage(1, err)?
            }
        } else {
            ctx.load_stage(1, err)?
        };
        (ck.model, ck.state)
    } else {
        let ck = ctx.load_stage(2, err)?;
        (ck.model, ck.state)
    };

    if run1 {
        let r = stage1_pretrain(&mut model, &splits, &cfg.train, &mut state, &mut StageIo::new(sink.as_mut()))?;
        ctx.save(1, &model, &state, None)?;
        writeln!(out, "stage 1: {} epochs, val accuracy {:.4}", r.epochs_run, r.final_val_accuracy)?;
    }
    if run2 {
        let mut hook = |m: &SearchModel, s: &TrainState| -> Result<bool> {
            ctx.save(2, m, s, None)?;
            Ok(true)
        };
        let mut io = StageIo {
            sink: sink.as_mut(),
            on_epoch: Some(&mut hook),
        };
        let r = stage2_distribution_learning(&mut model, &splits, &cfg.train, &mut state, &mut io)?;
        ctx.save(2, &model, &state, None)?;
        writeln!(out, "stage 2: {} epochs, val accuracy {:.4}", r.epochs_run, r.final_val_accuracy)?;
    }
    if run3 {
        let outcome = stage3_finetune(
            &model,
            &splits,
            &splits.val.x,
            constraint,
            cfg.seed,
            &cfg.train,
            &mut state,
            &mut StageIo::new(sink.as_mut()),
        )?;
        let mut deployed = model.clone();
        write_back(&mut deployed.net, &outcome.subnet)?;
        ctx.save(3, &deployed, &state, Some(outcome.masks.clone()))?;
        let header = vec![
            format!("constraint {constraint}"),
            format!("seed {}", cfg.seed),
            format!("params {}", outcome.subnet.param_count()),
        ];
        std::fs::write(ctx.path("card.txt"), render_card(&outcome.masks, &header))?;
        writeln!(
            out,
            "stage 3: pre-fine-tune val accuracy {:.4}, after {:.4}",
            outcome.pre_accuracy, outcome.report.final_val_accuracy
        )?;
    }
    sink.flush()?;
    Ok(())
}

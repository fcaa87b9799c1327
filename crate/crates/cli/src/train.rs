//! `compconv train`: toy classifier training.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use compconv::data::{load_idx, split, synth_stripes, Dataset};
use compconv::network::Network;
use compconv::train::{train, History, TrainConfig};
use compconv::zoo::{compress, toy_cnn, ArchSpec, TOY_COMP_POLICY};
use serde::{Deserialize, Serialize};

use crate::{to_json, CliError, CliResult, Common, Format, Outcome, SCHEMA_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Stripes,
    Idx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyArch {
    ToyComp,
    ToyVanilla,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value_t = Task::Stripes)]
    pub task: Task,
    #[arg(long, value_enum, default_value_t = ToyArch::ToyComp)]
    pub arch: ToyArch,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u32).range(1..))]
    pub batch_size: u32,
    /// History CSV path; the checkpoint defaults to the same path with a `.ckpt` extension.
    #[arg(long, default_value = "history.csv")]
    pub out: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Number of stripe images.
    #[arg(long, default_value_t = 128)]
    pub samples: usize,
    /// Stripe image side (even).
    #[arg(long, default_value_t = 8)]
    pub size: usize,
    #[arg(long, default_value_t = 0.2)]
    pub noise: f64,
    /// Hold out this fraction of every class for evaluation.
    #[arg(long)]
    pub eval_fraction: Option<f64>,
    #[arg(long, required_if_eq("task", "idx"))]
    pub idx_images: Option<PathBuf>,
    #[arg(long, required_if_eq("task", "idx"))]
    pub idx_labels: Option<PathBuf>,
    /// Read at most this many IDX samples.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub schema_version: u32,
    pub task: Task,
    pub arch: ToyArch,
    pub seed: u64,
    pub config: TrainConfig,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub params: u64,
    pub final_loss: f64,
    pub final_train_acc: f64,
    #[serde(default)]
    pub final_eval_acc: Option<f64>,
    pub history_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub history: History,
}

fn load_data(args: &TrainArgs, seed: u64) -> CliResult<Dataset> {
    match args.task {
        Task::Stripes => Ok(synth_stripes(args.samples, args.size, args.noise, seed)?),
        Task::Idx => {
            let (Some(images), Some(labels)) = (&args.idx_images, &args.idx_labels) else {
                return Err(CliError::usage("--task idx needs --idx-images and --idx-labels"));
            };
            load_idx(images, labels, args.limit).map_err(|e| CliError::io(format!("loading IDX data: {e}")))
        }
    }
}

pub fn build_arch(arch: ToyArch, data: &Dataset) -> CliResult<ArchSpec> {
    let (c, h, w) = data.image_dims();
    if h != w {
        return Err(CliError::usage(format!("toy networks need square images, got {h}x{w}")));
    }
    let base = toy_cnn(c, h, data.num_classes.max(2));
    Ok(match arch {
        ToyArch::ToyVanilla => base,
        ToyArch::ToyComp => compress(&base, TOY_COMP_POLICY)?,
    })
}

fn checkpoint_path(args: &TrainArgs) -> PathBuf {
    args.checkpoint
        .clone()
        .unwrap_or_else(|| args.out.with_extension("ckpt"))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(format!("writing {}: {e}", path.display())))
}

pub fn build_report(args: &TrainArgs, seed: u64) -> CliResult<TrainReport> {
    let data = load_data(args, seed)?;
    let (train_set, eval_set) = match args.eval_fraction {
        Some(f) => {
            let (a, b) = split(&data, 1.0 - f, seed)?;
            (a, Some(b))
        }
        None => (data, None),
    };
    let mut net = Network::init(build_arch(args.arch, &train_set)?, seed)?;
    let config = TrainConfig {
        learning_rate: args.lr,
        momentum: args.momentum,
        batch_size: args.batch_size as usize,
        epochs: args.epochs,
        seed,
        lr_schedule: Vec::new(),
    };
    let history = train(&mut net, &train_set, &config, eval_set.as_ref())?;
    write_file(&args.out, history.to_csv()?.as_bytes())?;
    let ckpt = checkpoint_path(args);
    net.save(&ckpt)
        .map_err(|e| CliError::io(format!("writing {}: {e}", ckpt.display())))?;
    let last = *history.last().expect("history holds epoch 0");
    Ok(TrainReport {
        schema_version: SCHEMA_VERSION,
        task: args.task,
        arch: args.arch,
        seed,
        config,
        train_samples: train_set.len(),
        eval_samples: eval_set.as_ref().map_or(0, Dataset::len),
        params: net.param_count(),
        final_loss: last.loss,
        final_train_acc: last.train_acc,
        final_eval_acc: last.eval_acc,
        history_path: args.out.clone(),
        checkpoint_path: ckpt,
        history,
    })
}

impl TrainReport {
    pub fn to_text(&self) -> String {
        let mut s = format!("{:>5} {:>10} {:>9} {:>9}\n", "epoch", "loss", "train_acc", "eval_acc");
        for r in &self.history.records {
            let eval = r.eval_acc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into());
            s.push_str(&format!(
                "{:>5} {:>10.5} {:>9.4} {:>9}\n",
                r.epoch, r.loss, r.train_acc, eval
            ));
        }
        s.push_str(&format!(
            "final train accuracy {:.4}{}\nparams {}  history {}  checkpoint {}\n",
            self.final_train_acc,
            self.final_eval_acc
                .map(|a| format!(", eval accuracy {a:.4}"))
                .unwrap_or_default(),
            self.params,
            self.history_path.display(),
            self.checkpoint_path.display(),
        ));
        s
    }
}

pub fn run(args: &TrainArgs, common: &Common) -> CliResult<Outcome> {
    let r = build_report(args, common.seed)?;
    Ok(Outcome::ok(match common.format {
        Format::Text => r.to_text(),
        Format::Json => to_json(&r),
        Format::Csv => r.history.to_csv()?,
    }))
}

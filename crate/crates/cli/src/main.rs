//! `nirgan` — synthesize data, pretrain the face-feature extractor, train
//! VIS→NIR translators, translate images and evaluate verification.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use nirgan::backbone::{pretrain_ffe, LabeledFaceSet, PretrainOptions};
use nirgan::data::{self, Domain, PairedImages, ProtocolSplit, SyntheticSpec};
use nirgan::evaluation::{evaluate_protocol, translate_images};
use nirgan::tensor::Tensor;
use nirgan::training::{self, Ablation, TrainState};
use nirgan::{Config, Error};

const EXIT_USAGE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_DIVERGENCE: u8 = 4;
const EXIT_PROTOCOL: u8 = 5;

#[derive(Parser, Debug)]
#[command(name = "nirgan", version, about = "Face-feature-embedded CycleGAN for VIS to NIR face translation")]
struct Cli {
    /// TOML configuration file with [ffe], [generator], [discriminator], [loss], [train] and [data] sections.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Override one configuration key, e.g. `--set train.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic paired VIS/NIR face dataset.
    SynthData {
        /// Output root (config: data.root, or data.pretrain_root with --pool).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Generator seed (config: data.synthetic.seed, or data.pretrain_seed with --pool).
        #[arg(long)]
        seed: Option<u64>,
        /// Generate the disjoint extractor-pretraining pool instead.
        #[arg(long)]
        pool: bool,
    },
    /// Pretrain the face-feature extractor on the pretraining pool.
    PretrainFfe {
        /// Checkpoint to write (config: train.ffe_checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the two translators and discriminators.
    Train {
        /// Comparison arm: sets generator.encoder and loss.gamma_pc.
        #[arg(long, value_enum)]
        ablation: Option<Arm>,
        /// Output directory (config: train.out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Training checkpoint to continue from (config: train.resume).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Translate every PNG in a directory of VIS faces to fake NIR.
    Translate {
        /// Training checkpoint (default: <train.out_dir>/final.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory of VIS images, searched recursively.
        #[arg(long)]
        input: PathBuf,
        /// Output directory; relative paths are preserved.
        #[arg(long)]
        out: PathBuf,
        /// Also write grid.png with input and translation side by side.
        #[arg(long)]
        grid: bool,
    },
    /// Score the test split and write an evaluation report.
    Evaluate {
        /// Training checkpoint (default: <train.out_dir>/final.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Split manifest (default: recomputed from the [data] section).
        #[arg(long)]
        split: Option<PathBuf>,
        /// Report file (default: <train.out_dir>/eval_report.json).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Protocol name recorded in the report.
        #[arg(long, default_value = "synthetic")]
        protocol: String,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Arm {
    Basic,
    BasicPc,
    FfePc,
}

impl From<Arm> for Ablation {
    fn from(a: Arm) -> Self {
        match a {
            Arm::Basic => Ablation::Basic,
            Arm::BasicPc => Ablation::BasicPc,
            Arm::FfePc => Ablation::FfePc,
        }
    }
}

fn keys_help() -> String {
    let mut s = String::from("Configuration keys (settable in the file or with --set):\n");
    for (key, default) in Config::documented_keys() {
        let _ = writeln!(s, "  {key} = {default}");
    }
    s
}

fn main() -> ExitCode {
    let command = Cli::command().after_help(keys_help());
    let cli = match command.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {:#}", failure.error);
            ExitCode::from(failure.code)
        }
    }
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Divergence { .. } | Error::Numeric(_) => EXIT_DIVERGENCE,
        Error::ProtocolViolation(_) => EXIT_PROTOCOL,
        _ => EXIT_DATA,
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = error
            .chain()
            .find_map(|c| c.downcast_ref::<Error>())
            .map_or(EXIT_DATA, exit_code);
        Failure { code, error }
    }
}

fn usage(msg: String) -> Failure {
    Failure {
        code: EXIT_USAGE,
        error: anyhow::anyhow!(msg),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let path = cli
        .config
        .ok_or_else(|| usage("a configuration file is required (--config PATH)".into()))?;
    if !path.is_file() {
        return Err(usage(format!("configuration file {} not found", path.display())));
    }
    let mut config = Config::load(&path).context("config")?;
    config.apply_overrides(&cli.overrides).context("config")?;
    match cli.command {
        Command::SynthData { out, seed, pool } => synth_data(config, out, seed, pool).context("synth-data")?,
        Command::PretrainFfe { out } => pretrain(config, out).context("pretrain-ffe")?,
        Command::Train { ablation, out, resume } => train(config, ablation, out, resume, &cli.overrides).context("train")?,
        Command::Translate {
            checkpoint,
            input,
            out,
            grid,
        } => translate(config, checkpoint, &input, &out, grid).context("translate")?,
        Command::Evaluate {
            checkpoint,
            split,
            out,
            protocol,
        } => evaluate(config, checkpoint, split, out, &protocol).context("evaluate")?,
    }
    Ok(())
}

fn synth_data(config: Config, out: Option<PathBuf>, seed: Option<u64>, pool: bool) -> anyhow::Result<()> {
    let d = &config.data;
    let (root, spec) = if pool {
        let spec = SyntheticSpec {
            n_subjects: d.pretrain_subjects,
            seed: seed.unwrap_or(d.pretrain_seed),
            ..d.synthetic.clone()
        };
        (out.unwrap_or_else(|| d.pretrain_root.clone().into()), spec)
    } else {
        let spec = SyntheticSpec {
            seed: seed.unwrap_or(d.synthetic.seed),
            ..d.synthetic.clone()
        };
        (out.unwrap_or_else(|| d.root.clone().into()), spec)
    };
    let samples = data::generate_synthetic_dataset(&spec, &root)?;
    println!(
        "wrote {} pairs of {} subjects to {}",
        samples.len(),
        spec.n_subjects,
        root.display()
    );
    Ok(())
}

fn pretrain(config: Config, out: Option<PathBuf>) -> anyhow::Result<()> {
    config.validate()?;
    let out = out
        .or_else(|| (!config.train.ffe_checkpoint.is_empty()).then(|| config.train.ffe_checkpoint.clone().into()))
        .unwrap_or_else(|| PathBuf::from("runs/ffe.ckpt"));
    let samples = data::scan_dataset(Path::new(&config.data.pretrain_root))?;
    let images = PairedImages::load(&samples, config.ffe.input_resolution)?;
    let mut subjects = images.subjects().to_vec();
    subjects.sort();
    subjects.dedup();
    let label = |s: &String| subjects.binary_search(s).expect("listed subject");
    let labels: Vec<usize> = images.subjects().iter().chain(images.subjects()).map(label).collect();
    let idx: Vec<usize> = (0..images.len()).collect();
    let all = Tensor::concat_batch(&[images.domain(Domain::Vis, &idx)?, images.domain(Domain::Nir, &idx)?])?;
    let set = LabeledFaceSet::new(all, labels)?;
    let t = &config.train;
    let options = PretrainOptions {
        epochs: t.pretrain_epochs,
        batch_size: t.pretrain_batch_size,
        learning_rate: t.pretrain_learning_rate,
        seed: t.seed,
    };
    eprintln!(
        "pretraining on {} images of {} identities for {} epochs",
        set.len(),
        set.n_classes(),
        options.epochs
    );
    let report = pretrain_ffe(&set, &config.ffe, &options)?;
    training::save_ffe_checkpoint(&out, &config, &report.params, options.epochs as u64)?;
    println!(
        "final loss {:.4}, train accuracy {:.3}; wrote {}",
        report.final_loss,
        report.train_accuracy,
        out.display()
    );
    Ok(())
}

fn split_from_config(config: &Config) -> anyhow::Result<ProtocolSplit> {
    let d = &config.data;
    let samples = data::scan_dataset(Path::new(&d.root))?;
    Ok(data::make_split(
        &samples,
        d.n_train_subjects,
        d.n_test_subjects,
        d.pairs_per_subject,
        d.split_seed,
    )?)
}

fn train(
    mut config: Config,
    ablation: Option<Arm>,
    out: Option<PathBuf>,
    resume: Option<PathBuf>,
    overrides: &[String],
) -> anyhow::Result<()> {
    if let Some(arm) = ablation {
        Ablation::from(arm).apply(&mut config);
    }
    if let Some(out) = out {
        config.train.out_dir = out.display().to_string();
    }
    if let Some(resume) = resume {
        config.train.resume = resume.display().to_string();
    }
    config.validate()?;
    let out_dir = PathBuf::from(&config.train.out_dir);
    let mut state = if config.train.resume.is_empty() {
        let pretrained = match config.train.ffe_checkpoint.as_str() {
            "" => None,
            p => Some(training::load_ffe_checkpoint(Path::new(p))?.1),
        };
        TrainState::new(&config, pretrained.as_ref())?
    } else {
        // Architecture comes from the checkpoint; schedule, data and loss
        // weights from the current configuration.
        let mut state = TrainState::load(Path::new(&config.train.resume))?;
        let mut merged = state.config.clone();
        merged.apply_overrides(overrides)?;
        merged.train = config.train.clone();
        merged.data = config.data.clone();
        merged.loss = config.loss;
        merged.validate()?;
        state.config = merged;
        state
    };
    let split = split_from_config(&state.config)?;
    split.save(&out_dir.join("split.json"), Path::new(&state.config.data.root))?;
    let images = PairedImages::load(&split.train, state.config.train.resolution)?;
    let start = state.step;
    let started = Instant::now();
    eprintln!(
        "training {} pairs of {} subjects from step {start} to step {}",
        images.len(),
        split.train_subjects.len(),
        training::total_steps(&state.config.train, images.len())
    );
    let outcome = training::train_loop(&mut state, &images, &out_dir)?;
    if let Some(last) = outcome.records.last() {
        let l = &last.losses;
        println!(
            "step {}: total {:.4} cyc {:.4} pc {:.4} adv_g {:.4} adv_f {:.4} d_v {:.4} d_n {:.4} ({:.1}s)",
            last.step,
            l.total,
            l.cyc,
            l.pc,
            l.adv_g,
            l.adv_f,
            l.d_v,
            l.d_n,
            started.elapsed().as_secs_f64()
        );
    }
    println!("wrote {}", outcome.checkpoint.display());
    Ok(())
}

fn checkpoint_path(config: &Config, given: Option<PathBuf>) -> PathBuf {
    given.unwrap_or_else(|| Path::new(&config.train.out_dir).join(training::FINAL_CHECKPOINT))
}

fn collect_pngs(dir: &Path, out: &mut Vec<PathBuf>) -> anyhow::Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_pngs(&p, out)?;
        } else if p.extension().and_then(|e| e.to_str()) == Some("png") {
            out.push(p);
        }
    }
    Ok(())
}

fn translate(config: Config, checkpoint: Option<PathBuf>, input: &Path, out: &Path, grid: bool) -> anyhow::Result<()> {
    let state = TrainState::load(&checkpoint_path(&config, checkpoint))?;
    let cfg = &state.config;
    let mut files = Vec::new();
    collect_pngs(input, &mut files)?;
    if files.is_empty() {
        bail!(Error::Protocol(format!("no PNG files under {}", input.display())));
    }
    let g = state.network("g.");
    let mut rows = Vec::new();
    for file in &files {
        let vis = data::load_image(file, cfg.train.resolution)?;
        let fake = translate_images(&vis, &cfg.generator, &cfg.ffe, &g)?;
        let rel = file.strip_prefix(input).unwrap_or(file);
        data::save_image(&out.join(rel), &fake)?;
        if grid {
            rows.push(side_by_side(&vis, &fake)?);
        }
    }
    if grid {
        data::save_image(&out.join("grid.png"), &stack_rows(&rows)?)?;
    }
    println!("translated {} images into {}", files.len(), out.display());
    Ok(())
}

/// `(1, 3, h, w)` images concatenated along the width.
fn side_by_side(a: &Tensor<f32>, b: &Tensor<f32>) -> nirgan::Result<Tensor<f32>> {
    let (_, c, h, w) = a.dims4()?;
    let mut data = Vec::with_capacity(2 * a.numel());
    for ch in 0..c {
        for y in 0..h {
            let row = (ch * h + y) * w;
            data.extend_from_slice(&a.data()[row..row + w]);
            data.extend_from_slice(&b.data()[row..row + w]);
        }
    }
    Ok(Tensor::new(vec![1, c, h, 2 * w], data)?)
}

/// `(1, 3, h, w)` images stacked along the height.
fn stack_rows(rows: &[Tensor<f32>]) -> nirgan::Result<Tensor<f32>> {
    let (_, c, h, w) = rows[0].dims4()?;
    let mut data = Vec::with_capacity(rows.len() * rows[0].numel());
    for ch in 0..c {
        for r in rows {
            data.extend_from_slice(&r.data()[ch * h * w..(ch + 1) * h * w]);
        }
    }
    Ok(Tensor::new(vec![1, c, rows.len() * h, w], data)?)
}

fn evaluate(
    config: Config,
    checkpoint: Option<PathBuf>,
    split: Option<PathBuf>,
    out: Option<PathBuf>,
    protocol: &str,
) -> anyhow::Result<()> {
    let state = TrainState::load(&checkpoint_path(&config, checkpoint))?;
    let split = match split {
        Some(p) => ProtocolSplit::load(&p, Path::new(&config.data.root))?,
        None => split_from_config(&config)?,
    };
    let report = evaluate_protocol(&split, &state, protocol)?;
    let out = out.unwrap_or_else(|| Path::new(&config.train.out_dir).join("eval_report.json"));
    report.save(&out)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

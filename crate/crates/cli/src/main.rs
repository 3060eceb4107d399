use acfseg::data::netpbm::{self, Pnm};
use acfseg::data::synthetic::{write_dataset, SyntheticSpec};
use acfseg::data::{write_label_pgm, Split};
use acfseg::evaluation::{
    evaluate, feature_similarity_map, ms_flip_infer, probability_to_pgm, similarity_to_pgm, FusedProbs,
};
use acfseg::gradcheck;
use acfseg::network::OUTPUT_STRIDE;
use acfseg::tensor::argmax_channels;
use acfseg::training::train;
use acfseg::{DatasetManifest, EvalConfig, LabelMap, Model, Result, Tensor, TrainConfig};
use clap::{Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "acfseg", version, about = "Attentional class feature segmentation toolkit")]
struct Cli {
    /// Seed override for commands that draw random numbers.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic shapes dataset.
    GenData {
        /// Key = value spec file; built-in defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write metrics and checkpoints into a run directory.
    Train {
        /// Key = value training config; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Print a progress line every this many iterations (0 = silent).
        #[arg(long, default_value_t = 50)]
        log_every: usize,
    },
    /// Evaluate a checkpoint and write the per-class report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
        /// Test scales, e.g. `--scales 0.75,1,1.25`.
        #[arg(long, value_delimiter = ',', default_value = "1.0")]
        scales: Vec<f32>,
        #[arg(long)]
        flip: bool,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict one image: a label PGM plus one probability PGM per class.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Label map path; probability maps go next to it as `<stem>_prob<k>.pgm`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1.0")]
        scales: Vec<f32>,
        #[arg(long)]
        flip: bool,
    },
    /// Cosine similarity between one pixel's feature and all others.
    Simmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Anchor row in image pixels.
        #[arg(long)]
        row: usize,
        /// Anchor column in image pixels.
        #[arg(long)]
        col: usize,
        #[arg(long, value_enum)]
        stage: Stage,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// Restrict to these ops (repeatable); all when omitted.
        #[arg(long)]
        op: Vec<String>,
        /// Seeds per op, starting at `--seed` (default 0).
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// List the available op names and exit.
        #[arg(long)]
        list: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    Coarse,
    Fine,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let seed = cli.seed;
    match cli.command {
        Command::GenData { spec, out } => gen_data(spec.as_deref(), &out, seed),
        Command::Train { config, data, out, log_every } => run_train(config.as_deref(), &data, &out, seed, log_every),
        Command::Eval { checkpoint, data, split, scales, flip, out } => {
            run_eval(&checkpoint, &data, split, EvalConfig { scales, flip }, out.as_deref())
        }
        Command::Infer { checkpoint, image, out, scales, flip } => {
            infer(&checkpoint, &image, &out, &EvalConfig { scales, flip })
        }
        Command::Simmap { checkpoint, image, row, col, stage, out } => simmap(&checkpoint, &image, row, col, stage, &out),
        Command::Gradcheck { op, seeds, list } => run_gradcheck(&op, seed.unwrap_or(0), seeds, list),
    }
}

fn gen_data(spec: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<ExitCode> {
    let mut spec = match spec {
        Some(p) => SyntheticSpec::read(p)?,
        None => SyntheticSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let m = write_dataset(&spec, out)?;
    println!(
        "wrote {} train and {} val images to {}",
        m.train.len(),
        m.val.len(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn run_train(config: Option<&Path>, data: &Path, out: &Path, seed: Option<u64>, log_every: usize) -> Result<ExitCode> {
    let mut cfg = match config {
        Some(p) => TrainConfig::read(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let manifest = DatasetManifest::read(data)?;
    if manifest.num_classes() != cfg.network.num_classes {
        return Err(acfseg::Error::InvalidArgument(format!(
            "dataset has {} classes but the config expects {}",
            manifest.num_classes(),
            cfg.network.num_classes
        )));
    }
    let train_set = manifest.load(Split::Train)?;
    let val = manifest.load(Split::Val)?;
    let outcome = train(cfg, train_set, &val, &manifest.class_names, out, |s, miou| {
        if let Some(m) = miou {
            eprintln!("iter {} loss {:.4} val mIoU {:.4}", s.iter, s.total, m);
        } else if log_every > 0 && s.iter % log_every == 0 {
            eprintln!("iter {} loss {:.4} lr {:.5}", s.iter, s.total, s.lr);
        }
    })?;
    if let Some(r) = &outcome.final_report {
        let path = out.join("eval.csv");
        std::fs::write(&path, r.to_csv()).map_err(|e| acfseg::Error::File { path, source: e })?;
        println!("final val mIoU {:.4}", r.miou()?);
    }
    println!("checkpoint {}", outcome.final_checkpoint.display());
    Ok(ExitCode::SUCCESS)
}

fn run_eval(checkpoint: &Path, data: &Path, split: SplitArg, cfg: EvalConfig, out: Option<&Path>) -> Result<ExitCode> {
    let model = Model::from_checkpoint(checkpoint)?;
    let manifest = DatasetManifest::read(data)?;
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
    };
    let samples = manifest.load(split)?;
    let report = evaluate(&model, &samples, &manifest.class_names, &cfg)?;
    let csv = report.to_csv();
    match out {
        Some(p) => {
            std::fs::write(p, &csv).map_err(|e| acfseg::Error::File { path: p.to_path_buf(), source: e })?;
            println!("mIoU {:.6}", report.miou()?);
        }
        None => print!("{csv}"),
    }
    Ok(ExitCode::SUCCESS)
}

/// A single image as a `1×3×H×W` batch.
fn read_image(path: &Path) -> Result<Tensor> {
    let t = netpbm::read_ppm(path)?.to_tensor()?;
    let (h, w) = (t.shape()[1], t.shape()[2]);
    t.reshape(&[1, 3, h, w])
}

fn infer(checkpoint: &Path, image: &Path, out: &Path, cfg: &EvalConfig) -> Result<ExitCode> {
    let model = Model::from_checkpoint(checkpoint)?;
    let x = read_image(image)?;
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let probs: FusedProbs = ms_flip_infer(&model, &x, cfg)?;
    let p = probs.final_probs();
    let labels = argmax_channels(p)?.into_iter().map(|c| c as u8).collect();
    write_label_pgm(out, &LabelMap::new(h, w, labels)?)?;
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("pred");
    let dir = out.parent().unwrap_or(Path::new(""));
    for k in 0..model.config().num_classes {
        netpbm::write(&dir.join(format!("{stem}_prob{k}.pgm")), &probability_to_pgm(p, k)?)?;
    }
    println!("wrote {} and {} probability maps", out.display(), model.config().num_classes);
    Ok(ExitCode::SUCCESS)
}

fn simmap(checkpoint: &Path, image: &Path, row: usize, col: usize, stage: Stage, out: &Path) -> Result<ExitCode> {
    let model = Model::from_checkpoint(checkpoint)?;
    let x = read_image(image)?;
    let (h, w) = (x.shape()[2], x.shape()[3]);
    if row >= h || col >= w {
        return Err(acfseg::Error::InvalidArgument(format!("anchor ({row}, {col}) outside the {h}x{w} image")));
    }
    let (top, fine) = model.features(&x)?;
    let feature = match stage {
        Stage::Coarse => top,
        Stage::Fine => fine.ok_or_else(|| {
            acfseg::Error::InvalidArgument("this checkpoint has no fine head (variant = none)".into())
        })?,
    };
    let (c, fh, fw) = (feature.shape()[1], feature.shape()[2], feature.shape()[3]);
    let feature = feature.reshape(&[c, fh, fw])?;
    // Feature cell i is centred on pixel 8i.
    let cell = |p: usize, n: usize| ((p + OUTPUT_STRIDE / 2) / OUTPUT_STRIDE).min(n - 1);
    let map = feature_similarity_map(&feature, cell(row, fh), cell(col, fw))?;
    let pgm: Pnm = similarity_to_pgm(&map)?;
    netpbm::write(out, &pgm)?;
    println!("wrote {fh}x{fw} similarity map to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn run_gradcheck(ops: &[String], first_seed: u64, seeds: u64, list: bool) -> Result<ExitCode> {
    if list {
        for op in gradcheck::OPS {
            println!("{op}");
        }
        return Ok(ExitCode::SUCCESS);
    }
    if let Some(bad) = ops.iter().find(|o| !gradcheck::OPS.contains(&o.as_str())) {
        return Err(acfseg::Error::InvalidArgument(format!(
            "unknown op `{bad}` (see `acfseg gradcheck --list`)"
        )));
    }
    let names: Vec<&str> = ops.iter().map(String::as_str).collect();
    let seed_list: Vec<u64> = (first_seed..first_seed + seeds.max(1)).collect();
    let results = gradcheck::run(&names, &seed_list)?;
    let mut failed = 0;
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        failed += usize::from(!r.passed());
        println!(
            "{:<30} seed {:>3}  max rel err {:.2e}  compared {:>4}  skipped {:>2}  {verdict}",
            r.op, r.seed, r.stats.max_rel_error, r.stats.compared, r.stats.skipped
        );
    }
    println!("{} checks, {failed} failed", results.len());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

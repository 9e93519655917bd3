//! Command-line entry points: synthesize data, train, evaluate, cross-domain
//! evaluate, predict single images, and dump diagnostics.

use std::collections::HashMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::{
    self, load_dataset, load_manifest, normalize_image, preprocess, DatasetSplit, ImageSample,
    Phase, PreprocessConfig, RawSample, SynthConfig,
};
use crate::error::{CgqrError, Result};
use crate::evaluator::{self, EvalReport};
use crate::model::{Ablations, Model, ModelConfig};
use crate::params::ParamStore;
use crate::refine::AttentionTraceData;
use crate::tape::Tape;
use crate::trainer::{self, TrainConfig};

pub const NUM_WORKERS_ENV: &str = "CGQR_NUM_WORKERS";

#[derive(Parser)]
#[command(name = "cgqr", about = "Contour-guided query refinement segmentation", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic echo-like dataset
    Synth(SynthArgs),
    /// Train a model on a dataset directory
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset
    Eval(EvalArgs),
    /// Cross-domain evaluation of a checkpoint on a shifted dataset
    Xeval(EvalArgs),
    /// Predict a single image and write the mask
    Predict(PredictArgs),
    /// Dump attention and contour diagnostics for the first samples
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PhaseArg {
    Ed,
    Es,
    Both,
    None,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    Json,
    Table,
    Csv,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    patients: usize,
    #[arg(long, default_value_t = 4)]
    frames: usize,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long, default_value_t = 3)]
    classes: u8,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0.0)]
    domain_shift: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Flat key=value config file; command-line flags win over file entries
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    tf_epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    mu_aux: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    phase: Option<PhaseArg>,
    #[arg(long = "ablate")]
    ablate: Vec<String>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    split_ratio: Option<f64>,
    /// Validate on the training set itself (overfit experiments)
    #[arg(long, default_value_t = false)]
    val_on_train: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
    report: ReportFormat,
    #[arg(long, default_value_t = false)]
    emit_panels: bool,
    #[arg(long)]
    tag: Option<String>,
    #[arg(long)]
    image_size: Option<usize>,
    /// Per-sample (macro) averaging instead of pooled micro averaging
    #[arg(long, default_value_t = false)]
    macro_average: bool,
}

#[derive(Args)]
struct PredictArgs {
    /// Path to an 8-bit PGM image
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    image_size: Option<usize>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    image_size: Option<usize>,
    /// How many samples to dump diagnostics for
    #[arg(long, default_value_t = 1)]
    samples: usize,
}

/// Entry point: exit 0 on success, 1 on validation errors (bad flags or
/// config), 2 on runtime failures (I/O, training divergence).
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // clap renders help/version through the error path with exit 0
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a, false),
        Command::Xeval(a) => cmd_eval(a, true),
        Command::Predict(a) => cmd_predict(a),
        Command::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &CgqrError) -> i32 {
    match e {
        CgqrError::Config(_) | CgqrError::Data(_) | CgqrError::Shape(_) => 1,
        CgqrError::Io(_) | CgqrError::Serde(_) | CgqrError::Training(_) => 2,
    }
}

fn num_workers() -> Result<usize> {
    match std::env::var(NUM_WORKERS_ENV) {
        Ok(v) => {
            let n: usize = v
                .parse()
                .map_err(|_| CgqrError::Config(format!("{NUM_WORKERS_ENV}={v} is not a count")))?;
            Ok(n.max(1))
        }
        Err(_) => Ok(1),
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_patients: a.patients,
        frames_per_patient: a.frames,
        image_size: (a.image_size, a.image_size),
        n_classes: a.classes,
        noise_level: a.noise,
        domain_shift: a.domain_shift,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let samples = data::generate_synthetic(&cfg)?;
    data::write_dataset(&a.out, &samples, Some(&cfg))?;
    println!("wrote {} samples ({} patients) to {}", samples.len(), a.patients, a.out.display());
    Ok(())
}

// ----- flat key=value config files -----

fn read_config_file(path: &Path) -> Result<HashMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CgqrError::Config(format!(
                "{}:{}: expected key=value, got '{line}'",
                path.display(),
                lineno + 1
            )));
        };
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn file_get<T: FromStr>(file: &HashMap<String, String>, key: &str) -> Result<Option<T>> {
    match file.get(key) {
        None => Ok(None),
        Some(raw) => raw
            .parse::<T>()
            .map(Some)
            .map_err(|_| CgqrError::Config(format!("config key {key}: cannot parse '{raw}'"))),
    }
}

/// flag > config file > default
fn resolve<T: FromStr>(
    flag: Option<T>,
    file: &HashMap<String, String>,
    key: &str,
    default: T,
) -> Result<T> {
    if let Some(v) = flag {
        return Ok(v);
    }
    Ok(file_get(file, key)?.unwrap_or(default))
}

fn phase_of(p: PhaseArg) -> Phase {
    match p {
        PhaseArg::Ed => Phase::Ed,
        PhaseArg::Es => Phase::Es,
        PhaseArg::None | PhaseArg::Both => Phase::None,
    }
}

fn dataset_classes(raws: &[RawSample], root: &Path) -> Result<u8> {
    if let Ok(manifest) = load_manifest(root) {
        if let Some(cfg) = manifest.config {
            return Ok(cfg.n_classes);
        }
    }
    let k = raws
        .iter()
        .flat_map(|s| s.mask.iter())
        .copied()
        .max()
        .ok_or_else(|| CgqrError::Data("dataset has no samples".into()))?;
    if k == 0 {
        return Err(CgqrError::Data("dataset masks contain no foreground".into()));
    }
    Ok(k)
}

fn prep_for(raws: &[RawSample], image_size: Option<usize>) -> Result<PreprocessConfig> {
    let native = raws
        .first()
        .map(|s| s.image.dim())
        .ok_or_else(|| CgqrError::Data("dataset has no samples".into()))?;
    let target = match image_size {
        Some(s) => (s, s),
        None => native,
    };
    Ok(PreprocessConfig { target_size: target, boundary_thickness: 1 })
}

fn filter_phase(raws: Vec<RawSample>, phase: Phase) -> Vec<RawSample> {
    match phase {
        Phase::None => raws,
        p => raws.into_iter().filter(|s| s.phase == p).collect(),
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let _workers = num_workers()?;
    let file = match &a.config {
        Some(p) => read_config_file(p)?,
        None => HashMap::new(),
    };
    let ablations = Ablations::from_flags(&a.ablate)?;
    let phase_arg = match a.phase {
        Some(p) => p,
        None => match file_get::<String>(&file, "phase")?.as_deref() {
            Some("ed") => PhaseArg::Ed,
            Some("es") => PhaseArg::Es,
            Some("both") => PhaseArg::Both,
            Some("none") | None => PhaseArg::None,
            Some(other) => {
                return Err(CgqrError::Config(format!("config phase '{other}' unknown")))
            }
        },
    };
    let cfg = TrainConfig {
        epochs: resolve(a.epochs, &file, "epochs", 100)?,
        teacher_forcing_epochs: resolve(a.tf_epochs, &file, "tf_epochs", 20)?,
        batch_size: resolve(a.batch, &file, "batch", 4)?,
        lr0: resolve(a.lr, &file, "lr", 1e-4)?,
        lambda: resolve(a.lambda, &file, "lambda", 0.5)?,
        mu_aux: resolve(a.mu_aux, &file, "mu_aux", 0.4)?,
        seed: resolve(a.seed, &file, "seed", 0)?,
        weight_decay: file_get(&file, "weight_decay")?.unwrap_or(1e-4),
        phase: phase_of(phase_arg),
        ablations,
        grad_clip: Some(trainer::GRAD_CLIP_NORM),
    };
    cfg.validate()?;
    let split_ratio = resolve(a.split_ratio, &file, "split_ratio", 0.75)?;
    let image_size = match a.image_size {
        Some(s) => Some(s),
        None => file_get(&file, "image_size")?,
    };

    let raws = load_dataset(&a.data)?;
    let n_classes = dataset_classes(&raws, &a.data)?;
    let prep = prep_for(&raws, image_size)?;

    let phases: Vec<(Phase, PathBuf)> = if phase_arg == PhaseArg::Both {
        vec![(Phase::Ed, a.out.join("ed")), (Phase::Es, a.out.join("es"))]
    } else {
        vec![(cfg.phase, a.out.clone())]
    };
    for (phase, out_dir) in phases {
        let phase_raws = filter_phase(raws.clone(), phase);
        if phase_raws.is_empty() {
            return Err(CgqrError::Data(format!("no samples for phase {phase}")));
        }
        let split = if a.val_on_train {
            let all: Vec<ImageSample> =
                phase_raws.iter().map(|r| preprocess(r, &prep)).collect::<Result<_>>()?;
            DatasetSplit { train: all.clone(), val: all, split_ratio: 1.0, seed: cfg.seed }
        } else {
            data::split_by_patient(&phase_raws, split_ratio, cfg.seed, &prep)?
        };
        let mut model_cfg = ModelConfig::desk(n_classes as usize);
        model_cfg.ablations = cfg.ablations;
        let model = Model::new(model_cfg)?;
        let run_cfg = TrainConfig { phase, ..cfg.clone() };
        let state = trainer::train(&model, &run_cfg, &split, &out_dir)?;
        println!(
            "phase {phase}: {} epochs, best val DSC {:.4}, checkpoint {}",
            state.epoch,
            state.best_val_dsc,
            state.best_checkpoint.as_deref().unwrap_or(Path::new("-")).display()
        );
    }
    Ok(())
}

/// Rebuild the model and parameters recorded in a checkpoint.
pub fn load_model(checkpoint: &Path) -> Result<(Model, ParamStore)> {
    let meta = crate::params::read_checkpoint_meta(checkpoint)?;
    let model_cfg: ModelConfig = serde_json::from_value(
        meta.config
            .get("model")
            .cloned()
            .ok_or_else(|| CgqrError::Data("checkpoint lacks model config".into()))?,
    )?;
    let model = Model::new(model_cfg)?;
    let mut store = ParamStore::new();
    model.init_params(&mut store, 0);
    store.load_checkpoint(checkpoint)?;
    Ok((model, store))
}

fn load_samples(root: &Path, image_size: Option<usize>) -> Result<Vec<(String, ImageSample)>> {
    let raws = load_dataset(root)?;
    if raws.is_empty() {
        return Err(CgqrError::Data(format!("no samples under {}", root.display())));
    }
    let prep = prep_for(&raws, image_size)?;
    let mut out = Vec::with_capacity(raws.len());
    let mut counter: HashMap<String, usize> = HashMap::new();
    for r in &raws {
        let key = format!("{}_{}_{}", r.patient_id, r.view, r.phase);
        let idx = counter.entry(key.clone()).and_modify(|v| *v += 1).or_insert(0);
        out.push((format!("{key}{idx}"), preprocess(r, &prep)?));
    }
    Ok(out)
}

fn cmd_eval(a: EvalArgs, cross_domain: bool) -> Result<()> {
    let (model, mut store) = load_model(&a.checkpoint)?;
    let pairs = load_samples(&a.data, a.image_size)?;
    let samples: Vec<ImageSample> = pairs.iter().map(|(_, s)| s.clone()).collect();
    let default_tag = a
        .data
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let tag = a.tag.clone().unwrap_or(default_tag);
    let report = evaluator::evaluate(&model, &mut store, &samples, &tag, a.macro_average)?;

    let rendered = render_report(&report, a.report)?;
    print!("{rendered}");
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out)?;
        let name = match a.report {
            ReportFormat::Json => "report.json",
            ReportFormat::Table => "report.txt",
            ReportFormat::Csv => "report.csv",
        };
        let prefix = if cross_domain { "xeval_" } else { "" };
        std::fs::write(out.join(format!("{prefix}{name}")), &rendered)?;
        if a.emit_panels {
            for (id, sample) in &pairs {
                let mut tape = Tape::new();
                let art = model.forward(&mut tape, &mut store, &sample.image, None, false, false)?;
                evaluator::emit_panels(
                    id,
                    sample,
                    &tape,
                    &art.bundle,
                    &art.contours,
                    model.cfg.n_classes,
                    &out.join("panels"),
                )?;
            }
        }
    } else if a.emit_panels {
        return Err(CgqrError::Config("--emit-panels requires --out".into()));
    }
    Ok(())
}

fn render_report(report: &EvalReport, fmt: ReportFormat) -> Result<String> {
    Ok(match fmt {
        ReportFormat::Json => {
            let mut s = report.to_json()?;
            s.push('\n');
            s
        }
        ReportFormat::Table => report.to_table(),
        ReportFormat::Csv => report.to_csv(),
    })
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let (model, mut store) = load_model(&a.checkpoint)?;
    let raw8 = crate::pgm::read_pgm(&a.data)?;
    let img = raw8.mapv(|v| v as f64);
    let img = match a.image_size {
        Some(s) => data::resize_bilinear(&img, (s, s)),
        None => img,
    };
    let img = normalize_image(&img)?;
    let mut tape = Tape::new();
    let art = model.forward(&mut tape, &mut store, &img, None, false, false)?;
    let pred = crate::model::argmax_mask(&tape, art.bundle.refined_probs);
    std::fs::create_dir_all(&a.out)?;
    let stem = a
        .data
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let mask_path = a.out.join(format!("{stem}_mask.pgm"));
    let k = model.cfg.n_classes.max(1) as f64;
    let vis = pred.mapv(|v| ((v as f64) * 255.0 / k).round() as u8);
    crate::pgm::write_pgm(&mask_path, &vis)?;
    let raw_path = a.out.join(format!("{stem}_labels.pgm"));
    crate::pgm::write_pgm(&raw_path, &pred)?;
    println!("wrote {} and {}", mask_path.display(), raw_path.display());
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    let (model, mut store) = load_model(&a.checkpoint)?;
    let pairs = load_samples(&a.data, a.image_size)?;
    std::fs::create_dir_all(&a.out)?;
    for (id, sample) in pairs.iter().take(a.samples.max(1)) {
        let mut tape = Tape::new();
        let art = model.forward(
            &mut tape,
            &mut store,
            &sample.image,
            Some(&sample.mask),
            false,
            false,
        )?;
        if let Some(att) = &art.attention {
            AttentionTraceData::from_tape(&tape, att).save(&a.out.join(format!("{id}_attention.bin")))?;
        }
        crate::contour::dump_contours_csv(&art.contours, &a.out.join(format!("{id}_contours.csv")))?;
        let trace_json = serde_json::to_string_pretty(&art.trace)?;
        std::fs::write(a.out.join(format!("{id}_trace.json")), trace_json)?;
    }
    println!("inspection artifacts in {}", a.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_subcommand_exits_one() {
        assert_eq!(run(["cgqr", "frobnicate"]), 1);
        assert_eq!(run(["cgqr", "train", "--bogus-flag"]), 1);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(run(["cgqr", "--help"]), 0);
    }

    #[test]
    fn synth_writes_manifest_with_patients() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("d");
        let code = run([
            "cgqr", "synth", "--patients", "3", "--frames", "1", "--image-size", "32",
            "--classes", "2", "--seed", "1", "--out", out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let manifest = load_manifest(&out).unwrap();
        assert_eq!(manifest.patients.len(), 3);
        assert_eq!(manifest.seed, 1);
    }

    #[test]
    fn config_file_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        std::fs::write(&cfg, "epochs = 7\nlr = 0.5\n# comment\n").unwrap();
        let file = read_config_file(&cfg).unwrap();
        // flag wins over file
        assert_eq!(resolve(Some(3usize), &file, "epochs", 100).unwrap(), 3);
        // file wins over default
        assert_eq!(resolve::<usize>(None, &file, "epochs", 100).unwrap(), 7);
        assert_eq!(resolve::<f64>(None, &file, "lr", 1e-4).unwrap(), 0.5);
        // default when absent everywhere
        assert_eq!(resolve::<u64>(None, &file, "seed", 9).unwrap(), 9);
    }

    #[test]
    fn bad_config_line_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        std::fs::write(&cfg, "epochs 7\n").unwrap();
        assert!(read_config_file(&cfg).is_err());
    }

    #[test]
    fn error_exit_codes() {
        assert_eq!(exit_code(&CgqrError::Config("x".into())), 1);
        assert_eq!(exit_code(&CgqrError::Data("x".into())), 1);
        assert_eq!(
            exit_code(&CgqrError::Io(std::io::Error::new(std::io::ErrorKind::Other, "x"))),
            2
        );
        assert_eq!(exit_code(&CgqrError::Training("x".into())), 2);
    }
}

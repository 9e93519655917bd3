//! Training loop: teacher-forced warm-up, AdamW with decoupled weight decay
//! and cosine annealing, per-epoch validation, best-DSC checkpointing, and
//! JSONL step/epoch logging.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, ImageSample, Phase};
use crate::error::{CgqrError, Result};
use crate::evaluator;
use crate::heads::total_loss;
use crate::model::{Ablations, Model, ModelConfig};
use crate::params::{CheckpointMeta, ParamStore};
use crate::tape::Tape;

pub const GRAD_CLIP_NORM: f64 = 1.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub teacher_forcing_epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub mu_aux: f64,
    pub seed: u64,
    pub phase: Phase,
    pub ablations: Ablations,
    /// Global-norm gradient clipping; `None` disables it.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            teacher_forcing_epochs: 20,
            batch_size: 4,
            lr0: 1e-4,
            weight_decay: 1e-4,
            lambda: 0.5,
            mu_aux: 0.4,
            seed: 0,
            phase: Phase::None,
            ablations: Ablations::default(),
            grad_clip: Some(GRAD_CLIP_NORM),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.teacher_forcing_epochs > self.epochs {
            return Err(CgqrError::Config(format!(
                "teacher_forcing_epochs {} exceeds epochs {}",
                self.teacher_forcing_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(CgqrError::Config("batch_size must be >= 1".into()));
        }
        if self.lr0 <= 0.0 {
            return Err(CgqrError::Config("lr0 must be positive".into()));
        }
        if self.lambda < 0.0 || self.mu_aux < 0.0 {
            return Err(CgqrError::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Cosine annealing: lr = 0.5 · lr0 · (1 + cos(π · epoch / E)).
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch > cfg.epochs {
        return Err(CgqrError::Config(format!(
            "epoch {epoch} out of schedule range 0..={}",
            cfg.epochs
        )));
    }
    if cfg.epochs == 0 {
        return Ok(cfg.lr0);
    }
    let t = epoch as f64 / cfg.epochs as f64;
    Ok(0.5 * cfg.lr0 * (1.0 + (std::f64::consts::PI * t).cos()))
}

pub struct TrainState {
    pub store: ParamStore,
    pub epoch: usize,
    pub best_val_dsc: f64,
    pub best_checkpoint: Option<PathBuf>,
    pub config: TrainConfig,
}

#[derive(Serialize)]
struct StepRecord<'a> {
    step: usize,
    epoch: usize,
    l_seg: f64,
    l_boundary: f64,
    l_coarse: f64,
    total: f64,
    lambda: f64,
    contour_source: &'a str,
    source_mask_hash: u64,
}

#[derive(Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub val_dsc: f64,
    pub teacher_forcing: bool,
    pub mean_loss: f64,
}

/// Inference-mode mean foreground DSC over `samples`; leaves the parameter
/// store unchanged (checked by the evaluator's purity tests).
pub fn validate(model: &Model, store: &mut ParamStore, samples: &[ImageSample]) -> Result<f64> {
    let report = evaluator::evaluate(model, store, samples, "val", false)?;
    Ok(report.mean_dsc)
}

/// Run the full loop; returns the final state with the best checkpoint path
/// recorded. Logs are appended to `out_dir/train_log.jsonl`.
pub fn train(
    model: &Model,
    cfg: &TrainConfig,
    split: &DatasetSplit,
    out_dir: &Path,
) -> Result<TrainState> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(CgqrError::Data("training split is empty".into()));
    }
    if split.val.is_empty() {
        return Err(CgqrError::Data("validation split is empty".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut log = std::fs::File::create(out_dir.join("train_log.jsonl"))?;
    let ckpt_path = out_dir.join("best.ckpt");

    let mut store = ParamStore::new();
    model.init_params(&mut store, cfg.seed);
    let mut state = TrainState {
        store,
        epoch: 0,
        best_val_dsc: f64::NEG_INFINITY,
        best_checkpoint: None,
        config: cfg.clone(),
    };

    let meta_config = serde_json::json!({
        "train": cfg,
        "model": &model.cfg,
    });

    // initial validation so the E = 0 case still reports and checkpoints
    let dsc0 = validate(model, &mut state.store, &split.val)?;
    state.best_val_dsc = dsc0;
    state.store.save_checkpoint(
        &ckpt_path,
        CheckpointMeta { epoch: 0, best_val_dsc: dsc0, config: meta_config.clone() },
    )?;
    state.best_checkpoint = Some(ckpt_path.clone());
    write_epoch_record(&mut log, &EpochRecord {
        epoch: 0,
        lr: lr_at(0, cfg)?,
        val_dsc: dsc0,
        teacher_forcing: false,
        mean_loss: f64::NAN,
    })?;

    let mut step = 0usize;
    let mut shuffle_rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed_5eed_5eed);
    for epoch in 1..=cfg.epochs {
        let teacher_forcing =
            epoch <= cfg.teacher_forcing_epochs && !cfg.ablations.no_teacher_forcing;
        let lr = lr_at(epoch - 1, cfg)?;

        let mut order: Vec<usize> = (0..split.train.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut n_steps_epoch = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            state.store.zero_grads();
            let inv = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &idx in batch {
                let sample = &split.train[idx];
                let mut tape = Tape::new();
                let art = model.forward(
                    &mut tape,
                    &mut state.store,
                    &sample.image,
                    Some(&sample.mask),
                    teacher_forcing,
                    true,
                )?;
                let (loss, report) = total_loss(
                    &mut tape,
                    &art.bundle,
                    &sample.mask,
                    &sample.boundary,
                    cfg.lambda,
                    cfg.mu_aux,
                )?;
                if !report.total.is_finite() {
                    state.store.save_checkpoint(
                        &out_dir.join("diverged.ckpt"),
                        CheckpointMeta {
                            epoch,
                            best_val_dsc: state.best_val_dsc,
                            config: meta_config.clone(),
                        },
                    )?;
                    return Err(CgqrError::Training(format!(
                        "non-finite loss at epoch {epoch} step {step}: {report:?} \
                         (snapshot written to diverged.ckpt)"
                    )));
                }
                let scaled = tape.mul_scalar(loss, inv);
                let grads = tape.backward(scaled);
                state.store.accumulate(&tape, &grads);
                batch_loss += report.total * inv;

                step += 1;
                let rec = StepRecord {
                    step,
                    epoch,
                    l_seg: report.l_seg,
                    l_boundary: report.l_boundary,
                    l_coarse: report.l_coarse,
                    total: report.total,
                    lambda: report.lambda,
                    contour_source: art.trace.contour_source.as_str(),
                    source_mask_hash: art.trace.source_mask_hash,
                };
                writeln!(log, "{}", serde_json::to_string(&rec)?)?;
            }
            state.store.adamw_step(lr, cfg.weight_decay, cfg.grad_clip);
            epoch_loss += batch_loss;
            n_steps_epoch += 1;
        }

        state.epoch = epoch;
        let val_dsc = validate(model, &mut state.store, &split.val)?;
        if val_dsc > state.best_val_dsc {
            state.best_val_dsc = val_dsc;
            state.store.save_checkpoint(
                &ckpt_path,
                CheckpointMeta { epoch, best_val_dsc: val_dsc, config: meta_config.clone() },
            )?;
            state.best_checkpoint = Some(ckpt_path.clone());
        }
        write_epoch_record(&mut log, &EpochRecord {
            epoch,
            lr,
            val_dsc,
            teacher_forcing,
            mean_loss: epoch_loss / n_steps_epoch.max(1) as f64,
        })?;
    }
    Ok(state)
}

fn write_epoch_record(log: &mut std::fs::File, rec: &EpochRecord) -> Result<()> {
    writeln!(log, "{}", serde_json::to_string(rec)?)?;
    Ok(())
}

/// Build a model whose shape settings come from the training data and config.
pub fn desk_model(n_classes: usize, ablations: Ablations) -> Result<Model> {
    let mut cfg = ModelConfig::desk(n_classes);
    cfg.ablations = ablations;
    Model::new(cfg)
}

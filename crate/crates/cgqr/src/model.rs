//! Full pipeline assembly: encoder → coarse head → contour extraction →
//! query embedding → pyramid fusion → cross-attention refinement → dual
//! heads, with ablation switches and per-pass provenance instrumentation.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::contour::{descriptors_from_mask, extract_contours, Contour, ShapeDescriptor};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{CgqrError, Result};
use crate::heads::{Heads, PredictionBundle};
use crate::params::ParamStore;
use crate::refine::{AttentionTrace, FusedTokens, Refiner};
use crate::tape::{Tape, Var};

pub const ABLATION_FLAGS: [&str; 5] = [
    "no_boundary_head",
    "no_coarse_head",
    "no_contour_queries",
    "no_pyramid_fusion",
    "no_teacher_forcing",
];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablations {
    pub no_boundary_head: bool,
    pub no_coarse_head: bool,
    pub no_contour_queries: bool,
    pub no_pyramid_fusion: bool,
    pub no_teacher_forcing: bool,
}

impl Ablations {
    pub fn set(&mut self, flag: &str) -> Result<()> {
        match flag {
            "no_boundary_head" => self.no_boundary_head = true,
            "no_coarse_head" => self.no_coarse_head = true,
            "no_contour_queries" => self.no_contour_queries = true,
            "no_pyramid_fusion" => self.no_pyramid_fusion = true,
            "no_teacher_forcing" => self.no_teacher_forcing = true,
            other => {
                return Err(CgqrError::Config(format!(
                    "unknown ablation flag '{other}' (expected one of {ABLATION_FLAGS:?})"
                )))
            }
        }
        Ok(())
    }

    pub fn from_flags<I: IntoIterator<Item = S>, S: AsRef<str>>(flags: I) -> Result<Ablations> {
        let mut a = Ablations::default();
        for f in flags {
            a.set(f.as_ref())?;
        }
        Ok(a)
    }

    pub fn active(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.no_boundary_head {
            v.push("no_boundary_head");
        }
        if self.no_coarse_head {
            v.push("no_coarse_head");
        }
        if self.no_contour_queries {
            v.push("no_contour_queries");
        }
        if self.no_pyramid_fusion {
            v.push("no_pyramid_fusion");
        }
        if self.no_teacher_forcing {
            v.push("no_teacher_forcing");
        }
        v
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Foreground classes K; masks carry labels 0..=K.
    pub n_classes: usize,
    /// Latent width of queries, fused tokens, and head inputs.
    pub d: usize,
    pub n_base_queries: usize,
    pub n_contour_points: usize,
    pub encoder: EncoderConfig,
    pub ablations: Ablations,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_classes: 4,
            d: 128,
            n_base_queries: 4,
            n_contour_points: crate::contour::DEFAULT_N_POINTS,
            encoder: EncoderConfig::default(),
            ablations: Ablations::default(),
        }
    }
}

impl ModelConfig {
    /// Small profile for CPU-scale experiments and tests.
    pub fn desk(n_classes: usize) -> ModelConfig {
        ModelConfig {
            n_classes,
            d: 64,
            n_base_queries: 4,
            n_contour_points: 32,
            encoder: EncoderConfig {
                in_channels: 1,
                branch_channels: (16, 32, 64),
                branch_strides: (4, 8, 16),
                n_stages: 2,
            },
            ablations: Ablations::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 {
            return Err(CgqrError::Config("n_classes must be >= 1".into()));
        }
        if self.d == 0 || self.n_base_queries == 0 {
            return Err(CgqrError::Config("d and n_base_queries must be >= 1".into()));
        }
        if self.n_classes > 255 {
            return Err(CgqrError::Config("n_classes must fit in u8".into()));
        }
        self.encoder.validate()
    }
}

/// Where the contours fed into the query bank came from on one pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContourSource {
    GroundTruth,
    Predicted,
    None,
}

impl ContourSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            ContourSource::GroundTruth => "ground_truth",
            ContourSource::Predicted => "predicted",
            ContourSource::None => "none",
        }
    }
}

/// Instrumentation record for one forward pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForwardTrace {
    pub contour_source: ContourSource,
    /// FNV-1a over the bytes of the mask the contours were extracted from
    /// (0 when no contours were used).
    pub source_mask_hash: u64,
    /// FNV-1a over the f64 little-endian descriptor values.
    pub descriptor_hash: u64,
    pub n_queries: usize,
}

pub struct ForwardArtifacts {
    pub bundle: PredictionBundle,
    pub attention: Option<AttentionTrace>,
    pub contours: Vec<Contour>,
    pub descriptors: Vec<ShapeDescriptor>,
    pub trace: ForwardTrace,
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn hash_mask(mask: &Array2<u8>) -> u64 {
    let (hh, ww) = mask.dim();
    let mut bytes = Vec::with_capacity(hh * ww + 16);
    bytes.extend_from_slice(&(hh as u64).to_le_bytes());
    bytes.extend_from_slice(&(ww as u64).to_le_bytes());
    bytes.extend(mask.iter().copied());
    fnv1a(&bytes)
}

fn hash_descriptors(descriptors: &[ShapeDescriptor]) -> u64 {
    let mut bytes = Vec::with_capacity(descriptors.len() * 48);
    for d in descriptors {
        for v in d.as_array() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fnv1a(&bytes)
}

pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub refiner: Refiner,
    pub heads: Heads,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Model> {
        cfg.validate()?;
        let encoder = Encoder::new(cfg.encoder.clone())?;
        let refiner = Refiner::new(cfg.d, cfg.n_base_queries);
        let heads = Heads::new(cfg.n_classes, cfg.d);
        Ok(Model { cfg, encoder, refiner, heads })
    }

    /// Fresh parameter registration; the ablation flags decide which
    /// parameter groups exist at all.
    pub fn init_params(&self, store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        self.encoder.register_params(store, &mut rng);
        let ab = self.cfg.ablations;
        self.refiner.register_params_filtered(
            store,
            self.cfg.encoder.channels(),
            !ab.no_contour_queries,
            self.branch_mask(),
            &mut rng,
        );
        self.heads.register_params(
            store,
            self.cfg.encoder.channels()[2],
            !ab.no_coarse_head,
            !ab.no_boundary_head,
            &mut rng,
        );
    }

    fn branch_mask(&self) -> [bool; 3] {
        if self.cfg.ablations.no_pyramid_fusion {
            [true, false, false]
        } else {
            [true; 3]
        }
    }

    /// One full pass. `gt_mask` is required whenever teacher forcing is
    /// requested; otherwise contours come from the coarse argmax (or are
    /// skipped entirely if the coarse head is ablated).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        image: &Array2<f64>,
        gt_mask: Option<&Array2<u8>>,
        teacher_forcing: bool,
        train: bool,
    ) -> Result<ForwardArtifacts> {
        let ab = self.cfg.ablations;
        let (h0, w0) = image.dim();
        let features = self.encoder.forward(tape, store, image, train)?;

        let (coarse_logits, coarse_probs) = if ab.no_coarse_head {
            (None, None)
        } else {
            let (z_c, s_c) = self.heads.coarse_head(tape, store, features.f3)?;
            (Some(z_c), Some(s_c))
        };

        // contour sourcing: ground truth under teacher forcing, otherwise
        // the coarse prediction's argmax
        let mut contours = Vec::new();
        let mut descriptors = Vec::new();
        let mut source = ContourSource::None;
        let mut source_hash = 0u64;
        if !ab.no_contour_queries {
            let source_mask: Option<Array2<u8>> = if teacher_forcing {
                let gt = gt_mask.ok_or_else(|| {
                    CgqrError::Config("teacher forcing requires a ground-truth mask".into())
                })?;
                source = ContourSource::GroundTruth;
                Some(gt.clone())
            } else if let Some(s_c) = coarse_probs {
                source = ContourSource::Predicted;
                Some(argmax_mask(tape, s_c))
            } else {
                None
            };
            if let Some(mask) = source_mask {
                source_hash = hash_mask(&mask);
                contours =
                    extract_contours(&mask, self.cfg.n_classes as u8, self.cfg.n_contour_points)?;
                descriptors = descriptors_from_mask(
                    &mask,
                    self.cfg.n_classes as u8,
                    self.cfg.n_contour_points,
                )?;
            }
        }
        let include_contours = source != ContourSource::None;

        let bank = self.refiner.embed_queries(tape, store, &descriptors, include_contours)?;
        let fused = self.refiner.fuse_pyramid(tape, store, &features, self.branch_mask())?;
        let (refined, attention) = self.refiner.refine(tape, store, &fused, &bank)?;
        let (gh, gw) = refined.spatial_shape;
        let grid = tape.unflatten_tokens(refined.tokens, gh, gw)?;
        let out = self.heads.dual_heads(tape, store, grid, (h0, w0), !ab.no_boundary_head)?;

        let trace = ForwardTrace {
            contour_source: source,
            source_mask_hash: source_hash,
            descriptor_hash: hash_descriptors(&descriptors),
            n_queries: bank.len(),
        };
        Ok(ForwardArtifacts {
            bundle: PredictionBundle {
                coarse_logits,
                coarse_probs,
                refined_logits: out.z_r,
                refined_probs: out.s_r,
                boundary_logits: out.z_b,
                boundary_probs: out.b_probs,
            },
            attention: Some(attention),
            contours,
            descriptors,
            trace,
        })
    }

    /// Fused-but-unrefined tokens, for the identity-gate comparison.
    pub fn fused_only(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        image: &Array2<f64>,
    ) -> Result<FusedTokens> {
        let features = self.encoder.forward(tape, store, image, false)?;
        self.refiner.fuse_pyramid(tape, store, &features, self.branch_mask())
    }
}

/// Per-pixel argmax of a (C, H, W) probability grid as a label mask.
pub fn argmax_mask(tape: &Tape, probs: Var) -> Array2<u8> {
    let p = tape.value(probs).clone().into_dimensionality::<ndarray::Ix3>().unwrap();
    let (c, h, w) = p.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0usize;
        let mut best_v = p[[0, y, x]];
        for k in 1..c {
            if p[[k, y, x]] > best_v {
                best_v = p[[k, y, x]];
                best = k;
            }
        }
        best as u8
    })
}

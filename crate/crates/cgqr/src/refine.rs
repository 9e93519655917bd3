//! Contour-to-query embedding, feature pyramid fusion, and query-guided
//! cross-attention refinement with a gated residual.

use ndarray::{Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha20Rng;

use crate::contour::ShapeDescriptor;
use crate::encoder::{he_init, FeatureSet};
use crate::error::{CgqrError, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

pub const DESCRIPTOR_DIM: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuerySource {
    Contour,
    Base,
}

/// Contour-derived plus learnable base queries, stacked (M, d).
pub struct QueryBank {
    pub queries: Var,
    pub provenance: Vec<QuerySource>,
}

impl QueryBank {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }
}

/// Flattened fused feature tokens (N, d) with their spatial origin.
pub struct FusedTokens {
    pub tokens: Var,
    pub spatial_shape: (usize, usize),
}

/// Attention internals kept for inspection: weights (M, N), per-query
/// context (M, d), spatial modulation (N, d).
pub struct AttentionTrace {
    pub weights: Var,
    pub context: Var,
    pub modulation: Var,
}

/// Owned copy of an attention trace for serialization.
#[derive(Debug, Clone)]
pub struct AttentionTraceData {
    pub weights: Array2<f64>,
    pub context: Array2<f64>,
    pub modulation: Array2<f64>,
}

impl AttentionTraceData {
    pub fn from_tape(tape: &Tape, trace: &AttentionTrace) -> AttentionTraceData {
        let get = |v: Var| {
            tape.value(v).clone().into_dimensionality::<ndarray::Ix2>().unwrap()
        };
        AttentionTraceData {
            weights: get(trace.weights),
            context: get(trace.context),
            modulation: get(trace.modulation),
        }
    }

    /// One-line JSON shape header, newline, then all three blocks as
    /// little-endian f32.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let header = serde_json::json!({
            "weights": self.weights.dim(),
            "context": self.context.dim(),
            "modulation": self.modulation.dim(),
            "dtype": "f32le",
        });
        let mut buf = serde_json::to_vec(&header)?;
        buf.push(b'\n');
        for arr in [&self.weights, &self.context, &self.modulation] {
            for &v in arr.iter() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        crate::pgm::atomic_write(path, &buf)
    }
}

pub struct Refiner {
    pub d: usize,
    pub n_base_queries: usize,
}

impl Refiner {
    pub fn new(d: usize, n_base_queries: usize) -> Refiner {
        Refiner { d, n_base_queries }
    }

    /// Parameter registration; `branch_channels` sizes the per-branch 1x1
    /// alignment convs.
    pub fn register_params(
        &self,
        store: &mut ParamStore,
        branch_channels: [usize; 3],
        rng: &mut ChaCha20Rng,
    ) {
        self.register_params_filtered(store, branch_channels, true, [true; 3], rng);
    }

    /// Registration variant for ablated models: the descriptor embedding and
    /// individual alignment branches can be left out entirely, so parameter
    /// counts reflect the ablation.
    pub fn register_params_filtered(
        &self,
        store: &mut ParamStore,
        branch_channels: [usize; 3],
        include_embed: bool,
        use_branches: [bool; 3],
        rng: &mut ChaCha20Rng,
    ) {
        let d = self.d;
        if include_embed {
            store.register("qr.embed.w", he_init(&[DESCRIPTOR_DIM, d], rng));
            store.register("qr.embed.b", ArrayD::zeros(IxDyn(&[d])));
        }
        let base = he_init(&[self.n_base_queries, d], rng).mapv(|v| v / (d as f64).sqrt());
        store.register("qr.base", base);
        for (i, c) in branch_channels.into_iter().enumerate() {
            if !use_branches[i] {
                continue;
            }
            store.register(&format!("qr.psi{i}.w"), he_init(&[d, c, 1, 1], rng));
            store.register(&format!("qr.psi{i}.b"), ArrayD::zeros(IxDyn(&[d])));
        }
        for name in ["qr.att.wq", "qr.att.wk", "qr.att.wv", "qr.att.wm"] {
            store.register(name, he_init(&[d, d], rng));
        }
        // gamma starts at zero: refinement begins as the identity
        store.register("qr.att.gamma", ndarray::arr0(0.0).into_dyn());
    }

    /// Project shape descriptors into query space and append the learnable
    /// base queries. With `include_contours = false` only base queries are
    /// emitted.
    pub fn embed_queries(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        descriptors: &[ShapeDescriptor],
        include_contours: bool,
    ) -> Result<QueryBank> {
        let base = store.leaf(tape, "qr.base");
        if !include_contours {
            return Ok(QueryBank {
                queries: base,
                provenance: vec![QuerySource::Base; self.n_base_queries],
            });
        }
        let k = descriptors.len();
        let mut d_mat = Array2::zeros((k, DESCRIPTOR_DIM));
        for (i, desc) in descriptors.iter().enumerate() {
            let row = desc.as_array();
            for (j, v) in row.into_iter().enumerate() {
                d_mat[[i, j]] = v;
            }
        }
        let d_var = tape.constant(d_mat);
        let w = store.leaf(tape, "qr.embed.w");
        let b = store.leaf(tape, "qr.embed.b");
        let proj = tape.matmul(d_var, w);
        let contour_q = tape.add_row(proj, b);
        let queries = tape.concat_rows(contour_q, base);
        let mut provenance = vec![QuerySource::Contour; k];
        provenance.extend(std::iter::repeat(QuerySource::Base).take(self.n_base_queries));
        Ok(QueryBank { queries, provenance })
    }

    /// Align each branch to `d` channels with its 1x1 conv, upsample to the
    /// finest branch resolution, sum, and flatten to (N, d) tokens.
    /// `use_branches` masks branches out (pyramid-fusion ablation).
    pub fn fuse_pyramid(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: &FeatureSet,
        use_branches: [bool; 3],
    ) -> Result<FusedTokens> {
        let shapes: Vec<Vec<usize>> =
            features.branches().iter().map(|&v| tape.shape(v).to_vec()).collect();
        let (h1, w1) = (shapes[0][1], shapes[0][2]);
        let mut acc: Option<Var> = None;
        for (i, &branch) in features.branches().iter().enumerate() {
            if !use_branches[i] {
                continue;
            }
            let w = store.leaf(tape, &format!("qr.psi{i}.w"));
            let b = store.leaf(tape, &format!("qr.psi{i}.b"));
            let aligned = tape.conv2d(branch, w, Some(b), 1, 0);
            let factor = h1 / shapes[i][1];
            let up = if factor > 1 { tape.upsample_nearest(aligned, factor) } else { aligned };
            acc = Some(match acc {
                Some(a) => tape.add(a, up),
                None => up,
            });
        }
        let fused = acc.ok_or_else(|| CgqrError::Config("no branches enabled in fusion".into()))?;
        let tokens = tape.flatten_tokens(fused);
        Ok(FusedTokens { tokens, spatial_shape: (h1, w1) })
    }

    /// Cross-attention refinement: project queries and tokens, attend with a
    /// row softmax, spread the query context back over space, and apply the
    /// gamma-gated residual. With gamma = 0 the tokens pass through exactly.
    pub fn refine(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: &FusedTokens,
        queries: &QueryBank,
    ) -> Result<(FusedTokens, AttentionTrace)> {
        let d_tok = tape.shape(tokens.tokens)[1];
        let d_q = tape.shape(queries.queries)[1];
        if d_tok != d_q {
            return Err(CgqrError::Shape(format!(
                "token dim {d_tok} != query dim {d_q}"
            )));
        }
        let wq = store.leaf(tape, "qr.att.wq");
        let wk = store.leaf(tape, "qr.att.wk");
        let wv = store.leaf(tape, "qr.att.wv");
        let wm = store.leaf(tape, "qr.att.wm");
        let gamma = store.leaf(tape, "qr.att.gamma");

        let q_proj = tape.matmul(queries.queries, wq);
        let keys = tape.matmul(tokens.tokens, wk);
        let values = tape.matmul(tokens.tokens, wv);
        let keys_t = tape.transpose2(keys);
        let logits = tape.matmul(q_proj, keys_t);
        let logits = tape.mul_scalar(logits, 1.0 / (self.d as f64).sqrt());
        let weights = tape.softmax_rows(logits);
        let context = tape.matmul(weights, values);
        let weights_t = tape.transpose2(weights);
        let spread = tape.matmul(weights_t, context);
        let modulation = tape.matmul(spread, wm);
        let gated = tape.scalar_mul(gamma, modulation);
        let refined = tape.add(tokens.tokens, gated);
        Ok((
            FusedTokens { tokens: refined, spatial_shape: tokens.spatial_shape },
            AttentionTrace { weights, context, modulation },
        ))
    }
}

/// Descriptor matrix helper used by instrumentation (hashing which mask the
/// queries came from).
pub fn descriptor_matrix(descriptors: &[ShapeDescriptor]) -> Array2<f64> {
    let mut m = Array2::zeros((descriptors.len(), DESCRIPTOR_DIM));
    for (i, d) in descriptors.iter().enumerate() {
        for (j, v) in d.as_array().into_iter().enumerate() {
            m[[i, j]] = v;
        }
    }
    m
}

//! Coarse head, refined segmentation / boundary heads, and the training
//! objective (multi-class soft Dice, boundary BCE, auxiliary coarse Dice).

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::he_init;
use crate::error::{CgqrError, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

pub const DICE_EPS: f64 = 1e-6;
pub const BCE_CLAMP: f64 = 1e-7;

/// Forward outputs kept together for loss computation. Boundary / coarse
/// entries are `None` when the corresponding head is ablated away.
pub struct PredictionBundle {
    pub coarse_logits: Option<Var>,
    pub coarse_probs: Option<Var>,
    pub refined_logits: Var,
    pub refined_probs: Var,
    pub boundary_logits: Option<Var>,
    pub boundary_probs: Option<Var>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    pub l_seg: f64,
    pub l_boundary: f64,
    pub l_coarse: f64,
    pub total: f64,
    pub lambda: f64,
    pub mu_aux: f64,
}

pub struct Heads {
    /// Foreground classes; heads emit K+1 channels.
    pub n_classes: usize,
    /// Refined feature width entering the dual heads.
    pub d: usize,
    pub hidden: usize,
}

impl Heads {
    pub fn new(n_classes: usize, d: usize) -> Heads {
        Heads { n_classes, d, hidden: d }
    }

    pub fn register_params(
        &self,
        store: &mut ParamStore,
        deepest_channels: usize,
        with_coarse: bool,
        with_boundary: bool,
        rng: &mut ChaCha20Rng,
    ) {
        let k1 = self.n_classes + 1;
        if with_coarse {
            store.register("head.coarse.w", he_init(&[k1, deepest_channels, 1, 1], rng));
            store.register("head.coarse.b", ArrayD::zeros(IxDyn(&[k1])));
        }
        store.register("head.seg.c0.w", he_init(&[self.hidden, self.d, 3, 3], rng));
        store.register("head.seg.c0.b", ArrayD::zeros(IxDyn(&[self.hidden])));
        store.register("head.seg.c1.w", he_init(&[k1, self.hidden, 1, 1], rng));
        store.register("head.seg.c1.b", ArrayD::zeros(IxDyn(&[k1])));
        if with_boundary {
            store.register("head.bnd.c0.w", he_init(&[self.hidden, self.d, 3, 3], rng));
            store.register("head.bnd.c0.b", ArrayD::zeros(IxDyn(&[self.hidden])));
            store.register("head.bnd.c1.w", he_init(&[1, self.hidden, 1, 1], rng));
            store.register("head.bnd.c1.b", ArrayD::zeros(IxDyn(&[1])));
        }
    }

    /// 1x1 conv on the deepest feature map to K+1 channels, per-pixel
    /// softmax.
    pub fn coarse_head(&self, tape: &mut Tape, store: &ParamStore, f3: Var) -> Result<(Var, Var)> {
        let in_ch = tape.shape(f3)[0];
        let w_ch = store.get("head.coarse.w").shape()[1];
        if in_ch != w_ch {
            return Err(CgqrError::Shape(format!(
                "coarse head expects {w_ch} channels, feature map has {in_ch}"
            )));
        }
        let w = store.leaf(tape, "head.coarse.w");
        let b = store.leaf(tape, "head.coarse.b");
        let z_c = tape.conv2d(f3, w, Some(b), 1, 0);
        let s_c = tape.softmax_channels(z_c);
        Ok((z_c, s_c))
    }

    fn head_tower(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        refined: Var,
        prefix: &str,
        out_hw: (usize, usize),
    ) -> Var {
        let w0 = store.leaf(tape, &format!("{prefix}.c0.w"));
        let b0 = store.leaf(tape, &format!("{prefix}.c0.b"));
        let h = tape.conv2d(refined, w0, Some(b0), 1, 1);
        let h = tape.relu(h);
        let w1 = store.leaf(tape, &format!("{prefix}.c1.w"));
        let b1 = store.leaf(tape, &format!("{prefix}.c1.b"));
        let z = tape.conv2d(h, w1, Some(b1), 1, 0);
        tape.upsample_bilinear(z, out_hw.0, out_hw.1)
    }

    /// Both output heads on the refined grid: 3x3 conv, rectifier, 1x1 conv,
    /// bilinear upsample to full resolution, then softmax / sigmoid.
    pub fn dual_heads(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        refined: Var,
        out_hw: (usize, usize),
        with_boundary: bool,
    ) -> Result<DualOutputs> {
        let in_ch = tape.shape(refined)[0];
        if in_ch != self.d {
            return Err(CgqrError::Shape(format!(
                "dual heads expect {} channels, refined grid has {in_ch}",
                self.d
            )));
        }
        let z_r = self.head_tower(tape, store, refined, "head.seg", out_hw);
        let s_r = tape.softmax_channels(z_r);
        let (z_b, b_probs) = if with_boundary {
            let z = self.head_tower(tape, store, refined, "head.bnd", out_hw);
            let z2 = tape.select_channel(z, 0);
            let p = tape.sigmoid(z2);
            (Some(z2), Some(p))
        } else {
            (None, None)
        };
        Ok(DualOutputs { z_r, s_r, z_b, b_probs })
    }
}

pub struct DualOutputs {
    pub z_r: Var,
    pub s_r: Var,
    pub z_b: Option<Var>,
    pub b_probs: Option<Var>,
}

/// Soft Dice loss over foreground classes: 1 − mean_k of
/// (2·Σ p_k g_k + ε) / (Σ p_k + Σ g_k + ε).
pub fn dice_loss(tape: &mut Tape, probs: Var, target: &Array2<u8>) -> Result<Var> {
    let shape = tape.shape(probs).to_vec();
    if shape.len() != 3 {
        return Err(CgqrError::Shape(format!("probs must be (K+1, H, W), got {shape:?}")));
    }
    let (k1, h, w) = (shape[0], shape[1], shape[2]);
    if (h, w) != target.dim() {
        return Err(CgqrError::Shape(format!(
            "probs spatial {h}x{w} vs target {:?}",
            target.dim()
        )));
    }
    if k1 < 2 {
        return Err(CgqrError::Config("dice needs at least one foreground class".into()));
    }
    let k = k1 - 1;
    if let Some(&bad) = target.iter().find(|&&v| v as usize > k) {
        return Err(CgqrError::Data(format!("mask label {bad} exceeds K={k}")));
    }
    let mut acc: Option<Var> = None;
    for class in 1..=k {
        let p = tape.select_channel(probs, class);
        let g_arr = target.mapv(|v| if v as usize == class { 1.0 } else { 0.0 });
        let g_sum: f64 = g_arr.sum();
        let g = tape.constant(g_arr);
        let inter = tape.mul(p, g);
        let inter = tape.sum_all(inter);
        let p_sum = tape.sum_all(p);
        let num = tape.mul_scalar(inter, 2.0);
        let num = tape.add_scalar(num, DICE_EPS);
        let den = tape.add_scalar(p_sum, g_sum + DICE_EPS);
        let dice = tape.div(num, den);
        acc = Some(match acc {
            Some(a) => tape.add(a, dice),
            None => dice,
        });
    }
    let mean = tape.mul_scalar(acc.unwrap(), -1.0 / k as f64);
    Ok(tape.add_scalar(mean, 1.0))
}

/// Mean binary cross-entropy with probabilities clamped to
/// [BCE_CLAMP, 1 − BCE_CLAMP].
pub fn boundary_bce(tape: &mut Tape, probs: Var, target: &Array2<u8>) -> Result<Var> {
    let shape = tape.shape(probs).to_vec();
    if shape.len() != 2 || (shape[0], shape[1]) != target.dim() {
        return Err(CgqrError::Shape(format!(
            "boundary probs {shape:?} vs target {:?}",
            target.dim()
        )));
    }
    let p = tape.clamp(probs, BCE_CLAMP, 1.0 - BCE_CLAMP);
    let t = tape.constant(target.mapv(|v| if v != 0 { 1.0 } else { 0.0 }));
    let one_minus_t = tape.constant(target.mapv(|v| if v != 0 { 0.0 } else { 1.0 }));
    let ln_p = tape.ln(p);
    let neg_p = tape.mul_scalar(p, -1.0);
    let q = tape.add_scalar(neg_p, 1.0);
    let ln_q = tape.ln(q);
    let a = tape.mul(t, ln_p);
    let b = tape.mul(one_minus_t, ln_q);
    let s = tape.add(a, b);
    let m = tape.mean_all(s);
    Ok(tape.mul_scalar(m, -1.0))
}

/// Combined objective. The coarse term compares against the mask
/// nearest-downsampled to the coarse grid. Ablated heads contribute zero.
pub fn total_loss(
    tape: &mut Tape,
    bundle: &PredictionBundle,
    mask: &Array2<u8>,
    boundary_target: &Array2<u8>,
    lambda: f64,
    mu_aux: f64,
) -> Result<(Var, LossReport)> {
    if lambda < 0.0 || mu_aux < 0.0 {
        return Err(CgqrError::Config(format!(
            "loss weights must be nonnegative (lambda={lambda}, mu_aux={mu_aux})"
        )));
    }
    let l_seg = dice_loss(tape, bundle.refined_probs, mask)?;
    let mut total = l_seg;
    let mut l_boundary_val = 0.0;
    if let Some(bp) = bundle.boundary_probs {
        let lb = boundary_bce(tape, bp, boundary_target)?;
        l_boundary_val = tape.value(lb)[[]];
        let scaled = tape.mul_scalar(lb, lambda);
        total = tape.add(total, scaled);
    }
    let mut l_coarse_val = 0.0;
    if let Some(cp) = bundle.coarse_probs {
        let cshape = tape.shape(cp).to_vec();
        let coarse_mask = crate::data::resize_nearest(mask, (cshape[1], cshape[2]));
        let lc = dice_loss(tape, cp, &coarse_mask)?;
        l_coarse_val = tape.value(lc)[[]];
        let scaled = tape.mul_scalar(lc, mu_aux);
        total = tape.add(total, scaled);
    }
    let report = LossReport {
        l_seg: tape.value(l_seg)[[]],
        l_boundary: l_boundary_val,
        l_coarse: l_coarse_val,
        total: tape.value(total)[[]],
        lambda,
        mu_aux,
    };
    Ok((total, report))
}

/// Brute-force Dice reference used by tests and the acceptance suite:
/// explicit per-class pixel sums, no tape.
pub fn dice_loss_reference(probs: &Array3<f64>, target: &Array2<u8>) -> f64 {
    let (k1, h, w) = probs.dim();
    let k = k1 - 1;
    let mut acc = 0.0;
    for class in 1..=k {
        let mut inter = 0.0;
        let mut p_sum = 0.0;
        let mut g_sum = 0.0;
        for y in 0..h {
            for x in 0..w {
                let p = probs[[class, y, x]];
                let g = if target[[y, x]] as usize == class { 1.0 } else { 0.0 };
                inter += p * g;
                p_sum += p;
                g_sum += g;
            }
        }
        acc += (2.0 * inter + DICE_EPS) / (p_sum + g_sum + DICE_EPS);
    }
    1.0 - acc / k as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn store_for(k: usize, d: usize, c3: usize, seed: u64) -> (Heads, ParamStore) {
        let heads = Heads::new(k, d);
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        heads.register_params(&mut store, c3, true, true, &mut rng);
        (heads, store)
    }

    #[test]
    fn coarse_zero_everything_is_uniform() {
        let (heads, mut store) = store_for(3, 8, 16, 1);
        store.set("head.coarse.w", ArrayD::zeros(IxDyn(&[4, 16, 1, 1])));
        let mut tape = Tape::new();
        let f3 = tape.constant(Array3::<f64>::zeros((16, 4, 4)));
        let (_, s_c) = heads.coarse_head(&mut tape, &store, f3).unwrap();
        for &v in tape.value(s_c).iter() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn coarse_softmax_shift_invariance_and_shape() {
        let (heads, store) = store_for(3, 8, 64, 2);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let f = Array3::from_shape_fn((64, 4, 4), |_| rng.gen_range(-1.0..1.0));
        let mut tape = Tape::new();
        let f3 = tape.constant(f.clone());
        let (z_c, s_c) = heads.coarse_head(&mut tape, &store, f3).unwrap();
        assert_eq!(tape.shape(s_c), &[4, 4, 4]);
        // shift all logits at one pixel by adding a constant channel offset
        let z = tape.value(z_c).clone();
        let shifted = z.mapv(|v| v + 3.7);
        let mut tape2 = Tape::new();
        let zv = tape2.constant(shifted.into_dimensionality::<ndarray::Ix3>().unwrap());
        let s2 = tape2.softmax_channels(zv);
        for (a, b) in tape.value(s_c).iter().zip(tape2.value(s2).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn coarse_channel_mismatch_errors() {
        let (heads, store) = store_for(3, 8, 16, 4);
        let mut tape = Tape::new();
        let f3 = tape.constant(Array3::<f64>::zeros((8, 4, 4)));
        assert!(heads.coarse_head(&mut tape, &store, f3).is_err());
    }

    #[test]
    fn dual_heads_shapes_and_ranges() {
        let (heads, store) = store_for(3, 64, 16, 5);
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let refined = Array3::from_shape_fn((64, 16, 16), |_| rng.gen_range(-1.0..1.0));
        let mut tape = Tape::new();
        let r = tape.constant(refined);
        let out = heads.dual_heads(&mut tape, &store, r, (64, 64), true).unwrap();
        assert_eq!(tape.shape(out.s_r), &[4, 64, 64]);
        let b = tape.value(out.b_probs.unwrap());
        assert_eq!(b.shape(), &[64, 64]);
        assert!(b.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let s = tape
            .value(out.s_r)
            .clone()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        for y in 0..64 {
            for x in 0..64 {
                let sum: f64 = (0..4).map(|c| s[[c, y, x]]).sum();
                assert!((sum - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn zero_final_conv_gives_half_boundary() {
        let (heads, mut store) = store_for(3, 8, 16, 7);
        store.set("head.bnd.c1.w", ArrayD::zeros(IxDyn(&[1, 8, 1, 1])));
        let mut tape = Tape::new();
        let r = tape.constant(Array3::<f64>::zeros((8, 4, 4)));
        let out = heads.dual_heads(&mut tape, &store, r, (8, 8), true).unwrap();
        for &v in tape.value(out.b_probs.unwrap()).iter() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    fn one_hot(target: &Array2<u8>, k1: usize) -> Array3<f64> {
        let (h, w) = target.dim();
        Array3::from_shape_fn((k1, h, w), |(c, y, x)| {
            if target[[y, x]] as usize == c { 1.0 } else { 0.0 }
        })
    }

    #[test]
    fn dice_perfect_and_disjoint() {
        let mut target = Array2::<u8>::zeros((4, 4));
        target[[1, 1]] = 1;
        target[[2, 2]] = 1;
        let probs = one_hot(&target, 2);
        let mut tape = Tape::new();
        let p = tape.constant(probs);
        let loss = dice_loss(&mut tape, p, &target).unwrap();
        assert!(tape.value(loss)[[]] < 1e-4);

        // all mass on background while GT has foreground
        let bg = one_hot(&Array2::<u8>::zeros((4, 4)), 2);
        let mut tape = Tape::new();
        let p = tape.constant(bg);
        let loss = dice_loss(&mut tape, p, &target).unwrap();
        assert!((tape.value(loss)[[]] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn dice_half_overlap_case() {
        // predicted foreground prob 1 on 2 pixels, GT has 2 pixels, 1 overlaps
        let mut target = Array2::<u8>::zeros((4, 4));
        target[[0, 0]] = 1;
        target[[0, 1]] = 1;
        let mut probs = Array3::<f64>::zeros((2, 4, 4));
        probs.index_axis_mut(ndarray::Axis(0), 0).fill(1.0);
        for &(y, x) in &[(0usize, 1usize), (0, 2)] {
            probs[[0, y, x]] = 0.0;
            probs[[1, y, x]] = 1.0;
        }
        let mut tape = Tape::new();
        let p = tape.constant(probs);
        let loss = dice_loss(&mut tape, p, &target).unwrap();
        let dice = 1.0 - tape.value(loss)[[]];
        assert!((dice - 2.0 / 4.0).abs() < 1e-6);
    }

    #[test]
    fn dice_matches_brute_force_on_200_random_instances() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        for _ in 0..200 {
            let k1 = rng.gen_range(2..5);
            let target = Array2::from_shape_fn((5, 5), |_| rng.gen_range(0..k1) as u8);
            let probs = Array3::from_shape_fn((k1, 5, 5), |_| rng.gen_range(0.0..1.0));
            let reference = dice_loss_reference(&probs, &target);
            let mut tape = Tape::new();
            let p = tape.constant(probs);
            let loss = dice_loss(&mut tape, p, &target).unwrap();
            assert!((tape.value(loss)[[]] - reference).abs() < 1e-9);
        }
    }

    #[test]
    fn dice_rejects_bad_inputs() {
        let target = Array2::<u8>::zeros((4, 4));
        let mut tape = Tape::new();
        let p = tape.constant(Array3::<f64>::zeros((2, 3, 3)));
        assert!(dice_loss(&mut tape, p, &target).is_err());
        let mut bad = target.clone();
        bad[[0, 0]] = 5;
        let p = tape.constant(Array3::<f64>::zeros((2, 4, 4)));
        assert!(dice_loss(&mut tape, p, &bad).is_err());
    }

    #[test]
    fn bce_known_values() {
        let target = Array2::from_shape_vec((2, 2), vec![1u8, 0, 1, 0]).unwrap();
        let probs = Array2::from_shape_vec((2, 2), vec![0.9, 0.1, 0.8, 0.2]).unwrap();
        let mut tape = Tape::new();
        let p = tape.constant(probs);
        let loss = boundary_bce(&mut tape, p, &target).unwrap();
        let expected = -(0.9f64.ln() + 0.9f64.ln() + 0.8f64.ln() + 0.8f64.ln()) / 4.0;
        assert!((tape.value(loss)[[]] - expected).abs() < 1e-12);
        assert!((expected - 0.16425).abs() < 1e-4);

        // exact predictions vanish after clamping; 0.5 gives ln 2
        let exact = target.mapv(|v| v as f64);
        let mut tape = Tape::new();
        let p = tape.constant(exact);
        let loss = boundary_bce(&mut tape, p, &target).unwrap();
        assert!(tape.value(loss)[[]] < 1e-6);
        let mut tape = Tape::new();
        let p = tape.constant(Array2::from_elem((2, 2), 0.5));
        let loss = boundary_bce(&mut tape, p, &target).unwrap();
        assert!((tape.value(loss)[[]] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_shape_mismatch_errors() {
        let target = Array2::<u8>::zeros((3, 3));
        let mut tape = Tape::new();
        let p = tape.constant(Array2::<f64>::zeros((2, 2)));
        assert!(boundary_bce(&mut tape, p, &target).is_err());
    }

    fn fd_check_scalar_loss<F>(store: &mut ParamStore, name: &str, f: F)
    where
        F: Fn(&ParamStore) -> (f64, ArrayD<f64>),
    {
        let (_, analytic) = f(store);
        let base = store.get(name).clone();
        let h = 1e-6;
        let mut worst = 0.0f64;
        for i in 0..base.len() {
            let mut p = base.clone();
            p.as_slice_mut().unwrap()[i] += h;
            store.set(name, p.clone());
            let (fp, _) = f(store);
            p.as_slice_mut().unwrap()[i] -= 2.0 * h;
            store.set(name, p);
            let (fm, _) = f(store);
            let fd = (fp - fm) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[i];
            let rel = (a - fd).abs() / (a.abs() + fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        store.set(name, base);
        assert!(worst < 1e-5, "worst rel err {worst}");
    }

    #[test]
    fn dice_gradient_check() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let target = Array2::from_shape_fn((4, 4), |_| rng.gen_range(0..3) as u8);
        let mut store = ParamStore::new();
        store.register("p", Array3::from_shape_fn((3, 4, 4), |_| rng.gen_range(0.05..1.0)).into_dyn());
        let t = target.clone();
        fd_check_scalar_loss(&mut store, "p", |s| {
            let mut tape = Tape::new();
            let p = s.leaf(&mut tape, "p");
            let loss = dice_loss(&mut tape, p, &t).unwrap();
            let v = tape.value(loss)[[]];
            let grads = tape.backward(loss);
            let g = tape.param_grads(&grads).find(|(n, _)| *n == "p").unwrap().1.clone();
            (v, g)
        });
    }

    #[test]
    fn bce_gradient_check() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let target = Array2::from_shape_fn((4, 4), |_| rng.gen_range(0..2) as u8);
        let mut store = ParamStore::new();
        store.register("p", Array2::from_shape_fn((4, 4), |_| rng.gen_range(0.05..0.95)).into_dyn());
        let t = target.clone();
        fd_check_scalar_loss(&mut store, "p", |s| {
            let mut tape = Tape::new();
            let p = s.leaf(&mut tape, "p");
            let loss = boundary_bce(&mut tape, p, &t).unwrap();
            let v = tape.value(loss)[[]];
            let grads = tape.backward(loss);
            let g = tape.param_grads(&grads).find(|(n, _)| *n == "p").unwrap().1.clone();
            (v, g)
        });
    }

    fn toy_bundle(tape: &mut Tape, k1: usize, hw: (usize, usize), seed: u64) -> PredictionBundle {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let logits = Array3::from_shape_fn((k1, hw.0, hw.1), |_| rng.gen_range(-2.0..2.0));
        let z_r = tape.constant(logits);
        let s_r = tape.softmax_channels(z_r);
        let zc = Array3::from_shape_fn((k1, hw.0 / 2, hw.1 / 2), |_| rng.gen_range(-2.0..2.0));
        let z_c = tape.constant(zc);
        let s_c = tape.softmax_channels(z_c);
        let zb = Array2::from_shape_fn(hw, |_| rng.gen_range(-2.0..2.0));
        let z_b = tape.constant(zb);
        let b = tape.sigmoid(z_b);
        PredictionBundle {
            coarse_logits: Some(z_c),
            coarse_probs: Some(s_c),
            refined_logits: z_r,
            refined_probs: s_r,
            boundary_logits: Some(z_b),
            boundary_probs: Some(b),
        }
    }

    #[test]
    fn total_loss_decomposition_and_lambda_linearity() {
        let mut tape = Tape::new();
        let bundle = toy_bundle(&mut tape, 3, (8, 8), 11);
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let mask = Array2::from_shape_fn((8, 8), |_| rng.gen_range(0..3) as u8);
        let boundary = Array2::from_shape_fn((8, 8), |_| rng.gen_range(0..2) as u8);
        let (_, r1) = total_loss(&mut tape, &bundle, &mask, &boundary, 0.5, 0.4).unwrap();
        assert!((r1.total - (r1.l_seg + 0.5 * r1.l_boundary + 0.4 * r1.l_coarse)).abs() < 1e-9);
        let (_, r2) = total_loss(&mut tape, &bundle, &mask, &boundary, 0.9, 0.4).unwrap();
        let diff = r2.total - r1.total;
        assert!((diff - (0.9 - 0.5) * r1.l_boundary).abs() < 1e-12);
        assert_eq!(r1.l_boundary, r2.l_boundary);
    }

    #[test]
    fn total_loss_ablations_and_validation() {
        let mut tape = Tape::new();
        let full = toy_bundle(&mut tape, 3, (8, 8), 13);
        let mask = Array2::<u8>::zeros((8, 8));
        let boundary = Array2::<u8>::zeros((8, 8));
        assert!(total_loss(&mut tape, &full, &mask, &boundary, -0.1, 0.4).is_err());
        let no_bnd = PredictionBundle { boundary_probs: None, boundary_logits: None, ..full };
        let (_, r) = total_loss(&mut tape, &no_bnd, &mask, &boundary, 0.5, 0.4).unwrap();
        assert_eq!(r.l_boundary, 0.0);
        assert!((r.total - (r.l_seg + 0.4 * r.l_coarse)).abs() < 1e-12);
    }

    #[test]
    fn loss_report_serializes_with_expected_keys() {
        let r = LossReport { l_seg: 0.3, l_boundary: 0.2, l_coarse: 0.1, total: 0.44, lambda: 0.5, mu_aux: 0.4 };
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for key in ["l_seg", "l_boundary", "l_coarse", "total", "lambda"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
}

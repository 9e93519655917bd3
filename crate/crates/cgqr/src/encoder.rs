//! Multi-resolution feature extractor: parallel branches at three strides,
//! residual per-branch transforms, and cross-scale fusion at every stage.

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CgqrError, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

pub const NORM_EPS: f64 = 1e-5;
const STAT_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub branch_channels: (usize, usize, usize),
    pub branch_strides: (usize, usize, usize),
    pub n_stages: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 1,
            branch_channels: (32, 64, 128),
            branch_strides: (4, 8, 16),
            n_stages: 3,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let (s1, s2, s3) = self.branch_strides;
        if !(s1 < s2 && s2 < s3) {
            return Err(CgqrError::Config(format!(
                "branch strides must increase, got ({s1}, {s2}, {s3})"
            )));
        }
        for s in [s1, s2, s3] {
            if !s.is_power_of_two() {
                return Err(CgqrError::Config(format!("stride {s} is not a power of two")));
            }
        }
        if self.n_stages < 1 {
            return Err(CgqrError::Config("n_stages must be >= 1".into()));
        }
        Ok(())
    }

    pub fn channels(&self) -> [usize; 3] {
        let (a, b, c) = self.branch_channels;
        [a, b, c]
    }

    pub fn strides(&self) -> [usize; 3] {
        let (a, b, c) = self.branch_strides;
        [a, b, c]
    }

    /// Output shapes (C, H/s, W/s) for an input of the given size.
    pub fn feature_shapes(&self, h: usize, w: usize) -> [(usize, usize, usize); 3] {
        let ch = self.channels();
        let st = self.strides();
        [0, 1, 2].map(|i| (ch[i], h / st[i], w / st[i]))
    }
}

/// The three branch outputs of one forward pass, as tape variables.
#[derive(Debug, Clone, Copy)]
pub struct FeatureSet {
    pub f1: Var,
    pub f2: Var,
    pub f3: Var,
}

impl FeatureSet {
    pub fn branches(&self) -> [Var; 3] {
        [self.f1, self.f2, self.f3]
    }
}

/// One conv layer spec: (name, weight shape). Norm affine pairs are listed
/// as separate 1-D entries.
fn param_specs(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let mut specs = Vec::new();
    let ch = cfg.channels();
    let st = cfg.strides();
    let mut push_conv_norm = |name: &str, cin: usize, cout: usize, k: usize| {
        specs.push((format!("enc.{name}.w"), vec![cout, cin, k, k]));
        specs.push((format!("enc.{name}.norm.g"), vec![cout]));
        specs.push((format!("enc.{name}.norm.b"), vec![cout]));
    };

    // stem: log2(s1) stride-2 blocks down to the first branch resolution
    let stem_steps = (st[0] as f64).log2() as usize;
    let mut cin = cfg.in_channels;
    for i in 0..stem_steps.max(1) {
        push_conv_norm(&format!("stem{i}"), cin, ch[0], 3);
        cin = ch[0];
    }
    // branch transitions 1->2 and 2->3
    for k in 1..3 {
        let steps = (st[k] / st[k - 1]).trailing_zeros() as usize;
        let mut cin = ch[k - 1];
        for i in 0..steps {
            push_conv_norm(&format!("trans{k}.d{i}"), cin, ch[k], 3);
            cin = ch[k];
        }
    }
    // stages
    for t in 0..cfg.n_stages {
        for k in 0..3 {
            push_conv_norm(&format!("s{t}.f{k}.c0"), ch[k], ch[k], 3);
            push_conv_norm(&format!("s{t}.f{k}.c1"), ch[k], ch[k], 3);
            for j in 0..3 {
                if j == k {
                    continue;
                }
                if j < k {
                    // downscale: chained stride-2 convs
                    let steps = (st[k] / st[j]).trailing_zeros() as usize;
                    let mut cin = ch[j];
                    for i in 0..steps {
                        push_conv_norm(&format!("s{t}.phi{j}to{k}.d{i}"), cin, ch[k], 3);
                        cin = ch[k];
                    }
                } else {
                    // upscale: 1x1 align then nearest upsample
                    push_conv_norm(&format!("s{t}.phi{j}to{k}.u"), ch[j], ch[k], 1);
                }
            }
        }
    }
    specs
}

/// Exact learned-parameter count for a config.
pub fn parameter_count(cfg: &EncoderConfig) -> usize {
    param_specs(cfg).iter().map(|(_, s)| s.iter().product::<usize>()).sum()
}

pub struct Encoder {
    pub cfg: EncoderConfig,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig) -> Result<Encoder> {
        cfg.validate()?;
        Ok(Encoder { cfg })
    }

    /// Register freshly initialized parameters (He-style for convs, identity
    /// affine for norms).
    pub fn register_params(&self, store: &mut ParamStore, rng: &mut ChaCha20Rng) {
        for (name, shape) in param_specs(&self.cfg) {
            let value = if name.ends_with(".norm.g") {
                ArrayD::ones(IxDyn(&shape))
            } else if name.ends_with(".norm.b") {
                ArrayD::zeros(IxDyn(&shape))
            } else {
                he_init(&shape, rng)
            };
            store.register(&name, value);
        }
    }

    /// Run the encoder on a standardized (H, W) image.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        image: &Array2<f64>,
        train: bool,
    ) -> Result<FeatureSet> {
        let (h, w) = image.dim();
        let x = Array3::from_shape_fn((1, h, w), |(_, y, xx)| image[[y, xx]]);
        let input = tape.constant(x);
        self.forward_var(tape, store, input, train)
    }

    /// Forward pass from an existing tape variable of shape (1, H, W); used
    /// directly when input gradients are needed.
    pub fn forward_var(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        input: Var,
        train: bool,
    ) -> Result<FeatureSet> {
        let shape = tape.shape(input).to_vec();
        let (h, w) = (shape[1], shape[2]);
        let st = self.cfg.strides();
        for s in st {
            if h % s != 0 || w % s != 0 {
                return Err(CgqrError::Shape(format!(
                    "input {h}x{w} not divisible by branch stride {s}"
                )));
            }
        }
        let mut cur = input;

        // stem
        let stem_steps = ((st[0] as f64).log2() as usize).max(1);
        for i in 0..stem_steps {
            let stride = if st[0] == 1 { 1 } else { 2 };
            cur = self.conv_norm(tape, store, cur, &format!("stem{i}"), stride, 1, train)?;
            cur = tape.relu(cur);
        }
        let mut branches = vec![cur];
        for k in 1..3 {
            let steps = (st[k] / st[k - 1]).trailing_zeros() as usize;
            let mut b = *branches.last().unwrap();
            for i in 0..steps {
                b = self.conv_norm(tape, store, b, &format!("trans{k}.d{i}"), 2, 1, train)?;
                b = tape.relu(b);
            }
            branches.push(b);
        }

        for t in 0..self.cfg.n_stages {
            let prev = branches.clone();
            for k in 0..3 {
                // residual within-branch transform
                let mut y = self.conv_norm(tape, store, prev[k], &format!("s{t}.f{k}.c0"), 1, 1, train)?;
                y = tape.relu(y);
                y = self.conv_norm(tape, store, y, &format!("s{t}.f{k}.c1"), 1, 1, train)?;
                let mut acc = tape.add(y, prev[k]);
                // cross-scale fusion
                for j in 0..3 {
                    if j == k {
                        continue;
                    }
                    let m = if j < k {
                        let steps = (st[k] / st[j]).trailing_zeros() as usize;
                        let mut d = prev[j];
                        for i in 0..steps {
                            d = self.conv_norm(
                                tape,
                                store,
                                d,
                                &format!("s{t}.phi{j}to{k}.d{i}"),
                                2,
                                1,
                                train,
                            )?;
                            if i + 1 < steps {
                                d = tape.relu(d);
                            }
                        }
                        d
                    } else {
                        let u = self.conv_norm(
                            tape,
                            store,
                            prev[j],
                            &format!("s{t}.phi{j}to{k}.u"),
                            1,
                            0,
                            train,
                        )?;
                        tape.upsample_nearest(u, st[j] / st[k])
                    };
                    acc = tape.add(acc, m);
                }
                branches[k] = tape.relu(acc);
            }
        }
        Ok(FeatureSet { f1: branches[0], f2: branches[1], f3: branches[2] })
    }

    fn conv_norm(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        input: Var,
        name: &str,
        stride: usize,
        pad: usize,
        train: bool,
    ) -> Result<Var> {
        let w = store.leaf(tape, &format!("enc.{name}.w"));
        let g = store.leaf(tape, &format!("enc.{name}.norm.g"));
        let b = store.leaf(tape, &format!("enc.{name}.norm.b"));
        let conv = tape.conv2d(input, w, None, stride, pad);
        let out = if train {
            let (mean, var) = tape.spatial_stats(conv);
            store.update_stat(&format!("stats.enc.{name}.mean"), &mean.clone().into_dyn(), STAT_MOMENTUM);
            store.update_stat(&format!("stats.enc.{name}.var"), &var.clone().into_dyn(), STAT_MOMENTUM);
            tape.channel_norm(conv, g, b, NORM_EPS, None)
        } else {
            let frozen = match (
                store.stat(&format!("stats.enc.{name}.mean")),
                store.stat(&format!("stats.enc.{name}.var")),
            ) {
                (Some(m), Some(v)) => (
                    m.clone().into_dimensionality().unwrap(),
                    v.clone().into_dimensionality().unwrap(),
                ),
                // never trained: freeze the current batch statistics and
                // persist them so later passes see the same constants
                _ => {
                    let (m, v) = tape.spatial_stats(conv);
                    store.set_stat(&format!("stats.enc.{name}.mean"), m.clone().into_dyn());
                    store.set_stat(&format!("stats.enc.{name}.var"), v.clone().into_dyn());
                    (m, v)
                }
            };
            tape.channel_norm(conv, g, b, NORM_EPS, Some(frozen))
        };
        Ok(out)
    }
}

pub fn he_init(shape: &[usize], rng: &mut ChaCha20Rng) -> ArrayD<f64> {
    let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
    let std = (2.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        // Box-Muller
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            in_channels: 1,
            branch_channels: (16, 32, 64),
            branch_strides: (4, 8, 16),
            n_stages: 2,
        }
    }

    fn init(cfg: &EncoderConfig, seed: u64) -> (Encoder, ParamStore) {
        let enc = Encoder::new(cfg.clone()).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        enc.register_params(&mut store, &mut rng);
        (enc, store)
    }

    #[test]
    fn output_shapes_follow_config() {
        let cfg = small_cfg();
        let (enc, mut store) = init(&cfg, 0);
        let img = Array2::zeros((64, 64));
        let mut tape = Tape::new();
        let fs = enc.forward(&mut tape, &mut store, &img, false).unwrap();
        assert_eq!(tape.shape(fs.f1), &[16, 16, 16]);
        assert_eq!(tape.shape(fs.f2), &[32, 8, 8]);
        assert_eq!(tape.shape(fs.f3), &[64, 4, 4]);
    }

    #[test]
    fn shape_contract_over_random_configs() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..10 {
            let c1 = rng.gen_range(2..6);
            let cfg = EncoderConfig {
                in_channels: 1,
                branch_channels: (c1, c1 + 2, c1 + 4),
                branch_strides: (2, 4, 8),
                n_stages: rng.gen_range(1..3),
            };
            let (enc, mut store) = init(&cfg, 9);
            let img = Array2::zeros((16, 24));
            let mut tape = Tape::new();
            let fs = enc.forward(&mut tape, &mut store, &img, false).unwrap();
            let shapes = cfg.feature_shapes(16, 24);
            for (v, exp) in fs.branches().into_iter().zip(shapes) {
                assert_eq!(tape.shape(v), &[exp.0, exp.1, exp.2]);
            }
        }
    }

    #[test]
    fn non_divisible_input_names_the_stride() {
        let cfg = small_cfg();
        let (enc, mut store) = init(&cfg, 0);
        let img = Array2::zeros((60, 64));
        let mut tape = Tape::new();
        let err = enc.forward(&mut tape, &mut store, &img, false).unwrap_err();
        assert!(err.to_string().contains("stride"), "{err}");
    }

    #[test]
    fn zero_params_zero_input_gives_zero_features() {
        let cfg = small_cfg();
        let (enc, mut store) = init(&cfg, 0);
        let names: Vec<String> = store.names().map(String::from).collect();
        for n in names {
            let shape = store.get(&n).shape().to_vec();
            store.set(&n, ArrayD::zeros(IxDyn(&shape)));
        }
        let img = Array2::zeros((64, 64));
        let mut tape = Tape::new();
        let fs = enc.forward(&mut tape, &mut store, &img, false).unwrap();
        for v in fs.branches() {
            assert!(tape.value(v).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn inference_is_deterministic() {
        let cfg = small_cfg();
        let (enc, mut store) = init(&cfg, 7);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let img = Array2::from_shape_fn((64, 64), |_| rng.gen_range(-1.0..1.0));
        let run = |store: &mut ParamStore| {
            let mut tape = Tape::new();
            let fs = enc.forward(&mut tape, store, &img, false).unwrap();
            fs.branches().map(|v| tape.value(v).clone())
        };
        let a = run(&mut store);
        let b = run(&mut store);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn parameter_count_matches_store_and_grows() {
        let cfg = small_cfg();
        let (_, store) = init(&cfg, 0);
        assert_eq!(parameter_count(&cfg), store.n_parameters());

        let mut doubled = cfg.clone();
        doubled.branch_channels = (32, 64, 128);
        assert!(parameter_count(&doubled) > parameter_count(&cfg));

        let mut deeper = cfg.clone();
        deeper.n_stages = 3;
        assert!(parameter_count(&deeper) > parameter_count(&cfg));
    }

    #[test]
    fn parameter_count_tiny_config_hand_tally() {
        let cfg = EncoderConfig {
            in_channels: 1,
            branch_channels: (2, 2, 2),
            branch_strides: (2, 4, 8),
            n_stages: 1,
        };
        // stem: 1 block (log2(2)=1): w 2*1*3*3=18, norm 2+2=4          -> 22
        // trans1: 1 step: w 2*2*3*3=36 + 4                              -> 40
        // trans2: 1 step: 36 + 4                                        -> 40
        // stage 0, per branch k: f c0 (36+4) + f c1 (36+4)              -> 80
        //   phi j<k: one stride-2 conv per halving: j=0->k=1: 1 step (40)
        //     j=0->k=2: 2 steps (80); j=1->k=2: 1 step (40)
        //   phi j>k: 1x1 conv 2*2*1*1=4 + 4 = 8 each; pairs: 1->0, 2->0, 2->1
        // stage total: 3*80 + (40+80+40) + 3*8 = 240 + 160 + 24 = 424
        let expected = 22 + 40 + 40 + 424;
        assert_eq!(parameter_count(&cfg), expected);
    }

    #[test]
    fn cross_scale_fusion_mixes_branches() {
        // zeroing the phi parameters from branch j changes branch k's output
        let cfg = EncoderConfig {
            in_channels: 1,
            branch_channels: (4, 6, 8),
            branch_strides: (2, 4, 8),
            n_stages: 1,
        };
        let (enc, mut store) = init(&cfg, 3);
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let img = Array2::from_shape_fn((16, 16), |_| rng.gen_range(-1.0..1.0));
        let base = {
            let mut tape = Tape::new();
            let fs = enc.forward(&mut tape, &mut store, &img, false).unwrap();
            tape.value(fs.f1).clone()
        };
        // cut the 2->0 fusion path
        let name = "enc.s0.phi2to0.u.w";
        let shape = store.get(name).shape().to_vec();
        store.set(name, ArrayD::zeros(IxDyn(&shape)));
        let cut = {
            let mut tape = Tape::new();
            let fs = enc.forward(&mut tape, &mut store, &img, false).unwrap();
            tape.value(fs.f1).clone()
        };
        assert_ne!(base, cut, "branch 2 features do not influence branch 0");
    }

    #[test]
    fn gradient_check_one_stage_encoder() {
        // double-precision finite differences on a 16x16 input; the deepest
        // branch must keep spatial extent > 1 so batch variances stay
        // bounded away from zero
        let cfg = EncoderConfig {
            in_channels: 1,
            branch_channels: (2, 3, 4),
            branch_strides: (2, 4, 8),
            n_stages: 1,
        };
        let (enc, mut store) = init(&cfg, 11);
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let img = Array2::from_shape_fn((16, 16), |_| rng.gen_range(-1.0..1.0));

        let loss_of = |enc: &Encoder, store: &mut ParamStore, img: &Array2<f64>| -> f64 {
            let mut tape = Tape::new();
            let fs = enc.forward(&mut tape, store, img, false).unwrap();
            let s1 = tape.sum_all(fs.f1);
            let s2 = tape.sum_all(fs.f2);
            let s3 = tape.sum_all(fs.f3);
            let t = tape.add(s1, s2);
            let t = tape.add(t, s3);
            tape.value(t)[[]]
        };

        // analytic input gradient: feed the image in as a tape leaf
        let mut tape = Tape::new();
        let x3 = Array3::from_shape_fn((1, 16, 16), |(_, y, x)| img[[y, x]]);
        let img_var = tape.param("input", x3.into_dyn());
        let fs = enc.forward_var(&mut tape, &mut store, img_var, false).unwrap();
        let s1 = tape.sum_all(fs.f1);
        let s2 = tape.sum_all(fs.f2);
        let s3 = tape.sum_all(fs.f3);
        let t = tape.add(s1, s2);
        let t = tape.add(t, s3);
        let grads = tape.backward(t);
        let analytic = grads[img_var.0].clone();

        let mut fd = ArrayD::zeros(IxDyn(&[1, 16, 16]));
        let h = 1e-6;
        for y in 0..16 {
            for x in 0..16 {
                let mut ip = img.clone();
                ip[[y, x]] += h;
                let fp = loss_of(&enc, &mut store, &ip);
                ip[[y, x]] -= 2.0 * h;
                let fm = loss_of(&enc, &mut store, &ip);
                fd[[0, y, x]] = (fp - fm) / (2.0 * h);
            }
        }
        let num: f64 = analytic
            .iter()
            .zip(fd.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let den: f64 = analytic.iter().map(|v| v * v).sum::<f64>().sqrt()
            + fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(num / den < 1e-5, "rel err {}", num / den);
    }

}

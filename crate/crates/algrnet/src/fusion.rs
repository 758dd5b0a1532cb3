//! Gated local-global fusion and the three-block refiner. Every branch gets
//! its own fusion and refiner weights since different regions lean on
//! different parts of the global face.

use ndarray::{ArrayD, Ix2, Ix3};

use crate::autodiff::{ConvSpec, Tape, Var};
use crate::backbone::Conv2d;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{Bound, Initializer, ParamSet};

const NORM_EPS: f64 = 1e-8;

/// Gated fusion for one branch:
/// alpha = sigmoid(Cg'(G) + Cl'(s_t)),
/// r_hat = alpha * l2norm(Cg(G)) + (1 - alpha) * l2norm(Cl(s_t)).
pub struct GatedFusion {
    gate_global: Conv2d,
    gate_local: Conv2d,
    proj_global: Conv2d,
    proj_local: Conv2d,
}

impl GatedFusion {
    pub fn new(
        init: &mut Initializer,
        set: &mut ParamSet,
        cfg: &ModelConfig,
        branch: usize,
    ) -> Self {
        let cf = cfg.fusion_channels;
        let mk = |init: &mut Initializer, set: &mut ParamSet, tag: &str, ci: usize| {
            Conv2d::new(
                init,
                set,
                &format!("fuse{branch}.{tag}"),
                ci,
                cf,
                1,
                ConvSpec::unit(),
            )
        };
        Self {
            gate_global: mk(init, set, "gate_g", cfg.global_channels),
            gate_local: mk(init, set, "gate_l", cfg.stem_channels),
            proj_global: mk(init, set, "proj_g", cfg.global_channels),
            proj_local: mk(init, set, "proj_l", cfg.stem_channels),
        }
    }

    pub fn forward(&self, t: &Tape, p: &Bound, s_t: Var, global: Var) -> Result<Var> {
        let ss = t.shape(s_t);
        let gs = t.shape(global);
        if ss[2..] != gs[2..] || ss[0] != gs[0] {
            return Err(Error::Input(format!(
                "fusion spatial mismatch: local {ss:?} vs global {gs:?}"
            )));
        }
        let alpha = t.sigmoid(t.add(
            self.gate_global.forward(t, p, global),
            self.gate_local.forward(t, p, s_t),
        ));
        let ng = t.l2norm_channels(self.proj_global.forward(t, p, global), NORM_EPS);
        let nl = t.l2norm_channels(self.proj_local.forward(t, p, s_t), NORM_EPS);
        let one_minus = t.affine(alpha, -1.0, 1.0);
        Ok(t.add(t.mul(alpha, ng), t.mul(one_minus, nl)))
    }
}

/// Three blocks of (3x3 conv, 3x3 conv, 2x2 max-pool); spatial dims are
/// zero-padded up to the nearest multiple of 8 first, so the output is
/// padded/8 on each side.
pub struct Refiner {
    blocks: [(Conv2d, Conv2d); 3],
}

impl Refiner {
    pub fn new(
        init: &mut Initializer,
        set: &mut ParamSet,
        cfg: &ModelConfig,
        branch: usize,
    ) -> Self {
        let cr = cfg.refine_channels;
        let spec = ConvSpec::new(1, 1, 1);
        let mut mk = |k: usize, ci: usize| {
            (
                Conv2d::new(init, set, &format!("refine{branch}.b{k}c1"), ci, cr, 3, spec),
                Conv2d::new(init, set, &format!("refine{branch}.b{k}c2"), cr, cr, 3, spec),
            )
        };
        let b0 = mk(0, cfg.fusion_channels);
        let b1 = mk(1, cr);
        let b2 = mk(2, cr);
        Self {
            blocks: [b0, b1, b2],
        }
    }

    pub fn padded_dim(dim: usize) -> usize {
        dim.div_ceil(8) * 8
    }

    pub fn output_dim(dim: usize) -> usize {
        Self::padded_dim(dim) / 8
    }

    pub fn forward(&self, t: &Tape, p: &Bound, x: Var) -> Result<Var> {
        let sh = t.shape(x);
        if sh[2] == 0 || sh[3] == 0 {
            return Err(Error::Config("refiner input has empty spatial dims".into()));
        }
        let (th, tw) = (Self::padded_dim(sh[2]), Self::padded_dim(sh[3]));
        if th % 8 != 0 || tw % 8 != 0 {
            return Err(Error::Config(format!(
                "refiner dims {th}x{tw} not divisible by 8"
            )));
        }
        let mut x = t.pad_spatial(x, th, tw);
        for (c1, c2) in &self.blocks {
            x = t.relu(c1.forward(t, p, x));
            x = t.relu(c2.forward(t, p, x));
            x = t.maxpool2(x);
        }
        Ok(x)
    }
}

/// Channel mean of a fused feature [C,H,W], bilinearly upsampled to
/// (out_h, out_w) and normalized to 0..=255. Fig.-style activation heatmaps.
pub fn activation_heatmap(
    feature: &ArrayD<f64>,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<u8>> {
    let f3 = feature
        .view()
        .into_dimensionality::<Ix3>()
        .map_err(|_| Error::Input("activation export expects [C,H,W]".into()))?;
    let (c, h, w) = f3.dim();
    let mut mean = ndarray::Array2::<f64>::zeros((h, w));
    for ci in 0..c {
        mean += &f3.index_axis(ndarray::Axis(0), ci);
    }
    mean /= c as f64;
    let up = bilinear_upsample(&mean, out_h, out_w);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in up.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = if hi > lo { hi - lo } else { 1.0 };
    Ok(up
        .iter()
        .map(|&v| (255.0 * (v - lo) / range).round().clamp(0.0, 255.0) as u8)
        .collect())
}

pub fn bilinear_upsample(
    src: &ndarray::Array2<f64>,
    out_h: usize,
    out_w: usize,
) -> ndarray::Array2<f64> {
    let (h, w) = src.view().into_dimensionality::<Ix2>().unwrap().dim();
    let mut out = ndarray::Array2::<f64>::zeros((out_h, out_w));
    let sy = if out_h > 1 { (h - 1) as f64 / (out_h - 1) as f64 } else { 0.0 };
    let sx = if out_w > 1 { (w - 1) as f64 / (out_w - 1) as f64 } else { 0.0 };
    for oy in 0..out_h {
        let fy = oy as f64 * sy;
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ox as f64 * sx;
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let top = src[[y0, x0]] * (1.0 - tx) + src[[y0, x1]] * tx;
            let bot = src[[y1, x0]] * (1.0 - tx) + src[[y1, x1]] * tx;
            out[[oy, ox]] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array, IxDyn};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ModelConfig {
        let mut m = ModelConfig {
            input_size: 16,
            ..ModelConfig::default()
        };
        m.stem_channels = 4;
        m.hidden_channels = 4;
        m.global_channels = 4;
        m.fusion_channels = 4;
        m.refine_channels = 4;
        m
    }

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        Array::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_weights_give_half_alpha_and_zero_output() {
        let cfg = tiny_cfg();
        let mut set = ParamSet::new();
        let mut init = Initializer::new(1);
        let fuse = GatedFusion::new(&mut init, &mut set, &cfg, 0);
        for id in set.ids().collect::<Vec<_>>() {
            set.get_mut(id).fill(0.0);
        }
        let t = Tape::new();
        let p = set.bind(&t);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = t.leaf(randn(&mut rng, &[1, 4, 3, 3]));
        let g = t.leaf(randn(&mut rng, &[1, 4, 3, 3]));
        // alpha = sigmoid(0) = 0.5 exactly; both projections are zero, and the
        // eps guard turns 0/||0|| into 0, so the blend is exactly zero.
        let alpha = t.value(t.sigmoid(t.add(
            fuse.gate_global.forward(&t, &p, g),
            fuse.gate_local.forward(&t, &p, s),
        )));
        assert!(alpha.iter().all(|&a| a == 0.5));
        let out = t.value(fuse.forward(&t, &p, s, g).unwrap());
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_gate_passes_normalized_global_only() {
        let cfg = tiny_cfg();
        let mut set = ParamSet::new();
        let mut init = Initializer::new(3);
        let fuse = GatedFusion::new(&mut init, &mut set, &cfg, 0);
        // large positive bias on both gate convs forces alpha -> 1
        for id in [fuse.gate_global.b, fuse.gate_local.b] {
            set.get_mut(id).fill(500.0);
        }
        let t = Tape::new();
        let p = set.bind(&t);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = t.leaf(randn(&mut rng, &[1, 4, 3, 3]));
        let g = t.leaf(randn(&mut rng, &[1, 4, 3, 3]));
        let out = t.value(fuse.forward(&t, &p, s, g).unwrap());
        // per-location channel norm of the output must be 1 (pre-normalization
        // vectors are generically nonzero)
        for y in 0..3 {
            for x in 0..3 {
                let mut n = 0.0;
                for c in 0..4 {
                    n += out[[0, c, y, x]] * out[[0, c, y, x]];
                }
                assert!((n.sqrt() - 1.0).abs() < 1e-6, "norm {}", n.sqrt());
            }
        }
    }

    #[test]
    fn blend_matches_pointwise_hand_evaluation() {
        let cfg = tiny_cfg();
        let mut set = ParamSet::new();
        let mut init = Initializer::new(5);
        let fuse = GatedFusion::new(&mut init, &mut set, &cfg, 0);
        let t = Tape::new();
        let p = set.bind(&t);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s_arr = randn(&mut rng, &[2, 4, 3, 3]);
        let g_arr = randn(&mut rng, &[2, 4, 3, 3]);
        let s = t.leaf(s_arr.clone());
        let g = t.leaf(g_arr.clone());
        let out = t.value(fuse.forward(&t, &p, s, g).unwrap());

        // hand evaluation with plain loops over 1x1 convs
        let conv1x1 = |x: &ArrayD<f64>, w: &ArrayD<f64>, b: &ArrayD<f64>,
                       bi: usize, co: usize, y: usize, xx: usize| {
            let mut acc = b[[co]];
            for ci in 0..4 {
                acc += x[[bi, ci, y, xx]] * w[[co, ci, 0, 0]];
            }
            acc
        };
        let w_of = |c: &Conv2d| (set.get(c.w).clone(), set.get(c.b).clone());
        let (wgg, bgg) = w_of(&fuse.gate_global);
        let (wgl, bgl) = w_of(&fuse.gate_local);
        let (wpg, bpg) = w_of(&fuse.proj_global);
        let (wpl, bpl) = w_of(&fuse.proj_local);
        for _ in 0..50 {
            let bi = rng.random_range(0..2);
            let co = rng.random_range(0..4);
            let y = rng.random_range(0..3);
            let x = rng.random_range(0..3);
            let alpha = {
                let z = conv1x1(&g_arr, &wgg, &bgg, bi, co, y, x)
                    + conv1x1(&s_arr, &wgl, &bgl, bi, co, y, x);
                1.0 / (1.0 + (-z).exp())
            };
            let norm_of = |arr: &ArrayD<f64>, w: &ArrayD<f64>, b: &ArrayD<f64>| {
                let vals: Vec<f64> = (0..4)
                    .map(|c| conv1x1(arr, w, b, bi, c, y, x))
                    .collect();
                let n: f64 = vals.iter().map(|v| v * v).sum::<f64>().sqrt();
                vals[co] / (n + NORM_EPS)
            };
            let want = alpha * norm_of(&g_arr, &wpg, &bpg)
                + (1.0 - alpha) * norm_of(&s_arr, &wpl, &bpl);
            let got = out[[bi, co, y, x]];
            assert!((got - want).abs() < 1e-10, "got {got}, want {want}");
        }
    }

    #[test]
    fn swapping_inputs_and_weights_is_symmetric() {
        let cfg = tiny_cfg();
        let mut set = ParamSet::new();
        let mut init = Initializer::new(7);
        let fuse = GatedFusion::new(&mut init, &mut set, &cfg, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s_arr = randn(&mut rng, &[1, 4, 2, 2]);
        let g_arr = randn(&mut rng, &[1, 4, 2, 2]);
        let run = |set: &ParamSet, a: &ArrayD<f64>, b: &ArrayD<f64>| {
            let t = Tape::new();
            let p = set.bind(&t);
            let s = t.leaf(a.clone());
            let g = t.leaf(b.clone());
            t.value(fuse.forward(&t, &p, s, g).unwrap()).as_ref().clone()
        };
        let base = run(&set, &s_arr, &g_arr);
        // Swap inputs, swap the projection pairs, and swap + negate the gate
        // pairs: negation turns sigmoid(z) into 1 - sigmoid(z), realizing the
        // alpha <-> 1-alpha exchange, so the blend is unchanged.
        let mut swapped = ParamSet::new();
        let mut init2 = Initializer::new(7);
        let fuse2 = GatedFusion::new(&mut init2, &mut swapped, &cfg, 0);
        let copy = |dst: &mut ParamSet, di: usize, src: &ParamSet, si: usize, scale: f64| {
            let v = src.get(si).mapv(|x| scale * x);
            dst.get_mut(di).assign(&v);
        };
        copy(&mut swapped, fuse2.gate_global.w, &set, fuse.gate_local.w, -1.0);
        copy(&mut swapped, fuse2.gate_global.b, &set, fuse.gate_local.b, -1.0);
        copy(&mut swapped, fuse2.gate_local.w, &set, fuse.gate_global.w, -1.0);
        copy(&mut swapped, fuse2.gate_local.b, &set, fuse.gate_global.b, -1.0);
        copy(&mut swapped, fuse2.proj_global.w, &set, fuse.proj_local.w, 1.0);
        copy(&mut swapped, fuse2.proj_global.b, &set, fuse.proj_local.b, 1.0);
        copy(&mut swapped, fuse2.proj_local.w, &set, fuse.proj_global.w, 1.0);
        copy(&mut swapped, fuse2.proj_local.b, &set, fuse.proj_global.b, 1.0);
        let t = Tape::new();
        let p = swapped.bind(&t);
        let s = t.leaf(g_arr.clone());
        let g = t.leaf(s_arr.clone());
        let flipped = t.value(fuse2.forward(&t, &p, s, g).unwrap());
        for (a, b) in base.iter().zip(flipped.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn alpha_stays_strictly_inside_unit_interval() {
        let cfg = tiny_cfg();
        let mut set = ParamSet::new();
        let mut init = Initializer::new(9);
        let fuse = GatedFusion::new(&mut init, &mut set, &cfg, 0);
        let t = Tape::new();
        let p = set.bind(&t);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..50 {
            let s = t.leaf(randn(&mut rng, &[1, 4, 2, 2]));
            let g = t.leaf(randn(&mut rng, &[1, 4, 2, 2]));
            let alpha = t.value(t.sigmoid(t.add(
                fuse.gate_global.forward(&t, &p, g),
                fuse.gate_local.forward(&t, &p, s),
            )));
            assert!(alpha.iter().all(|&a| a > 0.0 && a < 1.0));
        }
    }

    #[test]
    fn spatial_mismatch_is_input_error() {
        let cfg = tiny_cfg();
        let mut set = ParamSet::new();
        let mut init = Initializer::new(11);
        let fuse = GatedFusion::new(&mut init, &mut set, &cfg, 0);
        let t = Tape::new();
        let p = set.bind(&t);
        let s = t.leaf(ArrayD::zeros(IxDyn(&[1, 4, 3, 3])));
        let g = t.leaf(ArrayD::zeros(IxDyn(&[1, 4, 4, 4])));
        assert!(matches!(
            fuse.forward(&t, &p, s, g),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn refiner_pads_44_to_48_and_pools_to_6() {
        assert_eq!(Refiner::padded_dim(44), 48);
        assert_eq!(Refiner::output_dim(44), 6);
        let mut cfg = tiny_cfg();
        cfg.fusion_channels = 2;
        cfg.refine_channels = 2;
        let mut set = ParamSet::new();
        let mut init = Initializer::new(12);
        let refiner = Refiner::new(&mut init, &mut set, &cfg, 0);
        let t = Tape::new();
        let p = set.bind(&t);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = t.leaf(randn(&mut rng, &[1, 2, 44, 44]));
        let y = refiner.forward(&t, &p, x).unwrap();
        assert_eq!(t.shape(y), vec![1, 2, 6, 6]);
    }

    #[test]
    fn fusion_and_refiner_gradients_match_finite_differences() {
        let mut cfg = tiny_cfg();
        cfg.stem_channels = 2;
        cfg.hidden_channels = 2;
        cfg.global_channels = 2;
        cfg.fusion_channels = 2;
        cfg.refine_channels = 2;
        let mut set = ParamSet::new();
        let mut init = Initializer::new(14);
        let fuse = GatedFusion::new(&mut init, &mut set, &cfg, 0);
        let refiner = Refiner::new(&mut init, &mut set, &cfg, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let s_arr = randn(&mut rng, &[1, 2, 6, 6]);
        let g_arr = randn(&mut rng, &[1, 2, 6, 6]);
        let proj = randn(&mut rng, &[1, 2, 1, 1]);

        let loss_of = |set: &ParamSet| -> f64 {
            let t = Tape::new();
            let p = set.bind(&t);
            let s = t.leaf(s_arr.clone());
            let g = t.leaf(g_arr.clone());
            let fused = fuse.forward(&t, &p, s, g).unwrap();
            let refined = refiner.forward(&t, &p, fused).unwrap();
            t.value(t.dot_const(refined, &proj))[[]]
        };
        let t = Tape::new();
        let p = set.bind(&t);
        let s = t.leaf(s_arr.clone());
        let g = t.leaf(g_arr.clone());
        let fused = fuse.forward(&t, &p, s, g).unwrap();
        let refined = refiner.forward(&t, &p, fused).unwrap();
        let root = t.dot_const(refined, &proj);
        let grads = t.backward(root);
        let eps = 1e-5;
        let mut worst = 0.0f64;
        for id in set.ids().collect::<Vec<_>>() {
            let ga = grads
                .get(p.var(id))
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(set.get(id).raw_dim()));
            for k in 0..set.get(id).len() {
                let orig = set.get(id).as_slice().unwrap()[k];
                set.get_mut(id).as_slice_mut().unwrap()[k] = orig + eps;
                let lp = loss_of(&set);
                set.get_mut(id).as_slice_mut().unwrap()[k] = orig - eps;
                let lm = loss_of(&set);
                set.get_mut(id).as_slice_mut().unwrap()[k] = orig;
                worst = worst
                    .max(crate::autodiff::rel_err(ga.as_slice().unwrap()[k], (lp - lm) / (2.0 * eps)));
            }
        }
        assert!(worst < 1e-4, "fusion/refiner FD err {worst}");
    }

    #[test]
    fn heatmap_upsample_is_normalized_and_monotone() {
        let mut f = ArrayD::zeros(IxDyn(&[2, 4, 4]));
        f[[0, 1, 1]] = 2.0;
        f[[1, 1, 1]] = 2.0;
        let bytes = activation_heatmap(&f, 16, 16).unwrap();
        assert_eq!(bytes.len(), 256);
        assert_eq!(*bytes.iter().max().unwrap(), 255);
        assert_eq!(*bytes.iter().min().unwrap(), 0);
        // peak stays near the source peak after upsampling
        let idx = bytes.iter().enumerate().max_by_key(|(_, &v)| v).unwrap().0;
        let (py, px) = (idx / 16, idx % 16);
        assert!((3..=7).contains(&py) && (3..=7).contains(&px), "peak at {py},{px}");
    }
}

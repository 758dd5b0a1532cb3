//! Stem feature extractor plus the four heads that hang off it: face
//! alignment (landmarks), adaptive offsets, adaptive scales, and the
//! grid-based global feature.

use crate::autodiff::{ConvSpec, Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{Bound, Initializer, ParamSet};

/// 2-d convolution layer bound to named parameters.
pub struct Conv2d {
    pub w: usize,
    pub b: usize,
    pub spec: ConvSpec,
}

impl Conv2d {
    pub fn new(
        init: &mut Initializer,
        set: &mut ParamSet,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        spec: ConvSpec,
    ) -> Self {
        let w = init.conv(set, &format!("{name}.w"), co, ci, k);
        let b = init.zeros(set, &format!("{name}.b"), &[co]);
        Self { w, b, spec }
    }

    pub fn forward(&self, t: &Tape, p: &Bound, x: Var) -> Var {
        t.conv2d(x, p.var(self.w), p.var(self.b), self.spec)
    }
}

/// Fully-connected layer.
pub struct Dense {
    pub w: usize,
    pub b: usize,
}

impl Dense {
    pub fn new(
        init: &mut Initializer,
        set: &mut ParamSet,
        name: &str,
        i: usize,
        o: usize,
    ) -> Self {
        let w = init.dense(set, &format!("{name}.w"), i, o);
        let b = init.zeros(set, &format!("{name}.b"), &[o]);
        Self { w, b }
    }

    pub fn with_bias(
        init: &mut Initializer,
        set: &mut ParamSet,
        name: &str,
        i: usize,
        o: usize,
        bias: f64,
    ) -> Self {
        let w = init.dense(set, &format!("{name}.w"), i, o);
        let b = init.constant(set, &format!("{name}.b"), &[o], bias);
        Self { w, b }
    }

    pub fn forward(&self, t: &Tape, p: &Bound, x: Var) -> Var {
        t.add_bias(t.matmul(x, p.var(self.w)), p.var(self.b))
    }
}

/// Hierarchical multi-scale stem: two stride-2 conv blocks, then three
/// parallel dilated 3x3 convs concatenated and projected to `stem_channels`.
/// Overall stride 4.
pub struct Stem {
    conv1: Conv2d,
    conv2: Conv2d,
    multi: [Conv2d; 3],
    proj: Conv2d,
    pub input_size: usize,
    pub channels: usize,
}

impl Stem {
    pub fn new(init: &mut Initializer, set: &mut ParamSet, cfg: &ModelConfig) -> Self {
        let c = cfg.stem_channels;
        let (c1, c2, cm) = (c / 4, c / 2, c / 4);
        let conv1 = Conv2d::new(init, set, "stem.conv1", 3, c1, 3, ConvSpec::new(2, 1, 1));
        let conv2 = Conv2d::new(init, set, "stem.conv2", c1, c2, 3, ConvSpec::new(2, 1, 1));
        let multi = [
            Conv2d::new(init, set, "stem.ms1", c2, cm, 3, ConvSpec::new(1, 1, 1)),
            Conv2d::new(init, set, "stem.ms2", c2, cm, 3, ConvSpec::new(1, 2, 2)),
            Conv2d::new(init, set, "stem.ms3", c2, cm, 3, ConvSpec::new(1, 3, 3)),
        ];
        let proj = Conv2d::new(init, set, "stem.proj", 3 * cm, c, 1, ConvSpec::unit());
        Self {
            conv1,
            conv2,
            multi,
            proj,
            input_size: cfg.input_size,
            channels: c,
        }
    }

    /// Validate an image batch [B,3,H0,W0] against the configured input size.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::Input(format!(
                "stem expects [B,3,H,W] images, got {shape:?}"
            )));
        }
        if shape[2] != self.input_size || shape[3] != self.input_size {
            return Err(Error::Input(format!(
                "stem expects {0}x{0} input, got {1}x{2}",
                self.input_size, shape[2], shape[3]
            )));
        }
        Ok(())
    }

    pub fn forward(&self, t: &Tape, p: &Bound, image: Var) -> Var {
        let x = t.relu(self.conv1.forward(t, p, image));
        let x = t.relu(self.conv2.forward(t, p, x));
        let ms: Vec<Var> = self
            .multi
            .iter()
            .map(|c| t.relu(c.forward(t, p, x)))
            .collect();
        let cat = t.concat_axis1(&ms);
        t.relu(self.proj.forward(t, p, cat))
    }
}

/// Outputs of the alignment head: landmarks in feature-map units plus the
/// flattened pre-regression activation used by the other heads.
pub struct AlignOut {
    pub landmarks: Var, // [B, 2m]
    pub feature: Var,   // [B, D_a]
}

/// Landmark regression: three 3x3 convs, a max-pool, then a dense layer.
/// Raw outputs pass through tanh and map affinely to pixel units with the
/// origin at the map center.
pub struct AlignNet {
    convs: [Conv2d; 3],
    fc: Dense,
    feature_size: usize,
    pub out_dim: usize,
}

impl AlignNet {
    pub fn new(
        init: &mut Initializer,
        set: &mut ParamSet,
        cfg: &ModelConfig,
        n_landmarks: usize,
    ) -> Self {
        let f = cfg.feature_size();
        let ca = cfg.align_channels;
        let convs = [
            Conv2d::new(init, set, "align.conv1", cfg.stem_channels, ca, 3, ConvSpec::new(1, 1, 1)),
            Conv2d::new(init, set, "align.conv2", ca, ca, 3, ConvSpec::new(1, 1, 1)),
            Conv2d::new(init, set, "align.conv3", ca, ca, 3, ConvSpec::new(1, 1, 1)),
        ];
        let out_dim = ca * (f / 2) * (f / 2);
        let fc = Dense::new(init, set, "align.fc", out_dim, 2 * n_landmarks);
        Self {
            convs,
            fc,
            feature_size: f,
            out_dim,
        }
    }

    pub fn forward(&self, t: &Tape, p: &Bound, fmap: Var) -> AlignOut {
        let mut x = fmap;
        for c in &self.convs {
            x = t.relu(c.forward(t, p, x));
        }
        let x = t.maxpool2(x);
        let b = t.shape(x)[0];
        let feature = t.reshape(x, &[b, self.out_dim]);
        let raw = t.tanh(self.fc.forward(t, p, feature));
        // [-1,1] -> [0, F-1] with zero mapping to the map center
        let half = (self.feature_size - 1) as f64 / 2.0;
        let landmarks = t.affine(raw, half, half);
        AlignOut { landmarks, feature }
    }
}

/// Adaptive offsets and scaling factors, each a two-layer FC head on the
/// alignment feature. Offsets are tanh-bounded, scales sigmoid-bounded with
/// the bias calibrated so an untrained head emits `fixed_scale`.
pub struct AdaptiveHeads {
    off1: Dense,
    off2: Dense,
    sc1: Dense,
    sc2: Dense,
    offset_limit: f64,
    e_max: f64,
}

impl AdaptiveHeads {
    pub fn new(
        init: &mut Initializer,
        set: &mut ParamSet,
        cfg: &ModelConfig,
        align_dim: usize,
        n_branches: usize,
    ) -> Self {
        let a = cfg.adaptive_hidden;
        let off1 = Dense::new(init, set, "adaptive.off1", align_dim, a);
        let off2 = Dense::new(init, set, "adaptive.off2", a, 4 * n_branches);
        let sc1 = Dense::new(init, set, "adaptive.sc1", align_dim, a);
        let calibrated = (cfg.fixed_scale / (cfg.e_max - cfg.fixed_scale)).ln();
        let sc2 = Dense::with_bias(init, set, "adaptive.sc2", a, n_branches, calibrated);
        Self {
            off1,
            off2,
            sc1,
            sc2,
            offset_limit: cfg.offset_max * cfg.feature_size() as f64,
            e_max: cfg.e_max,
        }
    }

    /// -> offsets [B, 4n] in feature-map units, bounded by offset_max * W.
    pub fn offsets(&self, t: &Tape, p: &Bound, align_feature: Var) -> Var {
        let h = t.tanh(self.off1.forward(t, p, align_feature));
        let raw = t.tanh(self.off2.forward(t, p, h));
        t.affine(raw, self.offset_limit, 0.0)
    }

    /// -> scales [B, n], each strictly inside (0, e_max).
    pub fn scales(&self, t: &Tape, p: &Bound, align_feature: Var) -> Var {
        let h = t.tanh(self.sc1.forward(t, p, align_feature));
        let raw = t.sigmoid(self.sc2.forward(t, p, h));
        t.affine(raw, self.e_max, 0.0)
    }
}

/// Grid-based global feature: same convolutional trunk shape as the
/// alignment head (separate weights), no pooling so spatial dims match the
/// branch features.
pub struct GlobalNet {
    convs: [Conv2d; 3],
    pub channels: usize,
}

impl GlobalNet {
    pub fn new(init: &mut Initializer, set: &mut ParamSet, cfg: &ModelConfig) -> Self {
        let cg = cfg.global_channels;
        let convs = [
            Conv2d::new(init, set, "global.conv1", cfg.stem_channels, cg, 3, ConvSpec::new(1, 1, 1)),
            Conv2d::new(init, set, "global.conv2", cg, cg, 3, ConvSpec::new(1, 1, 1)),
            Conv2d::new(init, set, "global.conv3", cg, cg, 3, ConvSpec::new(1, 1, 1)),
        ];
        Self { convs, channels: cg }
    }

    pub fn forward(&self, t: &Tape, p: &Bound, fmap: Var) -> Var {
        let mut x = fmap;
        for c in &self.convs {
            x = t.relu(c.forward(t, p, x));
        }
        x
    }
}

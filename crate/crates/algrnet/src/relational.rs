//! Skip-BiLSTM over the ordered branch features: a bidirectional ConvLSTM
//! pass where every already-visited hidden state is weighted by a skipping
//! gate before aggregation, so non-adjacent regions exchange information
//! directly.
//!
//! The gate for stored state j against the current feature v_t is
//! `f_j = sigmoid(mean(W(h_j * v_t)))` with the mean over channels and space;
//! the cell input aggregate is `sum_j f_j * h_j` (and the same gating for the
//! cell state when `cell_state_mode = aggregate`). The per-branch output is
//! the residual `s_t = v_t + P((h_fwd + h_bwd)/2)` with P a learned 1x1
//! projection back to the branch channel width.

use crate::autodiff::{ConvSpec, Tape, Var};
use crate::config::{CellStateMode, GateWeights, ModelConfig, RelationalVariant};
use crate::error::{Error, Result};
use crate::params::{Bound, Initializer, ParamSet};

use crate::backbone::Conv2d;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// ConvLSTM cell: one 3x3 convolution over [input, hidden] producing the
/// i, f, g, o gate stacks.
pub struct ConvLstmCell {
    conv: Conv2d,
    hidden: usize,
}

impl ConvLstmCell {
    fn new(
        init: &mut Initializer,
        set: &mut ParamSet,
        name: &str,
        input_ch: usize,
        hidden: usize,
    ) -> Self {
        let conv = Conv2d::new(
            init,
            set,
            name,
            input_ch + hidden,
            4 * hidden,
            3,
            ConvSpec::new(1, 1, 1),
        );
        Self { conv, hidden }
    }

    pub fn forward(&self, t: &Tape, p: &Bound, x: Var, h_in: Var, c_in: Var) -> (Var, Var) {
        let ch = self.hidden;
        let cat = t.concat_axis1(&[x, h_in]);
        let gates = self.conv.forward(t, p, cat);
        let i = t.sigmoid(t.slice_axis1(gates, 0, ch));
        let f = t.sigmoid(t.slice_axis1(gates, ch, ch));
        let g = t.tanh(t.slice_axis1(gates, 2 * ch, ch));
        let o = t.sigmoid(t.slice_axis1(gates, 3 * ch, ch));
        let c_new = t.add(t.mul(f, c_in), t.mul(i, g));
        let h_new = t.mul(o, t.tanh(c_new));
        (h_new, c_new)
    }
}

/// The relational module. Holds both directions' cells, the gate convs
/// (shared per direction or one per source index) and the output projection.
pub struct SkipBiLstm {
    fwd_cell: ConvLstmCell,
    bwd_cell: ConvLstmCell,
    fwd_gates: Vec<Conv2d>,
    bwd_gates: Vec<Conv2d>,
    proj: Conv2d,
    pub n: usize,
    pub variant: RelationalVariant,
    pub cell_state_mode: CellStateMode,
    gate_weights: GateWeights,
}

impl SkipBiLstm {
    pub fn new(init: &mut Initializer, set: &mut ParamSet, cfg: &ModelConfig, n: usize) -> Self {
        let c = cfg.stem_channels;
        let ch = cfg.hidden_channels;
        let fwd_cell = ConvLstmCell::new(init, set, "rel.fwd_cell", c, ch);
        let bwd_cell = ConvLstmCell::new(init, set, "rel.bwd_cell", c, ch);
        let gate_count = match cfg.gate_weights {
            GateWeights::Shared => 1,
            GateWeights::PerIndex => n,
        };
        let mk_gates = |init: &mut Initializer, set: &mut ParamSet, dir: &str| {
            (0..gate_count)
                .map(|j| {
                    Conv2d::new(
                        init,
                        set,
                        &format!("rel.{dir}_gate{j}"),
                        ch,
                        c,
                        1,
                        ConvSpec::unit(),
                    )
                })
                .collect::<Vec<_>>()
        };
        let fwd_gates = mk_gates(init, set, "fwd");
        let bwd_gates = mk_gates(init, set, "bwd");
        let proj = Conv2d::new(init, set, "rel.proj", ch, c, 1, ConvSpec::unit());
        Self {
            fwd_cell,
            bwd_cell,
            proj,
            fwd_gates,
            bwd_gates,
            n,
            variant: cfg.relational,
            cell_state_mode: cfg.cell_state_mode,
            gate_weights: cfg.gate_weights,
        }
    }

    fn gate_conv(&self, dir: Direction, source: usize) -> &Conv2d {
        let gates = match dir {
            Direction::Forward => &self.fwd_gates,
            Direction::Backward => &self.bwd_gates,
        };
        match self.gate_weights {
            GateWeights::Shared => &gates[0],
            GateWeights::PerIndex => &gates[source],
        }
    }

    /// Skipping gate: scalar in (0,1) per sample, from a stored hidden state
    /// and the current branch feature.
    pub fn skip_gate(
        &self,
        t: &Tape,
        p: &Bound,
        dir: Direction,
        source: usize,
        h_j: Var,
        v_t: Var,
    ) -> Var {
        let prod = t.mul(h_j, v_t);
        let mapped = self.gate_conv(dir, source).forward(t, p, prod);
        t.sigmoid(t.mean_chw(mapped))
    }

    /// One direction of the recurrence; returns hidden states indexed by the
    /// original branch position.
    pub fn directional_pass(
        &self,
        t: &Tape,
        p: &Bound,
        seq: &[Var],
        dir: Direction,
    ) -> Result<Vec<Var>> {
        if seq.is_empty() {
            return Err(Error::Input("relational pass over empty sequence".into()));
        }
        let n = seq.len();
        let shape = t.shape(seq[0]);
        let hidden_shape = [shape[0], self.hidden_width(), shape[2], shape[3]];
        let zero = t.leaf(ndarray::ArrayD::zeros(ndarray::IxDyn(&hidden_shape)));
        let cell = match dir {
            Direction::Forward => &self.fwd_cell,
            Direction::Backward => &self.bwd_cell,
        };
        let order: Vec<usize> = match dir {
            Direction::Forward => (0..n).collect(),
            Direction::Backward => (0..n).rev().collect(),
        };
        let mut states: Vec<Option<(Var, Var)>> = vec![None; n];
        let mut visited: Vec<usize> = Vec::with_capacity(n);
        for &pos in &order {
            let v_t = seq[pos];
            let (h_in, c_in) = match self.variant {
                RelationalVariant::Plain => match visited.last() {
                    None => (zero, zero),
                    Some(&prev) => {
                        let (h, c) = states[prev].unwrap();
                        (h, c)
                    }
                },
                _ => {
                    let mut h_sum: Option<Var> = None;
                    let mut c_sum: Option<Var> = None;
                    for &j in &visited {
                        let (h_j, c_j) = states[j].unwrap();
                        let f_j = self.skip_gate(t, p, dir, j, h_j, v_t);
                        let gh = t.mul_per_sample(h_j, f_j);
                        h_sum = Some(match h_sum {
                            None => gh,
                            Some(acc) => t.add(acc, gh),
                        });
                        if self.cell_state_mode == CellStateMode::Aggregate {
                            let gc = t.mul_per_sample(c_j, f_j);
                            c_sum = Some(match c_sum {
                                None => gc,
                                Some(acc) => t.add(acc, gc),
                            });
                        }
                    }
                    (h_sum.unwrap_or(zero), c_sum.unwrap_or(zero))
                }
            };
            let (h, c) = cell.forward(t, p, v_t, h_in, c_in);
            states[pos] = Some((h, c));
            visited.push(pos);
        }
        Ok(states.into_iter().map(|s| s.unwrap().0).collect())
    }

    fn hidden_width(&self) -> usize {
        self.fwd_cell.hidden
    }

    /// Full bidirectional pass: s_t = v_t + P((h_fwd + h_bwd)/2).
    pub fn forward(&self, t: &Tape, p: &Bound, seq: &[Var]) -> Result<Vec<Var>> {
        let fwd = self.directional_pass(t, p, seq, Direction::Forward)?;
        let bwd = self.directional_pass(t, p, seq, Direction::Backward)?;
        let mut out = Vec::with_capacity(seq.len());
        for ((&v, h_f), h_b) in seq.iter().zip(fwd).zip(bwd) {
            let avg = t.affine(t.add(h_f, h_b), 0.5, 0.0);
            let projected = self.proj.forward(t, p, avg);
            out.push(t.add(v, projected));
        }
        Ok(out)
    }
}

/// Naive loop reference for the skip-BiLSTM equations. Scalar loops only; no
/// tape, no GEMM. Used to verify the module, never by it.
pub mod reference {
    use ndarray::{ArrayD, Ix4, IxDyn};

    use crate::config::{CellStateMode, GateWeights};
    use crate::params::ParamSet;

    pub struct Weights {
        pub fwd_cell_w: ArrayD<f64>,
        pub fwd_cell_b: ArrayD<f64>,
        pub bwd_cell_w: ArrayD<f64>,
        pub bwd_cell_b: ArrayD<f64>,
        pub fwd_gates: Vec<(ArrayD<f64>, ArrayD<f64>)>,
        pub bwd_gates: Vec<(ArrayD<f64>, ArrayD<f64>)>,
        pub proj_w: ArrayD<f64>,
        pub proj_b: ArrayD<f64>,
        pub cell_state_mode: CellStateMode,
        pub gate_weights: GateWeights,
    }

    impl Weights {
        /// Copy the relational parameters out of a trained set by name.
        pub fn from_params(set: &ParamSet, cell_mode: CellStateMode, gw: GateWeights) -> Self {
            let grab = |name: &str| set.by_name(name).expect(name).clone();
            let mut fwd_gates = Vec::new();
            let mut bwd_gates = Vec::new();
            let mut j = 0;
            while let Some(w) = set.by_name(&format!("rel.fwd_gate{j}.w")) {
                fwd_gates.push((w.clone(), grab(&format!("rel.fwd_gate{j}.b"))));
                bwd_gates.push((
                    grab(&format!("rel.bwd_gate{j}.w")),
                    grab(&format!("rel.bwd_gate{j}.b")),
                ));
                j += 1;
            }
            Weights {
                fwd_cell_w: grab("rel.fwd_cell.w"),
                fwd_cell_b: grab("rel.fwd_cell.b"),
                bwd_cell_w: grab("rel.bwd_cell.w"),
                bwd_cell_b: grab("rel.bwd_cell.b"),
                fwd_gates,
                bwd_gates,
                proj_w: grab("rel.proj.w"),
                proj_b: grab("rel.proj.b"),
                cell_state_mode: cell_mode,
                gate_weights: gw,
            }
        }
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Direct nested-loop convolution, stride 1, square kernel, given pad.
    fn conv(x: &ArrayD<f64>, w: &ArrayD<f64>, b: &ArrayD<f64>, pad: usize) -> ArrayD<f64> {
        let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
        let w4 = w.view().into_dimensionality::<Ix4>().unwrap();
        let (bn, ci, h, wd) = x4.dim();
        let (co, ci2, kh, kw) = w4.dim();
        assert_eq!(ci, ci2);
        let mut y = ArrayD::<f64>::zeros(IxDyn(&[bn, co, h, wd]));
        for bi in 0..bn {
            for c in 0..co {
                for oy in 0..h {
                    for ox in 0..wd {
                        let mut acc = b[[c]];
                        for cin in 0..ci {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = oy as isize + ky as isize - pad as isize;
                                    let ix = ox as isize + kx as isize - pad as isize;
                                    if iy < 0
                                        || iy >= h as isize
                                        || ix < 0
                                        || ix >= wd as isize
                                    {
                                        continue;
                                    }
                                    acc += x4[[bi, cin, iy as usize, ix as usize]]
                                        * w4[[c, cin, ky, kx]];
                                }
                            }
                        }
                        y[[bi, c, oy, ox]] = acc;
                    }
                }
            }
        }
        y
    }

    fn cat_channels(a: &ArrayD<f64>, b: &ArrayD<f64>) -> ArrayD<f64> {
        ndarray::concatenate(ndarray::Axis(1), &[a.view(), b.view()])
            .unwrap()
            .into_dyn()
    }

    /// i, f, g, o from the stacked gate convolution, then the state update.
    fn cell(
        x: &ArrayD<f64>,
        h_in: &ArrayD<f64>,
        c_in: &ArrayD<f64>,
        w: &ArrayD<f64>,
        b: &ArrayD<f64>,
        hidden: usize,
    ) -> (ArrayD<f64>, ArrayD<f64>) {
        let cat = cat_channels(x, h_in);
        let gates = conv(&cat, w, b, 1);
        let sh = gates.shape().to_vec();
        let (bn, h, wd) = (sh[0], sh[2], sh[3]);
        let mut h_new = ArrayD::<f64>::zeros(IxDyn(&[bn, hidden, h, wd]));
        let mut c_new = ArrayD::<f64>::zeros(IxDyn(&[bn, hidden, h, wd]));
        for bi in 0..bn {
            for ch in 0..hidden {
                for y in 0..h {
                    for x2 in 0..wd {
                        let i = sigmoid(gates[[bi, ch, y, x2]]);
                        let f = sigmoid(gates[[bi, hidden + ch, y, x2]]);
                        let g = gates[[bi, 2 * hidden + ch, y, x2]].tanh();
                        let o = sigmoid(gates[[bi, 3 * hidden + ch, y, x2]]);
                        let c = f * c_in[[bi, ch, y, x2]] + i * g;
                        c_new[[bi, ch, y, x2]] = c;
                        h_new[[bi, ch, y, x2]] = o * c.tanh();
                    }
                }
            }
        }
        (h_new, c_new)
    }

    /// f_j = sigmoid(GAP(W_j(h_j * v_t))), one scalar per sample.
    fn gate(
        h_j: &ArrayD<f64>,
        v_t: &ArrayD<f64>,
        w: &ArrayD<f64>,
        b: &ArrayD<f64>,
    ) -> Vec<f64> {
        let prod = h_j * v_t;
        let mapped = conv(&prod, w, b, 0);
        let sh = mapped.shape().to_vec();
        let (bn, c, h, wd) = (sh[0], sh[1], sh[2], sh[3]);
        let inv = 1.0 / (c * h * wd) as f64;
        (0..bn)
            .map(|bi| {
                let mut s = 0.0;
                for ci in 0..c {
                    for y in 0..h {
                        for x in 0..wd {
                            s += mapped[[bi, ci, y, x]];
                        }
                    }
                }
                sigmoid(s * inv)
            })
            .collect()
    }

    fn scaled_add(acc: &mut ArrayD<f64>, x: &ArrayD<f64>, per_sample: &[f64]) {
        for (bi, &s) in per_sample.iter().enumerate() {
            let mut a = acc.index_axis_mut(ndarray::Axis(0), bi);
            let xb = x.index_axis(ndarray::Axis(0), bi);
            a.zip_mut_with(&xb, |v, &u| *v += s * u);
        }
    }

    fn directional(
        seq: &[ArrayD<f64>],
        cell_w: &ArrayD<f64>,
        cell_b: &ArrayD<f64>,
        gates: &[(ArrayD<f64>, ArrayD<f64>)],
        w: &Weights,
        hidden: usize,
        forward: bool,
    ) -> Vec<ArrayD<f64>> {
        let n = seq.len();
        let sh = seq[0].shape().to_vec();
        let hshape = [sh[0], hidden, sh[2], sh[3]];
        let order: Vec<usize> = if forward {
            (0..n).collect()
        } else {
            (0..n).rev().collect()
        };
        let mut hs: Vec<Option<(ArrayD<f64>, ArrayD<f64>)>> = vec![None; n];
        let mut visited: Vec<usize> = Vec::new();
        for &pos in &order {
            let v_t = &seq[pos];
            let mut h_in = ArrayD::<f64>::zeros(IxDyn(&hshape));
            let mut c_in = ArrayD::<f64>::zeros(IxDyn(&hshape));
            for &j in &visited {
                let (h_j, c_j) = hs[j].as_ref().unwrap();
                let (gw, gb) = match w.gate_weights {
                    GateWeights::Shared => &gates[0],
                    GateWeights::PerIndex => &gates[j],
                };
                let f_j = gate(h_j, v_t, gw, gb);
                scaled_add(&mut h_in, h_j, &f_j);
                if w.cell_state_mode == CellStateMode::Aggregate {
                    scaled_add(&mut c_in, c_j, &f_j);
                }
            }
            let (h, c) = cell(v_t, &h_in, &c_in, cell_w, cell_b, hidden);
            hs[pos] = Some((h, c));
            visited.push(pos);
        }
        hs.into_iter().map(|s| s.unwrap().0).collect()
    }

    /// The five skip-BiLSTM equations, looped literally.
    pub fn skip_bilstm(seq: &[ArrayD<f64>], w: &Weights) -> Vec<ArrayD<f64>> {
        let hidden = w.fwd_cell_w.shape()[0] / 4;
        let fwd = directional(seq, &w.fwd_cell_w, &w.fwd_cell_b, &w.fwd_gates, w, hidden, true);
        let bwd = directional(seq, &w.bwd_cell_w, &w.bwd_cell_b, &w.bwd_gates, w, hidden, false);
        seq.iter()
            .zip(fwd.iter().zip(&bwd))
            .map(|(v, (hf, hb))| {
                let avg = (hf + hb) * 0.5;
                let projected = conv(&avg, &w.proj_w, &w.proj_b, 0);
                v + &projected
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use ndarray::{Array, ArrayD, IxDyn};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    trait Tap: Sized {
        fn tap(mut self, f: impl FnOnce(&mut Self)) -> Self {
            f(&mut self);
            self
        }
    }
    impl Tap for ModelConfig {}

    fn small_cfg(c: usize) -> ModelConfig {
        let mut m = ModelConfig {
            input_size: 16,
            ..ModelConfig::default()
        };
        m.stem_channels = c;
        m.hidden_channels = c;
        m
    }

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        Array::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    fn make_seq(rng: &mut ChaCha8Rng, n: usize, b: usize, c: usize, h: usize, w: usize) -> Vec<ArrayD<f64>> {
        (0..n).map(|_| randn(rng, &[b, c, h, w])).collect()
    }

    #[test]
    fn zero_recurrent_weights_gives_residual_identity() {
        for variant in [RelationalVariant::Skip, RelationalVariant::Plain] {
            let m = small_cfg(4).tap(|c| c.relational = variant);
            let mut set = ParamSet::new();
            let mut init = Initializer::new(1);
            let module = SkipBiLstm::new(&mut init, &mut set, &m, 3);
            for id in set.ids().collect::<Vec<_>>() {
                set.get_mut(id).fill(0.0);
            }
            let t = Tape::new();
            let p = set.bind(&t);
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let seq_arrays = make_seq(&mut rng, 3, 2, 4, 3, 3);
            let seq: Vec<Var> = seq_arrays.iter().map(|a| t.leaf(a.clone())).collect();
            let out = module.forward(&t, &p, &seq).unwrap();
            for (o, v) in out.iter().zip(&seq_arrays) {
                assert_eq!(&*t.value(*o), v, "s_t must equal v_t exactly");
            }
        }
    }

    #[test]
    fn empty_sequence_is_input_error() {
        let m = small_cfg(4);
        let mut set = ParamSet::new();
        let mut init = Initializer::new(1);
        let module = SkipBiLstm::new(&mut init, &mut set, &m, 3);
        let t = Tape::new();
        let p = set.bind(&t);
        assert!(matches!(
            module.directional_pass(&t, &p, &[], Direction::Forward),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn gates_stay_strictly_inside_unit_interval() {
        let m = small_cfg(4);
        let mut set = ParamSet::new();
        let mut init = Initializer::new(3);
        let module = SkipBiLstm::new(&mut init, &mut set, &m, 3);
        let t = Tape::new();
        let p = set.bind(&t);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let h = t.leaf(randn(&mut rng, &[2, 4, 3, 3]));
            let v = t.leaf(randn(&mut rng, &[2, 4, 3, 3]));
            let f = t.value(module.skip_gate(&t, &p, Direction::Forward, 0, h, v));
            assert!(f.iter().all(|&x| x > 0.0 && x < 1.0));
        }
    }

    #[test]
    fn zero_gate_conv_gives_half_gates() {
        let m = small_cfg(4);
        let mut set = ParamSet::new();
        let mut init = Initializer::new(5);
        let module = SkipBiLstm::new(&mut init, &mut set, &m, 2);
        for id in set.ids().collect::<Vec<_>>() {
            if set.name(id).contains("gate") {
                set.get_mut(id).fill(0.0);
            }
        }
        let t = Tape::new();
        let p = set.bind(&t);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = t.leaf(randn(&mut rng, &[2, 4, 2, 2]));
        let hz = t.leaf(ArrayD::zeros(IxDyn(&[2, 4, 2, 2])));
        let v = t.leaf(randn(&mut rng, &[2, 4, 2, 2]));
        for hh in [h, hz] {
            let f = t.value(module.skip_gate(&t, &p, Direction::Forward, 0, hh, v));
            assert!(f.iter().all(|&x| (x - 0.5).abs() < 1e-12));
        }
    }

    #[test]
    fn saturated_negative_gates_decouple_positions() {
        let m = small_cfg(2);
        let mut set = ParamSet::new();
        let mut init = Initializer::new(7);
        let module = SkipBiLstm::new(&mut init, &mut set, &m, 3);
        for id in set.ids().collect::<Vec<_>>() {
            let name = set.name(id).to_string();
            if name.contains("gate") {
                if name.ends_with(".b") {
                    set.get_mut(id).fill(-1000.0);
                } else {
                    set.get_mut(id).fill(0.0);
                }
            }
        }
        let t = Tape::new();
        let p = set.bind(&t);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let seq_arrays = make_seq(&mut rng, 3, 1, 2, 2, 2);
        let seq: Vec<Var> = seq_arrays.iter().map(|a| t.leaf(a.clone())).collect();
        let states = module
            .directional_pass(&t, &p, &seq, Direction::Forward)
            .unwrap();
        // With all gates at zero, each state must equal Cell(0, v_t).
        let zero = t.leaf(ArrayD::zeros(IxDyn(&[1, 2, 2, 2])));
        for (pos, &v) in seq.iter().enumerate() {
            let (h_ref, _) = module.fwd_cell.forward(&t, &p, v, zero, zero);
            let got = t.value(states[pos]);
            let want = t.value(h_ref);
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn module_matches_naive_reference() {
        for gw in [GateWeights::Shared, GateWeights::PerIndex] {
            for cm in [CellStateMode::Aggregate, CellStateMode::Reset] {
                let mut m = small_cfg(2);
                m.gate_weights = gw;
                m.cell_state_mode = cm;
                let mut set = ParamSet::new();
                let mut init = Initializer::new(9);
                let module = SkipBiLstm::new(&mut init, &mut set, &m, 3);
                let t = Tape::new();
                let p = set.bind(&t);
                let mut rng = ChaCha8Rng::seed_from_u64(10);
                let seq_arrays = make_seq(&mut rng, 3, 2, 2, 2, 2);
                let seq: Vec<Var> = seq_arrays.iter().map(|a| t.leaf(a.clone())).collect();
                let out = module.forward(&t, &p, &seq).unwrap();
                let weights = reference::Weights::from_params(&set, cm, gw);
                let want = reference::skip_bilstm(&seq_arrays, &weights);
                for (o, w) in out.iter().zip(&want) {
                    let got = t.value(*o);
                    for (a, b) in got.iter().zip(w.iter()) {
                        assert!((a - b).abs() < 1e-6, "module {a} vs reference {b}");
                    }
                }
            }
        }
    }

    #[test]
    fn backward_pass_carries_future_information() {
        // With backward weights zeroed, s_1 must be insensitive to v_2.
        let m = small_cfg(2);
        let mut set = ParamSet::new();
        let mut init = Initializer::new(11);
        let module = SkipBiLstm::new(&mut init, &mut set, &m, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let base = make_seq(&mut rng, 2, 1, 2, 2, 2);
        let eval_s0 = |set: &ParamSet, seq_arrays: &[ArrayD<f64>]| -> f64 {
            let t = Tape::new();
            let p = set.bind(&t);
            let seq: Vec<Var> = seq_arrays.iter().map(|a| t.leaf(a.clone())).collect();
            let out = module.forward(&t, &p, &seq).unwrap();
            t.value(out[0]).sum()
        };
        let mut bumped = base.clone();
        bumped[1][[0, 0, 1, 1]] += 1e-3;
        // backward weights active: sensitivity nonzero
        let d_active = (eval_s0(&set, &base) - eval_s0(&set, &bumped)).abs();
        assert!(d_active > 1e-12, "s_1 must depend on v_2 via the backward pass");
        for id in set.ids().collect::<Vec<_>>() {
            let name = set.name(id).to_string();
            if name.starts_with("rel.bwd") {
                set.get_mut(id).fill(0.0);
            }
        }
        let d_zeroed = (eval_s0(&set, &base) - eval_s0(&set, &bumped)).abs();
        assert!(
            d_zeroed < 1e-15,
            "zeroing backward weights must remove the dependence, got {d_zeroed}"
        );
    }

    #[test]
    fn branch_order_matters() {
        let m = small_cfg(2);
        let mut set = ParamSet::new();
        let mut init = Initializer::new(13);
        let module = SkipBiLstm::new(&mut init, &mut set, &m, 3);
        let t = Tape::new();
        let p = set.bind(&t);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let seq_arrays = make_seq(&mut rng, 3, 1, 2, 2, 2);
        let seq: Vec<Var> = seq_arrays.iter().map(|a| t.leaf(a.clone())).collect();
        let swapped = vec![seq[1], seq[0], seq[2]];
        let a = module.forward(&t, &p, &seq).unwrap();
        let b = module.forward(&t, &p, &swapped).unwrap();
        // compare branch 2 (same v in both orderings)
        let va = t.value(a[2]);
        let vb = t.value(b[2]);
        let diff: f64 = va.iter().zip(vb.iter()).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-9, "permuting inputs must change outputs");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let m = small_cfg(2);
        let mut set = ParamSet::new();
        let mut init = Initializer::new(15);
        let module = SkipBiLstm::new(&mut init, &mut set, &m, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let seq_arrays = make_seq(&mut rng, 2, 1, 2, 2, 2);
        let proj: Vec<ArrayD<f64>> = (0..2).map(|_| randn(&mut rng, &[1, 2, 2, 2])).collect();

        let loss_of = |set: &ParamSet| -> f64 {
            let t = Tape::new();
            let p = set.bind(&t);
            let seq: Vec<Var> = seq_arrays.iter().map(|a| t.leaf(a.clone())).collect();
            let out = module.forward(&t, &p, &seq).unwrap();
            let mut acc = t.dot_const(out[0], &proj[0]);
            acc = t.add(acc, t.dot_const(out[1], &proj[1]));
            t.value(acc)[[]]
        };

        // analytic grads
        let t = Tape::new();
        let p = set.bind(&t);
        let seq: Vec<Var> = seq_arrays.iter().map(|a| t.leaf(a.clone())).collect();
        let out = module.forward(&t, &p, &seq).unwrap();
        let mut acc = t.dot_const(out[0], &proj[0]);
        acc = t.add(acc, t.dot_const(out[1], &proj[1]));
        let grads = t.backward(acc);

        let eps = 1e-5;
        let mut worst = 0.0f64;
        for id in set.ids().collect::<Vec<_>>() {
            let ga = grads
                .get(p.var(id))
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(set.get(id).raw_dim()));
            let n = set.get(id).len();
            for k in 0..n {
                let orig = set.get(id).as_slice().unwrap()[k];
                set.get_mut(id).as_slice_mut().unwrap()[k] = orig + eps;
                let lp = loss_of(&set);
                set.get_mut(id).as_slice_mut().unwrap()[k] = orig - eps;
                let lm = loss_of(&set);
                set.get_mut(id).as_slice_mut().unwrap()[k] = orig;
                let num = (lp - lm) / (2.0 * eps);
                let ana = ga.as_slice().unwrap()[k];
                worst = worst.max(crate::autodiff::rel_err(ana, num));
            }
        }
        assert!(worst < 1e-4, "relational FD err {worst}");
    }
}

//! Elementwise, reduction, shape and dense ops on the tape.

use std::rc::Rc;

use ndarray::{concatenate, ArrayD, Axis, Ix1, Ix2, IxDyn, Slice};

use super::tape::{Tape, Var};

fn scalar(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

impl Tape {
    pub fn add(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add: shape mismatch");
        self.op((&*av + &*bv).into_dyn(), &[a, b], |g| {
            vec![g.clone(), g.clone()]
        })
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "sub: shape mismatch");
        self.op((&*av - &*bv).into_dyn(), &[a, b], |g| {
            vec![g.clone(), -g]
        })
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul: shape mismatch");
        self.op((&*av * &*bv).into_dyn(), &[a, b], move |g| {
            vec![g * &*bv, g * &*av]
        })
    }

    /// k*x + c, elementwise with constants.
    pub fn affine(&self, x: Var, k: f64, c: f64) -> Var {
        let xv = self.value(x);
        self.op(xv.mapv(|v| k * v + c), &[x], move |g| vec![g * k])
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let xv = self.value(x);
        let y = xv.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let yc = y.clone();
        self.op(y, &[x], move |g| vec![g * &(&yc * &yc.mapv(|v| 1.0 - v))])
    }

    pub fn tanh(&self, x: Var) -> Var {
        let xv = self.value(x);
        let y = xv.mapv(f64::tanh);
        let yc = y.clone();
        self.op(y, &[x], move |g| vec![g * &yc.mapv(|v| 1.0 - v * v)])
    }

    pub fn relu(&self, x: Var) -> Var {
        let xv = self.value(x);
        let y = xv.mapv(|v| v.max(0.0));
        let xc = Rc::clone(&xv);
        self.op(y, &[x], move |g| {
            let mut dx = g.clone();
            dx.zip_mut_with(&xc, |d, &v| {
                if v <= 0.0 {
                    *d = 0.0;
                }
            });
            vec![dx]
        })
    }

    pub fn ln(&self, x: Var) -> Var {
        let xv = self.value(x);
        let y = xv.mapv(f64::ln);
        let xc = Rc::clone(&xv);
        self.op(y, &[x], move |g| vec![g / &*xc])
    }

    /// Clamp to [lo, hi]; gradient passes only strictly inside the range.
    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Var {
        let xv = self.value(x);
        let y = xv.mapv(|v| v.clamp(lo, hi));
        let xc = Rc::clone(&xv);
        self.op(y, &[x], move |g| {
            let mut dx = g.clone();
            dx.zip_mut_with(&xc, |d, &v| {
                if v <= lo || v >= hi {
                    *d = 0.0;
                }
            });
            vec![dx]
        })
    }

    /// x [B,I] . w [I,O] -> [B,O]
    pub fn matmul(&self, x: Var, w: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let x2 = xv.view().into_dimensionality::<Ix2>().expect("matmul x 2-d");
        let w2 = wv.view().into_dimensionality::<Ix2>().expect("matmul w 2-d");
        let y = x2.dot(&w2).into_dyn();
        let (xc, wc) = (Rc::clone(&xv), Rc::clone(&wv));
        self.op(y, &[x, w], move |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let x2 = xc.view().into_dimensionality::<Ix2>().unwrap();
            let w2 = wc.view().into_dimensionality::<Ix2>().unwrap();
            vec![g2.dot(&w2.t()).into_dyn(), x2.t().dot(&g2).into_dyn()]
        })
    }

    /// x [B,O] + b [O] broadcast over rows.
    pub fn add_bias(&self, x: Var, b: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(b);
        let b1 = bv.view().into_dimensionality::<Ix1>().expect("bias 1-d");
        let y = (&xv.view().into_dimensionality::<Ix2>().unwrap() + &b1).into_dyn();
        self.op(y, &[x, b], |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            vec![g.clone(), g2.sum_axis(Axis(0)).into_dyn()]
        })
    }

    /// Global average pool: [B,C,H,W] -> [B,C]
    pub fn gap(&self, x: Var) -> Var {
        let xv = self.value(x);
        let sh = xv.shape().to_vec();
        assert_eq!(sh.len(), 4, "gap expects 4-d");
        let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        let inv = 1.0 / (h * w) as f64;
        let flat = xv.to_shape((b, c, h * w)).unwrap().to_owned();
        let y = (flat.sum_axis(Axis(2)) * inv).into_dyn();
        self.op(y, &[x], move |g| {
            let mut dx = ArrayD::zeros(IxDyn(&[b, c, h, w]));
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            for bi in 0..b {
                for ci in 0..c {
                    let gv = g2[[bi, ci]] * inv;
                    dx.slice_mut(ndarray::s![bi, ci, .., ..]).fill(gv);
                }
            }
            vec![dx]
        })
    }

    /// Mean over channels and spatial dims: [B,C,H,W] -> [B]
    pub fn mean_chw(&self, x: Var) -> Var {
        let xv = self.value(x);
        let sh = xv.shape().to_vec();
        assert_eq!(sh.len(), 4, "mean_chw expects 4-d");
        let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        let inv = 1.0 / (c * h * w) as f64;
        let flat = xv.to_shape((b, c * h * w)).unwrap().to_owned();
        let y = (flat.sum_axis(Axis(1)) * inv).into_dyn();
        self.op(y, &[x], move |g| {
            let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
            let mut dx = ArrayD::zeros(IxDyn(&[b, c, h, w]));
            for bi in 0..b {
                dx.slice_mut(ndarray::s![bi, .., .., ..]).fill(g1[bi] * inv);
            }
            vec![dx]
        })
    }

    /// x [B, ...] scaled per sample by s [B].
    pub fn mul_per_sample(&self, x: Var, s: Var) -> Var {
        let xv = self.value(x);
        let sv = self.value(s);
        let b = xv.shape()[0];
        assert_eq!(sv.shape(), [b], "mul_per_sample: scale must be [B]");
        let s1 = sv.view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let mut y = xv.as_ref().clone();
        for bi in 0..b {
            y.index_axis_mut(Axis(0), bi).mapv_inplace(|v| v * s1[bi]);
        }
        let xc = Rc::clone(&xv);
        self.op(y, &[x, s], move |g| {
            let mut dx = g.clone();
            let mut ds = ArrayD::zeros(IxDyn(&[b]));
            for bi in 0..b {
                dx.index_axis_mut(Axis(0), bi).mapv_inplace(|v| v * s1[bi]);
                let gb = g.index_axis(Axis(0), bi);
                let xb = xc.index_axis(Axis(0), bi);
                ds[[bi]] = (&gb * &xb).sum();
            }
            vec![dx, ds]
        })
    }

    /// x [B,C,H,W] * a [B,1,H,W], broadcast over channels.
    pub fn mul_map(&self, x: Var, a: Var) -> Var {
        let xv = self.value(x);
        let av = self.value(a);
        let sh = xv.shape().to_vec();
        let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        assert_eq!(av.shape(), [b, 1, h, w], "mul_map: map must be [B,1,H,W]");
        let mut y = xv.as_ref().clone();
        for bi in 0..b {
            let am = av.slice(ndarray::s![bi, 0, .., ..]);
            for ci in 0..c {
                let mut yc = y.slice_mut(ndarray::s![bi, ci, .., ..]);
                yc.zip_mut_with(&am, |v, &m| *v *= m);
            }
        }
        let (xc, ac) = (Rc::clone(&xv), Rc::clone(&av));
        self.op(y, &[x, a], move |g| {
            let mut dx = g.clone();
            let mut da = ArrayD::zeros(IxDyn(&[b, 1, h, w]));
            for bi in 0..b {
                let am = ac.slice(ndarray::s![bi, 0, .., ..]);
                let mut dam = da.slice_mut(ndarray::s![bi, 0, .., ..]);
                for ci in 0..c {
                    let mut dxc = dx.slice_mut(ndarray::s![bi, ci, .., ..]);
                    dxc.zip_mut_with(&am, |v, &m| *v *= m);
                    let gc = g.slice(ndarray::s![bi, ci, .., ..]);
                    let xc2 = xc.slice(ndarray::s![bi, ci, .., ..]);
                    dam.zip_mut_with(&(&gc * &xc2), |d, &v| *d += v);
                }
            }
            vec![dx, da]
        })
    }

    /// Concatenate along axis 1 (features or channels).
    pub fn concat_axis1(&self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let vals: Vec<_> = xs.iter().map(|&v| self.value(v)).collect();
        let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
        let y = concatenate(Axis(1), &views).expect("concat_axis1 shape mismatch");
        let widths: Vec<usize> = vals.iter().map(|v| v.shape()[1]).collect();
        self.op(y, xs, move |g| {
            let mut out = Vec::with_capacity(widths.len());
            let mut start = 0;
            for &w in &widths {
                out.push(
                    g.slice_axis(Axis(1), Slice::from(start..start + w))
                        .to_owned(),
                );
                start += w;
            }
            out
        })
    }

    /// Slice along axis 1.
    pub fn slice_axis1(&self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let sh = xv.shape().to_vec();
        let y = xv
            .slice_axis(Axis(1), Slice::from(start..start + len))
            .to_owned();
        self.op(y, &[x], move |g| {
            let mut dx = ArrayD::zeros(IxDyn(&sh));
            dx.slice_axis_mut(Axis(1), Slice::from(start..start + len))
                .assign(g);
            vec![dx]
        })
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let xv = self.value(x);
        let old = xv.shape().to_vec();
        let y = xv
            .to_shape(IxDyn(shape))
            .expect("reshape: element count mismatch")
            .to_owned();
        self.op(y, &[x], move |g| {
            vec![g.to_shape(IxDyn(&old)).unwrap().to_owned()]
        })
    }

    /// [B,D] -> [B], summing features.
    pub fn sum_axis1(&self, x: Var) -> Var {
        let xv = self.value(x);
        let sh = xv.shape().to_vec();
        assert_eq!(sh.len(), 2);
        let (b, d) = (sh[0], sh[1]);
        let y = xv
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .sum_axis(Axis(1))
            .into_dyn();
        self.op(y, &[x], move |g| {
            let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
            let mut dx = ArrayD::zeros(IxDyn(&[b, d]));
            for bi in 0..b {
                dx.slice_mut(ndarray::s![bi, ..]).fill(g1[bi]);
            }
            vec![dx]
        })
    }

    /// Mean of all elements -> 0-d scalar.
    pub fn mean_all(&self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.len();
        let inv = 1.0 / n as f64;
        let sh = xv.shape().to_vec();
        self.op(scalar(xv.sum() * inv), &[x], move |g| {
            let gs = g[[]] * inv;
            vec![ArrayD::from_elem(IxDyn(&sh), gs)]
        })
    }

    pub fn sum_all(&self, x: Var) -> Var {
        let xv = self.value(x);
        let sh = xv.shape().to_vec();
        self.op(scalar(xv.sum()), &[x], move |g| {
            let gs = g[[]];
            vec![ArrayD::from_elem(IxDyn(&sh), gs)]
        })
    }

    /// sum(x * w) with constant weights -> 0-d. Handy for loss projections.
    pub fn dot_const(&self, x: Var, w: &ArrayD<f64>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), w.shape());
        let wc = w.clone();
        self.op(scalar((&*xv * w).sum()), &[x], move |g| {
            let gs = g[[]];
            vec![&wc * gs]
        })
    }

    /// Softmax along axis 1 of [B,K].
    pub fn softmax(&self, x: Var) -> Var {
        let xv = self.value(x);
        let x2 = xv.view().into_dimensionality::<Ix2>().expect("softmax 2-d");
        let mut y = x2.to_owned();
        for mut row in y.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let yc = y.clone();
        self.op(y.into_dyn(), &[x], move |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut dx = yc.clone();
            for (mut drow, (yrow, grow)) in
                dx.rows_mut().into_iter().zip(yc.rows().into_iter().zip(g2.rows()))
            {
                let dot: f64 = yrow.iter().zip(grow.iter()).map(|(a, b)| a * b).sum();
                drow.zip_mut_with(&grow, |d, &gv| *d *= gv - dot);
            }
            vec![dx.into_dyn()]
        })
    }

    /// Channel-wise L2 normalization at each spatial position:
    /// y = x / (||x||_2 + eps), the norm taken over channels.
    pub fn l2norm_channels(&self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let sh = xv.shape().to_vec();
        assert_eq!(sh.len(), 4);
        let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        let mut norms = ndarray::Array3::<f64>::zeros((b, h, w));
        for bi in 0..b {
            for yi in 0..h {
                for xi in 0..w {
                    let mut s = 0.0;
                    for ci in 0..c {
                        let v = xv[[bi, ci, yi, xi]];
                        s += v * v;
                    }
                    norms[[bi, yi, xi]] = s.sqrt();
                }
            }
        }
        let mut y = xv.as_ref().clone();
        for bi in 0..b {
            for ci in 0..c {
                let mut yc = y.slice_mut(ndarray::s![bi, ci, .., ..]);
                let nm = norms.index_axis(Axis(0), bi);
                yc.zip_mut_with(&nm, |v, &n| *v /= n + eps);
            }
        }
        let xc = Rc::clone(&xv);
        self.op(y, &[x], move |g| {
            // dL/dx_c = g_c/(n+eps) - x_c * (x.g) / (n (n+eps)^2)
            let mut dx = g.clone();
            for bi in 0..b {
                for yi in 0..h {
                    for xi in 0..w {
                        let n = norms[[bi, yi, xi]];
                        let denom = n + eps;
                        let mut xg = 0.0;
                        for ci in 0..c {
                            xg += xc[[bi, ci, yi, xi]] * g[[bi, ci, yi, xi]];
                        }
                        for ci in 0..c {
                            let gc = g[[bi, ci, yi, xi]];
                            let term = if n > 0.0 {
                                xc[[bi, ci, yi, xi]] * xg / (n * denom * denom)
                            } else {
                                0.0
                            };
                            dx[[bi, ci, yi, xi]] = gc / denom - term;
                        }
                    }
                }
            }
            vec![dx]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::check::{fd_check_inputs, rel_err};
    use super::*;
    use ndarray::{Array, Array2};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        Array::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = randn(&mut rng, &[2, 3]);
        let w = randn(&mut rng, &[2, 3]);
        for f in [
            (|t: &Tape, x: Var| t.sigmoid(x)) as fn(&Tape, Var) -> Var,
            |t, x| t.tanh(x),
            |t, x| t.relu(x),
            |t, x| t.affine(x, 1.7, -0.3),
            |t, x| t.clamp(x, -0.5, 0.5),
        ] {
            let err = fd_check_inputs(&[x0.clone()], &w, |t, xs| f(t, xs[0]));
            assert!(err < 1e-7, "elementwise op FD err {err}");
        }
    }

    #[test]
    fn matmul_and_bias_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = randn(&mut rng, &[3, 4]);
        let w = randn(&mut rng, &[4, 2]);
        let b = randn(&mut rng, &[2]);
        let proj = randn(&mut rng, &[3, 2]);
        let err = fd_check_inputs(&[x, w, b], &proj, |t, vs| {
            t.add_bias(t.matmul(vs[0], vs[1]), vs[2])
        });
        assert!(err < 1e-7, "matmul FD err {err}");
    }

    #[test]
    fn reductions_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = randn(&mut rng, &[2, 3, 4, 4]);
        let wc = randn(&mut rng, &[2, 3]);
        let err = fd_check_inputs(&[x.clone()], &wc, |t, vs| t.gap(vs[0]));
        assert!(err < 1e-7, "gap FD err {err}");
        let wb = randn(&mut rng, &[2]);
        let err = fd_check_inputs(&[x.clone()], &wb, |t, vs| t.mean_chw(vs[0]));
        assert!(err < 1e-7, "mean_chw FD err {err}");
        let s = randn(&mut rng, &[2]);
        let wx = randn(&mut rng, &[2, 3, 4, 4]);
        let err = fd_check_inputs(&[x.clone(), s], &wx, |t, vs| t.mul_per_sample(vs[0], vs[1]));
        assert!(err < 1e-7, "mul_per_sample FD err {err}");
        let a = randn(&mut rng, &[2, 1, 4, 4]);
        let err = fd_check_inputs(&[x, a], &wx, |t, vs| t.mul_map(vs[0], vs[1]));
        assert!(err < 1e-7, "mul_map FD err {err}");
    }

    #[test]
    fn shape_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = randn(&mut rng, &[2, 3]);
        let b = randn(&mut rng, &[2, 2]);
        let w = randn(&mut rng, &[2, 5]);
        let err = fd_check_inputs(&[a.clone(), b], &w, |t, vs| t.concat_axis1(vs));
        assert!(err < 1e-7, "concat FD err {err}");
        let w2 = randn(&mut rng, &[2, 2]);
        let err = fd_check_inputs(&[a.clone()], &w2, |t, vs| t.slice_axis1(vs[0], 1, 2));
        assert!(err < 1e-7, "slice FD err {err}");
        let w3 = randn(&mut rng, &[3, 2]);
        let err = fd_check_inputs(&[a], &w3, |t, vs| t.reshape(vs[0], &[3, 2]));
        assert!(err < 1e-7, "reshape FD err {err}");
    }

    #[test]
    fn softmax_and_l2norm_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = randn(&mut rng, &[3, 4]);
        let w = randn(&mut rng, &[3, 4]);
        let err = fd_check_inputs(&[x], &w, |t, vs| t.softmax(vs[0]));
        assert!(err < 1e-7, "softmax FD err {err}");
        let x4 = randn(&mut rng, &[2, 3, 2, 2]);
        let w4 = randn(&mut rng, &[2, 3, 2, 2]);
        let err = fd_check_inputs(&[x4], &w4, |t, vs| t.l2norm_channels(vs[0], 1e-8));
        assert!(err < 1e-6, "l2norm FD err {err}");
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let t = Tape::new();
        let x = t.leaf(
            Array2::from_shape_vec((2, 3), vec![0.3, -1.0, 2.0, 5.0, 5.0, 5.0])
                .unwrap()
                .into_dyn(),
        );
        let y = t.softmax(x);
        let yv = t.value(y);
        for row in yv.view().into_dimensionality::<Ix2>().unwrap().rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let t2 = Tape::new();
        let xs = t2.leaf(
            Array2::from_shape_vec((1, 3), vec![0.3 + 10.0, -1.0 + 10.0, 2.0 + 10.0])
                .unwrap()
                .into_dyn(),
        );
        let ys = t2.value(t2.softmax(xs));
        for k in 0..3 {
            assert!(rel_err(ys[[0, k]], yv[[0, k]]) < 1e-12);
        }
    }
}

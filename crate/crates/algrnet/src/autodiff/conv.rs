//! Spatial ops: conv2d (im2col + GEMM), 2x2 max pooling, zero padding.

use std::rc::Rc;

use ndarray::{Array2, ArrayD, Ix4, IxDyn};

use super::tape::{Tape, Var};

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, pad: usize, dilation: usize) -> Self {
        Self {
            stride,
            pad,
            dilation,
        }
    }

    pub fn unit() -> Self {
        Self::new(1, 0, 1)
    }

    pub fn out_dim(&self, input: usize, k: usize) -> usize {
        (input + 2 * self.pad - self.dilation * (k - 1) - 1) / self.stride + 1
    }
}

/// Unfold x [B,Ci,H,W] into a [Ci*kh*kw, B*Ho*Wo] matrix.
fn im2col(x: &ArrayD<f64>, kh: usize, kw: usize, spec: ConvSpec) -> Array2<f64> {
    let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
    let (b, ci, h, w) = x4.dim();
    let ho = spec.out_dim(h, kh);
    let wo = spec.out_dim(w, kw);
    let l = ho * wo;
    let mut col = Array2::<f64>::zeros((ci * kh * kw, b * l));
    for cin in 0..ci {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (cin * kh + ky) * kw + kx;
                let mut out_row = col.row_mut(row);
                let out = out_row.as_slice_mut().unwrap();
                for bi in 0..b {
                    let plane = x4.index_axis(ndarray::Axis(0), bi);
                    let plane = plane.index_axis(ndarray::Axis(0), cin);
                    let src = plane.as_slice().unwrap();
                    for oy in 0..ho {
                        let iy = (oy * spec.stride + ky * spec.dilation) as isize
                            - spec.pad as isize;
                        let base = bi * l + oy * wo;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        for ox in 0..wo {
                            let ix = (ox * spec.stride + kx * spec.dilation) as isize
                                - spec.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            out[base + ox] = src[iy * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add a column matrix back to input layout (adjoint of im2col).
fn col2im(
    dcol: &Array2<f64>,
    b: usize,
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: ConvSpec,
) -> ArrayD<f64> {
    let ho = spec.out_dim(h, kh);
    let wo = spec.out_dim(w, kw);
    let l = ho * wo;
    let mut dx = ArrayD::<f64>::zeros(IxDyn(&[b, ci, h, w]));
    {
        let mut dx4 = dx.view_mut().into_dimensionality::<Ix4>().unwrap();
        for cin in 0..ci {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (cin * kh + ky) * kw + kx;
                    let src_row = dcol.row(row);
                    let src = src_row.as_slice().unwrap();
                    for bi in 0..b {
                        let mut plane = dx4.index_axis_mut(ndarray::Axis(0), bi);
                        let mut plane = plane.index_axis_mut(ndarray::Axis(0), cin);
                        let dst = plane.as_slice_mut().unwrap();
                        for oy in 0..ho {
                            let iy = (oy * spec.stride + ky * spec.dilation) as isize
                                - spec.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let iy = iy as usize;
                            let base = bi * l + oy * wo;
                            for ox in 0..wo {
                                let ix = (ox * spec.stride + kx * spec.dilation) as isize
                                    - spec.pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                dst[iy * w + ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn to_bchw(y_mat: &Array2<f64>, b: usize, co: usize, ho: usize, wo: usize) -> ArrayD<f64> {
    let l = ho * wo;
    let mut y = ArrayD::<f64>::zeros(IxDyn(&[b, co, ho, wo]));
    {
        let mut y4 = y.view_mut().into_dimensionality::<Ix4>().unwrap();
        for c in 0..co {
            let row = y_mat.row(c);
            let row = row.as_slice().unwrap();
            for bi in 0..b {
                let mut plane = y4.index_axis_mut(ndarray::Axis(0), bi);
                let mut plane = plane.index_axis_mut(ndarray::Axis(0), c);
                plane
                    .as_slice_mut()
                    .unwrap()
                    .copy_from_slice(&row[bi * l..(bi + 1) * l]);
            }
        }
    }
    y
}

fn from_bchw(g: &ArrayD<f64>) -> Array2<f64> {
    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
    let (b, co, ho, wo) = g4.dim();
    let l = ho * wo;
    let mut m = Array2::<f64>::zeros((co, b * l));
    for c in 0..co {
        let mut row = m.row_mut(c);
        let row = row.as_slice_mut().unwrap();
        for bi in 0..b {
            let plane = g4.index_axis(ndarray::Axis(0), bi);
            let plane = plane.index_axis(ndarray::Axis(0), c);
            row[bi * l..(bi + 1) * l].copy_from_slice(plane.as_slice().unwrap());
        }
    }
    m
}

impl Tape {
    /// 2-d convolution: x [B,Ci,H,W], w [Co,Ci,kh,kw], b [Co].
    pub fn conv2d(&self, x: Var, w: Var, bias: Var, spec: ConvSpec) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(bias);
        let xsh = xv.shape().to_vec();
        let wsh = wv.shape().to_vec();
        assert_eq!(xsh.len(), 4, "conv2d input must be 4-d");
        assert_eq!(wsh.len(), 4, "conv2d weights must be 4-d");
        assert_eq!(xsh[1], wsh[1], "conv2d channel mismatch");
        let (b, ci, h, wdt) = (xsh[0], xsh[1], xsh[2], xsh[3]);
        let (co, kh, kw) = (wsh[0], wsh[2], wsh[3]);
        assert_eq!(bv.shape(), [co]);
        let ho = spec.out_dim(h, kh);
        let wo = spec.out_dim(wdt, kw);

        let col = im2col(&xv, kh, kw, spec);
        let w_mat = wv.to_shape((co, ci * kh * kw)).unwrap().to_owned();
        let mut y_mat = w_mat.dot(&col);
        for c in 0..co {
            let bc = bv[[c]];
            y_mat.row_mut(c).mapv_inplace(|v| v + bc);
        }
        let y = to_bchw(&y_mat, b, co, ho, wo);

        let xc = Rc::clone(&xv);
        let wc = Rc::clone(&wv);
        self.op(y, &[x, w, bias], move |g| {
            let g_mat = from_bchw(g); // [Co, B*L]
            let col = im2col(&xc, kh, kw, spec);
            let w_mat = wc.to_shape((co, ci * kh * kw)).unwrap().to_owned();
            let dw = g_mat.dot(&col.t()); // [Co, K]
            let dcol = w_mat.t().dot(&g_mat); // [K, B*L]
            let dx = col2im(&dcol, b, ci, h, wdt, kh, kw, spec);
            let mut db = ArrayD::<f64>::zeros(IxDyn(&[co]));
            for c in 0..co {
                db[[c]] = g_mat.row(c).sum();
            }
            let dw = dw
                .into_shape_with_order(IxDyn(&[co, ci, kh, kw]))
                .unwrap();
            vec![dx, dw, db]
        })
    }

    /// 2x2 max pooling with stride 2. Spatial dims must be even.
    pub fn maxpool2(&self, x: Var) -> Var {
        let xv = self.value(x);
        let sh = xv.shape().to_vec();
        assert_eq!(sh.len(), 4);
        let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        assert!(h % 2 == 0 && w % 2 == 0, "maxpool2 needs even dims");
        let (ho, wo) = (h / 2, w / 2);
        let x4 = xv.view().into_dimensionality::<Ix4>().unwrap();
        let mut y = ArrayD::<f64>::zeros(IxDyn(&[b, c, ho, wo]));
        let mut arg = vec![0u32; b * c * ho * wo];
        {
            let mut y4 = y.view_mut().into_dimensionality::<Ix4>().unwrap();
            let mut k = 0;
            for bi in 0..b {
                for ci in 0..c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut best = f64::NEG_INFINITY;
                            let mut bidx = 0u32;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let (iy, ix) = (oy * 2 + dy, ox * 2 + dx);
                                    let v = x4[[bi, ci, iy, ix]];
                                    if v > best {
                                        best = v;
                                        bidx = (iy * w + ix) as u32;
                                    }
                                }
                            }
                            y4[[bi, ci, oy, ox]] = best;
                            arg[k] = bidx;
                            k += 1;
                        }
                    }
                }
            }
        }
        self.op(y, &[x], move |g| {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let mut dx = ArrayD::<f64>::zeros(IxDyn(&[b, c, h, w]));
            let mut dx4 = dx.view_mut().into_dimensionality::<Ix4>().unwrap();
            let mut k = 0;
            for bi in 0..b {
                for ci in 0..c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let flat = arg[k] as usize;
                            k += 1;
                            dx4[[bi, ci, flat / w, flat % w]] += g4[[bi, ci, oy, ox]];
                        }
                    }
                }
            }
            drop(dx4);
            vec![dx]
        })
    }

    /// Zero-pad spatial dims up to (th, tw), centered (extra on bottom/right).
    pub fn pad_spatial(&self, x: Var, th: usize, tw: usize) -> Var {
        let xv = self.value(x);
        let sh = xv.shape().to_vec();
        assert_eq!(sh.len(), 4);
        let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        assert!(th >= h && tw >= w, "pad_spatial cannot shrink");
        if th == h && tw == w {
            return self.op(xv.as_ref().clone(), &[x], |g| vec![g.clone()]);
        }
        let (oy, ox) = ((th - h) / 2, (tw - w) / 2);
        let mut y = ArrayD::<f64>::zeros(IxDyn(&[b, c, th, tw]));
        y.slice_mut(ndarray::s![.., .., oy..oy + h, ox..ox + w])
            .assign(&xv.view().into_dimensionality::<Ix4>().unwrap());
        self.op(y, &[x], move |g| {
            vec![g
                .slice(ndarray::s![.., .., oy..oy + h, ox..ox + w])
                .to_owned()
                .into_dyn()]
        })
    }
}

/// Plain (non-tape) convolution used by oracle tests and inference helpers.
pub fn conv2d_reference(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    bias: &[f64],
    spec: ConvSpec,
) -> ArrayD<f64> {
    let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
    let w4 = w.view().into_dimensionality::<Ix4>().unwrap();
    let (b, ci, h, wdt) = x4.dim();
    let (co, ci2, kh, kw) = w4.dim();
    assert_eq!(ci, ci2);
    let ho = spec.out_dim(h, kh);
    let wo = spec.out_dim(wdt, kw);
    let mut y = ArrayD::<f64>::zeros(IxDyn(&[b, co, ho, wo]));
    let mut y4 = y.view_mut().into_dimensionality::<Ix4>().unwrap();
    for bi in 0..b {
        for c in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias[c];
                    for cin in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * spec.stride + ky * spec.dilation) as isize
                                    - spec.pad as isize;
                                let ix = (ox * spec.stride + kx * spec.dilation) as isize
                                    - spec.pad as isize;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= wdt as isize {
                                    continue;
                                }
                                acc += x4[[bi, cin, iy as usize, ix as usize]]
                                    * w4[[c, cin, ky, kx]];
                            }
                        }
                    }
                    y4[[bi, c, oy, ox]] = acc;
                }
            }
        }
    }
    drop(y4);
    y
}

#[cfg(test)]
mod tests {
    use super::super::check::fd_check_inputs;
    use super::*;
    use ndarray::Array;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        Array::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn conv2d_matches_reference_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for spec in [
            ConvSpec::new(1, 1, 1),
            ConvSpec::new(2, 1, 1),
            ConvSpec::new(1, 2, 2),
            ConvSpec::new(1, 0, 1),
        ] {
            let x = randn(&mut rng, &[2, 3, 6, 5]);
            let w = randn(&mut rng, &[4, 3, 3, 3]);
            let b: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let t = Tape::new();
            let xv = t.leaf(x.clone());
            let wv = t.leaf(w.clone());
            let bv = t.leaf(Array::from_vec(b.clone()).into_dyn());
            let y = t.value(t.conv2d(xv, wv, bv, spec));
            let want = conv2d_reference(&x, &w, &b, spec);
            assert_eq!(y.shape(), want.shape());
            for (a, b) in y.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv2d_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, &[2, 2, 5, 4]);
        let w = randn(&mut rng, &[3, 2, 3, 3]);
        let b = randn(&mut rng, &[3]);
        let spec = ConvSpec::new(2, 1, 1);
        let proj = randn(&mut rng, &[2, 3, spec.out_dim(5, 3), spec.out_dim(4, 3)]);
        let err = fd_check_inputs(&[x, w, b], &proj, move |t, vs| {
            t.conv2d(vs[0], vs[1], vs[2], spec)
        });
        assert!(err < 1e-7, "conv2d FD err {err}");
    }

    #[test]
    fn maxpool_and_pad_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = randn(&mut rng, &[2, 2, 4, 6]);
        let proj = randn(&mut rng, &[2, 2, 2, 3]);
        let err = fd_check_inputs(&[x.clone()], &proj, |t, vs| t.maxpool2(vs[0]));
        assert!(err < 1e-7, "maxpool FD err {err}");
        let proj = randn(&mut rng, &[2, 2, 8, 8]);
        let err = fd_check_inputs(&[x], &proj, |t, vs| t.pad_spatial(vs[0], 8, 8));
        assert!(err < 1e-7, "pad FD err {err}");
    }

    #[test]
    fn maxpool_of_constant_block_is_constant() {
        let t = Tape::new();
        let x = t.leaf(ArrayD::from_elem(IxDyn(&[1, 1, 4, 4]), 0.7));
        let y = t.value(t.maxpool2(x));
        assert!(y.iter().all(|&v| v == 0.7));
    }
}

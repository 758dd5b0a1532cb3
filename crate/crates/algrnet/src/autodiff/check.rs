//! Finite-difference verification helpers used across the test suites.

use ndarray::ArrayD;

use super::tape::{Tape, Var};

pub const FD_EPS: f64 = 1e-5;

/// Symmetric relative error; falls back to absolute difference near zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / ((a.abs() + b.abs()).max(1e-6))
}

/// Max relative error between analytic and central-difference gradients of a
/// scalar-valued graph built from `inputs`.
pub fn fd_check_scalar_inputs(
    inputs: &[ArrayD<f64>],
    build: impl Fn(&Tape, &[Var]) -> Var,
) -> f64 {
    let eval = |xs: &[ArrayD<f64>]| -> f64 {
        let t = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone())).collect();
        let out = build(&t, &vars);
        let v = t.value(out);
        assert_eq!(v.ndim(), 0, "fd check expects a scalar graph output");
        v[[]]
    };

    let t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
    let out = build(&t, &vars);
    let grads = t.backward(out);

    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let g = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(x.raw_dim()));
        let mut xs: Vec<ArrayD<f64>> = inputs.to_vec();
        for (flat, _) in x.iter().enumerate() {
            let idx = index_of(x, flat);
            let orig = xs[i][&idx[..]];
            xs[i][&idx[..]] = orig + FD_EPS;
            let lp = eval(&xs);
            xs[i][&idx[..]] = orig - FD_EPS;
            let lm = eval(&xs);
            xs[i][&idx[..]] = orig;
            let num = (lp - lm) / (2.0 * FD_EPS);
            worst = worst.max(rel_err(g[&idx[..]], num));
        }
    }
    worst
}

/// As [`fd_check_scalar_inputs`] but for ops with tensor outputs: the output
/// is contracted against fixed projection weights to obtain a scalar that is
/// sensitive to every output element.
pub fn fd_check_inputs(
    inputs: &[ArrayD<f64>],
    proj: &ArrayD<f64>,
    build: impl Fn(&Tape, &[Var]) -> Var,
) -> f64 {
    let p = proj.clone();
    fd_check_scalar_inputs(inputs, move |t, vs| {
        let y = build(t, vs);
        t.dot_const(y, &p)
    })
}

fn index_of(a: &ArrayD<f64>, mut flat: usize) -> Vec<usize> {
    let shape = a.shape();
    let mut idx = vec![0; shape.len()];
    for d in (0..shape.len()).rev() {
        idx[d] = flat % shape[d];
        flat /= shape[d];
    }
    idx
}

//! Finite-difference verification of tape gradients.
//!
//! `check_gradients` compares every trainable element's analytic gradient
//! against a central difference of the full forward function. The builder
//! closure must be deterministic: it is re-run twice per perturbed element.

use serde::Serialize;

use crate::error::Result;
use crate::numerics::params::{ParamStore, Session};
use crate::numerics::rng::Rng;
use crate::numerics::tape::Var;
use crate::numerics::tensor::Tensor;

/// Below this magnitude the relative error falls back to absolute error.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub param: String,
    pub elements: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < REL_FLOOR {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

/// Check analytic gradients of `build`'s scalar output against central
/// differences, elementwise over every trainable parameter in `store`.
/// The store is restored to its original values before returning.
pub fn check_gradients<F>(store: &mut ParamStore, eps: f64, mut build: F) -> Result<Vec<GradReport>>
where
    F: FnMut(&mut Session) -> Result<Var>,
{
    let analytic = {
        let mut sess = Session::new(store);
        let root = build(&mut sess)?;
        sess.backward(root)?;
        sess.grads()
    };

    let names = store.trainable_names();
    let mut reports = Vec::with_capacity(names.len());
    for name in names {
        let n = store.tensor(&name)?.numel();
        let mut report = GradReport {
            param: name.clone(),
            elements: n,
            max_rel_err: 0.0,
            worst_index: 0,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
        };
        for i in 0..n {
            let original = store.tensor(&name)?.data()[i];

            store.tensor_mut(&name)?.data_mut()[i] = original + eps;
            let f_plus = eval_scalar(store, &mut build)?;
            store.tensor_mut(&name)?.data_mut()[i] = original - eps;
            let f_minus = eval_scalar(store, &mut build)?;
            store.tensor_mut(&name)?.data_mut()[i] = original;

            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic
                .get(&name)
                .map(|g| g.data()[i])
                .unwrap_or(0.0);
            let err = rel_err(a, numeric);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_index = i;
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
        reports.push(report);
    }
    Ok(reports)
}

fn eval_scalar<F>(store: &ParamStore, build: &mut F) -> Result<f64>
where
    F: FnMut(&mut Session) -> Result<Var>,
{
    let mut sess = Session::new(store);
    let root = build(&mut sess)?;
    Ok(sess.tape.value_scalar(root))
}

pub fn max_rel_err(reports: &[GradReport]) -> f64 {
    reports.iter().fold(0.0, |m, r| m.max(r.max_rel_err))
}

// ── built-in per-op check suite ─────────────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct OpCheck {
    pub op: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Reduce an arbitrary tensor to a scalar through fixed random weights so
/// that every output element receives a distinct upstream gradient.
pub fn weighted_sum(sess: &mut Session, out: Var, rng: &mut Rng) -> Result<Var> {
    let n = sess.tape.value(out).numel();
    let flat = sess.tape.reshape(out, vec![1, n])?;
    let w = sess.constant(Tensor::randn(vec![n, 1], 1.0, rng), "probe.weights");
    let s = sess.tape.matmul(flat, w)?;
    sess.tape.reshape(s, vec![1])
}

fn run_check<F>(name: &str, store: &mut ParamStore, tolerance: f64, build: F) -> Result<OpCheck>
where
    F: FnMut(&mut Session) -> Result<Var>,
{
    let reports = check_gradients(store, 1e-5, build)?;
    let err = max_rel_err(&reports);
    Ok(OpCheck {
        op: name.to_string(),
        max_rel_err: err,
        tolerance,
        pass: err <= tolerance,
    })
}

/// Gradient checks for every differentiable op family, each against the
/// central-difference oracle on small random tensors.
pub fn builtin_op_checks(seed: u64) -> Result<Vec<OpCheck>> {
    let tol = 1e-6;
    let mut out = Vec::new();

    // matmul: C = A·B
    {
        let mut rng = Rng::new(seed, "gc.matmul");
        let mut store = ParamStore::new();
        store.insert("a", Tensor::randn(vec![3, 4], 1.0, &mut rng), true);
        store.insert("b", Tensor::randn(vec![4, 2], 1.0, &mut rng), true);
        let mut probe = Rng::new(seed, "gc.matmul.probe");
        let wt = Tensor::randn(vec![6, 1], 1.0, &mut probe);
        out.push(run_check("matmul", &mut store, tol, |sess| {
            let a = sess.param("a")?;
            let b = sess.param("b")?;
            let c = sess.tape.matmul(a, b)?;
            let flat = sess.tape.reshape(c, vec![1, 6])?;
            let w = sess.constant(wt.clone(), "probe");
            let s = sess.tape.matmul(flat, w)?;
            sess.tape.reshape(s, vec![1])
        })?);
    }

    // matmul_transb: C = A·Bᵀ
    {
        let mut rng = Rng::new(seed, "gc.matmul_tb");
        let mut store = ParamStore::new();
        store.insert("a", Tensor::randn(vec![3, 4], 1.0, &mut rng), true);
        store.insert("b", Tensor::randn(vec![2, 4], 1.0, &mut rng), true);
        let mut probe = Rng::new(seed, "gc.matmul_tb.probe");
        let wt = Tensor::randn(vec![6, 1], 1.0, &mut probe);
        out.push(run_check("matmul_transb", &mut store, tol, |sess| {
            let a = sess.param("a")?;
            let b = sess.param("b")?;
            let c = sess.tape.matmul_transb(a, b)?;
            let flat = sess.tape.reshape(c, vec![1, 6])?;
            let w = sess.constant(wt.clone(), "probe");
            let s = sess.tape.matmul(flat, w)?;
            sess.tape.reshape(s, vec![1])
        })?);
    }

    // add, add_n, scale, add_const, sum
    {
        let mut rng = Rng::new(seed, "gc.add");
        let mut store = ParamStore::new();
        store.insert("x", Tensor::randn(vec![2, 3], 1.0, &mut rng), true);
        store.insert("y", Tensor::randn(vec![2, 3], 1.0, &mut rng), true);
        store.insert("z", Tensor::randn(vec![2, 3], 1.0, &mut rng), true);
        let mut probe = Rng::new(seed, "gc.add.probe");
        let wt = Tensor::randn(vec![6, 1], 1.0, &mut probe);
        out.push(run_check("add_scale", &mut store, tol, |sess| {
            let x = sess.param("x")?;
            let y = sess.param("y")?;
            let z = sess.param("z")?;
            let a = sess.tape.add(x, y)?;
            let b = sess.tape.add_n(&[a, z, x])?;
            let c = sess.tape.scale(b, -1.7);
            let d = sess.tape.add_const(c, 0.3);
            let flat = sess.tape.reshape(d, vec![1, 6])?;
            let w = sess.constant(wt.clone(), "probe");
            let s = sess.tape.matmul(flat, w)?;
            sess.tape.reshape(s, vec![1])
        })?);
    }

    // scale_by (scalar node on both paths) and element
    {
        let mut rng = Rng::new(seed, "gc.scale_by");
        let mut store = ParamStore::new();
        store.insert("x", Tensor::randn(vec![2, 2], 1.0, &mut rng), true);
        store.insert("gates", Tensor::randn(vec![3], 1.0, &mut rng), true);
        out.push(run_check("scale_by_element", &mut store, tol, |sess| {
            let x = sess.param("x")?;
            let gates = sess.param("gates")?;
            let g1 = sess.tape.element(gates, 1)?;
            let scaled = sess.tape.scale_by(x, g1)?;
            Ok(sess.tape.sum(scaled))
        })?);
    }

    // add_bias
    {
        let mut rng = Rng::new(seed, "gc.bias");
        let mut store = ParamStore::new();
        store.insert("x", Tensor::randn(vec![3, 4], 1.0, &mut rng), true);
        store.insert("b", Tensor::randn(vec![4], 1.0, &mut rng), true);
        let mut probe = Rng::new(seed, "gc.bias.probe");
        let wt = Tensor::randn(vec![12, 1], 1.0, &mut probe);
        out.push(run_check("add_bias", &mut store, tol, |sess| {
            let x = sess.param("x")?;
            let b = sess.param("b")?;
            let y = sess.tape.add_bias(x, b)?;
            let flat = sess.tape.reshape(y, vec![1, 12])?;
            let w = sess.constant(wt.clone(), "probe");
            let s = sess.tape.matmul(flat, w)?;
            sess.tape.reshape(s, vec![1])
        })?);
    }

    // gelu
    {
        let mut rng = Rng::new(seed, "gc.gelu");
        let mut store = ParamStore::new();
        store.insert("x", Tensor::randn(vec![2, 5], 2.0, &mut rng), true);
        let mut probe = Rng::new(seed, "gc.gelu.probe");
        let wt = Tensor::randn(vec![10, 1], 1.0, &mut probe);
        out.push(run_check("gelu", &mut store, tol, |sess| {
            let x = sess.param("x")?;
            let y = sess.tape.gelu(x);
            let flat = sess.tape.reshape(y, vec![1, 10])?;
            let w = sess.constant(wt.clone(), "probe");
            let s = sess.tape.matmul(flat, w)?;
            sess.tape.reshape(s, vec![1])
        })?);
    }

    // softmax (2-D, distinct upstream weights exercise the dot term)
    {
        let mut rng = Rng::new(seed, "gc.softmax");
        let mut store = ParamStore::new();
        store.insert("x", Tensor::randn(vec![3, 5], 1.5, &mut rng), true);
        let mut probe = Rng::new(seed, "gc.softmax.probe");
        let wt = Tensor::randn(vec![15, 1], 1.0, &mut probe);
        out.push(run_check("softmax", &mut store, tol, |sess| {
            let x = sess.param("x")?;
            let y = sess.tape.softmax(x)?;
            let flat = sess.tape.reshape(y, vec![1, 15])?;
            let w = sess.constant(wt.clone(), "probe");
            let s = sess.tape.matmul(flat, w)?;
            sess.tape.reshape(s, vec![1])
        })?);
    }

    // keep_top1 at a point with a clear argmax gap
    {
        let mut rng = Rng::new(seed, "gc.ktop");
        let mut data: Vec<f64> = (0..6).map(|_| rng.normal() * 0.1).collect();
        data[2] += 2.0;
        let mut store = ParamStore::new();
        store.insert("v", Tensor::vector(data), true);
        out.push(run_check("keep_top1", &mut store, tol, |sess| {
            let v = sess.param("v")?;
            let k = sess.tape.keep_top1(v)?;
            Ok(sess.tape.sum(k))
        })?);
    }

    // softmax -> keep_top1 composition (the gating path)
    {
        let mut rng = Rng::new(seed, "gc.gate");
        let mut data: Vec<f64> = (0..4).map(|_| rng.normal() * 0.1).collect();
        data[1] += 1.5;
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(data), true);
        out.push(run_check("softmax_keep_top1", &mut store, tol, |sess| {
            let w = sess.param("w")?;
            let p = sess.tape.softmax(w)?;
            let k = sess.tape.keep_top1(p)?;
            let sm = sess.tape.scale(k, 0.9);
            let smoothed = sess.tape.add_const(sm, 0.025);
            let h = sess.tape.entropy_neg(smoothed);
            Ok(h)
        })?);
    }

    // mean_over_sequence
    {
        let mut rng = Rng::new(seed, "gc.mean");
        let mut store = ParamStore::new();
        store.insert("x", Tensor::randn(vec![4, 3], 1.0, &mut rng), true);
        let mut probe = Rng::new(seed, "gc.mean.probe");
        let wt = Tensor::randn(vec![3, 1], 1.0, &mut probe);
        out.push(run_check("mean_over_sequence", &mut store, tol, |sess| {
            let x = sess.param("x")?;
            let m = sess.tape.mean_rows(x)?;
            let w = sess.constant(wt.clone(), "probe");
            let s = sess.tape.matmul(m, w)?;
            sess.tape.reshape(s, vec![1])
        })?);
    }

    // concat both axes, then slices
    {
        let mut rng = Rng::new(seed, "gc.concat");
        let mut store = ParamStore::new();
        store.insert("a", Tensor::randn(vec![2, 2], 1.0, &mut rng), true);
        store.insert("b", Tensor::randn(vec![2, 3], 1.0, &mut rng), true);
        store.insert("c", Tensor::randn(vec![1, 5], 1.0, &mut rng), true);
        let mut probe = Rng::new(seed, "gc.concat.probe");
        let wt = Tensor::randn(vec![8, 1], 1.0, &mut probe);
        out.push(run_check("concat_slice", &mut store, tol, |sess| {
            let a = sess.param("a")?;
            let b = sess.param("b")?;
            let c = sess.param("c")?;
            let wide = sess.tape.concat_feature(a, b)?; // [2×5]
            let tall = sess.tape.concat_sequence(wide, c)?; // [3×5]
            let cols = sess.tape.slice_cols(tall, 1, 4)?; // [3×4]
            let rows = sess.tape.slice_rows(cols, 1, 2)?; // [2×4]
            let flat = sess.tape.reshape(rows, vec![1, 8])?;
            let w = sess.constant(wt.clone(), "probe");
            let s = sess.tape.matmul(flat, w)?;
            sess.tape.reshape(s, vec![1])
        })?);
    }

    // pad_rows + reshape (the grouping path)
    {
        let mut rng = Rng::new(seed, "gc.pad");
        let mut store = ParamStore::new();
        store.insert("x", Tensor::randn(vec![3, 4], 1.0, &mut rng), true);
        let mut probe = Rng::new(seed, "gc.pad.probe");
        let wt = Tensor::randn(vec![16, 1], 1.0, &mut probe);
        out.push(run_check("pad_reshape", &mut store, tol, |sess| {
            let x = sess.param("x")?;
            let p = sess.tape.pad_rows(x, 4)?;
            let r = sess.tape.reshape(p, vec![2, 8])?;
            let flat = sess.tape.reshape(r, vec![1, 16])?;
            let w = sess.constant(wt.clone(), "probe");
            let s = sess.tape.matmul(flat, w)?;
            sess.tape.reshape(s, vec![1])
        })?);
    }

    // linear interpolation, widen and narrow
    {
        let mut rng = Rng::new(seed, "gc.interp");
        let mut store = ParamStore::new();
        store.insert("x", Tensor::randn(vec![2, 5], 1.0, &mut rng), true);
        let mut probe = Rng::new(seed, "gc.interp.probe");
        let wt = Tensor::randn(vec![6, 1], 1.0, &mut probe);
        out.push(run_check("interpolate", &mut store, tol, |sess| {
            let x = sess.param("x")?;
            let up = sess.tape.interpolate_features(x, 9)?;
            let down = sess.tape.interpolate_features(up, 3)?;
            let flat = sess.tape.reshape(down, vec![1, 6])?;
            let w = sess.constant(wt.clone(), "probe");
            let s = sess.tape.matmul(flat, w)?;
            sess.tape.reshape(s, vec![1])
        })?);
    }

    // conv1d, same-length variant (kernel 3, stride 1, pad 1+1)
    {
        let mut rng = Rng::new(seed, "gc.conv_same");
        let mut store = ParamStore::new();
        store.insert("x", Tensor::randn(vec![5, 2], 1.0, &mut rng), true);
        store.insert("w", Tensor::randn(vec![6, 3], 0.5, &mut rng), true);
        store.insert("b", Tensor::randn(vec![3], 0.5, &mut rng), true);
        let mut probe = Rng::new(seed, "gc.conv_same.probe");
        let wt = Tensor::randn(vec![15, 1], 1.0, &mut probe);
        out.push(run_check("conv1d_same", &mut store, tol, |sess| {
            let x = sess.param("x")?;
            let w = sess.param("w")?;
            let b = sess.param("b")?;
            let y = sess.tape.conv1d(x, w, b, 3, 1, 1, 1)?;
            let flat = sess.tape.reshape(y, vec![1, 15])?;
            let probe_w = sess.constant(wt.clone(), "probe");
            let s = sess.tape.matmul(flat, probe_w)?;
            sess.tape.reshape(s, vec![1])
        })?);
    }

    // conv1d, downsampling variant (kernel = stride = 4, right pad)
    {
        let mut rng = Rng::new(seed, "gc.conv_down");
        let mut store = ParamStore::new();
        store.insert("x", Tensor::randn(vec![6, 2], 1.0, &mut rng), true);
        store.insert("w", Tensor::randn(vec![8, 3], 0.5, &mut rng), true);
        store.insert("b", Tensor::randn(vec![3], 0.5, &mut rng), true);
        let mut probe = Rng::new(seed, "gc.conv_down.probe");
        let wt = Tensor::randn(vec![6, 1], 1.0, &mut probe);
        out.push(run_check("conv1d_downsample", &mut store, tol, |sess| {
            let x = sess.param("x")?;
            let w = sess.param("w")?;
            let b = sess.param("b")?;
            let y = sess.tape.conv1d(x, w, b, 4, 4, 0, 2)?; // 6+2 -> 2 windows
            let flat = sess.tape.reshape(y, vec![1, 6])?;
            let probe_w = sess.constant(wt.clone(), "probe");
            let s = sess.tape.matmul(flat, probe_w)?;
            sess.tape.reshape(s, vec![1])
        })?);
    }

    // embedding (repeated ids accumulate)
    {
        let mut rng = Rng::new(seed, "gc.embed");
        let mut store = ParamStore::new();
        store.insert("table", Tensor::randn(vec![5, 3], 1.0, &mut rng), true);
        let mut probe = Rng::new(seed, "gc.embed.probe");
        let wt = Tensor::randn(vec![12, 1], 1.0, &mut probe);
        out.push(run_check("embedding", &mut store, tol, |sess| {
            let table = sess.param("table")?;
            let e = sess.tape.embedding(table, &[3, 0, 3, 1])?;
            let flat = sess.tape.reshape(e, vec![1, 12])?;
            let w = sess.constant(wt.clone(), "probe");
            let s = sess.tape.matmul(flat, w)?;
            sess.tape.reshape(s, vec![1])
        })?);
    }

    // layer_norm
    {
        let mut rng = Rng::new(seed, "gc.ln");
        let mut store = ParamStore::new();
        store.insert("x", Tensor::randn(vec![3, 6], 1.0, &mut rng), true);
        store.insert("gamma", Tensor::randn(vec![6], 0.5, &mut rng), true);
        store.insert("beta", Tensor::randn(vec![6], 0.5, &mut rng), true);
        let mut probe = Rng::new(seed, "gc.ln.probe");
        let wt = Tensor::randn(vec![18, 1], 1.0, &mut probe);
        out.push(run_check("layer_norm", &mut store, tol, |sess| {
            let x = sess.param("x")?;
            let gamma = sess.param("gamma")?;
            let beta = sess.param("beta")?;
            let y = sess.tape.layer_norm(x, gamma, beta, 1e-5)?;
            let flat = sess.tape.reshape(y, vec![1, 18])?;
            let w = sess.constant(wt.clone(), "probe");
            let s = sess.tape.matmul(flat, w)?;
            sess.tape.reshape(s, vec![1])
        })?);
    }

    // entropy_neg over a softmax (strictly positive inputs)
    {
        let mut rng = Rng::new(seed, "gc.ent");
        let mut store = ParamStore::new();
        store.insert("x", Tensor::randn(vec![5], 1.0, &mut rng), true);
        out.push(run_check("entropy_neg", &mut store, tol, |sess| {
            let x = sess.param("x")?;
            let p = sess.tape.softmax(x)?;
            Ok(sess.tape.entropy_neg(p))
        })?);
    }

    // cross_entropy with a mixed mask
    {
        let mut rng = Rng::new(seed, "gc.ce");
        let mut store = ParamStore::new();
        store.insert("logits", Tensor::randn(vec![4, 7], 1.0, &mut rng), true);
        out.push(run_check("cross_entropy", &mut store, tol, |sess| {
            let logits = sess.param("logits")?;
            sess.tape
                .cross_entropy_rows(logits, &[2, 0, 6, 1], &[true, false, true, true])
        })?);
    }

    Ok(out)
}

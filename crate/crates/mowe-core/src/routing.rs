//! Top-1 routers over the weak-encoder pool, gate smoothing, mixture
//! embeddings, and the routing losses.
//!
//! Two router families exist. The input-independent router owns a weight
//! vector over the pool and makes one decision for the whole batch. The
//! input-dependent router scores the sequence-mean of the base embedding
//! against a learned matrix and decides per sample. Both pass their
//! softmax scores through keep_top1, so exactly one encoder is active
//! unless training-time smoothing adds a small floor to every gate.
//!
//! Encoders with a zero gate are never evaluated; the returned evaluation
//! counts feed the active-parameter report.

use serde::{Deserialize, Serialize};

use crate::encoders::EncoderPool;
use crate::error::{MoweError, Result};
use crate::numerics::params::Session;
use crate::numerics::tape::Var;
use crate::numerics::tensor::Tensor;

/// Gate smoothing factor from the routing rule r ← 0.9·r + 0.1·ε.
pub const SMOOTH_KEEP: f64 = 0.9;
pub const SMOOTH_ADD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoutingConfig {
    /// ε = epsilon_scale / M. The reference rule reads ε = 0.1/M.
    pub epsilon_scale: f64,
    /// Apply training-time smoothing to dep-router gates.
    pub smoothing: bool,
    /// Include the diversity term that penalizes collapse of the
    /// data-dependent router onto one encoder.
    pub diversity: bool,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        RoutingConfig {
            epsilon_scale: 0.1,
            smoothing: true,
            diversity: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterKind {
    Indep,
    Dep,
}

#[derive(Clone, Debug)]
pub struct RouterDecision {
    /// Gate values after keep_top1 (and smoothing if applied), `[M]`.
    pub gates: Tensor,
    /// Same gates as a tape node, for loss composition.
    pub var: Var,
    /// Argmax of the pre-keep_top1 scores, lowest index on ties.
    pub selected: usize,
    pub smoothed: bool,
    /// ε in effect; 0 when unsmoothed.
    pub epsilon: f64,
}

impl RouterDecision {
    /// A decision with given gate values, outside any router. Test and
    /// reporting plumbing.
    pub fn synthetic(sess: &mut Session, gates: Tensor) -> RouterDecision {
        let selected = argmax_lowest(gates.data());
        let var = sess.constant(gates.clone(), "synthetic.gates");
        RouterDecision {
            gates,
            var,
            selected,
            smoothed: false,
            epsilon: 0.0,
        }
    }

    /// Check the structural gate invariants.
    pub fn validate(&self) -> Result<()> {
        let data = self.gates.data();
        if self.smoothed {
            let floor = SMOOTH_ADD * self.epsilon;
            for (k, &v) in data.iter().enumerate() {
                let ok = if k == self.selected { v > floor } else { v == floor };
                if !ok {
                    return Err(MoweError::invalid(format!(
                        "smoothed gate {k} = {v}, expected {}",
                        if k == self.selected { "above floor" } else { "exactly 0.1·ε" }
                    )));
                }
            }
        } else {
            for (k, &v) in data.iter().enumerate() {
                let ok = if k == self.selected {
                    v > 0.0 && v <= 1.0
                } else {
                    v == 0.0
                };
                if !ok {
                    return Err(MoweError::invalid(format!(
                        "unsmoothed gate {k} = {v} violates one-nonzero structure"
                    )));
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Input-independent routing: keep_top1(softmax(w)). One decision per
/// batch; never smoothed.
pub fn route_indep(sess: &mut Session, w_name: &str, m: usize) -> Result<RouterDecision> {
    let w = sess.param(w_name)?;
    let shape = sess.tape.value(w).shape().to_vec();
    if shape != [m] {
        return Err(MoweError::invalid(format!(
            "{w_name}: router weights {shape:?} do not match pool size {m}"
        )));
    }
    let probs = sess.tape.softmax(w)?;
    let selected = argmax_lowest(sess.tape.value(probs).data());
    let gate = sess.tape.keep_top1(probs)?;
    Ok(RouterDecision {
        gates: sess.tape.value(gate).clone(),
        var: gate,
        selected,
        smoothed: false,
        epsilon: 0.0,
    })
}

/// Input-dependent routing over the base embedding:
/// keep_top1(softmax(mean_over_sequence(z_base)·W)), smoothed during
/// training as r ← 0.9·r + 0.1·ε with ε = epsilon_scale/M.
pub fn route_dep(
    sess: &mut Session,
    w_name: &str,
    z_base: Var,
    training: bool,
    cfg: &RoutingConfig,
) -> Result<RouterDecision> {
    let w = sess.param(w_name)?;
    let (rows, m) = {
        let shape = sess.tape.value(w).shape();
        (shape[0], shape[1])
    };
    let d_base = sess.tape.value(z_base).cols();
    if rows != d_base {
        return Err(MoweError::invalid(format!(
            "{w_name}: base embedding width {d_base} does not match router rows {rows}"
        )));
    }
    let zbar = sess.tape.mean_rows(z_base)?;
    let scores = sess.tape.matmul(zbar, w)?;
    let flat = sess.tape.reshape(scores, vec![m])?;
    let probs = sess.tape.softmax(flat)?;
    let selected = argmax_lowest(sess.tape.value(probs).data());
    let mut gate = sess.tape.keep_top1(probs)?;
    let mut smoothed = false;
    let mut epsilon = 0.0;
    if training && cfg.smoothing {
        epsilon = cfg.epsilon_scale / m as f64;
        let scaled = sess.tape.scale(gate, SMOOTH_KEEP);
        gate = sess.tape.add_const(scaled, SMOOTH_ADD * epsilon);
        smoothed = true;
    }
    Ok(RouterDecision {
        gates: sess.tape.value(gate).clone(),
        var: gate,
        selected,
        smoothed,
        epsilon,
    })
}

/// Gate-weighted sum of weak-encoder outputs. Encoders with a zero gate
/// are not evaluated; returns the mixture and how many encoders ran.
pub fn mix(
    sess: &mut Session,
    pool: &EncoderPool,
    decision: &RouterDecision,
    input: Var,
) -> Result<(Var, usize)> {
    let m = pool.m();
    if decision.gates.numel() != m {
        return Err(MoweError::invalid(format!(
            "mix: decision covers {} encoders, pool has {m}",
            decision.gates.numel()
        )));
    }
    let mut parts = Vec::new();
    for k in 0..m {
        if decision.gates.data()[k] == 0.0 {
            continue;
        }
        let enc = pool.encode_weak(sess, k, input)?;
        let gk = sess.tape.element(decision.var, k)?;
        parts.push(sess.tape.scale_by(enc, gk)?);
    }
    let evals = parts.len();
    if parts.is_empty() {
        let s = sess.tape.value(input).rows();
        let zero = sess.constant(Tensor::zeros(vec![s, pool.d_weak()]), "mix.zero");
        return Ok((zero, 0));
    }
    let sum = sess.tape.add_n(&parts)?;
    Ok((sum, evals))
}

/// The canonical two-router mixture: dep and indep decisions, two
/// mixtures, features concatenated dep-first.
pub struct MixtureOutput {
    pub z_dep: Var,
    pub z_indep: Var,
    pub z_mowe: Var,
    pub dep: RouterDecision,
    pub indep: RouterDecision,
    pub weak_evals: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn mowe_forward(
    sess: &mut Session,
    pool: &EncoderPool,
    indep_name: &str,
    dep_name: &str,
    z_base: Var,
    input: Var,
    training: bool,
    cfg: &RoutingConfig,
) -> Result<MixtureOutput> {
    let indep = route_indep(sess, indep_name, pool.m())?;
    let dep = route_dep(sess, dep_name, z_base, training, cfg)?;
    let (z_indep, e1) = mix(sess, pool, &indep, input)?;
    let (z_dep, e2) = mix(sess, pool, &dep, input)?;
    let z_mowe = sess.tape.concat_feature(z_dep, z_indep)?;
    Ok(MixtureOutput {
        z_dep,
        z_indep,
        z_mowe,
        dep,
        indep,
        weak_evals: e1 + e2,
    })
}

// ── routing losses ──────────────────────────────────────────────────

/// −Σ r·log r over one gate vector (0·log 0 = 0).
pub fn loss_indep_entropy(sess: &mut Session, gates: Var) -> Var {
    sess.tape.entropy_neg(gates)
}

/// Batch-mean entropy of dep gates.
pub fn loss_dep_entropy(sess: &mut Session, gates: &[Var]) -> Result<Var> {
    if gates.is_empty() {
        return Err(MoweError::invalid("loss_dep_entropy: empty batch"));
    }
    let ents: Vec<Var> = gates.iter().map(|&g| sess.tape.entropy_neg(g)).collect();
    let total = sess.tape.add_n(&ents)?;
    Ok(sess.tape.scale(total, 1.0 / gates.len() as f64))
}

/// Σ r̄·log r̄ over the batch-mean gate vector: 0 when all samples pick
/// one encoder, −log M when picks are perfectly balanced.
pub fn loss_dep_diversity(sess: &mut Session, gates: &[Var]) -> Result<Var> {
    if gates.is_empty() {
        return Err(MoweError::invalid("loss_dep_diversity: empty batch"));
    }
    let total = sess.tape.add_n(gates)?;
    let mean = sess.tape.scale(total, 1.0 / gates.len() as f64);
    let ent = sess.tape.entropy_neg(mean);
    Ok(sess.tape.scale(ent, -1.0))
}

/// Per-router loss inputs for the combined routing loss.
pub enum RouterBatchGates {
    /// One decision per batch.
    Indep(Var),
    /// One decision per sample.
    Dep(Vec<Var>),
}

/// Combined routing loss, averaged over routers:
/// (1/R)·Σ_r [entropy terms of router r]. For one indep and one dep
/// router this is exactly ½[L_indep-ent + (L_dep-ent + L_dep-div)].
pub fn loss_mowe(sess: &mut Session, routers: &[RouterBatchGates]) -> Result<Var> {
    if routers.is_empty() {
        return Err(MoweError::invalid("loss_mowe: no routers"));
    }
    let mut terms = Vec::new();
    for r in routers {
        match r {
            RouterBatchGates::Indep(g) => {
                terms.push(loss_indep_entropy(sess, *g));
            }
            RouterBatchGates::Dep(gs) => {
                let ent = loss_dep_entropy(sess, gs)?;
                let div = loss_dep_diversity(sess, gs)?;
                terms.push(sess.tape.add(ent, div)?);
            }
        }
    }
    let total = sess.tape.add_n(&terms)?;
    Ok(sess.tape.scale(total, 1.0 / routers.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::params::ParamStore;
    use crate::numerics::rng::Rng;

    fn store_with(name: &str, t: Tensor) -> ParamStore {
        let mut store = ParamStore::new();
        store.insert(name, t, true);
        store
    }

    #[test]
    fn indep_prior_selects_first_encoder() {
        let store = store_with("r.w", Tensor::vector(vec![1.0, -1.0, -1.0, -1.0]));
        let mut sess = Session::new(&store);
        let d = route_indep(&mut sess, "r.w", 4).unwrap();
        assert_eq!(d.selected, 0);
        assert!(!d.smoothed);
        d.validate().unwrap();
        assert!(d.gates.data()[0] > 0.5); // e/(e+3/e) ≈ 0.71
    }

    #[test]
    fn indep_uniform_weights_tie_break_low() {
        let store = store_with("r.w", Tensor::vector(vec![0.3; 4]));
        let mut sess = Session::new(&store);
        let d = route_indep(&mut sess, "r.w", 4).unwrap();
        assert_eq!(d.selected, 0);
        assert_eq!(d.gates.data(), &[0.25, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn indep_matches_argmax_oracle_and_is_input_free() {
        let mut rng = Rng::new(21, "route.indep");
        for _ in 0..300 {
            let m = 2 + rng.below(6);
            let w: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
            let oracle = argmax_lowest(&w); // softmax is monotone
            let store = store_with("r.w", Tensor::vector(w));
            let mut sess = Session::new(&store);
            let d1 = route_indep(&mut sess, "r.w", m).unwrap();
            let d2 = route_indep(&mut sess, "r.w", m).unwrap();
            assert_eq!(d1.selected, oracle);
            assert_eq!(d2.selected, oracle);
            assert_eq!(d1.gates, d2.gates);
        }
    }

    #[test]
    fn dep_zero_weights_give_uniform_then_smoothed_floor() {
        let store = store_with("r.w", Tensor::zeros(vec![8, 4]));
        let mut sess = Session::new(&store);
        let z = sess.constant(Tensor::zeros(vec![5, 8]), "z");
        let cfg = RoutingConfig::default();

        let eval = route_dep(&mut sess, "r.w", z, false, &cfg).unwrap();
        assert_eq!(eval.selected, 0);
        assert_eq!(eval.gates.data(), &[0.25, 0.0, 0.0, 0.0]);
        assert_eq!(eval.gates.data().iter().filter(|v| **v != 0.0).count(), 1);
        eval.validate().unwrap();

        let train = route_dep(&mut sess, "r.w", z, true, &cfg).unwrap();
        assert!(train.smoothed);
        let eps = 0.1 / 4.0;
        assert_eq!(train.epsilon, eps);
        assert!((train.gates.data()[0] - 0.2275).abs() < 1e-12);
        for k in 1..4 {
            assert_eq!(train.gates.data()[k], SMOOTH_ADD * eps); // exactly 0.0025
        }
        train.validate().unwrap();
    }

    #[test]
    fn dep_selects_aligned_column() {
        // column k of W stands out in direction of z̄
        let mut rng = Rng::new(5, "route.dep.align");
        for _ in 0..100 {
            let d_base = 6;
            let m = 4;
            let k = rng.below(m);
            let mut w = Tensor::zeros(vec![d_base, m]);
            for j in 0..m {
                for i in 0..d_base {
                    let sign = if j == k { 1.0 } else { -0.2 };
                    w.data_mut()[i * m + j] = sign * (i as f64 + 1.0);
                }
            }
            let store = store_with("r.w", w);
            let mut sess = Session::new(&store);
            let z = sess.constant(Tensor::new(vec![1, d_base], vec![0.5; 6]).unwrap(), "z");
            let d = route_dep(&mut sess, "r.w", z, false, &RoutingConfig::default()).unwrap();
            assert_eq!(d.selected, k);
        }
    }

    #[test]
    fn dep_dimension_mismatch_is_an_error() {
        let store = store_with("r.w", Tensor::zeros(vec![8, 4]));
        let mut sess = Session::new(&store);
        let z = sess.constant(Tensor::zeros(vec![5, 6]), "z");
        let err = route_dep(&mut sess, "r.w", z, false, &RoutingConfig::default())
            .unwrap_err()
            .to_string();
        assert!(err.contains("6") && err.contains("8"), "{err}");
    }

    fn pool_and_store(m: usize, seed: u64) -> (EncoderPool, ParamStore) {
        let pool = EncoderPool::default_pool(8, m).unwrap();
        let mut store = ParamStore::new();
        pool.init_params(&mut store, seed);
        (pool, store)
    }

    #[test]
    fn mix_one_hot_equals_single_encoder() {
        let (pool, store) = pool_and_store(3, 2);
        let mut sess = Session::new(&store);
        let mut rng = Rng::new(3, "mix.input");
        let x = sess.constant(Tensor::randn(vec![7, 8], 1.0, &mut rng), "x");
        let d = RouterDecision::synthetic(&mut sess, Tensor::vector(vec![0.0, 1.0, 0.0]));
        let (mixed, evals) = mix(&mut sess, &pool, &d, x).unwrap();
        assert_eq!(evals, 1);
        let direct = pool.encode_weak(&mut sess, 1, x).unwrap();
        assert_eq!(sess.tape.value(mixed), sess.tape.value(direct));
    }

    #[test]
    fn mix_zero_gates_runs_nothing() {
        let (pool, store) = pool_and_store(3, 2);
        let mut sess = Session::new(&store);
        let x = sess.constant(Tensor::zeros(vec![4, 8]), "x");
        let d = RouterDecision::synthetic(&mut sess, Tensor::vector(vec![0.0, 0.0, 0.0]));
        let nodes_before = sess.tape.len();
        let (mixed, evals) = mix(&mut sess, &pool, &d, x).unwrap();
        assert_eq!(evals, 0);
        assert_eq!(sess.tape.len(), nodes_before + 1); // just the zero leaf
        assert!(sess.tape.value(mixed).data().iter().all(|v| *v == 0.0));
        assert_eq!(sess.tape.value(mixed).shape(), &[4, 16]);
    }

    #[test]
    fn mix_smoothed_matches_dense_sum_oracle() {
        let (pool, store) = pool_and_store(4, 7);
        let mut sess = Session::new(&store);
        let mut rng = Rng::new(9, "mix.oracle");
        let xt = Tensor::randn(vec![6, 8], 1.0, &mut rng);
        let x = sess.constant(xt.clone(), "x");
        let gates = Tensor::vector(vec![0.2275, 0.0025, 0.0025, 0.0025]);
        let d = RouterDecision::synthetic(&mut sess, gates.clone());
        let (mixed, evals) = mix(&mut sess, &pool, &d, x).unwrap();
        assert_eq!(evals, 4);

        // dense oracle: evaluate every encoder, scale and sum by hand
        let mut oracle = Tensor::zeros(vec![6, 16]);
        for k in 0..4 {
            let e = pool.encode_weak(&mut sess, k, x).unwrap();
            let ed = sess.tape.value(e).data().to_vec();
            for (o, v) in oracle.data_mut().iter_mut().zip(&ed) {
                *o += gates.data()[k] * v;
            }
        }
        assert!(sess.tape.value(mixed).max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn mowe_forward_concat_order_and_eval_count() {
        let (pool, mut store) = pool_and_store(4, 11);
        store.insert("router.indep.w", Tensor::vector(vec![1.0, -1.0, -1.0, -1.0]), true);
        let mut rng = Rng::new(12, "mowe.w");
        store.insert("router.dep.w", Tensor::randn(vec![64, 4], 0.5, &mut rng), true);

        let run = |training: bool| {
            let mut sess = Session::new(&store);
            let mut irng = Rng::new(13, "mowe.x");
            let x = sess.constant(Tensor::randn(vec![10, 8], 1.0, &mut irng), "x");
            let zb = pool.encode_base(&mut sess, x).unwrap();
            let out = mowe_forward(
                &mut sess,
                &pool,
                "router.indep.w",
                "router.dep.w",
                zb,
                x,
                training,
                &RoutingConfig::default(),
            )
            .unwrap();
            // dep features come first
            let dep_val = sess.tape.value(out.z_dep).clone();
            let indep_val = sess.tape.value(out.z_indep).clone();
            let mowe_val = sess.tape.value(out.z_mowe).clone();
            assert_eq!(mowe_val.slice_cols(0, 16).unwrap(), dep_val);
            assert_eq!(mowe_val.slice_cols(16, 16).unwrap(), indep_val);
            out
        };

        let eval_out = run(false);
        assert_eq!(eval_out.weak_evals, 2); // one per router
        assert!(!eval_out.dep.smoothed);

        let train_out = run(true);
        assert_eq!(train_out.weak_evals, 5); // indep 1 + dep all 4
        assert!(train_out.dep.smoothed);
    }

    // ── loss examples ───────────────────────────────────────────────

    fn gates_on_tape(sess: &mut Session, gates: &[Vec<f64>]) -> Vec<Var> {
        gates
            .iter()
            .map(|g| sess.constant(Tensor::vector(g.clone()), "g"))
            .collect()
    }

    #[test]
    fn indep_entropy_examples() {
        let store = ParamStore::new();
        let mut sess = Session::new(&store);
        let onehot = sess.constant(Tensor::vector(vec![1.0, 0.0, 0.0, 0.0]), "g");
        let l = loss_indep_entropy(&mut sess, onehot);
        assert_eq!(sess.tape.value_scalar(l), 0.0);

        let v = 0.62;
        let single = sess.constant(Tensor::vector(vec![0.0, v, 0.0, 0.0]), "g");
        let l2 = loss_indep_entropy(&mut sess, single);
        assert!((sess.tape.value_scalar(l2) - (-v * v.ln())).abs() < 1e-15);
    }

    #[test]
    fn indep_entropy_bounded_by_inv_e() {
        let store = ParamStore::new();
        let mut sess = Session::new(&store);
        let inv_e = 1.0 / std::f64::consts::E;
        let at_max = sess.constant(Tensor::vector(vec![inv_e, 0.0, 0.0]), "g");
        let l = loss_indep_entropy(&mut sess, at_max);
        assert!((sess.tape.value_scalar(l) - inv_e).abs() < 1e-15);

        let mut rng = Rng::new(31, "ient");
        for _ in 0..500 {
            let v = rng.uniform().max(1e-12);
            let g = sess.constant(Tensor::vector(vec![0.0, 0.0, v]), "g");
            let l = loss_indep_entropy(&mut sess, g);
            let val = sess.tape.value_scalar(l);
            assert!((0.0..=inv_e + 1e-15).contains(&val), "{val}");
        }
    }

    #[test]
    fn dep_entropy_examples() {
        let store = ParamStore::new();
        let mut sess = Session::new(&store);
        let onehots = gates_on_tape(
            &mut sess,
            &[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0]],
        );
        let l = loss_dep_entropy(&mut sess, &onehots).unwrap();
        assert_eq!(sess.tape.value_scalar(l), 0.0);

        let uniform = gates_on_tape(&mut sess, &[vec![0.25; 4], vec![0.25; 4]]);
        let l2 = loss_dep_entropy(&mut sess, &uniform).unwrap();
        assert!((sess.tape.value_scalar(l2) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dep_entropy_matches_direct_sum_oracle() {
        let mut rng = Rng::new(41, "dent");
        let store = ParamStore::new();
        let mut sess = Session::new(&store);
        let batch: Vec<Vec<f64>> = (0..16)
            .map(|_| (0..4).map(|_| rng.uniform() * 0.5 + 1e-3).collect())
            .collect();
        let vars = gates_on_tape(&mut sess, &batch);
        let l = loss_dep_entropy(&mut sess, &vars).unwrap();
        let oracle: f64 = batch
            .iter()
            .map(|g| -g.iter().map(|v| v * v.ln()).sum::<f64>())
            .sum::<f64>()
            / batch.len() as f64;
        assert!((sess.tape.value_scalar(l) - oracle).abs() < 1e-12);
    }

    #[test]
    fn dep_diversity_examples() {
        let store = ParamStore::new();
        let mut sess = Session::new(&store);
        let collapsed = gates_on_tape(
            &mut sess,
            &[vec![1.0, 0.0, 0.0, 0.0], vec![1.0, 0.0, 0.0, 0.0]],
        );
        let l = loss_dep_diversity(&mut sess, &collapsed).unwrap();
        assert_eq!(sess.tape.value_scalar(l), 0.0); // worst case

        let balanced = gates_on_tape(
            &mut sess,
            &[
                vec![1.0, 0.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0, 0.0],
                vec![0.0, 0.0, 1.0, 0.0],
                vec![0.0, 0.0, 0.0, 1.0],
            ],
        );
        let l2 = loss_dep_diversity(&mut sess, &balanced).unwrap();
        assert!((sess.tape.value_scalar(l2) + 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dep_diversity_matches_brute_force() {
        let mut rng = Rng::new(43, "ddiv");
        let store = ParamStore::new();
        let mut sess = Session::new(&store);
        let batch: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..5).map(|_| rng.uniform() + 1e-3).collect())
            .collect();
        let vars = gates_on_tape(&mut sess, &batch);
        let l = loss_dep_diversity(&mut sess, &vars).unwrap();
        let mut mean = vec![0.0; 5];
        for g in &batch {
            for (m, v) in mean.iter_mut().zip(g) {
                *m += v / batch.len() as f64;
            }
        }
        let oracle: f64 = mean.iter().map(|v| v * v.ln()).sum();
        assert!((sess.tape.value_scalar(l) - oracle).abs() < 1e-12);
    }

    #[test]
    fn combined_loss_compositions() {
        let store = ParamStore::new();
        let mut sess = Session::new(&store);

        // balanced one-hot dep batch + one-hot indep → ½(0 + 0 − log M)
        let indep = sess.constant(Tensor::vector(vec![1.0, 0.0, 0.0, 0.0]), "gi");
        let dep = gates_on_tape(
            &mut sess,
            &[
                vec![1.0, 0.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0, 0.0],
                vec![0.0, 0.0, 1.0, 0.0],
                vec![0.0, 0.0, 0.0, 1.0],
            ],
        );
        let l = loss_mowe(
            &mut sess,
            &[RouterBatchGates::Dep(dep), RouterBatchGates::Indep(indep)],
        )
        .unwrap();
        assert!((sess.tape.value_scalar(l) + 0.5 * 4f64.ln()).abs() < 1e-12);

        // uniform dep gates, one-hot indep → entropy terms cancel to 0
        let indep2 = sess.constant(Tensor::vector(vec![1.0, 0.0, 0.0, 0.0]), "gi");
        let dep2 = gates_on_tape(&mut sess, &[vec![0.25; 4], vec![0.25; 4]]);
        let l2 = loss_mowe(
            &mut sess,
            &[RouterBatchGates::Dep(dep2), RouterBatchGates::Indep(indep2)],
        )
        .unwrap();
        assert!(sess.tape.value_scalar(l2).abs() < 1e-12);
    }

    #[test]
    fn combined_loss_matches_component_oracle() {
        let mut rng = Rng::new(47, "lmowe");
        let store = ParamStore::new();
        let mut sess = Session::new(&store);
        let batch: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..4).map(|_| rng.uniform() * 0.4 + 1e-3).collect())
            .collect();
        let ig: Vec<f64> = vec![0.0, 0.83, 0.0, 0.0];

        let dep_vars = gates_on_tape(&mut sess, &batch);
        let indep_var = sess.constant(Tensor::vector(ig.clone()), "gi");
        let l = loss_mowe(
            &mut sess,
            &[
                RouterBatchGates::Dep(dep_vars.clone()),
                RouterBatchGates::Indep(indep_var),
            ],
        )
        .unwrap();

        let e1 = loss_dep_entropy(&mut sess, &dep_vars).unwrap();
        let d1 = loss_dep_diversity(&mut sess, &dep_vars).unwrap();
        let indep_ent: f64 = -ig.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>();
        let oracle = 0.5
            * (sess.tape.value_scalar(e1) + sess.tape.value_scalar(d1) + indep_ent);
        assert!((sess.tape.value_scalar(l) - oracle).abs() < 1e-12);
    }

    #[test]
    fn routing_losses_pass_gradient_check() {
        // full routing stack: params → softmax → keep_top1 → smoothing →
        // losses, away from argmax ties
        let mut store = ParamStore::new();
        store.insert("wi", Tensor::vector(vec![1.2, -0.4, 0.1, -0.9]), true);
        let mut rng = Rng::new(51, "rgc");
        let mut wd = Tensor::randn(vec![6, 4], 0.4, &mut rng);
        // bias one column so the argmax is stable under perturbation
        for i in 0..6 {
            wd.data_mut()[i * 4 + 2] += 1.0;
        }
        store.insert("wd", wd, true);
        let zt = Tensor::randn(vec![3, 6], 1.0, &mut rng);

        let cfg = RoutingConfig::default();
        let reports = crate::numerics::gradcheck::check_gradients(&mut store, 1e-5, |sess| {
            let z = sess.constant(zt.clone(), "z");
            let indep = route_indep(sess, "wi", 4)?;
            let dep = route_dep(sess, "wd", z, true, &cfg)?;
            loss_mowe(
                sess,
                &[
                    RouterBatchGates::Dep(vec![dep.var]),
                    RouterBatchGates::Indep(indep.var),
                ],
            )
        })
        .unwrap();
        let worst = crate::numerics::gradcheck::max_rel_err(&reports);
        assert!(worst < 1e-6, "routing loss grad err {worst}");
    }

    #[test]
    fn argmax_shift_invariance() {
        let mut rng = Rng::new(53, "shift");
        for _ in 0..300 {
            let m = 2 + rng.below(6);
            let w: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
            let shifted: Vec<f64> = w.iter().map(|v| v + 42.5).collect();
            let store = ParamStore::new();
            let mut sess = Session::new(&store);
            let a = sess.constant(Tensor::vector(w), "a");
            let b = sess.constant(Tensor::vector(shifted), "b");
            let sa = sess.tape.softmax(a).unwrap();
            let sb = sess.tape.softmax(b).unwrap();
            let ka = sess.tape.keep_top1(sa).unwrap();
            let kb = sess.tape.keep_top1(sb).unwrap();
            let ia = argmax_lowest(sess.tape.value(ka).data());
            let ib = argmax_lowest(sess.tape.value(kb).data());
            assert_eq!(ia, ib);
        }
    }
}

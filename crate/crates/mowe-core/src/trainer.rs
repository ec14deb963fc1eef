//! AdamW training loop with cosine decay, gradient clipping, two-stage
//! regime, evaluation, and the router ablation matrix.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{MoweError, Result};
use crate::model::{ModelConfig, MoweModel, RouterSetup};
use crate::numerics::params::{ParamStore, Session};
use crate::numerics::rng::Rng;
use crate::numerics::tensor::Tensor;
use crate::routing::RouterKind;
use crate::synthdata::{Dataset, FeatureSequence};

// ── configuration ───────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    SingleStage,
    TwoStage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub peak_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied directly to the parameter.
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; stabilizes small-scale runs.
    pub clip_norm: f64,
    /// Weight of the routing loss in the total objective.
    pub mowe_weight: f64,
    pub seed: u64,
    pub regime: Regime,
    /// Evaluation worker threads. Results are merged in chunk order, so
    /// any value is deterministic; 1 avoids thread scheduling entirely.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 5,
            peak_lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
            mowe_weight: 0.1,
            seed: 0,
            regime: Regime::SingleStage,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(MoweError::config("batch size must be positive"));
        }
        if !(self.peak_lr > 0.0) {
            return Err(MoweError::config("peak learning rate must be positive"));
        }
        if self.threads == 0 {
            return Err(MoweError::config("thread count must be positive"));
        }
        Ok(())
    }
}

/// Cosine decay with exact endpoints: peak at step 0, zero at the last
/// step. A single-step schedule stays at peak.
pub fn cosine_lr(peak: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps <= 1 {
        return peak;
    }
    let progress = step as f64 / (total_steps - 1) as f64;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

// ── optimizer ───────────────────────────────────────────────────────

/// AdamW with decoupled weight decay:
/// p ← p − lr·(m̂/(√v̂+ε) + wd·p).
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: u32,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, grad) in grads {
            let numel = grad.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; numel]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; numel]);
            let p = store.tensor_mut(name)?;
            if p.numel() != numel {
                return Err(MoweError::invalid(format!(
                    "optimizer state for {name} has {numel} elements, parameter has {}",
                    p.numel()
                )));
            }
            for (i, g) in grad.data().iter().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let w = &mut p.data_mut()[i];
                *w -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *w);
            }
        }
        Ok(())
    }
}

/// Scale all gradients so their joint L2 norm is at most `clip`.
/// Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut BTreeMap<String, Tensor>, clip: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.values() {
        for v in g.data() {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > clip && norm > 0.0 {
        let s = clip / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

// ── reports ─────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: u8,
    pub step: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub total: f64,
    pub next_token: f64,
    pub mowe: f64,
    pub indep_ent: f64,
    pub dep_ent: f64,
    pub dep_div: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    /// Mean total loss over the epoch's training steps.
    pub train_loss: f64,
    pub eval_loss: f64,
    pub eval_token_accuracy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskEval {
    pub task: usize,
    pub name: String,
    pub samples: usize,
    pub token_accuracy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RouterReport {
    pub kind: String,
    /// Fraction of each task's samples routed to each encoder; rows sum
    /// to 1.
    pub proportions: Vec<Vec<f64>>,
    pub counts: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub loss_total: f64,
    pub loss_next_token: f64,
    pub loss_mowe: f64,
    pub token_accuracy: f64,
    pub per_task: Vec<TaskEval>,
    pub routing: Vec<RouterReport>,
    pub active_params_mean: f64,
    pub weak_evals_per_sample: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub param_total: usize,
    pub param_trainable: usize,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub final_eval: EvalReport,
    pub wall_clock_secs: f64,
}

impl RunReport {
    /// JSON value with the wall clock removed, for exact run-to-run
    /// comparison.
    pub fn comparable(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("report serializes");
        v.as_object_mut().expect("object").remove("wall_clock_secs");
        v
    }

    /// Per-step metrics as CSV.
    pub fn steps_csv(&self) -> String {
        let mut out = String::from(
            "stage,step,lr,grad_norm,total,next_token,mowe,indep_ent,dep_ent,dep_div\n",
        );
        for s in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                s.stage,
                s.step,
                s.lr,
                s.grad_norm,
                s.total,
                s.next_token,
                s.mowe,
                s.indep_ent,
                s.dep_ent,
                s.dep_div
            ));
        }
        out
    }
}

// ── evaluation ──────────────────────────────────────────────────────

#[derive(Default)]
struct EvalAccum {
    n: usize,
    sum_total: f64,
    sum_nt: f64,
    sum_mowe: f64,
    hits: usize,
    tokens: usize,
    task_hits: Vec<usize>,
    task_tokens: Vec<usize>,
    task_n: Vec<usize>,
    // [router][task][encoder]
    sel: Vec<Vec<Vec<usize>>>,
    active_sum: usize,
    weak_evals: usize,
}

impl EvalAccum {
    fn new(n_tasks: usize, n_routers: usize, m: usize) -> Self {
        EvalAccum {
            task_hits: vec![0; n_tasks],
            task_tokens: vec![0; n_tasks],
            task_n: vec![0; n_tasks],
            sel: vec![vec![vec![0; m]; n_tasks]; n_routers],
            ..EvalAccum::default()
        }
    }

    fn merge(&mut self, other: EvalAccum) {
        self.n += other.n;
        self.sum_total += other.sum_total;
        self.sum_nt += other.sum_nt;
        self.sum_mowe += other.sum_mowe;
        self.hits += other.hits;
        self.tokens += other.tokens;
        for (a, b) in self.task_hits.iter_mut().zip(&other.task_hits) {
            *a += b;
        }
        for (a, b) in self.task_tokens.iter_mut().zip(&other.task_tokens) {
            *a += b;
        }
        for (a, b) in self.task_n.iter_mut().zip(&other.task_n) {
            *a += b;
        }
        for (ra, rb) in self.sel.iter_mut().zip(&other.sel) {
            for (ta, tb) in ra.iter_mut().zip(rb) {
                for (ea, eb) in ta.iter_mut().zip(tb) {
                    *ea += eb;
                }
            }
        }
        self.active_sum += other.active_sum;
        self.weak_evals += other.weak_evals;
    }
}

fn eval_chunk(
    model: &MoweModel,
    store: &ParamStore,
    samples: &[&FeatureSequence],
    n_tasks: usize,
    mowe_weight: f64,
) -> Result<EvalAccum> {
    let kinds = model.config.routers.kinds();
    let m = model.config.pool_size();
    let mut acc = EvalAccum::new(n_tasks, kinds.len(), m.max(1));
    let report = model.param_report(store);
    let mut sess = Session::new(store);
    let out = model.forward_batch(&mut sess, samples, false, mowe_weight)?;
    acc.n = samples.len();
    acc.sum_total = out.components.total * samples.len() as f64;
    acc.sum_nt = out.components.next_token * samples.len() as f64;
    acc.sum_mowe = out.components.mowe * samples.len() as f64;
    acc.weak_evals = out.weak_evals;
    for (i, sample) in samples.iter().enumerate() {
        acc.task_n[sample.task] += 1;
        let (hits, tokens) = out.per_sample_hits[i];
        acc.task_hits[sample.task] += hits;
        acc.task_tokens[sample.task] += tokens;
        let mut selections = Vec::with_capacity(kinds.len());
        for (j, per_router) in out.selections.iter().enumerate() {
            acc.sel[j][sample.task][per_router[i]] += 1;
            selections.push(per_router[i]);
        }
        acc.active_sum += model.active_params_for(&report, &selections);
    }
    acc.hits = out.token_hits;
    acc.tokens = out.token_total;
    Ok(acc)
}

/// Eval-mode metrics: no gate smoothing, top-1 routing only.
pub fn evaluate(
    model: &MoweModel,
    store: &ParamStore,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<EvalReport> {
    if data.samples.is_empty() {
        return Err(MoweError::invalid("evaluate: empty dataset"));
    }
    let n_tasks = data.tasks.len();
    let kinds = model.config.routers.kinds();
    let m = model.config.pool_size();
    let refs: Vec<&FeatureSequence> = data.samples.iter().collect();
    let chunks: Vec<&[&FeatureSequence]> = refs.chunks(cfg.batch_size).collect();

    let mut acc = EvalAccum::new(n_tasks, kinds.len(), m.max(1));
    if cfg.threads <= 1 || chunks.len() == 1 {
        for chunk in &chunks {
            let part = eval_chunk(model, store, chunk, n_tasks, cfg.mowe_weight)?;
            acc.merge(part);
        }
    } else {
        let results: Vec<Result<EvalAccum>> = std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for group in chunks.chunks(chunks.len().div_ceil(cfg.threads)) {
                handles.push(scope.spawn(move || {
                    let mut local: Vec<Result<EvalAccum>> = Vec::new();
                    for chunk in group {
                        local.push(eval_chunk(model, store, chunk, n_tasks, cfg.mowe_weight));
                    }
                    local
                }));
            }
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("eval worker panicked"))
                .collect()
        });
        for part in results {
            acc.merge(part?);
        }
    }

    let mut per_task = Vec::with_capacity(n_tasks);
    for t in 0..n_tasks {
        per_task.push(TaskEval {
            task: t,
            name: data.task_name(t).to_string(),
            samples: acc.task_n[t],
            token_accuracy: if acc.task_tokens[t] == 0 {
                0.0
            } else {
                acc.task_hits[t] as f64 / acc.task_tokens[t] as f64
            },
        });
    }

    let mut routing = Vec::with_capacity(kinds.len());
    for (j, kind) in kinds.iter().enumerate() {
        let mut proportions = Vec::with_capacity(n_tasks);
        for t in 0..n_tasks {
            let total: usize = acc.sel[j][t].iter().sum();
            let row: Vec<f64> = if total == 0 {
                vec![0.0; m.max(1)]
            } else {
                acc.sel[j][t].iter().map(|c| *c as f64 / total as f64).collect()
            };
            proportions.push(row);
        }
        routing.push(RouterReport {
            kind: match kind {
                RouterKind::Indep => "indep".to_string(),
                RouterKind::Dep => "dep".to_string(),
            },
            proportions,
            counts: acc.sel[j].clone(),
        });
    }

    let n = acc.n as f64;
    Ok(EvalReport {
        loss_total: acc.sum_total / n,
        loss_next_token: acc.sum_nt / n,
        loss_mowe: acc.sum_mowe / n,
        token_accuracy: if acc.tokens == 0 {
            0.0
        } else {
            acc.hits as f64 / acc.tokens as f64
        },
        per_task,
        routing,
        active_params_mean: acc.active_sum as f64 / n,
        weak_evals_per_sample: acc.weak_evals as f64 / n,
    })
}

// ── training ────────────────────────────────────────────────────────

fn run_stage(
    model: &MoweModel,
    store: &mut ParamStore,
    train_data: &Dataset,
    eval_data: &Dataset,
    cfg: &TrainConfig,
    stage: u8,
    step_offset: usize,
    steps: &mut Vec<StepRecord>,
    epochs: &mut Vec<EpochRecord>,
) -> Result<()> {
    if train_data.samples.is_empty() {
        return Err(MoweError::invalid("train: empty dataset"));
    }
    let n = train_data.samples.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut opt = AdamW::new(cfg);
    let mut step_in_stage = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = Rng::new(cfg.seed, &format!("train.shuffle.s{stage}.e{epoch}"));
        rng.shuffle(&mut order);
        let mut epoch_loss_sum = 0.0;

        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&FeatureSequence> =
                chunk.iter().map(|&i| &train_data.samples[i]).collect();
            let lr = cosine_lr(cfg.peak_lr, step_in_stage, total_steps);

            let (components, mut grads) = {
                let mut sess = Session::new(store);
                let out = model.forward_batch(&mut sess, &batch, true, cfg.mowe_weight)?;
                if !out.components.total.is_finite() {
                    let node = sess
                        .tape
                        .first_non_finite()
                        .unwrap_or_else(|| "unknown".to_string());
                    return Err(MoweError::NonFinite {
                        step: step_offset + step_in_stage,
                        node,
                    });
                }
                sess.backward(out.total)?;
                (out.components, sess.grads())
            };
            let grad_norm = clip_gradients(&mut grads, cfg.clip_norm);
            if !grad_norm.is_finite() {
                return Err(MoweError::NonFinite {
                    step: step_offset + step_in_stage,
                    node: "gradient norm".to_string(),
                });
            }
            opt.step(store, &grads, lr)?;

            epoch_loss_sum += components.total;
            steps.push(StepRecord {
                stage,
                step: step_offset + step_in_stage,
                lr,
                grad_norm,
                total: components.total,
                next_token: components.next_token,
                mowe: components.mowe,
                indep_ent: components.indep_ent,
                dep_ent: components.dep_ent,
                dep_div: components.dep_div,
            });
            step_in_stage += 1;
        }

        let eval = evaluate(model, store, eval_data, cfg)?;
        epochs.push(EpochRecord {
            stage,
            epoch,
            train_loss: epoch_loss_sum / steps_per_epoch as f64,
            eval_loss: eval.loss_total,
            eval_token_accuracy: eval.token_accuracy,
        });
    }
    Ok(())
}

/// Single-stage training over all tasks. Returns the report; the store
/// holds the trained parameters.
pub fn train(
    model: &MoweModel,
    store: &mut ParamStore,
    train_data: &Dataset,
    eval_data: &Dataset,
    cfg: &TrainConfig,
) -> Result<RunReport> {
    cfg.validate()?;
    let start = Instant::now();
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    run_stage(model, store, train_data, eval_data, cfg, 1, 0, &mut steps, &mut epochs)?;
    finish_report(model, store, eval_data, cfg, steps, epochs, start)
}

/// Two-stage regime: first only the speech-transcription task, then all
/// tasks, each stage with a fresh cosine schedule and optimizer state.
pub fn train_two_stage(
    model: &MoweModel,
    store: &mut ParamStore,
    train_data: &Dataset,
    eval_data: &Dataset,
    cfg: &TrainConfig,
) -> Result<RunReport> {
    cfg.validate()?;
    let start = Instant::now();
    let stage1 = train_data.retain_tasks(&[0]);
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    run_stage(model, store, &stage1, eval_data, cfg, 1, 0, &mut steps, &mut epochs)?;
    let offset = steps.len();
    run_stage(model, store, train_data, eval_data, cfg, 2, offset, &mut steps, &mut epochs)?;
    finish_report(model, store, eval_data, cfg, steps, epochs, start)
}

fn finish_report(
    model: &MoweModel,
    store: &ParamStore,
    eval_data: &Dataset,
    cfg: &TrainConfig,
    steps: Vec<StepRecord>,
    epochs: Vec<EpochRecord>,
    start: Instant,
) -> Result<RunReport> {
    let final_eval = evaluate(model, store, eval_data, cfg)?;
    let params = model.param_report(store);
    Ok(RunReport {
        model: model.config.clone(),
        train: cfg.clone(),
        param_total: params.total,
        param_trainable: params.trainable,
        steps,
        epochs,
        final_eval,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

// ── ablation matrix ─────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub setup: String,
    pub pool_size: usize,
    pub mixtures: usize,
    pub param_total: usize,
    pub param_active_eval: usize,
    pub final_train_loss: f64,
    pub final_eval_loss: f64,
    pub eval_token_accuracy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub reports: Vec<RunReport>,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "setup,pool_size,mixtures,param_total,param_active_eval,final_train_loss,final_eval_loss,eval_token_accuracy\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.setup,
                r.pool_size,
                r.mixtures,
                r.param_total,
                r.param_active_eval,
                r.final_train_loss,
                r.final_eval_loss,
                r.eval_token_accuracy
            ));
        }
        out
    }
}

/// Train every router setup (including off) from the same base config
/// and seed; one-mixture rows get a pool of two, two-mixture rows four.
pub fn run_ablation_matrix(
    base_model: &ModelConfig,
    cfg: &TrainConfig,
    train_data: &Dataset,
    eval_data: &Dataset,
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for setup in RouterSetup::ALL {
        let mut mc = base_model.clone();
        mc.routers = setup;
        mc.pool_size = None;
        let model = MoweModel::new(mc)?;
        let mut store = model.init_params(cfg.seed);
        let report = train(&model, &mut store, train_data, eval_data, cfg)?;
        let params = model.param_report(&store);
        let last_epoch = report
            .epochs
            .last()
            .ok_or_else(|| MoweError::invalid("ablation needs at least one epoch"))?;
        rows.push(AblationRow {
            setup: setup.label().to_string(),
            pool_size: model.config.pool_size(),
            mixtures: setup.mixtures(),
            param_total: params.total,
            param_active_eval: params.active_eval_per_sample,
            final_train_loss: last_epoch.train_loss,
            final_eval_loss: report.final_eval.loss_total,
            eval_token_accuracy: report.final_eval.token_accuracy,
        });
        reports.push(report);
    }
    Ok(AblationReport { rows, reports })
}

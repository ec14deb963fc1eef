//! Synthetic multi-task "audio" datasets.
//!
//! Each task is a Gaussian cluster around a distinct center plus a
//! task-family sinusoid over time. A per-sample content level rides on the
//! last quarter of the feature dimensions, scaled by the task's noise
//! level, and the target token sequence encodes that level. Targets are
//! therefore computable from the features alone (the model has to read
//! the audio, not just the instruction), while noise 0 collapses every
//! sample of a task to the same sequence.
//!
//! Files on disk: a JSON manifest next to a flat little-endian f32 blob.
//! Features are quantized to f32 at generation time so a save/load cycle
//! is bit-exact.

use std::fs;
use std::io::Read as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MoweError, Result};
use crate::numerics::rng::Rng;
use crate::numerics::tensor::Tensor;

pub const TOK_PAD: u32 = 0;
pub const TOK_BOS: u32 = 1;
pub const TOK_EOS: u32 = 2;
pub const TOK_SEP: u32 = 3;
/// Instruction token for task `t` is `TOK_TASK_BASE + t`.
pub const TOK_TASK_BASE: u32 = 10;
/// First response token for task `t` is `TOK_LEAD_BASE + t`.
pub const TOK_LEAD_BASE: u32 = 40;
/// Content token block for task `t` starts at `TOK_CONTENT_BASE + 16·t`.
pub const TOK_CONTENT_BASE: u32 = 64;

pub const N_CONTENT_LEVELS: usize = 4;
/// Content amplitude per level, in units of the task noise scale.
const CONTENT_GAIN: f64 = 8.0;
const PATTERN_AMP: f64 = 0.4;

const BLOB_MAGIC: &[u8; 8] = b"MOWEFEAT";
const BLOB_VERSION: u32 = 1;

/// Token pattern a task answers with: `[lead, content_base + level, EOS]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseTemplate {
    pub lead: u32,
    pub content_base: u32,
}

impl ResponseTemplate {
    pub fn tokens(&self, level: usize) -> Vec<u32> {
        vec![self.lead, self.content_base + level as u32, TOK_EOS]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: usize,
    pub name: String,
    /// Cluster center in feature space, `[d_in]`.
    pub center: Tensor,
    /// Temporal pattern family; tasks sharing an id get the same sinusoid.
    pub pattern: usize,
    pub noise: f64,
    pub template: ResponseTemplate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSequence {
    pub features: Tensor,
    pub task: usize,
    pub instruction: Vec<u32>,
    pub target: Vec<u32>,
    pub sample_id: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seq_len: usize,
    pub d_in: usize,
    pub tasks: Vec<TaskSpec>,
    pub samples: Vec<FeatureSequence>,
}

/// First three quarters of the dims carry the cluster/pattern signal;
/// the rest carry the per-sample content level.
pub fn pattern_dims(d_in: usize) -> usize {
    d_in * 3 / 4
}

fn pattern_wave(pattern: usize, t: usize, d: usize, seq_len: usize) -> f64 {
    let freq = (pattern + 1) as f64;
    let phase = d as f64 * 0.7 + pattern as f64 * 1.3;
    PATTERN_AMP * (std::f64::consts::TAU * freq * t as f64 / seq_len as f64 + phase).sin()
}

/// Recover the content level from features alone: mean over the content
/// block, bucketed at multiples of `CONTENT_GAIN × noise`.
pub fn content_bucket(features: &Tensor, noise: f64) -> usize {
    if noise <= 0.0 {
        return 0;
    }
    let s = features.rows();
    let d = features.cols();
    let d_pat = pattern_dims(d);
    if d_pat == d || s == 0 {
        return 0;
    }
    let mut acc = 0.0;
    for t in 0..s {
        for j in d_pat..d {
            acc += features.at2(t, j);
        }
    }
    let mean = acc / (s * (d - d_pat)) as f64;
    let level = (mean / (CONTENT_GAIN * noise) + 0.5).floor();
    (level.max(0.0) as usize).min(N_CONTENT_LEVELS - 1)
}

// Sign patterns for the default cluster centers: pairwise Hamming
// distance ≥ 6 out of 12, so centers stay far apart relative to noise.
const SIGN_TABLE: [[i8; 12]; 5] = [
    [1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1],
    [-1, -1, -1, -1, -1, -1, 1, 1, 1, 1, 1, 1],
    [1, 1, 1, 1, 1, 1, -1, -1, -1, -1, -1, -1],
    [-1, -1, -1, 1, 1, 1, -1, -1, -1, 1, 1, 1],
    [1, 1, 1, -1, -1, -1, 1, 1, 1, -1, -1, -1],
];

const DEFAULT_NAMES: [&str; 5] = ["transcribe", "speech-qa", "emotion", "audio-qa", "caption"];
// transcribe and speech-qa are the speech-like pair: one temporal family.
const DEFAULT_PATTERNS: [usize; 5] = [0, 0, 1, 2, 3];

pub const DEFAULT_SEQ_LEN: usize = 128;
pub const DEFAULT_D_IN: usize = 16;
pub const DEFAULT_NOISE: f64 = 0.1;

/// The five standard tasks. `d_in` must be a multiple of 4 and at least 16
/// so the sign table keeps its separation guarantees.
pub fn default_tasks(d_in: usize) -> Result<Vec<TaskSpec>> {
    if d_in < 16 || d_in % 4 != 0 {
        return Err(MoweError::invalid(format!(
            "default tasks need d_in ≥ 16 and a multiple of 4, got {d_in}; \
             pass custom task specs for other widths"
        )));
    }
    let d_pat = pattern_dims(d_in);
    let mut tasks = Vec::with_capacity(5);
    for (t, name) in DEFAULT_NAMES.iter().enumerate() {
        let mut center = vec![0.0; d_in];
        for (j, c) in center.iter_mut().enumerate().take(d_pat) {
            *c = 0.8 * f64::from(SIGN_TABLE[t][j % 12]);
        }
        tasks.push(TaskSpec {
            id: t,
            name: (*name).to_string(),
            center: Tensor::vector(center),
            pattern: DEFAULT_PATTERNS[t],
            noise: DEFAULT_NOISE,
            template: ResponseTemplate {
                lead: TOK_LEAD_BASE + t as u32,
                content_base: TOK_CONTENT_BASE + 16 * t as u32,
            },
        });
    }
    Ok(tasks)
}

fn validate_tasks(tasks: &[TaskSpec]) -> Result<usize> {
    if tasks.is_empty() {
        return Err(MoweError::invalid("generate: no tasks given"));
    }
    let d_in = tasks[0].center.numel();
    for (i, task) in tasks.iter().enumerate() {
        if task.id != i {
            return Err(MoweError::invalid(format!(
                "task ids must be dense and ordered; slot {i} holds id {}",
                task.id
            )));
        }
        if task.center.numel() != d_in {
            return Err(MoweError::invalid(format!(
                "task {}: center has {} dims, expected {d_in}",
                task.name,
                task.center.numel()
            )));
        }
        if task.noise < 0.0 {
            return Err(MoweError::invalid(format!(
                "task {}: negative noise scale",
                task.name
            )));
        }
    }
    for a in 0..tasks.len() {
        for b in a + 1..tasks.len() {
            let dist = tasks[a]
                .center
                .data()
                .iter()
                .zip(tasks[b].center.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            let need = 4.0 * tasks[a].noise.max(tasks[b].noise);
            if dist < need {
                return Err(MoweError::invalid(format!(
                    "tasks {} and {} have center distance {dist:.4}, below 4× noise = {need:.4}",
                    tasks[a].name, tasks[b].name
                )));
            }
        }
    }
    Ok(d_in)
}

/// Generate `n_per_task` samples for every task. Deterministic per
/// (tasks, seq_len, n, seed); each task draws from its own stream, so the
/// per-task work is order-independent.
pub fn generate(tasks: &[TaskSpec], seq_len: usize, n_per_task: usize, seed: u64) -> Result<Dataset> {
    let d_in = validate_tasks(tasks)?;
    if seq_len == 0 {
        return Err(MoweError::invalid("generate: seq_len must be positive"));
    }
    let d_pat = pattern_dims(d_in);
    let mut samples = Vec::with_capacity(tasks.len() * n_per_task);
    for task in tasks {
        let mut rng = Rng::new(seed, &format!("data.task{}", task.id));
        for i in 0..n_per_task {
            let level = rng.below(N_CONTENT_LEVELS);
            let content = level as f64 * CONTENT_GAIN * task.noise;
            let mut data = Vec::with_capacity(seq_len * d_in);
            for t in 0..seq_len {
                for j in 0..d_in {
                    let base = if j < d_pat {
                        task.center.data()[j] + pattern_wave(task.pattern, t, j, seq_len)
                    } else {
                        task.center.data()[j] + content
                    };
                    let v = base + task.noise * rng.normal();
                    data.push(v as f32 as f64);
                }
            }
            let features = Tensor::new(vec![seq_len, d_in], data)?;
            let bucket = content_bucket(&features, task.noise);
            samples.push(FeatureSequence {
                features,
                task: task.id,
                instruction: vec![TOK_BOS, TOK_TASK_BASE + task.id as u32, TOK_SEP],
                target: task.template.tokens(bucket),
                sample_id: (task.id * n_per_task + i) as u64,
            });
        }
    }
    Ok(Dataset {
        seq_len,
        d_in,
        tasks: tasks.to_vec(),
        samples,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn task_name(&self, id: usize) -> &str {
        self.tasks
            .get(id)
            .map(|t| t.name.as_str())
            .unwrap_or("unknown")
    }

    /// Samples belonging to one task, keeping the full task table.
    pub fn retain_tasks(&self, keep: &[usize]) -> Dataset {
        Dataset {
            seq_len: self.seq_len,
            d_in: self.d_in,
            tasks: self.tasks.clone(),
            samples: self
                .samples
                .iter()
                .filter(|s| keep.contains(&s.task))
                .cloned()
                .collect(),
        }
    }

    /// Stratified split: per task, a seeded shuffle then a
    /// `round(fraction · n)` prefix into train.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..=1.0).contains(&train_fraction) {
            return Err(MoweError::invalid(format!(
                "split: train fraction {train_fraction} outside [0, 1]"
            )));
        }
        let mut train = Vec::new();
        let mut eval = Vec::new();
        for task in &self.tasks {
            let mut idx: Vec<usize> = self
                .samples
                .iter()
                .enumerate()
                .filter(|(_, s)| s.task == task.id)
                .map(|(i, _)| i)
                .collect();
            let mut rng = Rng::new(seed, &format!("split.task{}", task.id));
            rng.shuffle(&mut idx);
            let n_train = (train_fraction * idx.len() as f64).round() as usize;
            let n_train = n_train.min(idx.len());
            for (k, &i) in idx.iter().enumerate() {
                if k < n_train {
                    train.push(self.samples[i].clone());
                } else {
                    eval.push(self.samples[i].clone());
                }
            }
        }
        let make = |samples: Vec<FeatureSequence>| Dataset {
            seq_len: self.seq_len,
            d_in: self.d_in,
            tasks: self.tasks.clone(),
            samples,
        };
        Ok((make(train), make(eval)))
    }

    // ── disk format ─────────────────────────────────────────────────

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)
            .map_err(|e| MoweError::io(format!("creating {}", dir.display()), e))?;
        let manifest = Manifest {
            format_version: BLOB_VERSION,
            seq_len: self.seq_len,
            d_in: self.d_in,
            tasks: self.tasks.clone(),
            samples: self
                .samples
                .iter()
                .map(|s| SampleMeta {
                    task: s.task,
                    instruction: s.instruction.clone(),
                    target: s.target.clone(),
                    sample_id: s.sample_id,
                })
                .collect(),
        };
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| MoweError::format(dir.join("dataset.json"), e.to_string()))?;
        fs::write(dir.join("dataset.json"), json)
            .map_err(|e| MoweError::io("writing dataset.json", e))?;

        let mut blob = Vec::with_capacity(
            24 + self.samples.len() * self.seq_len * self.d_in * 4,
        );
        blob.extend_from_slice(BLOB_MAGIC);
        blob.extend_from_slice(&BLOB_VERSION.to_le_bytes());
        blob.extend_from_slice(&(self.seq_len as u32).to_le_bytes());
        blob.extend_from_slice(&(self.d_in as u32).to_le_bytes());
        blob.extend_from_slice(&(self.samples.len() as u64).to_le_bytes());
        for s in &self.samples {
            for &v in s.features.data() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        fs::write(dir.join("features.bin"), blob)
            .map_err(|e| MoweError::io("writing features.bin", e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest_path = dir.join("dataset.json");
        let json = fs::read_to_string(&manifest_path)
            .map_err(|e| MoweError::io(format!("reading {}", manifest_path.display()), e))?;
        let manifest: Manifest = serde_json::from_str(&json)
            .map_err(|e| MoweError::format(&manifest_path, e.to_string()))?;
        if manifest.format_version != BLOB_VERSION {
            return Err(MoweError::format(
                &manifest_path,
                format!(
                    "format version {} unsupported (expected {BLOB_VERSION})",
                    manifest.format_version
                ),
            ));
        }

        let blob_path = dir.join("features.bin");
        let mut file = fs::File::open(&blob_path)
            .map_err(|e| MoweError::io(format!("opening {}", blob_path.display()), e))?;
        let mut header = [0u8; 28];
        file.read_exact(&mut header)
            .map_err(|e| MoweError::io("reading feature blob header", e))?;
        if &header[0..8] != BLOB_MAGIC {
            return Err(MoweError::format(&blob_path, "bad magic bytes".to_string()));
        }
        let version = u32::from_le_bytes(header[8..12].try_into().unwrap());
        let seq_len = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
        let d_in = u32::from_le_bytes(header[16..20].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(header[20..28].try_into().unwrap()) as usize;
        if version != BLOB_VERSION {
            return Err(MoweError::format(
                &blob_path,
                format!("blob version {version} unsupported (expected {BLOB_VERSION})"),
            ));
        }
        if seq_len != manifest.seq_len || d_in != manifest.d_in || count != manifest.samples.len() {
            return Err(MoweError::format(
                &blob_path,
                format!(
                    "blob header (S={seq_len}, d_in={d_in}, count={count}) disagrees with \
                     manifest (S={}, d_in={}, count={})",
                    manifest.seq_len,
                    manifest.d_in,
                    manifest.samples.len()
                ),
            ));
        }

        let mut raw = Vec::new();
        file.read_to_end(&mut raw)
            .map_err(|e| MoweError::io("reading feature blob", e))?;
        let expected = count * seq_len * d_in * 4;
        if raw.len() != expected {
            return Err(MoweError::format(
                &blob_path,
                format!("blob payload is {} bytes, expected {expected}", raw.len()),
            ));
        }

        let per_sample = seq_len * d_in;
        let mut samples = Vec::with_capacity(count);
        for (i, meta) in manifest.samples.into_iter().enumerate() {
            let start = i * per_sample * 4;
            let mut data = Vec::with_capacity(per_sample);
            for k in 0..per_sample {
                let off = start + k * 4;
                let bits: [u8; 4] = raw[off..off + 4].try_into().unwrap();
                data.push(f64::from(f32::from_le_bytes(bits)));
            }
            samples.push(FeatureSequence {
                features: Tensor::new(vec![seq_len, d_in], data)?,
                task: meta.task,
                instruction: meta.instruction,
                target: meta.target,
                sample_id: meta.sample_id,
            });
        }
        Ok(Dataset {
            seq_len,
            d_in,
            tasks: manifest.tasks,
            samples,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    seq_len: usize,
    d_in: usize,
    tasks: Vec<TaskSpec>,
    samples: Vec<SampleMeta>,
}

#[derive(Serialize, Deserialize)]
struct SampleMeta {
    task: usize,
    instruction: Vec<u32>,
    target: Vec<u32>,
    sample_id: u64,
}

//! Linear probe on frozen embeddings.
//!
//! Training keeps parameters in f64 and runs as one sequential stream of
//! updates, so a (data, config, seed) triple always produces the same model
//! bit for bit. The exported [`ProbeModel`] is f32.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::StyleLabel;
use crate::embed::EmbeddingMatrix;
use crate::rng::{derive_seed, SplitRng};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"PRBV1";

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("dimension mismatch: expected {want}, got {got}")]
    DimMismatch { want: usize, got: usize },
    #[error("{0} batch is empty")]
    EmptyBatch(&'static str),
    #[error("{0} set is empty")]
    EmptySet(&'static str),
    #[error("label {0} is not one of the probe classes")]
    UnknownLabel(StyleLabel),
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("truncated checkpoint at offset {0}")]
    Truncated(usize),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint metadata: {0}")]
    Json(#[from] serde_json::Error),
}

/// Mean softmax cross-entropy over a `B x C` row-major logit matrix.
/// Returns the loss and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &[f64], c: usize, labels: &[usize]) -> Result<(f64, Vec<f64>), ProbeError> {
    let b = labels.len();
    if logits.len() != b * c {
        return Err(ProbeError::DimMismatch {
            want: b * c,
            got: logits.len(),
        });
    }
    if b == 0 {
        return Err(ProbeError::EmptyBatch("logit"));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(ProbeError::NonFinite("logits"));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; b * c];
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(ProbeError::LabelOutOfRange { label: y, classes: c });
        }
        let row = &logits[i * c..(i + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[y];
        let g = &mut grad[i * c..(i + 1) * c];
        for k in 0..c {
            g[k] = (row[k] - log_z).exp() / b as f64;
        }
        g[y] -= 1.0 / b as f64;
    }
    Ok((loss / b as f64, grad))
}

/// Probe parameters during training: `W` is `C x d` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub c: usize,
    pub d: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Params {
    pub fn zeros(c: usize, d: usize) -> Self {
        Self {
            c,
            d,
            w: vec![0.0; c * d],
            b: vec![0.0; c],
        }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len() / self.d.max(1);
        let mut out = Vec::with_capacity(n * self.c);
        for row in x.chunks_exact(self.d.max(1)).take(n) {
            for k in 0..self.c {
                let w = &self.w[k * self.d..(k + 1) * self.d];
                out.push(self.b[k] + w.iter().zip(row).map(|(a, b)| a * b).sum::<f64>());
            }
        }
        out
    }
}

/// Gradients with the same layout as [`Params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

/// Labelled feature rows, `n x d` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub d: usize,
    pub x: Vec<f64>,
    pub y: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn gather(&self, indices: &[usize]) -> Batch {
        let mut x = Vec::with_capacity(indices.len() * self.d);
        for &i in indices {
            x.extend_from_slice(self.row(i));
        }
        Batch {
            d: self.d,
            x,
            y: indices.iter().map(|&i| self.y[i]).collect(),
        }
    }

    /// Rows of `m` labelled by their position in `classes`.
    pub fn from_matrix(m: &EmbeddingMatrix, classes: &[StyleLabel]) -> Result<Batch, ProbeError> {
        let y = m
            .manifest
            .iter()
            .map(|r| classes.iter().position(|&c| c == r.label).ok_or(ProbeError::UnknownLabel(r.label)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Batch {
            d: m.d,
            x: m.data.iter().map(|&v| v as f64).collect(),
            y,
        })
    }
}

/// Mean cross-entropy of the probe on one batch, with parameter gradients.
pub fn ce_loss(p: &Params, batch: &Batch, which: &'static str) -> Result<(f64, Grads), ProbeError> {
    if batch.is_empty() {
        return Err(ProbeError::EmptyBatch(which));
    }
    if batch.d != p.d {
        return Err(ProbeError::DimMismatch { want: p.d, got: batch.d });
    }
    let logits = p.logits(&batch.x);
    let (loss, g) = softmax_cross_entropy(&logits, p.c, &batch.y)?;
    let mut gw = vec![0.0; p.c * p.d];
    let mut gb = vec![0.0; p.c];
    for i in 0..batch.len() {
        let x = batch.row(i);
        for k in 0..p.c {
            let gk = g[i * p.c + k];
            gb[k] += gk;
            for (dst, &xj) in gw[k * p.d..(k + 1) * p.d].iter_mut().zip(x) {
                *dst += gk * xj;
            }
        }
    }
    Ok((loss, Grads { w: gw, b: gb }))
}

/// `CE(real) + CE(syn)`, each a batch mean, with summed gradients.
pub fn combined_loss(p: &Params, real: &Batch, syn: &Batch) -> Result<(f64, Grads), ProbeError> {
    let (lr, gr) = ce_loss(p, real, "real")?;
    let (ls, gs) = ce_loss(p, syn, "synthetic")?;
    Ok((
        lr + ls,
        Grads {
            w: gr.w.iter().zip(&gs.w).map(|(a, b)| a + b).collect(),
            b: gr.b.iter().zip(&gs.b).map(|(a, b)| a + b).collect(),
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// `None` means `min(32, n_real)`.
    pub real_batch: Option<usize>,
    pub syn_batch: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            real_batch: None,
            syn_batch: 512,
            patience: 5,
            max_epochs: 200,
            seed: 0,
        }
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m_w: Vec<f64>,
    pub v_w: Vec<f64>,
    pub m_b: Vec<f64>,
    pub v_b: Vec<f64>,
}

impl AdamState {
    pub fn new(p: &Params) -> Self {
        Self {
            t: 0,
            m_w: vec![0.0; p.w.len()],
            v_w: vec![0.0; p.w.len()],
            m_b: vec![0.0; p.b.len()],
            v_b: vec![0.0; p.b.len()],
        }
    }
}

fn adam_update(p: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64], cfg: &TrainConfig, t: u64, decay: f64) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..p.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] = p[i] - cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps)) - cfg.lr * decay * p[i];
    }
}

/// One AdamW update with decoupled weight decay on `W` only.
pub fn adamw_step(p: &mut Params, state: &mut AdamState, g: &Grads, cfg: &TrainConfig) -> Result<(), ProbeError> {
    if g.w.len() != p.w.len() || g.b.len() != p.b.len() {
        return Err(ProbeError::DimMismatch {
            want: p.w.len() + p.b.len(),
            got: g.w.len() + g.b.len(),
        });
    }
    if g.w.iter().chain(&g.b).any(|x| !x.is_finite()) {
        return Err(ProbeError::NonFinite("gradients"));
    }
    state.t += 1;
    adam_update(&mut p.w, &mut state.m_w, &mut state.v_w, &g.w, cfg, state.t, cfg.weight_decay);
    adam_update(&mut p.b, &mut state.m_b, &mut state.v_b, &g.b, cfg, state.t, 0.0);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Patience-based early stopping on validation loss.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best_loss: f64,
    pub best_epoch: usize,
    pub bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience: patience.max(1),
            best_loss: f64::INFINITY,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if loss < self.best_loss {
            self.best_loss = loss;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            return StopDecision::Improved;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Trained classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub classes: Vec<StyleLabel>,
    pub c: usize,
    pub d: usize,
    pub w: Vec<f32>,
    pub b: Vec<f32>,
}

impl ProbeModel {
    pub fn from_params(p: &Params, classes: &[StyleLabel]) -> Self {
        Self {
            classes: classes.to_vec(),
            c: p.c,
            d: p.d,
            w: p.w.iter().map(|&v| v as f32).collect(),
            b: p.b.iter().map(|&v| v as f32).collect(),
        }
    }

    /// Class index per row; ties go to the lowest index.
    pub fn predict_indices(&self, x: &[f32], d: usize) -> Result<Vec<usize>, ProbeError> {
        if d != self.d {
            return Err(ProbeError::DimMismatch { want: self.d, got: d });
        }
        Ok(x.chunks_exact(d.max(1))
            .map(|row| {
                let mut best = 0;
                let mut best_score = f64::NEG_INFINITY;
                for k in 0..self.c {
                    let w = &self.w[k * d..(k + 1) * d];
                    let s = self.b[k] as f64 + w.iter().zip(row).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>();
                    if s > best_score {
                        best_score = s;
                        best = k;
                    }
                }
                best
            })
            .collect())
    }

    pub fn predict(&self, m: &EmbeddingMatrix) -> Result<Vec<StyleLabel>, ProbeError> {
        if m.n == 0 {
            return Ok(Vec::new());
        }
        Ok(self
            .predict_indices(&m.data, m.d)?
            .into_iter()
            .map(|k| self.classes[k])
            .collect())
    }
}

/// Mean validation cross-entropy and accuracy.
pub fn evaluate(p: &Params, batch: &Batch) -> Result<(f64, f64), ProbeError> {
    let logits = p.logits(&batch.x);
    let (loss, _) = softmax_cross_entropy(&logits, p.c, &batch.y)?;
    let correct = logits
        .chunks_exact(p.c)
        .zip(&batch.y)
        .filter(|(row, &y)| {
            let mut best = 0;
            for k in 1..p.c {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best == y
        })
        .count();
    Ok((loss, correct as f64 / batch.len() as f64))
}

/// Minimises `CE(real batch) + CE(synthetic batch)` with AdamW.
///
/// An epoch is one shuffled pass over the real rows in batches of
/// `real_batch`; every step also draws `syn_batch` synthetic rows with
/// replacement. Without synthetic data each step is plain CE on the real
/// batch. After each epoch the real validation loss drives early stopping,
/// and the parameters from the best epoch are returned.
pub fn train_probe(
    real: &EmbeddingMatrix,
    syn: Option<&EmbeddingMatrix>,
    val: &EmbeddingMatrix,
    classes: &[StyleLabel],
    cfg: &TrainConfig,
) -> Result<(ProbeModel, History), ProbeError> {
    if real.n == 0 {
        return Err(ProbeError::EmptySet("real"));
    }
    if val.n == 0 {
        return Err(ProbeError::EmptySet("validation"));
    }
    let d = real.d;
    for m in [Some(val), syn].into_iter().flatten() {
        if m.d != d {
            return Err(ProbeError::DimMismatch { want: d, got: m.d });
        }
    }
    let real_b = Batch::from_matrix(real, classes)?;
    let val_b = Batch::from_matrix(val, classes)?;
    let syn_b = match syn {
        Some(s) if s.n == 0 => return Err(ProbeError::EmptySet("synthetic")),
        Some(s) => Some(Batch::from_matrix(s, classes)?),
        None => None,
    };

    let mut params = Params::zeros(classes.len(), d);
    let mut state = AdamState::new(&params);
    let mut best = params.clone();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut rng = SplitRng::new(cfg.seed);
    let mut syn_rng = SplitRng::new(derive_seed(cfg.seed, &["synthetic"]));
    let batch_size = cfg.real_batch.unwrap_or(32).min(real_b.len()).max(1);
    let mut order: Vec<usize> = (0..real_b.len()).collect();
    let mut epochs = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(batch_size) {
            let rb = real_b.gather(chunk);
            let (loss, grads) = match &syn_b {
                Some(sb) => {
                    let idx: Vec<usize> = (0..cfg.syn_batch.max(1))
                        .map(|_| syn_rng.below(sb.len() as u64) as usize)
                        .collect();
                    combined_loss(&params, &rb, &sb.gather(&idx))?
                }
                None => ce_loss(&params, &rb, "real")?,
            };
            adamw_step(&mut params, &mut state, &grads, cfg)?;
            loss_sum += loss;
            steps += 1;
        }
        let (val_loss, val_accuracy) = evaluate(&params, &val_b)?;
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / steps as f64,
            val_loss,
            val_accuracy,
        });
        match stopper.observe(epoch, val_loss) {
            StopDecision::Improved => best = params.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_early = true;
                break;
            }
        }
    }
    if stopper.best_epoch == 0 {
        // validation loss was never finite; keep the last parameters
        best = params;
    }
    Ok((
        ProbeModel::from_params(&best, classes),
        History {
            epochs,
            best_epoch: stopper.best_epoch,
            best_val_loss: stopper.best_loss,
            stopped_early,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub classes: Vec<StyleLabel>,
    pub config: TrainConfig,
    pub best_epoch: usize,
}

fn meta_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    path.with_file_name(name)
}

pub fn save_checkpoint(model: &ProbeModel, cfg: &TrainConfig, best_epoch: usize, path: &Path) -> Result<(), ProbeError> {
    let mut out = Vec::with_capacity(13 + 4 * (model.w.len() + model.b.len()));
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(model.c as u32).to_le_bytes());
    out.extend_from_slice(&(model.d as u32).to_le_bytes());
    for v in model.w.iter().chain(&model.b) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |source| ProbeError::Io { path: p, source }
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io(parent))?;
    }
    fs::write(path, out).map_err(io(path))?;
    let meta = CheckpointMeta {
        classes: model.classes.clone(),
        config: cfg.clone(),
        best_epoch,
    };
    let mp = meta_path(path);
    fs::write(&mp, serde_json::to_string_pretty(&meta)?).map_err(io(&mp))
}

pub fn load_checkpoint(path: &Path) -> Result<(ProbeModel, CheckpointMeta), ProbeError> {
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |source| ProbeError::Io { path: p, source }
    };
    let bytes = fs::read(path).map_err(io(path))?;
    if bytes.len() < 5 || &bytes[..5] != CHECKPOINT_MAGIC {
        return Err(ProbeError::BadMagic);
    }
    if bytes.len() < 13 {
        return Err(ProbeError::Truncated(5));
    }
    let c = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let want = 13 + 4 * (c * d + c);
    if bytes.len() < want {
        return Err(ProbeError::Truncated(bytes.len()));
    }
    let vals: Vec<f32> = bytes[13..want]
        .chunks_exact(4)
        .map(|ch| f32::from_le_bytes(ch.try_into().unwrap()))
        .collect();
    let mp = meta_path(path);
    let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(&mp).map_err(io(&mp))?)?;
    Ok((
        ProbeModel {
            classes: meta.classes.clone(),
            c,
            d,
            w: vals[..c * d].to_vec(),
            b: vals[c * d..].to_vec(),
        },
        meta,
    ))
}

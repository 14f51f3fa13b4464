//! Utterance-level depression detectors and the subject-level protocol:
//! class-balanced crop training, top-longest utterance scoring, majority vote.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use depflow_nn::{AdamW, Conv1d, Linear, ParamStore, Session, Var};
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{classification_report, mean_std, ClassificationReport};
use crate::seed::{derive_seed, digest, stream};
use crate::world::{crop_at, select_eval_utterances, Utterance, CROP_FRAMES};

pub const EVAL_UTTERANCES: usize = 20;

/// Reference subject macro-F1 without and with the augmentation on the clinical corpus.
pub const REFERENCE_GAINS: [(&str, f64, f64); 3] = [
    ("DepAudioNet", 0.482, 0.526),
    ("NUSD", 0.514, 0.577),
    ("HAREN-CTC", 0.525, 0.551),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Convolution, temporal pooling, then a gated recurrent layer.
    ConvRecurrent,
    /// Stacked convolutions with mean/std statistics pooling.
    PooledTdnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    None,
    /// Extra synthetic training utterances supplied by the caller.
    Cdoa,
    Mixup,
    SpecAug,
    CropJitter,
}

impl Augmentation {
    pub fn name(self) -> &'static str {
        match self {
            Augmentation::None => "none",
            Augmentation::Cdoa => "cdoa",
            Augmentation::Mixup => "mixup",
            Augmentation::SpecAug => "specaug",
            Augmentation::CropJitter => "crop_jitter",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub architecture: Architecture,
    pub augmentation: Augmentation,
    pub frame_dim: usize,
    /// Subtract each utterance's mean frame before standardization.
    pub utterance_cmn: bool,
    pub channels: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub epochs: usize,
    /// Crops drawn per epoch; 0 means one per training utterance.
    pub samples_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub crop_frames: usize,
    pub mixup_alpha: f64,
    pub time_mask: usize,
    pub feature_mask: usize,
    pub jitter_min_frames: usize,
    pub eval_utterances: usize,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::PooledTdnn,
            augmentation: Augmentation::None,
            frame_dim: 16,
            utterance_cmn: true,
            channels: 32,
            hidden: 32,
            kernel: 5,
            epochs: 10,
            samples_per_epoch: 0,
            batch_size: 32,
            lr: 2e-3,
            weight_decay: 1e-4,
            crop_frames: CROP_FRAMES,
            mixup_alpha: 0.2,
            time_mask: 10,
            feature_mask: 3,
            jitter_min_frames: 50,
            eval_utterances: EVAL_UTTERANCES,
            seed: 0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frame_dim", self.frame_dim),
            ("channels", self.channels),
            ("hidden", self.hidden),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("crop_frames", self.crop_frames),
            ("eval_utterances", self.eval_utterances),
            ("jitter_min_frames", self.jitter_min_frames),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if self.kernel % 2 == 0 {
            return Err(Error::config("kernel", "must be odd"));
        }
        if self.jitter_min_frames > self.crop_frames {
            return Err(Error::config("jitter_min_frames", "exceeds crop_frames"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be nonnegative"));
        }
        if !(self.mixup_alpha > 0.0) {
            return Err(Error::config("mixup_alpha", "must be positive"));
        }
        if self.feature_mask >= self.frame_dim {
            return Err(Error::config("feature_mask", "must be below frame_dim"));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.into(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn digest(&self) -> String {
        digest(self.to_text().as_bytes())
    }
}

#[derive(Debug, Clone, Copy)]
struct Gru {
    xz: Linear,
    hz: Linear,
    xr: Linear,
    hr: Linear,
    xn: Linear,
    hn: Linear,
}

#[derive(Debug, Clone, Copy)]
enum Layers {
    ConvRecurrent { conv: Conv1d, gru: Gru, out: Linear },
    PooledTdnn { conv1: Conv1d, conv2: Conv1d, hidden: Linear, out: Linear },
}

/// Temporal pooling factor of the recurrent family.
const RECURRENT_POOL: usize = 4;

#[derive(Debug, Clone)]
pub struct Detector {
    pub config: DetectorConfig,
    pub store: ParamStore,
    /// Per-dimension input standardization fitted on the training frames.
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    /// Subjects seen in training, real or synthetic.
    pub train_subjects: Vec<String>,
    layers: Layers,
}

fn block_average(rows: usize, block: usize) -> Array2<f64> {
    let mut p = Array2::zeros((rows / block, rows));
    for i in 0..rows / block {
        for j in 0..block {
            p[[i, i * block + j]] = 1.0 / block as f64;
        }
    }
    p
}

fn block_spread(rows: usize, block: usize) -> Array2<f64> {
    let mut u = Array2::zeros((rows, rows / block));
    for i in 0..rows {
        u[[i, i / block]] = 1.0;
    }
    u
}

impl Detector {
    pub fn new(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = stream(config.seed, &["detector", "init"]);
        let (c, h) = (config.channels, config.hidden);
        let layers = match config.architecture {
            Architecture::ConvRecurrent => {
                let conv = Conv1d::new(&mut store, "conv", config.frame_dim, c, config.kernel, &mut rng);
                let mut lin = |name: &str, i: usize, o: usize| Linear::new(&mut store, name, i, o, &mut rng);
                let gru = Gru {
                    xz: lin("gru.xz", c, h),
                    hz: lin("gru.hz", h, h),
                    xr: lin("gru.xr", c, h),
                    hr: lin("gru.hr", h, h),
                    xn: lin("gru.xn", c, h),
                    hn: lin("gru.hn", h, h),
                };
                let out = lin("out", h, 2);
                Layers::ConvRecurrent { conv, gru, out }
            }
            Architecture::PooledTdnn => {
                let conv1 = Conv1d::new(&mut store, "conv1", config.frame_dim, c, config.kernel, &mut rng);
                let conv2 = Conv1d::new(&mut store, "conv2", c, c, config.kernel, &mut rng);
                let hidden = Linear::new(&mut store, "hidden", 2 * c, h, &mut rng);
                let out = Linear::new(&mut store, "out", h, 2, &mut rng);
                Layers::PooledTdnn { conv1, conv2, hidden, out }
            }
        };
        Ok(Self {
            feature_mean: vec![0.0; config.frame_dim],
            feature_std: vec![1.0; config.frame_dim],
            train_subjects: Vec::new(),
            config,
            store,
            layers,
        })
    }

    pub fn fit_normalization(&mut self, utterances: &[&Utterance]) -> Result<()> {
        let dim = self.config.frame_dim;
        let mut sum = Array1::<f64>::zeros(dim);
        let mut sq = Array1::<f64>::zeros(dim);
        let mut n = 0.0;
        for u in utterances {
            if u.frames.ncols() != dim {
                return Err(Error::Shape(format!("utterance {} has {} dims, expected {dim}", u.id, u.frames.ncols())));
            }
            let f = self.centered(&u.frames);
            sum += &f.sum_axis(Axis(0));
            sq += &f.mapv(|v| v * v).sum_axis(Axis(0));
            n += u.n_frames() as f64;
        }
        if n == 0.0 {
            return Err(Error::Empty("no frames to fit normalization".into()));
        }
        let mean = &sum / n;
        let var = &sq / n - &mean * &mean;
        self.feature_mean = mean.to_vec();
        self.feature_std = var.iter().map(|v| v.max(1e-8).sqrt()).collect();
        Ok(())
    }

    fn centered(&self, frames: &Array2<f64>) -> Array2<f64> {
        match frames.mean_axis(Axis(0)) {
            Some(m) if self.config.utterance_cmn => frames - &m,
            _ => frames.clone(),
        }
    }

    pub fn normalize(&self, frames: &Array2<f64>) -> Array2<f64> {
        let mean = Array1::from(self.feature_mean.clone());
        let std = Array1::from(self.feature_std.clone());
        (self.centered(frames) - &mean) / &std
    }

    /// Logits `[B × 2]` for `B` normalized sequences sharing one length.
    fn forward(&self, s: &Session, batch: &[Array2<f64>]) -> Result<Var> {
        let len = batch.first().map(|b| b.nrows()).ok_or_else(|| Error::Empty("detector batch".into()))?;
        if batch.iter().any(|b| b.nrows() != len) {
            return Err(Error::Shape("batch sequences must share a length".into()));
        }
        let b = batch.len();
        match self.layers {
            Layers::ConvRecurrent { conv, gru, out } => {
                let steps = (len / RECURRENT_POOL).max(1);
                let pool = if len >= RECURRENT_POOL {
                    let mut p = block_average(steps * RECURRENT_POOL, RECURRENT_POOL);
                    if steps * RECURRENT_POOL < len {
                        let mut wide = Array2::zeros((steps, len));
                        wide.slice_mut(ndarray::s![.., ..steps * RECURRENT_POOL]).assign(&p);
                        p = wide;
                    }
                    p
                } else {
                    Array2::from_elem((1, len), 1.0 / len as f64)
                };
                let pool = s.input(pool);
                let pooled: Vec<Var> = batch
                    .iter()
                    .map(|x| s.matmul(pool, s.relu(conv.forward(s, s.input(x.clone())))))
                    .collect();
                // row i * steps + t holds step t of sequence i
                let stacked = s.concat_rows(&pooled);
                let mut h = s.input(Array2::zeros((b, self.config.hidden)));
                let mut acc: Option<Var> = None;
                for t in 0..steps {
                    let idx: Vec<usize> = (0..b).map(|i| i * steps + t).collect();
                    let x = s.gather_rows(stacked, &idx);
                    let z = s.sigmoid(s.add(gru.xz.forward(s, x), gru.hz.forward(s, h)));
                    let r = s.sigmoid(s.add(gru.xr.forward(s, x), gru.hr.forward(s, h)));
                    let n = s.tanh(s.add(gru.xn.forward(s, x), gru.hn.forward(s, s.mul(r, h))));
                    h = s.add(n, s.mul(z, s.sub(h, n)));
                    acc = Some(acc.map_or(h, |a| s.add(a, h)));
                }
                let mean_h = s.scale(acc.expect("at least one step"), 1.0 / steps as f64);
                Ok(out.forward(s, mean_h))
            }
            Layers::PooledTdnn { conv1, conv2, hidden, out } => {
                let feats: Vec<Var> = batch
                    .iter()
                    .map(|x| {
                        let h1 = s.relu(conv1.forward(s, s.input(x.clone())));
                        s.relu(conv2.forward(s, h1))
                    })
                    .collect();
                let h = s.concat_rows(&feats);
                let avg = s.input(block_average(b * len, len));
                let spread = s.input(block_spread(b * len, len));
                let mean = s.matmul(avg, h);
                let centered = s.sub(h, s.matmul(spread, mean));
                let std = s.sqrt(s.add_scalar(s.matmul(avg, s.square(centered)), 1e-6));
                let stats = s.concat_cols(&[mean, std]);
                Ok(out.forward(s, s.relu(hidden.forward(s, stats))))
            }
        }
    }

    /// Probability of the depressed class for one utterance, scored whole.
    pub fn score(&self, frames: &Array2<f64>) -> Result<f64> {
        if frames.nrows() == 0 {
            return Err(Error::Empty("utterance with no frames".into()));
        }
        let s = Session::eval(&self.store);
        let logits = self.forward(&s, &[self.normalize(frames)])?;
        let v = s.value(logits);
        Ok(depflow_nn::sigmoid(v[[0, 1]] - v[[0, 0]]))
    }

    pub fn predict(&self, frames: &Array2<f64>) -> Result<bool> {
        Ok(self.score(frames)? >= 0.5)
    }

    fn meta(&self) -> Result<String> {
        Ok(serde_json::to_string(&DetectorMeta {
            kind: "detector".into(),
            config: self.config.clone(),
            config_digest: self.config.digest(),
            feature_mean: self.feature_mean.clone(),
            feature_std: self.feature_std.clone(),
            train_subjects: self.train_subjects.clone(),
        })?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        depflow_nn::write_checkpoint(&mut buf, &self.meta()?, &self.store)?;
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (meta, stored) = depflow_nn::read_checkpoint(bytes.as_slice())?;
        let meta: DetectorMeta = serde_json::from_str(&meta)?;
        if meta.kind != "detector" {
            return Err(Error::Parse {
                path: path.display().to_string(),
                reason: format!("checkpoint kind {} is not detector", meta.kind),
            });
        }
        if meta.config.digest() != meta.config_digest {
            return Err(Error::DigestMismatch {
                stage: "detector".into(),
                stored: meta.config_digest,
                current: meta.config.digest(),
            });
        }
        let mut model = Self::new(meta.config)?;
        let copied = model.store.load_matching(&stored);
        if copied != model.store.len() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                reason: format!("checkpoint holds {copied} of {} tensors", model.store.len()),
            });
        }
        model.feature_mean = meta.feature_mean;
        model.feature_std = meta.feature_std;
        model.train_subjects = meta.train_subjects;
        Ok(model)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DetectorMeta {
    kind: String,
    config: DetectorConfig,
    config_digest: String,
    feature_mean: Vec<f64>,
    feature_std: Vec<f64>,
    train_subjects: Vec<String>,
}

/// Cross-entropy against soft two-class targets `[B × 2]`.
fn soft_cross_entropy(s: &Session, logits: Var, targets: Array2<f64>) -> Var {
    let rows = targets.nrows() as f64;
    let picked = s.mul(s.log_softmax_rows(logits), s.input(targets));
    s.scale(s.sum(picked), -1.0 / rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorTrainReport {
    pub log: Vec<DetectorEpoch>,
    pub n_real: usize,
    pub n_augmented: usize,
}

/// Train on `train` plus `extra` (used only when the augmentation is `Cdoa`).
/// Each epoch draws class-balanced random crops.
pub fn train_detector(
    config: DetectorConfig,
    train: &[&Utterance],
    extra: &[&Utterance],
) -> Result<(Detector, DetectorTrainReport)> {
    if train.is_empty() {
        return Err(Error::Empty("detector training split".into()));
    }
    let mut pool: Vec<&Utterance> = train.to_vec();
    if config.augmentation == Augmentation::Cdoa {
        pool.extend_from_slice(extra);
    }
    let by_class: [Vec<&Utterance>; 2] = [
        pool.iter().copied().filter(|u| !u.label()).collect(),
        pool.iter().copied().filter(|u| u.label()).collect(),
    ];
    if by_class.iter().any(|c| c.is_empty()) {
        return Err(Error::MissingLabels("detector training needs both classes".into()));
    }
    let mut model = Detector::new(config.clone())?;
    model.fit_normalization(train)?;
    let mut subjects: Vec<String> = pool.iter().map(|u| u.subject_id.clone()).collect();
    subjects.sort_unstable();
    subjects.dedup();
    model.train_subjects = subjects;
    let mut opt = AdamW::new(config.lr, config.weight_decay).with_clip(5.0);
    let mut rng: ChaCha8Rng = stream(config.seed, &["detector", "train"]);
    let per_epoch = if config.samples_per_epoch == 0 {
        pool.len()
    } else {
        config.samples_per_epoch
    };
    let beta = Beta::new(config.mixup_alpha, config.mixup_alpha).map_err(|e| Error::config("mixup_alpha", e.to_string()))?;
    let mut log = Vec::with_capacity(config.epochs);
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        let (mut loss_sum, mut correct, mut seen, mut batches) = (0.0, 0usize, 0usize, 0usize);
        let mut remaining = per_epoch;
        while remaining > 0 {
            let b = remaining.min(config.batch_size);
            remaining -= b;
            let picks: Vec<&Utterance> = (0..b)
                .map(|i| {
                    let class = (i + step as usize) % 2;
                    by_class[class][rng.random_range(0..by_class[class].len())]
                })
                .collect();
            let mut len = picks.iter().map(|u| u.n_frames()).min().unwrap_or(0).min(config.crop_frames);
            if config.augmentation == Augmentation::CropJitter {
                len = len.min(rng.random_range(config.jitter_min_frames..=config.crop_frames));
            }
            if len == 0 {
                return Err(Error::Empty("training utterance with no frames".into()));
            }
            let mut inputs: Vec<Array2<f64>> = picks
                .iter()
                .map(|u| {
                    let start = rng.random_range(0..=u.n_frames() - len);
                    model.normalize(&crop_at(u, start, len).frames)
                })
                .collect();
            let labels: Vec<usize> = picks.iter().map(|u| usize::from(u.label())).collect();
            let mut targets = Array2::zeros((b, 2));
            for (i, &y) in labels.iter().enumerate() {
                targets[[i, y]] = 1.0;
            }
            match config.augmentation {
                Augmentation::Mixup => {
                    let partner: Vec<usize> = (0..b).map(|_| rng.random_range(0..b)).collect();
                    let originals = inputs.clone();
                    let orig_targets = targets.clone();
                    for i in 0..b {
                        let lam: f64 = beta.sample(&mut rng);
                        let j = partner[i];
                        inputs[i] = &originals[i] * lam + &originals[j] * (1.0 - lam);
                        let row = &orig_targets.row(i) * lam + &orig_targets.row(j) * (1.0 - lam);
                        targets.row_mut(i).assign(&row);
                    }
                }
                Augmentation::SpecAug => {
                    for x in inputs.iter_mut() {
                        let tw = rng.random_range(0..=config.time_mask.min(len.saturating_sub(1)));
                        let t0 = rng.random_range(0..=len - tw);
                        x.slice_mut(ndarray::s![t0..t0 + tw, ..]).fill(0.0);
                        let fw = rng.random_range(0..=config.feature_mask);
                        let f0 = rng.random_range(0..=config.frame_dim - fw);
                        x.slice_mut(ndarray::s![.., f0..f0 + fw]).fill(0.0);
                    }
                }
                _ => {}
            }
            step += 1;
            let (grads, loss, preds) = {
                let s = Session::train(&model.store, derive_seed(config.seed, &["detector", "step", &step.to_string()]));
                let logits = model.forward(&s, &inputs)?;
                let loss = soft_cross_entropy(&s, logits, targets);
                let lv = s.scalar(loss);
                let v = s.value(logits).clone();
                let preds: Vec<usize> = v.rows().into_iter().map(|r| usize::from(r[1] > r[0])).collect();
                (s.backward(loss).params().clone(), lv, preds)
            };
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    stage: "detector".into(),
                    detail: format!("epoch {epoch} step {step}: loss {loss}"),
                });
            }
            opt.step(&mut model.store, &grads);
            loss_sum += loss;
            batches += 1;
            correct += preds.iter().zip(&labels).filter(|(p, y)| p == y).count();
            seen += b;
        }
        log.push(DetectorEpoch {
            epoch,
            loss: loss_sum / batches.max(1) as f64,
            train_accuracy: correct as f64 / seen.max(1) as f64,
        });
    }
    if !model.store.all_finite() {
        return Err(Error::NonFinite {
            stage: "detector".into(),
            detail: "parameters became non-finite".into(),
        });
    }
    Ok((
        model,
        DetectorTrainReport {
            log,
            n_real: train.len(),
            n_augmented: if config.augmentation == Augmentation::Cdoa { extra.len() } else { 0 },
        },
    ))
}

/// Subject decision from utterance decisions; a tie counts as depressed.
pub fn majority_vote(decisions: &[bool]) -> bool {
    let pos = decisions.iter().filter(|&&d| d).count();
    2 * pos >= decisions.len()
}

/// Sentiment agrees with the label when a depressed utterance is negative or a
/// healthy one is positive or neutral.
pub fn sentiment_matched(u: &Utterance) -> bool {
    u.label() != u.sentiment.is_benign()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectPrediction {
    pub subject_id: String,
    pub label: bool,
    pub predicted: bool,
    pub n_scored: usize,
    pub n_positive: usize,
    /// Fewer utterances than requested were available.
    pub short: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorEvaluation {
    pub subjects: Vec<SubjectPrediction>,
    pub report: ClassificationReport,
    /// Accuracy over every utterance of the split.
    pub utterance_accuracy: f64,
    pub matched_accuracy: f64,
    pub mismatched_accuracy: f64,
    pub n_matched: usize,
    pub n_mismatched: usize,
}

impl DetectorEvaluation {
    /// Matched minus mismatched utterance accuracy.
    pub fn shortcut_gap(&self) -> f64 {
        self.matched_accuracy - self.mismatched_accuracy
    }
}

/// Evaluate on held-out utterances. Any subject the model was trained on,
/// through real or synthetic data, is rejected.
pub fn evaluate_subjects(model: &Detector, utterances: &[&Utterance]) -> Result<DetectorEvaluation> {
    if utterances.is_empty() {
        return Err(Error::Empty("evaluation split".into()));
    }
    if let Some(u) = utterances
        .iter()
        .find(|u| model.train_subjects.binary_search(&u.subject_id).is_ok())
    {
        return Err(Error::SplitHygiene(format!(
            "evaluation utterance {} belongs to training subject {}",
            u.id, u.subject_id
        )));
    }
    let decisions: BTreeMap<&str, bool> = utterances
        .iter()
        .map(|u| Ok((u.id.as_str(), model.predict(&u.frames)?)))
        .collect::<Result<_>>()?;
    let mut by_subject: BTreeMap<&str, Vec<&Utterance>> = BTreeMap::new();
    for u in utterances {
        by_subject.entry(u.subject_id.as_str()).or_default().push(u);
    }
    let mut subjects = Vec::with_capacity(by_subject.len());
    for (sid, utts) in &by_subject {
        let (chosen, short) = select_eval_utterances(utts, model.config.eval_utterances, |u| u.n_frames(), |u| &u.id);
        let votes: Vec<bool> = chosen.iter().map(|u| decisions[u.id.as_str()]).collect();
        subjects.push(SubjectPrediction {
            subject_id: sid.to_string(),
            label: utts[0].label(),
            predicted: majority_vote(&votes),
            n_scored: votes.len(),
            n_positive: votes.iter().filter(|&&v| v).count(),
            short,
        });
    }
    let y_true: Vec<bool> = subjects.iter().map(|p| p.label).collect();
    let y_pred: Vec<bool> = subjects.iter().map(|p| p.predicted).collect();
    let report = classification_report(&y_true, &y_pred)?;
    let (mut m_ok, mut m_n, mut x_ok, mut x_n) = (0usize, 0usize, 0usize, 0usize);
    for u in utterances {
        let ok = decisions[u.id.as_str()] == u.label();
        if sentiment_matched(u) {
            m_n += 1;
            m_ok += usize::from(ok);
        } else {
            x_n += 1;
            x_ok += usize::from(ok);
        }
    }
    let frac = |a: usize, n: usize| if n == 0 { f64::NAN } else { a as f64 / n as f64 };
    Ok(DetectorEvaluation {
        subjects,
        report,
        utterance_accuracy: frac(m_ok + x_ok, m_n + x_n),
        matched_accuracy: frac(m_ok, m_n),
        mismatched_accuracy: frac(x_ok, x_n),
        n_matched: m_n,
        n_mismatched: x_n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub setting: String,
    pub n_seeds: usize,
    pub macro_f1: MeanStd,
    pub sensitivity: MeanStd,
    pub specificity: MeanStd,
    pub matched_accuracy: MeanStd,
    pub mismatched_accuracy: MeanStd,
    pub shortcut_gap: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
    /// Spreads are sample standard deviations over seeds.
    pub spread: String,
    pub reference: Vec<String>,
}

impl ComparisonTable {
    pub fn row(&self, setting: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.setting == setting)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "setting,n_seeds,macro_f1_mean,macro_f1_std,sensitivity_mean,sensitivity_std,specificity_mean,specificity_std,matched_acc_mean,mismatched_acc_mean,gap_mean,gap_std\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.setting,
                r.n_seeds,
                r.macro_f1.mean,
                r.macro_f1.std,
                r.sensitivity.mean,
                r.sensitivity.std,
                r.specificity.mean,
                r.specificity.std,
                r.matched_accuracy.mean,
                r.mismatched_accuracy.mean,
                r.shortcut_gap.mean,
                r.shortcut_gap.std
            ));
        }
        out
    }
}

/// Aggregate per-seed evaluations of each setting.
pub fn compare_augmentations(runs: &[(String, Vec<DetectorEvaluation>)]) -> Result<ComparisonTable> {
    if runs.len() < 2 {
        return Err(Error::Empty("comparison needs at least two settings".into()));
    }
    let rows = runs
        .iter()
        .map(|(setting, evals)| {
            let col = |f: &dyn Fn(&DetectorEvaluation) -> f64| MeanStd::of(&evals.iter().map(f).collect::<Vec<_>>());
            ComparisonRow {
                setting: setting.clone(),
                n_seeds: evals.len(),
                macro_f1: col(&|e| e.report.macro_f1),
                sensitivity: col(&|e| e.report.sensitivity),
                specificity: col(&|e| e.report.specificity),
                matched_accuracy: col(&|e| e.matched_accuracy),
                mismatched_accuracy: col(&|e| e.mismatched_accuracy),
                shortcut_gap: col(&|e| e.shortcut_gap()),
            }
        })
        .collect();
    Ok(ComparisonTable {
        rows,
        spread: "sample standard deviation over seeds".into(),
        reference: REFERENCE_GAINS
            .iter()
            .map(|(name, a, b)| format!("{name}: macro-F1 {a:.3} -> {b:.3}"))
            .collect(),
    })
}

/// Train and evaluate every config over `seeds`; each config's seed is replaced.
pub fn run_comparison(
    configs: &[DetectorConfig],
    seeds: &[u64],
    train: &[&Utterance],
    augmented: &[&Utterance],
    eval: &[&Utterance],
) -> Result<ComparisonTable> {
    let mut runs = Vec::with_capacity(configs.len());
    for cfg in configs {
        let mut evals = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let c = DetectorConfig { seed, ..cfg.clone() };
            let (model, _) = train_detector(c, train, augmented)?;
            evals.push(evaluate_subjects(&model, eval)?);
        }
        runs.push((cfg.augmentation.name().to_string(), evals));
    }
    compare_augmentations(&runs)
}

//! Depression acoustic encoder: frames → 32-d severity embedding, trained with an
//! ordinal head while speaker and content heads push identity information out
//! of the normalized embedding through gradient reversal.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use depflow_nn::{cross_entropy, AdamW, Conv1d, Linear, ParamStore, Session, Var};
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics;
use crate::seed::{digest, stream};
use crate::world::{crop_segment, Utterance, CROP_FRAMES, N_LEVELS};

/// Floor added to the pooled variance before the square root.
pub const POOL_EPS: f64 = 1e-6;
pub const N_THRESHOLDS: usize = N_LEVELS - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContentLabelMode {
    /// k-means units over frames, majority vote per utterance.
    Kmeans,
    /// Modal world content token per utterance.
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DaeConfig {
    pub frame_dim: usize,
    pub conv_channels: usize,
    pub conv_kernel: usize,
    pub frame_proj_dim: usize,
    pub attn_hidden: usize,
    pub embed_dim: usize,
    pub head_hidden: usize,
    /// Subtract the per-utterance frame mean before the convolutions.
    pub input_norm: bool,
    pub dropout: f64,
    pub lambda_sup: f64,
    pub lambda_id: f64,
    pub lambda_spk: f64,
    pub lambda_con: f64,
    pub grl_scale: f64,
    /// Let the identification loss reach the encoder. Off: it trains the
    /// speaker classifier only, and the encoder sees the reversed branch alone.
    pub id_grad_to_encoder: bool,
    pub n_speakers: usize,
    pub n_content_units: usize,
    pub content_mode: ContentLabelMode,
    pub kmeans_iters: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub crop_frames: usize,
    pub seed: u64,
}

impl Default for DaeConfig {
    fn default() -> Self {
        Self {
            frame_dim: 16,
            conv_channels: 64,
            conv_kernel: 5,
            frame_proj_dim: 256,
            attn_hidden: 64,
            embed_dim: 32,
            head_hidden: 64,
            input_norm: true,
            dropout: 0.2,
            lambda_sup: 1.0,
            lambda_id: 0.2,
            lambda_spk: 0.2,
            lambda_con: 0.1,
            grl_scale: 1.0,
            id_grad_to_encoder: false,
            n_speakers: 1,
            n_content_units: 8,
            content_mode: ContentLabelMode::Kmeans,
            kmeans_iters: 15,
            lr: 1e-4,
            weight_decay: 3e-3,
            batch_size: 64,
            max_epochs: 500,
            patience: 20,
            crop_frames: CROP_FRAMES,
            seed: 0,
        }
    }
}

impl DaeConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("frame_dim", self.frame_dim),
            ("conv_channels", self.conv_channels),
            ("frame_proj_dim", self.frame_proj_dim),
            ("attn_hidden", self.attn_hidden),
            ("embed_dim", self.embed_dim),
            ("head_hidden", self.head_hidden),
            ("n_speakers", self.n_speakers),
            ("n_content_units", self.n_content_units),
            ("batch_size", self.batch_size),
            ("crop_frames", self.crop_frames),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::config("conv_kernel", "must be odd"));
        }
        for (field, v) in [
            ("lambda_sup", self.lambda_sup),
            ("lambda_id", self.lambda_id),
            ("lambda_spk", self.lambda_spk),
            ("lambda_con", self.lambda_con),
            ("grl_scale", self.grl_scale),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(field, "must be finite and nonnegative"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must be in [0, 1)"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("lr", "must be positive"));
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

/// Raw and L2-normalized embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepressionEmbedding {
    pub d: Vec<f64>,
    pub d_norm: Vec<f64>,
}

impl DepressionEmbedding {
    pub fn from_raw(d: Vec<f64>) -> Self {
        let n = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        let d_norm = if n > 0.0 {
            d.iter().map(|x| x / n).collect()
        } else {
            vec![0.0; d.len()]
        };
        Self { d, d_norm }
    }
}

/// Cumulative targets `t_k = 1[level ≥ k]`, k = 1..4.
pub fn ordinal_targets(level: usize) -> Result<[f64; N_THRESHOLDS]> {
    if level >= N_LEVELS {
        return Err(Error::OutOfRange {
            what: "severity level",
            value: level as f64,
            expected: "0..=4",
        });
    }
    let mut t = [0.0; N_THRESHOLDS];
    for (k, slot) in t.iter_mut().enumerate() {
        *slot = if level > k { 1.0 } else { 0.0 };
    }
    Ok(t)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Weighted binary cross-entropy over the four thresholds.
pub fn ordinal_loss(logits: &[f64], level: usize, weights: &[f64]) -> Result<f64> {
    if logits.len() != N_THRESHOLDS || weights.len() != N_THRESHOLDS {
        return Err(Error::Shape(format!("ordinal head has {N_THRESHOLDS} thresholds")));
    }
    if logits.iter().any(|o| !o.is_finite()) {
        return Err(Error::Degenerate("non-finite ordinal logit".into()));
    }
    let t = ordinal_targets(level)?;
    Ok(logits
        .iter()
        .zip(&t)
        .zip(weights)
        .map(|((&o, &t), &w)| w * (t * softplus(-o) + (1.0 - t) * softplus(o)))
        .sum())
}

/// Number of thresholds whose probability exceeds ½.
pub fn decode_level(logits: &[f64]) -> usize {
    logits.iter().filter(|&&o| o > 0.0).count()
}

/// Inverse frequency of `t_k = 1` over the given levels, normalized to mean 1.
pub fn class_balanced_weights(levels: &[usize]) -> [f64; N_THRESHOLDS] {
    let mut w = [1.0; N_THRESHOLDS];
    for (k, slot) in w.iter_mut().enumerate() {
        let pos = levels.iter().filter(|&&l| l > k).count();
        *slot = if pos == 0 {
            0.0
        } else {
            levels.len() as f64 / pos as f64
        };
    }
    let mean = w.iter().sum::<f64>() / N_THRESHOLDS as f64;
    if mean > 0.0 {
        w.iter_mut().for_each(|x| *x /= mean);
    }
    w
}

/// Attention-weighted mean and standard deviation over rows of `h` with
/// attention logits `scores` (one per row).
pub fn attn_stat_pool(h: &Array2<f64>, scores: &[f64]) -> Result<Array1<f64>> {
    let t = h.nrows();
    if t == 0 {
        return Err(Error::Empty("attention pooling over zero frames".into()));
    }
    if scores.len() != t {
        return Err(Error::Shape("one attention score per frame".into()));
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = e.iter().sum();
    let alpha: Vec<f64> = e.iter().map(|x| x / z).collect();
    let dim = h.ncols();
    let mut mean = Array1::zeros(dim);
    for (row, &a) in h.rows().into_iter().zip(&alpha) {
        mean.scaled_add(a, &row);
    }
    let mut var = Array1::zeros(dim);
    for (row, &a) in h.rows().into_iter().zip(&alpha) {
        let d = &row - &mean;
        var.scaled_add(a, &(&d * &d));
    }
    let std = var.mapv(|v: f64| (v + POOL_EPS).sqrt());
    Ok(ndarray::concatenate![ndarray::Axis(0), mean, std])
}

/// Graph version of [`attn_stat_pool`]: `h` is `T × C`, `scores` is `T × 1`.
pub fn attn_stat_pool_graph(s: &Session, h: Var, scores: Var) -> Var {
    let alpha = s.softmax_rows(s.transpose(scores));
    let mean = s.matmul(alpha, h);
    let centered = s.sub(h, mean);
    let var = s.matmul(alpha, s.square(centered));
    let std = s.sqrt(s.add_scalar(var, POOL_EPS));
    s.concat_cols(&[mean, std])
}

#[derive(Debug, Clone, Copy)]
struct DaeLayers {
    conv1: Conv1d,
    conv2: Conv1d,
    proj: Linear,
    attn_hidden: Linear,
    attn_out: Linear,
    embed: Linear,
    ordinal: Linear,
    spk_hidden: Linear,
    spk_out: Linear,
    con_hidden: Linear,
    con_out: Linear,
}

#[derive(Debug, Clone)]
pub struct DaeModel {
    pub config: DaeConfig,
    pub store: ParamStore,
    /// Speaker id → classifier index.
    pub speaker_index: BTreeMap<usize, usize>,
    /// Ordinal threshold weights used in training.
    pub class_weights: [f64; N_THRESHOLDS],
    layers: DaeLayers,
}

/// Per-utterance training example.
#[derive(Debug, Clone)]
pub struct DaeExample {
    pub frames: Array2<f64>,
    pub level: usize,
    pub speaker: Option<usize>,
    pub content: Option<usize>,
}

/// Forward outputs for a batch (one row per example).
pub struct DaeForward {
    pub d: Var,
    pub d_norm: Var,
    pub ordinal: Var,
}

pub struct DaeLosses {
    pub total: Var,
    pub sup: Var,
    pub id: Var,
    pub adv_spk: Var,
    pub adv_con: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub sup: f64,
    pub id: f64,
    pub adv_spk: f64,
    pub adv_con: f64,
}

impl DaeLosses {
    pub fn values(&self, s: &Session) -> LossValues {
        LossValues {
            total: s.scalar(self.total),
            sup: s.scalar(self.sup),
            id: s.scalar(self.id),
            adv_spk: s.scalar(self.adv_spk),
            adv_con: s.scalar(self.adv_con),
        }
    }
}

impl DaeModel {
    pub fn new(config: DaeConfig, speaker_index: BTreeMap<usize, usize>) -> Result<Self> {
        config.validate()?;
        if speaker_index.len() != config.n_speakers {
            return Err(Error::config("n_speakers", "does not match the speaker index"));
        }
        let mut rng = stream(config.seed, &["dae", "init"]);
        let mut store = ParamStore::new();
        let c = &config;
        let layers = DaeLayers {
            conv1: Conv1d::new(&mut store, "enc.conv1", c.frame_dim, c.conv_channels, c.conv_kernel, &mut rng),
            conv2: Conv1d::new(&mut store, "enc.conv2", c.conv_channels, c.conv_channels, c.conv_kernel, &mut rng),
            proj: Linear::new(&mut store, "enc.proj", c.conv_channels, c.frame_proj_dim, &mut rng),
            attn_hidden: Linear::new(&mut store, "enc.attn.hidden", c.frame_proj_dim, c.attn_hidden, &mut rng),
            attn_out: Linear::new(&mut store, "enc.attn.out", c.attn_hidden, 1, &mut rng),
            embed: Linear::new(&mut store, "enc.embed", 2 * c.frame_proj_dim, c.embed_dim, &mut rng),
            ordinal: Linear::new(&mut store, "head.ordinal", c.embed_dim, N_THRESHOLDS, &mut rng),
            spk_hidden: Linear::new(&mut store, "head.speaker.hidden", c.embed_dim, c.head_hidden, &mut rng),
            spk_out: Linear::new(&mut store, "head.speaker.out", c.head_hidden, c.n_speakers, &mut rng),
            con_hidden: Linear::new(&mut store, "head.content.hidden", c.embed_dim, c.head_hidden, &mut rng),
            con_out: Linear::new(&mut store, "head.content.out", c.head_hidden, c.n_content_units, &mut rng),
        };
        Ok(Self {
            config,
            store,
            speaker_index,
            class_weights: [1.0; N_THRESHOLDS],
            layers,
        })
    }

    /// Names of parameters belonging to the shared encoder (everything before the heads).
    pub fn is_encoder_param(name: &str) -> bool {
        name.starts_with("enc.")
    }

    fn embed_one(&self, s: &Session, frames: &Array2<f64>) -> Var {
        let l = &self.layers;
        let p = self.config.dropout;
        let x = if self.config.input_norm {
            let mean = frames.mean_axis(ndarray::Axis(0)).expect("nonempty utterance");
            s.input(frames - &mean)
        } else {
            s.input(frames.clone())
        };
        let h = s.relu(l.conv1.forward(s, x));
        let h = s.relu(l.conv2.forward(s, h));
        let h = s.dropout(s.relu(l.proj.forward(s, h)), p);
        let scores = l.attn_out.forward(s, s.tanh(l.attn_hidden.forward(s, h)));
        let pooled = attn_stat_pool_graph(s, h, scores);
        l.embed.forward(s, s.dropout(pooled, p))
    }

    pub fn forward(&self, s: &Session, batch: &[&Array2<f64>]) -> Result<DaeForward> {
        for f in batch {
            if f.ncols() != self.config.frame_dim {
                return Err(Error::Shape(format!(
                    "frame_dim {} does not match encoder frame_dim {}",
                    f.ncols(),
                    self.config.frame_dim
                )));
            }
            if f.nrows() == 0 {
                return Err(Error::Empty("utterance with zero frames".into()));
            }
        }
        let rows: Vec<Var> = batch.iter().map(|f| self.embed_one(s, f)).collect();
        let d = s.concat_rows(&rows);
        let norm = s.sqrt(s.sum_cols(s.square(d)));
        let d_norm = s.div(d, norm);
        let ordinal = self
            .layers
            .ordinal
            .forward(s, s.dropout(d, self.config.dropout));
        Ok(DaeForward { d, d_norm, ordinal })
    }

    fn speaker_logits(&self, s: &Session, x: Var) -> Var {
        let h = s.relu(self.layers.spk_hidden.forward(s, x));
        self.layers.spk_out.forward(s, s.dropout(h, self.config.dropout))
    }

    fn content_logits(&self, s: &Session, x: Var) -> Var {
        let h = s.relu(self.layers.con_hidden.forward(s, x));
        self.layers.con_out.forward(s, s.dropout(h, self.config.dropout))
    }

    /// Weighted ordinal BCE averaged over the batch.
    pub fn ordinal_loss_graph(&self, s: &Session, logits: Var, levels: &[usize]) -> Result<Var> {
        let mut targets = Array2::zeros((levels.len(), N_THRESHOLDS));
        for (r, &l) in levels.iter().enumerate() {
            targets.row_mut(r).assign(&Array1::from(ordinal_targets(l)?.to_vec()));
        }
        let w = Array2::from_shape_vec((1, N_THRESHOLDS), self.class_weights.to_vec()).expect("row");
        let t = s.input(targets.clone());
        let one_minus_t = s.input(targets.mapv(|v| 1.0 - v));
        let pos = s.mul(t, s.softplus(s.neg(logits)));
        let neg = s.mul(one_minus_t, s.softplus(logits));
        let per = s.mul(s.add(pos, neg), s.input(w));
        Ok(s.scale(s.sum(per), 1.0 / levels.len() as f64))
    }

    /// Speaker cross-entropy on `d̃`, optionally through gradient reversal.
    pub fn speaker_loss(&self, s: &Session, d_norm: Var, speakers: &[usize], reversed: bool) -> Var {
        let x = if reversed {
            s.reverse_grad(d_norm, self.config.grl_scale)
        } else if self.config.id_grad_to_encoder {
            d_norm
        } else {
            s.detach(d_norm)
        };
        cross_entropy(s, self.speaker_logits(s, x), speakers)
    }

    pub fn total_loss(&self, s: &Session, batch: &[DaeExample]) -> Result<DaeLosses> {
        if batch.is_empty() {
            return Err(Error::Empty("dae batch".into()));
        }
        let c = &self.config;
        let frames: Vec<&Array2<f64>> = batch.iter().map(|e| &e.frames).collect();
        let fwd = self.forward(s, &frames)?;
        let levels: Vec<usize> = batch.iter().map(|e| e.level).collect();
        let sup = self.ordinal_loss_graph(s, fwd.ordinal, &levels)?;

        let need_spk = c.lambda_id > 0.0 || c.lambda_spk > 0.0;
        let zero = s.input(Array2::zeros((1, 1)));
        let (id, adv_spk) = if need_spk {
            let speakers: Vec<usize> = batch
                .iter()
                .map(|e| e.speaker)
                .collect::<Option<_>>()
                .ok_or_else(|| Error::MissingLabels("speaker label required".into()))?;
            if let Some(bad) = speakers.iter().find(|&&k| k >= c.n_speakers) {
                return Err(Error::OutOfRange {
                    what: "speaker index",
                    value: *bad as f64,
                    expected: "< n_speakers",
                });
            }
            (
                self.speaker_loss(s, fwd.d_norm, &speakers, false),
                self.speaker_loss(s, fwd.d_norm, &speakers, true),
            )
        } else {
            (zero, zero)
        };
        let adv_con = if c.lambda_con > 0.0 {
            let content: Vec<usize> = batch
                .iter()
                .map(|e| e.content)
                .collect::<Option<_>>()
                .ok_or_else(|| Error::MissingLabels("content label required".into()))?;
            if let Some(bad) = content.iter().find(|&&k| k >= c.n_content_units) {
                return Err(Error::OutOfRange {
                    what: "content unit",
                    value: *bad as f64,
                    expected: "< n_content_units",
                });
            }
            let x = s.reverse_grad(fwd.d_norm, c.grl_scale);
            cross_entropy(s, self.content_logits(s, x), &content)
        } else {
            zero
        };
        let terms = [
            (c.lambda_sup, sup),
            (c.lambda_id, id),
            (c.lambda_spk, adv_spk),
            (c.lambda_con, adv_con),
        ];
        let mut total = s.scale(terms[0].1, terms[0].0);
        for &(w, v) in &terms[1..] {
            if w != 0.0 {
                total = s.add(total, s.scale(v, w));
            }
        }
        Ok(DaeLosses {
            total,
            sup,
            id,
            adv_spk,
            adv_con,
        })
    }

    /// Eval-mode embedding of one utterance.
    pub fn encode(&self, frames: &Array2<f64>) -> Result<DepressionEmbedding> {
        let s = Session::eval(&self.store);
        let fwd = self.forward(&s, &[frames])?;
        let d = s.value(fwd.d).row(0).to_vec();
        Ok(DepressionEmbedding::from_raw(d))
    }

    pub fn encode_many(&self, frames: &[&Array2<f64>]) -> Result<Vec<DepressionEmbedding>> {
        frames.par_iter().map(|f| self.encode(f)).collect()
    }

    /// Eval-mode ordinal logits.
    pub fn ordinal_logits(&self, frames: &Array2<f64>) -> Result<Vec<f64>> {
        let s = Session::eval(&self.store);
        let fwd = self.forward(&s, &[frames])?;
        let out = s.value(fwd.ordinal).row(0).to_vec();
        Ok(out)
    }

    pub fn predict_level(&self, frames: &Array2<f64>) -> Result<usize> {
        Ok(decode_level(&self.ordinal_logits(frames)?))
    }

    fn meta(&self) -> Result<String> {
        let meta = DaeMeta {
            kind: "dae".into(),
            config: self.config.clone(),
            config_digest: self.config.digest(),
            speaker_index: self.speaker_index.iter().map(|(&k, &v)| (k, v)).collect(),
            class_weights: self.class_weights.to_vec(),
        };
        Ok(serde_json::to_string(&meta)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        depflow_nn::write_checkpoint(&mut buf, &self.meta()?, &self.store)?;
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (meta, stored) = depflow_nn::read_checkpoint(bytes.as_slice())?;
        let meta: DaeMeta = serde_json::from_str(&meta)?;
        if meta.kind != "dae" {
            return Err(Error::Parse {
                path: path.display().to_string(),
                reason: format!("checkpoint kind {} is not dae", meta.kind),
            });
        }
        if meta.config.digest() != meta.config_digest {
            return Err(Error::DigestMismatch {
                stage: "dae".into(),
                stored: meta.config_digest,
                current: meta.config.digest(),
            });
        }
        let mut model = Self::new(meta.config, meta.speaker_index.into_iter().collect())?;
        let copied = model.store.load_matching(&stored);
        if copied != model.store.len() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                reason: format!("checkpoint holds {copied} of {} tensors", model.store.len()),
            });
        }
        model.class_weights.copy_from_slice(&meta.class_weights);
        Ok(model)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DaeMeta {
    kind: String,
    config: DaeConfig,
    config_digest: String,
    speaker_index: Vec<(usize, usize)>,
    class_weights: Vec<f64>,
}

/// k-means over frame vectors (seeded, fixed iteration count).
#[derive(Debug, Clone, PartialEq)]
pub struct Kmeans {
    pub centroids: Array2<f64>,
}

impl Kmeans {
    pub fn fit(frames: &[&Array2<f64>], k: usize, iters: usize, seed: u64) -> Result<Self> {
        let dim = frames
            .first()
            .map(|f| f.ncols())
            .ok_or_else(|| Error::Empty("k-means corpus".into()))?;
        let rows: Vec<ndarray::ArrayView1<f64>> = frames.iter().flat_map(|f| f.rows()).collect();
        if rows.is_empty() {
            return Err(Error::Empty("k-means corpus".into()));
        }
        let mut distinct: Vec<Vec<u64>> = Vec::new();
        for r in &rows {
            let bits: Vec<u64> = r.iter().map(|v| v.to_bits()).collect();
            if !distinct.contains(&bits) {
                distinct.push(bits);
                if distinct.len() >= k {
                    break;
                }
            }
        }
        if distinct.len() < k {
            return Err(Error::Infeasible(format!(
                "{k} content units requested but only {} distinct frames",
                distinct.len()
            )));
        }
        // k-means++ seeding on a deterministic stream.
        let mut rng = stream(seed, &["kmeans"]);
        let mut centroids = Array2::zeros((k, dim));
        let first = rng.random_range(0..rows.len());
        centroids.row_mut(0).assign(&rows[first]);
        let mut dist: Vec<f64> = rows.iter().map(|r| sq_dist(r, &centroids.row(0))).collect();
        for c in 1..k {
            let total: f64 = dist.iter().sum();
            let pick = if total > 0.0 {
                let mut u = rng.random::<f64>() * total;
                let mut idx = rows.len() - 1;
                for (i, d) in dist.iter().enumerate() {
                    if u < *d {
                        idx = i;
                        break;
                    }
                    u -= d;
                }
                idx
            } else {
                rng.random_range(0..rows.len())
            };
            centroids.row_mut(c).assign(&rows[pick]);
            for (d, r) in dist.iter_mut().zip(&rows) {
                *d = d.min(sq_dist(r, &centroids.row(c)));
            }
        }
        let mut model = Self { centroids };
        for _ in 0..iters {
            let assign: Vec<usize> = rows.par_iter().map(|r| model.assign(r)).collect();
            let mut sums = Array2::<f64>::zeros((k, dim));
            let mut counts = vec![0usize; k];
            for (r, &a) in rows.iter().zip(&assign) {
                let mut row = sums.row_mut(a);
                row += r;
                counts[a] += 1;
            }
            for c in 0..k {
                if counts[c] > 0 {
                    let mean = &sums.row(c) / counts[c] as f64;
                    model.centroids.row_mut(c).assign(&mean);
                }
            }
        }
        Ok(model)
    }

    pub fn assign(&self, frame: &ndarray::ArrayView1<f64>) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (c, row) in self.centroids.rows().into_iter().enumerate() {
            let d = sq_dist(frame, &row);
            if d < best.0 {
                best = (d, c);
            }
        }
        best.1
    }

    pub fn units(&self, frames: &Array2<f64>) -> Vec<usize> {
        frames.rows().into_iter().map(|r| self.assign(&r)).collect()
    }
}

fn sq_dist(a: &ndarray::ArrayView1<f64>, b: &ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Most frequent unit; ties go to the smallest id.
pub fn majority_unit(units: &[usize]) -> Option<usize> {
    let max = *units.iter().max()?;
    let mut counts = vec![0usize; max + 1];
    for &u in units {
        counts[u] += 1;
    }
    let best = *counts.iter().max().expect("nonempty");
    counts.iter().position(|&c| c == best)
}

/// Utterance-level content category per utterance.
pub fn pseudo_content_labels(
    utterances: &[&Utterance],
    n_units: usize,
    mode: ContentLabelMode,
    iters: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if utterances.is_empty() {
        return Err(Error::Empty("content labelling corpus".into()));
    }
    match mode {
        ContentLabelMode::Kmeans => {
            let frames: Vec<&Array2<f64>> = utterances.iter().map(|u| &u.frames).collect();
            let km = Kmeans::fit(&frames, n_units, iters, seed)?;
            Ok(utterances
                .par_iter()
                .map(|u| majority_unit(&km.units(&u.frames)).unwrap_or(0))
                .collect())
        }
        ContentLabelMode::GroundTruth => Ok(utterances
            .iter()
            .map(|u| majority_unit(&u.frame_tokens()).unwrap_or(0) % n_units)
            .collect()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: LossValues,
    pub dev_macro_f1: f64,
    pub dev_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaeTrainReport {
    pub best_epoch: usize,
    pub best_dev_macro_f1: f64,
    pub log: Vec<EpochLog>,
}

/// Ordinal macro-F1 and accuracy of predicted levels.
pub fn evaluate_levels(model: &DaeModel, utterances: &[&Utterance]) -> Result<(f64, f64)> {
    let pred: Vec<usize> = utterances
        .par_iter()
        .map(|u| model.predict_level(&u.frames))
        .collect::<Result<_>>()?;
    let truth: Vec<usize> = utterances.iter().map(|u| u.severity_level).collect();
    let acc = pred.iter().zip(&truth).filter(|(a, b)| a == b).count() as f64 / truth.len().max(1) as f64;
    Ok((metrics::macro_f1(&truth, &pred), acc))
}

/// Train with early stopping on dev ordinal macro-F1; returns the best model.
pub fn train_dae(
    config: DaeConfig,
    train: &[&Utterance],
    dev: &[&Utterance],
) -> Result<(DaeModel, DaeTrainReport)> {
    if train.is_empty() {
        return Err(Error::Empty("dae training split".into()));
    }
    let mut speakers: Vec<usize> = train.iter().map(|u| u.speaker_id).collect();
    speakers.sort_unstable();
    speakers.dedup();
    let speaker_index: BTreeMap<usize, usize> = speakers.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let config = DaeConfig {
        n_speakers: speaker_index.len(),
        ..config
    };
    let content = pseudo_content_labels(
        train,
        config.n_content_units,
        config.content_mode,
        config.kmeans_iters,
        config.seed,
    )?;
    let mut model = DaeModel::new(config.clone(), speaker_index)?;
    let levels: Vec<usize> = train.iter().map(|u| u.severity_level).collect();
    model.class_weights = class_balanced_weights(&levels);

    let mut opt = AdamW::new(config.lr, config.weight_decay).with_clip(5.0);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng: ChaCha8Rng = stream(config.seed, &["dae", "train"]);
    let mut best: Option<(f64, ParamStore, usize)> = None;
    let mut log = Vec::new();
    let mut since_best = 0;
    let mut step = 0u64;

    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let mut sums = LossValues { total: 0.0, sup: 0.0, id: 0.0, adv_spk: 0.0, adv_con: 0.0 };
        let mut batches = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<DaeExample> = chunk
                .iter()
                .map(|&i| {
                    let u = crop_segment(train[i], config.crop_frames, &mut rng);
                    DaeExample {
                        frames: u.frames,
                        level: u.severity_level,
                        speaker: model.speaker_index.get(&u.speaker_id).copied(),
                        content: Some(content[i]),
                    }
                })
                .collect();
            step += 1;
            let (grads, vals) = {
                let s = Session::train(&model.store, crate::seed::derive_seed(config.seed, &["dropout", &step.to_string()]));
                let losses = model.total_loss(&s, &batch)?;
                let vals = losses.values(&s);
                (s.backward(losses.total).params().clone(), vals)
            };
            if !vals.total.is_finite() {
                return Err(Error::NonFinite {
                    stage: "dae".into(),
                    detail: format!("epoch {epoch} step {step}: {vals:?}"),
                });
            }
            opt.step(&mut model.store, &grads);
            sums.total += vals.total;
            sums.sup += vals.sup;
            sums.id += vals.id;
            sums.adv_spk += vals.adv_spk;
            sums.adv_con += vals.adv_con;
            batches += 1.0;
        }
        let (f1, acc) = if dev.is_empty() {
            evaluate_levels(&model, train)?
        } else {
            evaluate_levels(&model, dev)?
        };
        log.push(EpochLog {
            epoch,
            train: LossValues {
                total: sums.total / batches,
                sup: sums.sup / batches,
                id: sums.id / batches,
                adv_spk: sums.adv_spk / batches,
                adv_con: sums.adv_con / batches,
            },
            dev_macro_f1: f1,
            dev_accuracy: acc,
        });
        if best.as_ref().is_none_or(|b| f1 > b.0) {
            best = Some((f1, model.store.clone(), epoch));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    let (best_f1, store, best_epoch) = best.expect("at least one epoch");
    model.store = store;
    Ok((
        model,
        DaeTrainReport {
            best_epoch,
            best_dev_macro_f1: best_f1,
            log,
        },
    ))
}

/// Speaker identification accuracy of a linear probe on `d̃`. Utterances of
/// every speaker alternate between probe-fit and probe-eval halves.
pub fn speaker_probe(model: &DaeModel, utterances: &[&Utterance]) -> Result<f64> {
    let emb = model.encode_many(&utterances.iter().map(|u| &u.frames).collect::<Vec<_>>())?;
    let mut index = BTreeMap::new();
    for u in utterances {
        let next = index.len();
        index.entry(u.speaker_id).or_insert(next);
    }
    let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
    let (mut fx, mut fy, mut ex, mut ey) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (u, e) in utterances.iter().zip(emb) {
        let k = seen.entry(u.speaker_id).or_insert(0);
        let label = index[&u.speaker_id];
        if *k % 2 == 0 {
            fx.push(e.d_norm);
            fy.push(label);
        } else {
            ex.push(e.d_norm);
            ey.push(label);
        }
        *k += 1;
    }
    match metrics::linear_probe(
        &fx,
        &ex,
        metrics::ProbeTargets::Classification {
            train: &fy,
            eval: &ey,
            classes: index.len(),
        },
    )? {
        metrics::ProbeReport::Classification { accuracy, .. } => Ok(accuracy),
        metrics::ProbeReport::Regression { .. } => unreachable!("classification probe"),
    }
}

/// Binary depressed-vs-not ROC-AUC of a linear probe on raw `d`, fit on
/// `fit` and scored on `eval`.
pub fn severity_probe(model: &DaeModel, fit: &[&Utterance], eval: &[&Utterance]) -> Result<Option<f64>> {
    let enc = |us: &[&Utterance]| -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
        let emb = model.encode_many(&us.iter().map(|u| &u.frames).collect::<Vec<_>>())?;
        Ok((
            emb.into_iter().map(|e| e.d).collect(),
            us.iter().map(|u| usize::from(u.label())).collect(),
        ))
    };
    let (fx, fy) = enc(fit)?;
    let (ex, ey) = enc(eval)?;
    match metrics::linear_probe(
        &fx,
        &ex,
        metrics::ProbeTargets::Classification {
            train: &fy,
            eval: &ey,
            classes: 2,
        },
    )? {
        metrics::ProbeReport::Classification { roc_auc, .. } => Ok(roc_auc),
        metrics::ProbeReport::Regression { .. } => unreachable!("classification probe"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_encoding() {
        assert_eq!(ordinal_targets(0).unwrap(), [0.0; 4]);
        assert_eq!(ordinal_targets(4).unwrap(), [1.0; 4]);
        assert_eq!(ordinal_targets(3).unwrap(), [1.0, 1.0, 1.0, 0.0]);
        assert!(ordinal_targets(5).is_err());
    }

    #[test]
    fn ordinal_loss_values() {
        let w = [1.0; 4];
        let l = ordinal_loss(&[20.0, 20.0, 20.0, -20.0], 3, &w).unwrap();
        assert!(l < 1e-8 && l >= 0.0);
        let l = ordinal_loss(&[0.0; 4], 2, &w).unwrap();
        assert!((l - 4.0 * 2f64.ln()).abs() < 1e-12);
        assert!(ordinal_loss(&[0.0; 4], 7, &w).is_err());
        assert!(ordinal_loss(&[f64::NAN, 0.0, 0.0, 0.0], 1, &w).is_err());
    }

    #[test]
    fn decoding() {
        assert_eq!(decode_level(&[-1.0; 4]), 0);
        assert_eq!(decode_level(&[2.0, 1.0, -1.0, -3.0]), 2);
        assert_eq!(decode_level(&[1.0; 4]), 4);
        for level in 0..5 {
            let sat: Vec<f64> = ordinal_targets(level).unwrap().iter().map(|t| if *t > 0.5 { 30.0 } else { -30.0 }).collect();
            assert_eq!(decode_level(&sat), level);
        }
    }

    #[test]
    fn balanced_weights_have_unit_mean() {
        let w = class_balanced_weights(&[0, 1, 2, 3, 4, 4, 2, 1]);
        assert!((w.iter().sum::<f64>() / 4.0 - 1.0).abs() < 1e-12);
        assert!(w[3] > w[0]);
    }

    #[test]
    fn pooling_cases() {
        let h = Array2::from_shape_fn((4, 3), |(_, j)| j as f64 + 0.5);
        let out = attn_stat_pool(&h, &[0.3, -1.0, 2.0, 0.0]).unwrap();
        for j in 0..3 {
            assert!((out[j] - (j as f64 + 0.5)).abs() < 1e-12);
            assert!((out[3 + j] - POOL_EPS.sqrt()).abs() < 1e-15);
        }
        let one = Array2::from_shape_vec((1, 2), vec![1.5, -2.0]).unwrap();
        let out = attn_stat_pool(&one, &[4.0]).unwrap();
        assert_eq!(out.to_vec(), vec![1.5, -2.0, POOL_EPS.sqrt(), POOL_EPS.sqrt()]);
        // two frames, uniform attention: mean = midpoint, std = half the gap
        let two = Array2::from_shape_vec((2, 2), vec![1.0, 4.0, 3.0, 0.0]).unwrap();
        let out = attn_stat_pool(&two, &[0.7, 0.7]).unwrap();
        assert!((out[0] - 2.0).abs() < 1e-12 && (out[1] - 2.0).abs() < 1e-12);
        assert!((out[2] - (1.0 + POOL_EPS).sqrt()).abs() < 1e-12);
        assert!((out[3] - (4.0 + POOL_EPS).sqrt()).abs() < 1e-12);
        assert!(attn_stat_pool(&Array2::zeros((0, 2)), &[]).is_err());
    }

    #[test]
    fn majority_vote_rules() {
        assert_eq!(majority_unit(&[3, 3, 3]), Some(3));
        assert_eq!(majority_unit(&[1, 1, 2]), Some(1));
        assert_eq!(majority_unit(&[2, 1]), Some(1));
        assert_eq!(majority_unit(&[]), None);
    }

    #[test]
    fn kmeans_rejects_too_many_units() {
        let f = Array2::from_elem((10, 2), 1.0);
        assert!(Kmeans::fit(&[&f], 2, 3, 0).is_err());
    }

    #[test]
    fn kmeans_separates_clusters() {
        let f = Array2::from_shape_fn((40, 2), |(i, j)| if i < 20 { j as f64 * 0.01 + i as f64 * 1e-3 } else { 10.0 + i as f64 * 1e-3 });
        let km = Kmeans::fit(&[&f], 2, 10, 3).unwrap();
        let units = km.units(&f);
        assert!(units[..20].iter().all(|&u| u == units[0]));
        assert!(units[20..].iter().all(|&u| u == units[20]));
        assert_ne!(units[0], units[20]);
    }
}

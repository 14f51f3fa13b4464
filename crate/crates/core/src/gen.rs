//! Severity-conditioned frame generator: text encoder, log-duration predictor
//! and a small U-Net velocity model trained with conditional flow matching.
//! The depression condition enters only through FiLM on the decoder blocks.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use depflow_nn::{AdamW, Conv1d, Linear, ParamId, ParamStore, Session, Var};
use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, digest, stream};
use crate::world::Utterance;

/// Number of FiLM-modulated decoder blocks (two down, bottleneck, two up).
pub const FILM_BLOCKS: usize = 5;
const LOG_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_tokens: usize,
    pub frame_dim: usize,
    pub text_dim: usize,
    pub speaker_dim: usize,
    pub channels: usize,
    pub time_dim: usize,
    pub duration_hidden: usize,
    pub cond_dim: usize,
    pub film_hidden: usize,
    pub film_dropout: f64,
    pub sigma_min: f64,
    pub lambda_p: f64,
    pub ode_steps: usize,
    pub segment_frames: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_tokens: 24,
            frame_dim: 16,
            text_dim: 48,
            speaker_dim: 16,
            channels: 48,
            time_dim: 16,
            duration_hidden: 32,
            cond_dim: 32,
            film_hidden: 64,
            film_dropout: 0.2,
            sigma_min: 1e-4,
            lambda_p: 1.0,
            ode_steps: 10,
            segment_frames: 64,
            lr: 2e-3,
            weight_decay: 0.0,
            batch_size: 16,
            epochs: 20,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("n_tokens", self.n_tokens),
            ("frame_dim", self.frame_dim),
            ("text_dim", self.text_dim),
            ("speaker_dim", self.speaker_dim),
            ("channels", self.channels),
            ("time_dim", self.time_dim),
            ("duration_hidden", self.duration_hidden),
            ("cond_dim", self.cond_dim),
            ("film_hidden", self.film_hidden),
            ("ode_steps", self.ode_steps),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.time_dim % 2 != 0 {
            return Err(Error::config("time_dim", "must be even"));
        }
        if self.segment_frames % 4 != 0 || self.segment_frames == 0 {
            return Err(Error::config("segment_frames", "must be a positive multiple of 4"));
        }
        if !(self.sigma_min > 0.0 && self.sigma_min < 1.0) {
            return Err(Error::config("sigma_min", "must be in (0, 1)"));
        }
        if !(self.lambda_p.is_finite() && self.lambda_p >= 0.0) {
            return Err(Error::config("lambda_p", "must be finite and nonnegative"));
        }
        if !(0.0..1.0).contains(&self.film_dropout) {
            return Err(Error::config("film_dropout", "must be in [0, 1)"));
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

/// Per-block channel-wise scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct FilmParams {
    pub blocks: Vec<(Vec<f64>, Vec<f64>)>,
}

/// `ĥ = γ·h + β` with `h` laid out `T × C`.
pub fn film_modulate(h: &Array2<f64>, gamma: &[f64], beta: &[f64]) -> Result<Array2<f64>> {
    if gamma.len() != h.ncols() || beta.len() != h.ncols() {
        return Err(Error::Shape(format!(
            "FiLM over {} channels given {} scales and {} shifts",
            h.ncols(),
            gamma.len(),
            beta.len()
        )));
    }
    let mut out = h.clone();
    for mut row in out.rows_mut() {
        for ((v, g), b) in row.iter_mut().zip(gamma).zip(beta) {
            *v = g * *v + b;
        }
    }
    Ok(out)
}

/// OT conditional path: `x_t = (1 − (1 − σ)t)·z + t·x₁`, target `u = x₁ − (1 − σ)z`.
pub fn flow_path_sample(
    x1: &Array2<f64>,
    z: &Array2<f64>,
    t: f64,
    sigma_min: f64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if x1.dim() != z.dim() {
        return Err(Error::Shape("x1 and z differ in shape".into()));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::OutOfRange {
            what: "flow time",
            value: t,
            expected: "[0, 1]",
        });
    }
    let a = 1.0 - (1.0 - sigma_min) * t;
    let xt = z * a + x1 * t;
    let u = x1 - &(z * (1.0 - sigma_min));
    Ok((xt, u))
}

fn check_mask(mask: &[bool], rows: usize) -> Result<usize> {
    if mask.len() != rows {
        return Err(Error::Shape(format!("mask of {} rows over {rows} frames", mask.len())));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::Empty("mask selects no frames".into()));
    }
    Ok(n)
}

/// Masked mean of squared velocity error, normalized by `|M|·n_f`.
pub fn fm_loss(pred: &Array2<f64>, target: &Array2<f64>, mask: &[bool]) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::Shape("prediction and target differ in shape".into()));
    }
    let n = check_mask(mask, pred.nrows())?;
    let mut total = 0.0;
    for (i, &m) in mask.iter().enumerate() {
        if m {
            total += pred.row(i).iter().zip(target.row(i)).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
    }
    Ok(total / (n * pred.ncols()) as f64)
}

/// Gaussian prior term `½[(y − μ)² + log 2π]` averaged over masked frame-bins.
pub fn prior_loss(y: &Array2<f64>, mu: &Array2<f64>, mask: &[bool]) -> Result<f64> {
    if y.dim() != mu.dim() {
        return Err(Error::Shape("target and prior mean differ in shape".into()));
    }
    let n = check_mask(mask, y.nrows())?;
    let mut total = 0.0;
    for (i, &m) in mask.iter().enumerate() {
        if m {
            total += y
                .row(i)
                .iter()
                .zip(mu.row(i))
                .map(|(a, b)| 0.5 * ((a - b).powi(2) + LOG_2PI))
                .sum::<f64>();
        }
    }
    Ok(total / (n * y.ncols()) as f64)
}

/// MSE between log durations.
pub fn duration_loss(w: &[f64], w_hat: &[f64]) -> Result<f64> {
    if w.len() != w_hat.len() || w.is_empty() {
        return Err(Error::Shape("duration vectors must be nonempty and equal length".into()));
    }
    if let Some(bad) = w.iter().find(|&&d| d < 1.0) {
        return Err(Error::OutOfRange {
            what: "ground-truth duration",
            value: *bad,
            expected: ">= 1 frame",
        });
    }
    if let Some(bad) = w_hat.iter().find(|&&d| !(d > 0.0)) {
        return Err(Error::OutOfRange {
            what: "predicted duration",
            value: *bad,
            expected: "> 0",
        });
    }
    Ok(w.iter().zip(w_hat).map(|(a, b)| (a.ln() - b.ln()).powi(2)).sum::<f64>() / w.len() as f64)
}

/// Graph form of the masked mean over `|M|·n_f` of `f(a, b)` where `f` is squared difference.
pub fn masked_sq_mean(s: &Session, a: Var, b: Var, mask: &[bool]) -> Result<Var> {
    let (rows, cols) = s.shape(a);
    let n = check_mask(mask, rows)?;
    let m = Array2::from_shape_fn((rows, 1), |(i, _)| if mask[i] { 1.0 } else { 0.0 });
    let sq = s.square(s.sub(a, b));
    let masked = s.mul(sq, s.input(m));
    Ok(s.scale(s.sum(masked), 1.0 / (n * cols) as f64))
}

/// Graph form of [`prior_loss`].
pub fn prior_loss_graph(s: &Session, y: Var, mu: Var, mask: &[bool]) -> Result<Var> {
    let sq = masked_sq_mean(s, y, mu, mask)?;
    Ok(s.add_scalar(s.scale(sq, 0.5), 0.5 * LOG_2PI))
}

/// Graph form of [`duration_loss`] with predictions given as log durations.
pub fn duration_loss_graph(s: &Session, log_w_hat: Var, w: &[f64]) -> Result<Var> {
    if let Some(bad) = w.iter().find(|&&d| d < 1.0) {
        return Err(Error::OutOfRange {
            what: "ground-truth duration",
            value: *bad,
            expected: ">= 1 frame",
        });
    }
    let target = Array2::from_shape_fn((w.len(), 1), |(i, _)| w[i].ln());
    let diff = s.sub(log_w_hat, s.input(target));
    Ok(s.mean(s.square(diff)))
}

pub const POSITION_FEATURES: usize = 2;

/// Per-frame position inside its token: relative offset and closeness to the
/// token end. Rows from `start` for `len` frames, zero-padded to `padded`.
pub fn token_positions(durations: &[usize], start: usize, len: usize, padded: usize) -> Array2<f64> {
    let mut all = Vec::with_capacity(durations.iter().sum::<usize>());
    for &d in durations {
        for i in 0..d {
            all.push([(i as f64 + 0.5) / d as f64, 1.0 / (d - i) as f64]);
        }
    }
    let mut out = Array2::zeros((padded, POSITION_FEATURES));
    for (r, f) in all.iter().skip(start).take(len).enumerate() {
        out[[r, 0]] = f[0];
        out[[r, 1]] = f[1];
    }
    out
}

/// Sinusoidal features of the flow time.
pub fn time_features(t: f64, dim: usize) -> Array2<f64> {
    let half = dim / 2;
    let mut out = Array2::zeros((1, dim));
    for k in 0..half {
        let freq = (k as f64 * (100f64).ln() / (half.max(2) - 1) as f64).exp();
        out[[0, k]] = (t * freq * PI).sin();
        out[[0, half + k]] = (t * freq * PI).cos();
    }
    out
}

fn pool_matrix(t: usize) -> Array2<f64> {
    let mut p = Array2::zeros((t / 2, t));
    for i in 0..t / 2 {
        p[[i, 2 * i]] = 0.5;
        p[[i, 2 * i + 1]] = 0.5;
    }
    p
}

fn upsample_matrix(t: usize) -> Array2<f64> {
    let mut u = Array2::zeros((t, t / 2));
    for i in 0..t {
        u[[i, i / 2]] = 1.0;
    }
    u
}

#[derive(Debug, Clone, Copy)]
struct ResBlock {
    conv1: Conv1d,
    conv2: Conv1d,
    cond: Linear,
}

impl ResBlock {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, c: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv1d::new(store, &format!("{name}.conv1"), c, c, 3, rng),
            conv2: Conv1d::new(store, &format!("{name}.conv2"), c, c, 3, rng),
            cond: Linear::new(store, &format!("{name}.cond"), c, c, rng),
        }
    }

    fn forward(&self, s: &Session, h: Var, cond: Var) -> Var {
        let a = self.conv1.forward(s, s.relu(h));
        let a = s.add(a, self.cond.forward(s, cond));
        s.add(h, self.conv2.forward(s, s.relu(a)))
    }
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl Attention {
    fn forward(&self, s: &Session, h: Var) -> Var {
        let c = s.shape(h).1 as f64;
        let q = self.q.forward(s, h);
        let k = self.k.forward(s, h);
        let v = self.v.forward(s, h);
        let w = s.softmax_rows(s.scale(s.matmul(q, s.transpose(k)), 1.0 / c.sqrt()));
        s.add(h, self.o.forward(s, s.matmul(w, v)))
    }
}

#[derive(Debug, Clone, Copy)]
struct FilmGenerator {
    hidden: Linear,
    out: Linear,
}

#[derive(Debug, Clone, Copy)]
struct GenLayers {
    token_emb: ParamId,
    enc1: Conv1d,
    enc2: Conv1d,
    mu_proj: Linear,
    speaker_table: ParamId,
    dur_conv: Conv1d,
    dur_out: Linear,
    time1: Linear,
    time2: Linear,
    spk_proj: Linear,
    dec_in: Linear,
    blocks: [ResBlock; FILM_BLOCKS],
    merge2: Linear,
    merge1: Linear,
    attn: Attention,
    dec_out: Linear,
}

/// Stage of the generator: pretrained without conditioning, or finetuned with FiLM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenStage {
    Pretrained,
    Finetuned,
}

#[derive(Debug, Clone)]
pub struct FlowTts {
    pub config: GenConfig,
    pub store: ParamStore,
    /// Speaker id → row of the speaker table.
    pub speakers: BTreeMap<usize, usize>,
    pub stage: GenStage,
    layers: GenLayers,
    film: Option<FilmGenerator>,
}

/// One training item: text, ground-truth durations, target frames, speaker and condition.
#[derive(Debug, Clone)]
pub struct GenExample {
    pub tokens: Vec<usize>,
    pub durations: Vec<usize>,
    pub frames: Array2<f64>,
    pub speaker_id: usize,
    pub c_dep: Option<Vec<f64>>,
}

impl GenExample {
    pub fn from_utterance(u: &Utterance, c_dep: Option<Vec<f64>>) -> Self {
        Self {
            tokens: u.content.clone(),
            durations: u.durations.clone(),
            frames: u.frames.clone(),
            speaker_id: u.speaker_id,
            c_dep,
        }
    }
}

pub struct GenLosses {
    pub total: Var,
    pub dur: Var,
    pub prior: Var,
    pub fm: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenLossValues {
    pub total: f64,
    pub dur: f64,
    pub prior: f64,
    pub fm: f64,
}

impl GenLossValues {
    fn add(&mut self, o: &GenLossValues) {
        self.total += o.total;
        self.dur += o.dur;
        self.prior += o.prior;
        self.fm += o.fm;
    }

    fn scaled(&self, c: f64) -> Self {
        Self {
            total: self.total * c,
            dur: self.dur * c,
            prior: self.prior * c,
            fm: self.fm * c,
        }
    }

    fn zero() -> Self {
        Self {
            total: 0.0,
            dur: 0.0,
            prior: 0.0,
            fm: 0.0,
        }
    }
}

/// Randomness consumed by one training forward pass.
#[derive(Debug, Clone)]
pub struct FlowDraw {
    pub t: f64,
    pub z: Array2<f64>,
    pub start: usize,
}

impl FlowTts {
    /// Stage-2 model: no FiLM generator.
    pub fn new(config: GenConfig, speaker_ids: &[usize]) -> Result<Self> {
        config.validate()?;
        if speaker_ids.is_empty() {
            return Err(Error::Empty("generator speaker set".into()));
        }
        let mut rng = stream(config.seed, &["gen", "init"]);
        let mut store = ParamStore::new();
        let c = &config;
        let ch = c.channels;
        let unique: std::collections::BTreeSet<usize> = speaker_ids.iter().copied().collect();
        let speakers: BTreeMap<usize, usize> = unique.into_iter().enumerate().map(|(i, s)| (s, i)).collect();
        let token_emb = store.normal("text.embedding", c.n_tokens, c.text_dim, 0.3, &mut rng);
        let enc1 = Conv1d::new(&mut store, "text.conv1", c.text_dim, c.text_dim, 3, &mut rng);
        let enc2 = Conv1d::new(&mut store, "text.conv2", c.text_dim, c.text_dim, 3, &mut rng);
        let mu_proj = Linear::new(&mut store, "text.mu", c.text_dim, c.frame_dim, &mut rng);
        let speaker_table = store.normal("speaker.table", speakers.len(), c.speaker_dim, 0.3, &mut rng);
        let dur_conv = Conv1d::new(&mut store, "duration.conv", c.text_dim + c.speaker_dim, c.duration_hidden, 3, &mut rng);
        let dur_out = Linear::new(&mut store, "duration.out", c.duration_hidden, 1, &mut rng);
        let time1 = Linear::new(&mut store, "decoder.time1", c.time_dim, ch, &mut rng);
        let time2 = Linear::new(&mut store, "decoder.time2", ch, ch, &mut rng);
        let spk_proj = Linear::new(&mut store, "decoder.speaker", c.speaker_dim, ch, &mut rng);
        let dec_in = Linear::new(&mut store, "decoder.in", 2 * c.frame_dim + POSITION_FEATURES, ch, &mut rng);
        let names = ["down1", "down2", "mid", "up2", "up1"];
        let blocks = names.map(|n| ResBlock::new(&mut store, &format!("decoder.{n}"), ch, &mut rng));
        let merge2 = Linear::new(&mut store, "decoder.merge2", 2 * ch, ch, &mut rng);
        let merge1 = Linear::new(&mut store, "decoder.merge1", 2 * ch, ch, &mut rng);
        let attn = Attention {
            q: Linear::new(&mut store, "decoder.attn.q", ch, ch, &mut rng),
            k: Linear::new(&mut store, "decoder.attn.k", ch, ch, &mut rng),
            v: Linear::new(&mut store, "decoder.attn.v", ch, ch, &mut rng),
            o: Linear::new(&mut store, "decoder.attn.o", ch, ch, &mut rng),
        };
        let dec_out = Linear::new(&mut store, "decoder.out", ch, c.frame_dim, &mut rng);
        Ok(Self {
            config,
            store,
            speakers,
            stage: GenStage::Pretrained,
            layers: GenLayers {
                token_emb,
                enc1,
                enc2,
                mu_proj,
                speaker_table,
                dur_conv,
                dur_out,
                time1,
                time2,
                spk_proj,
                dec_in,
                blocks,
                merge2,
                merge1,
                attn,
                dec_out,
            },
            film: None,
        })
    }

    /// Enter stage 3: attach a FiLM generator whose last layer starts at zero,
    /// so every block is modulated by γ = 1, β = 0 until trained.
    pub fn enable_film(&mut self) {
        if self.film.is_some() {
            return;
        }
        let c = &self.config;
        let mut rng = stream(c.seed, &["gen", "film"]);
        let hidden = Linear::new(&mut self.store, "film.hidden", c.cond_dim, c.film_hidden, &mut rng);
        let out = Linear::zeroed(&mut self.store, "film.out", c.film_hidden, 2 * c.channels * FILM_BLOCKS);
        self.film = Some(FilmGenerator { hidden, out });
        self.stage = GenStage::Finetuned;
    }

    pub fn has_film(&self) -> bool {
        self.film.is_some()
    }

    /// Add table rows for unseen speakers (small random init).
    pub fn extend_speakers(&mut self, speaker_ids: &[usize]) {
        let fresh: Vec<usize> = speaker_ids
            .iter()
            .copied()
            .filter(|s| !self.speakers.contains_key(s))
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        if fresh.is_empty() {
            return;
        }
        let mut rng = stream(self.config.seed, &["gen", "speakers", &self.speakers.len().to_string()]);
        let old = self.store.get(self.layers.speaker_table).clone();
        let mut table = Array2::zeros((old.nrows() + fresh.len(), old.ncols()));
        table.slice_mut(s![..old.nrows(), ..]).assign(&old);
        for r in old.nrows()..table.nrows() {
            for v in table.row_mut(r) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = 0.3 * z;
            }
        }
        for (k, s) in fresh.into_iter().enumerate() {
            self.speakers.insert(s, old.nrows() + k);
        }
        *self.store.get_mut(self.layers.speaker_table) = table;
    }

    fn speaker_row(&self, speaker_id: usize) -> Result<usize> {
        self.speakers.get(&speaker_id).copied().ok_or(Error::OutOfRange {
            what: "speaker id",
            value: speaker_id as f64,
            expected: "a speaker seen in training",
        })
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.n_tokens) {
            return Err(Error::OutOfRange {
                what: "token id",
                value: bad as f64,
                expected: "< n_tokens",
            });
        }
        Ok(())
    }

    /// Text hidden states (`L × text_dim`).
    fn encode_text(&self, s: &Session, tokens: &[usize]) -> Var {
        let l = &self.layers;
        let e = s.gather_rows(s.param(l.token_emb), tokens);
        let h = s.add(e, s.relu(l.enc1.forward(s, e)));
        s.add(h, s.relu(l.enc2.forward(s, h)))
    }

    fn speaker_embedding(&self, s: &Session, row: usize) -> Var {
        s.gather_rows(s.param(self.layers.speaker_table), &[row])
    }

    fn log_durations(&self, s: &Session, text: Var, spk: Var, n: usize) -> Var {
        let l = &self.layers;
        let ones = s.input(Array2::ones((n, 1)));
        let spk_rows = s.matmul(ones, spk);
        let x = s.concat_cols(&[s.detach(text), spk_rows]);
        let h = s.relu(l.dur_conv.forward(s, x));
        l.dur_out.forward(s, h)
    }

    /// FiLM scale/shift rows for every block, or `None` for an unconditioned model.
    fn film_rows(&self, s: &Session, c_dep: Option<&[f64]>) -> Result<Option<Var>> {
        let Some(film) = self.film else {
            return Ok(None);
        };
        let c = c_dep.ok_or_else(|| Error::MissingLabels("finetuned generator needs c_dep".into()))?;
        if c.len() != self.config.cond_dim {
            return Err(Error::Shape(format!(
                "condition has {} dims, expected {}",
                c.len(),
                self.config.cond_dim
            )));
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("non-finite condition".into()));
        }
        let x = s.input(Array2::from_shape_vec((1, c.len()), c.to_vec()).expect("row"));
        let h = s.dropout(s.relu(film.hidden.forward(s, x)), self.config.film_dropout);
        Ok(Some(film.out.forward(s, h)))
    }

    /// Eval-mode FiLM parameters for a condition.
    pub fn film_generate(&self, c_dep: &[f64]) -> Result<FilmParams> {
        let s = Session::eval(&self.store);
        let Some(rows) = self.film_rows(&s, Some(c_dep))? else {
            return Err(Error::Prerequisite("tts-finetune".into()));
        };
        let v = s.value(rows);
        let ch = self.config.channels;
        let blocks = (0..FILM_BLOCKS)
            .map(|b| {
                let base = 2 * ch * b;
                let gamma = (0..ch).map(|j| 1.0 + v[[0, base + j]]).collect();
                let beta = (0..ch).map(|j| v[[0, base + ch + j]]).collect();
                (gamma, beta)
            })
            .collect();
        Ok(FilmParams { blocks })
    }

    fn modulate(&self, s: &Session, h: Var, film: Option<Var>, block: usize) -> Var {
        let Some(rows) = film else {
            return h;
        };
        let ch = self.config.channels;
        let base = 2 * ch * block;
        let gamma = s.add_scalar(s.slice_cols(rows, base, ch), 1.0);
        let beta = s.slice_cols(rows, base + ch, ch);
        s.add(s.mul(h, gamma), beta)
    }

    /// Velocity prediction for padded inputs (`T` a multiple of 4).
    #[allow(clippy::too_many_arguments)]
    fn velocity(&self, s: &Session, xt: Var, mu: Var, pos: Var, t: f64, spk: Var, film: Option<Var>) -> Var {
        let l = &self.layers;
        let t_len = s.shape(xt).0;
        let temb = s.input(time_features(t, self.config.time_dim));
        let temb = l.time2.forward(s, s.relu(l.time1.forward(s, temb)));
        let cond = s.add(temb, l.spk_proj.forward(s, spk));

        let h0 = l.dec_in.forward(s, s.concat_cols(&[xt, mu, pos]));
        let h1 = self.modulate(s, l.blocks[0].forward(s, h0, cond), film, 0);
        let d1 = s.matmul(s.input(pool_matrix(t_len)), h1);
        let h2 = self.modulate(s, l.blocks[1].forward(s, d1, cond), film, 1);
        let d2 = s.matmul(s.input(pool_matrix(t_len / 2)), h2);
        let m = self.modulate(s, l.blocks[2].forward(s, d2, cond), film, 2);
        let m = l.attn.forward(s, m);
        let u2 = s.matmul(s.input(upsample_matrix(t_len / 2)), m);
        let u2 = l.merge2.forward(s, s.concat_cols(&[u2, h2]));
        let u2 = self.modulate(s, l.blocks[3].forward(s, u2, cond), film, 3);
        let u1 = s.matmul(s.input(upsample_matrix(t_len)), u2);
        let u1 = l.merge1.forward(s, s.concat_cols(&[u1, h1]));
        let u1 = self.modulate(s, l.blocks[4].forward(s, u1, cond), film, 4);
        l.dec_out.forward(s, s.relu(u1))
    }

    /// Frame-level prior means for the frame index list (padding rows map to zero).
    fn frame_means(&self, s: &Session, mu_tok: Var, frame_tokens: &[Option<usize>]) -> Var {
        let n_tok = s.shape(mu_tok).0;
        let zero = s.input(Array2::zeros((1, self.config.frame_dim)));
        let table = s.concat_rows(&[mu_tok, zero]);
        let idx: Vec<usize> = frame_tokens.iter().map(|t| t.unwrap_or(n_tok)).collect();
        s.gather_rows(table, &idx)
    }

    /// Draw the crop start, flow time and noise for one example.
    pub fn draw<R: Rng>(&self, ex: &GenExample, rng: &mut R) -> FlowDraw {
        let t_total = ex.frames.nrows();
        let seg = self.config.segment_frames;
        let start = if t_total > seg { rng.random_range(0..=t_total - seg) } else { 0 };
        let len = t_total.min(seg);
        let padded = len.div_ceil(4) * 4;
        let t: f64 = rng.random();
        let z = Array2::from_shape_fn((padded, self.config.frame_dim), |_| StandardNormal.sample(rng));
        FlowDraw { t, z, start }
    }

    pub fn losses(&self, s: &Session, ex: &GenExample, draw: &FlowDraw) -> Result<GenLosses> {
        self.check_tokens(&ex.tokens)?;
        if ex.tokens.len() != ex.durations.len() {
            return Err(Error::Shape("one duration per token".into()));
        }
        if ex.frames.ncols() != self.config.frame_dim {
            return Err(Error::Shape("frame_dim mismatch".into()));
        }
        let total: usize = ex.durations.iter().sum();
        if total != ex.frames.nrows() {
            return Err(Error::Shape(format!(
                "durations cover {total} frames, utterance has {}",
                ex.frames.nrows()
            )));
        }
        let row = self.speaker_row(ex.speaker_id)?;
        let spk = self.speaker_embedding(s, row);
        let text = self.encode_text(s, &ex.tokens);
        let mu_tok = self.layers.mu_proj.forward(s, text);
        let log_w = self.log_durations(s, text, spk, ex.tokens.len());
        let w: Vec<f64> = ex.durations.iter().map(|&d| d as f64).collect();
        let dur = duration_loss_graph(s, log_w, &w)?;

        let frame_tokens: Vec<usize> = ex
            .durations
            .iter()
            .enumerate()
            .flat_map(|(i, &d)| std::iter::repeat_n(i, d))
            .collect();
        let len = ex.frames.nrows().min(self.config.segment_frames);
        let padded = draw.z.nrows();
        if padded != len.div_ceil(4) * 4 || draw.start + len > ex.frames.nrows() {
            return Err(Error::Shape("flow draw does not fit the example".into()));
        }
        let mut idx = Vec::with_capacity(padded);
        let mut x1 = Array2::zeros((padded, self.config.frame_dim));
        let mut mask = vec![false; padded];
        for i in 0..padded {
            if i < len {
                idx.push(Some(frame_tokens[draw.start + i]));
                x1.row_mut(i).assign(&ex.frames.row(draw.start + i));
                mask[i] = true;
            } else {
                idx.push(None);
            }
        }
        let mu = self.frame_means(s, mu_tok, &idx);
        let y = s.input(x1.clone());
        let prior = prior_loss_graph(s, y, mu, &mask)?;

        let (xt, u) = flow_path_sample(&x1, &draw.z, draw.t, self.config.sigma_min)?;
        let film = self.film_rows(s, ex.c_dep.as_deref())?;
        let pos = s.input(token_positions(&ex.durations, draw.start, len, padded));
        let pred = self.velocity(s, s.input(xt), mu, pos, draw.t, spk, film);
        let fm = masked_sq_mean(s, pred, s.input(u), &mask)?;
        let total = s.add(s.add(dur, s.scale(prior, self.config.lambda_p)), fm);
        Ok(GenLosses { total, dur, prior, fm })
    }

    /// Predicted durations (rounded up, at least one frame).
    pub fn predict_durations(&self, tokens: &[usize], speaker_id: usize) -> Result<Vec<usize>> {
        self.check_tokens(tokens)?;
        let row = self.speaker_row(speaker_id)?;
        let s = Session::eval(&self.store);
        let spk = self.speaker_embedding(&s, row);
        let text = self.encode_text(&s, tokens);
        let log_w = self.log_durations(&s, text, spk, tokens.len());
        let v = s.value(log_w);
        Ok(v.iter().map(|x| (x.exp().ceil() as usize).max(1)).collect())
    }

    /// Generate frames for `tokens` with the given durations; `seed` fixes the noise.
    pub fn sample_with_durations(
        &self,
        tokens: &[usize],
        durations: &[usize],
        speaker_id: usize,
        c_dep: Option<&[f64]>,
        steps: usize,
        seed: u64,
    ) -> Result<Array2<f64>> {
        self.check_tokens(tokens)?;
        if durations.len() != tokens.len() || durations.iter().any(|&d| d == 0) {
            return Err(Error::Shape("one positive duration per token".into()));
        }
        if steps == 0 {
            return Err(Error::config("ode_steps", "must be positive"));
        }
        let row = self.speaker_row(speaker_id)?;
        let t_len: usize = durations.iter().sum();
        let padded = t_len.div_ceil(4) * 4;
        let frame_tokens: Vec<Option<usize>> = durations
            .iter()
            .enumerate()
            .flat_map(|(i, &d)| std::iter::repeat_n(Some(i), d))
            .chain(std::iter::repeat_n(None, padded - t_len))
            .collect();
        let mut rng = stream(seed, &["sample"]);
        let mut x = Array2::from_shape_fn((padded, self.config.frame_dim), |_| StandardNormal.sample(&mut rng));
        let positions = token_positions(durations, 0, t_len, padded);
        let dt = 1.0 / steps as f64;
        for k in 0..steps {
            let t = k as f64 * dt;
            let s = Session::eval(&self.store);
            let spk = self.speaker_embedding(&s, row);
            let text = self.encode_text(&s, tokens);
            let mu_tok = self.layers.mu_proj.forward(&s, text);
            let mu = self.frame_means(&s, mu_tok, &frame_tokens);
            let film = self.film_rows(&s, c_dep)?;
            let pos = s.input(positions.clone());
            let v = self.velocity(&s, s.input(x.clone()), mu, pos, t, spk, film);
            x.scaled_add(dt, &*s.value(v));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                stage: "tts-sample".into(),
                detail: "sampled frames contain non-finite values".into(),
            });
        }
        Ok(x.slice(s![..t_len, ..]).to_owned())
    }

    /// Predict durations, then integrate the flow with `ode_steps` Euler steps.
    pub fn sample(&self, tokens: &[usize], speaker_id: usize, c_dep: Option<&[f64]>, seed: u64) -> Result<(Array2<f64>, Vec<usize>)> {
        let durations = self.predict_durations(tokens, speaker_id)?;
        let frames = self.sample_with_durations(tokens, &durations, speaker_id, c_dep, self.config.ode_steps, seed)?;
        Ok((frames, durations))
    }

    fn meta(&self) -> Result<String> {
        Ok(serde_json::to_string(&GenMeta {
            kind: "tts".into(),
            stage: self.stage,
            config: self.config.clone(),
            config_digest: self.config.digest(),
            speakers: self.speakers.iter().map(|(&k, &v)| (k, v)).collect(),
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
        let meta: GenMeta = serde_json::from_str(&meta)?;
        if meta.kind != "tts" {
            return Err(Error::Parse {
                path: path.display().to_string(),
                reason: format!("checkpoint kind {} is not tts", meta.kind),
            });
        }
        if meta.config.digest() != meta.config_digest {
            return Err(Error::DigestMismatch {
                stage: "tts".into(),
                stored: meta.config_digest,
                current: meta.config.digest(),
            });
        }
        let mut by_row = meta.speakers.clone();
        by_row.sort_by_key(|&(_, r)| r);
        let ids: Vec<usize> = by_row.iter().map(|&(s, _)| s).collect();
        let mut model = Self::new(meta.config, &ids)?;
        if meta.stage == GenStage::Finetuned {
            model.enable_film();
        }
        let copied = model.store.load_matching(&stored);
        if copied != model.store.len() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                reason: format!("checkpoint holds {copied} of {} tensors", model.store.len()),
            });
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GenMeta {
    kind: String,
    stage: GenStage,
    config: GenConfig,
    config_digest: String,
    speakers: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenEpochLog {
    pub epoch: usize,
    pub train: GenLossValues,
    pub dev: Option<GenLossValues>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenTrainReport {
    pub stage: GenStage,
    pub log: Vec<GenEpochLog>,
    /// Every component stayed nonnegative in every step.
    pub components_nonnegative: bool,
}

/// Deterministic loss over `examples` with draws from a fixed stream.
pub fn evaluate_gen(model: &FlowTts, examples: &[GenExample], seed: u64) -> Result<GenLossValues> {
    if examples.is_empty() {
        return Err(Error::Empty("generator evaluation set".into()));
    }
    let vals: Vec<GenLossValues> = examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut rng = stream(seed, &["gen-eval", &i.to_string()]);
            let draw = model.draw(ex, &mut rng);
            let s = Session::eval(&model.store);
            let l = model.losses(&s, ex, &draw)?;
            Ok(GenLossValues {
                total: s.scalar(l.total),
                dur: s.scalar(l.dur),
                prior: s.scalar(l.prior),
                fm: s.scalar(l.fm),
            })
        })
        .collect::<Result<_>>()?;
    let mut sum = GenLossValues::zero();
    vals.iter().for_each(|v| sum.add(v));
    Ok(sum.scaled(1.0 / vals.len() as f64))
}

/// Train all parameters for `config.epochs` epochs over `train`.
pub fn train_gen(model: &mut FlowTts, train: &[GenExample], dev: &[GenExample]) -> Result<GenTrainReport> {
    if train.is_empty() {
        return Err(Error::Empty("generator training set".into()));
    }
    let cfg = model.config.clone();
    let stage_label = match model.stage {
        GenStage::Pretrained => "pretrain",
        GenStage::Finetuned => "finetune",
    };
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay).with_clip(5.0);
    let mut rng = stream(cfg.seed, &["gen", stage_label]);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::new();
    let mut nonneg = true;
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = GenLossValues::zero();
        let mut count = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let draws: Vec<FlowDraw> = chunk.iter().map(|&i| model.draw(&train[i], &mut rng)).collect();
            let s = Session::train(&model.store, derive_seed(cfg.seed, &[stage_label, "dropout", &step.to_string()]));
            let mut parts = Vec::with_capacity(chunk.len());
            let mut batch_vals = GenLossValues::zero();
            for (&i, draw) in chunk.iter().zip(&draws) {
                let l = model.losses(&s, &train[i], draw)?;
                let v = GenLossValues {
                    total: s.scalar(l.total),
                    dur: s.scalar(l.dur),
                    prior: s.scalar(l.prior),
                    fm: s.scalar(l.fm),
                };
                nonneg &= v.dur >= 0.0 && v.prior >= 0.0 && v.fm >= 0.0;
                batch_vals.add(&v);
                parts.push(l.total);
            }
            let mut loss = parts[0];
            for &p in &parts[1..] {
                loss = s.add(loss, p);
            }
            let loss = s.scale(loss, 1.0 / parts.len() as f64);
            if !s.scalar(loss).is_finite() {
                return Err(Error::NonFinite {
                    stage: format!("tts-{stage_label}"),
                    detail: format!("epoch {epoch} step {step}"),
                });
            }
            let grads = s.backward(loss).params().clone();
            drop(s);
            opt.step(&mut model.store, &grads);
            sum.add(&batch_vals);
            count += chunk.len() as f64;
        }
        let dev_vals = if dev.is_empty() {
            None
        } else {
            Some(evaluate_gen(model, dev, cfg.seed)?)
        };
        log.push(GenEpochLog {
            epoch,
            train: sum.scaled(1.0 / count),
            dev: dev_vals,
        });
    }
    Ok(GenTrainReport {
        stage: model.stage,
        log,
        components_nonnegative: nonneg,
    })
}

/// Token-recovery accuracy of a nearest-template classifier over frames whose
/// token is known. Frames below the silence energy floor are skipped.
pub fn token_recovery(
    frames: &Array2<f64>,
    frame_tokens: &[usize],
    templates: &Array2<f64>,
) -> Result<f64> {
    if frames.nrows() != frame_tokens.len() {
        return Err(Error::Shape("one token per frame".into()));
    }
    let centered = frames - &frames.mean_axis(ndarray::Axis(0)).expect("nonempty");
    let tmean = templates.mean_axis(ndarray::Axis(0)).expect("nonempty");
    let tc = templates - &tmean;
    let energy: Vec<f64> = frames.rows().into_iter().map(|r| r.dot(&r)).collect();
    let floor = 0.25 * crate::metrics::median(&energy).unwrap_or(0.0);
    let mut hit = 0usize;
    let mut n = 0usize;
    for (i, row) in centered.rows().into_iter().enumerate() {
        if energy[i] < floor {
            continue;
        }
        let norm = row.dot(&row).sqrt().max(1e-12);
        let mut best = (f64::NEG_INFINITY, 0);
        for (k, t) in tc.rows().into_iter().enumerate() {
            let c = row.dot(&t) / (norm * t.dot(&t).sqrt().max(1e-12));
            if c > best.0 {
                best = (c, k);
            }
        }
        n += 1;
        if best.1 == frame_tokens[i] {
            hit += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty("no voiced frames".into()));
    }
    Ok(hit as f64 / n as f64)
}

/// Mean frame minus the vocabulary centroid: the channel-wise speaker signature.
pub fn speaker_signature(frames: &Array2<f64>, centroid: &ndarray::Array1<f64>) -> Vec<f64> {
    let energy: Vec<f64> = frames.rows().into_iter().map(|r| r.dot(&r)).collect();
    let floor = 0.25 * crate::metrics::median(&energy).unwrap_or(0.0);
    let mut sum = ndarray::Array1::<f64>::zeros(frames.ncols());
    let mut n = 0.0;
    for (row, e) in frames.rows().into_iter().zip(&energy) {
        if *e >= floor {
            sum += &row;
            n += 1.0;
        }
    }
    if n > 0.0 {
        sum /= n;
    }
    (sum - centroid).to_vec()
}

//! Synthetic utterance world with known latent factors.
//!
//! Each subject has a PHQ-like severity score, a speaker signature (additive
//! channel offset) and a sentiment disposition whose coupling to the diagnosis
//! is set by `bias`. Frames are token templates deformed by three severity
//! markers: trailing pauses after tokens (silence ratio), shrinkage of the
//! template toward the vocabulary centroid (centralization) and per-frame gain
//! jitter (amplitude perturbation).

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{digest, stream};

pub const SEVERITY_MAX: f64 = 24.0;
pub const N_LEVELS: usize = 5;
/// Representative score of each severity bin.
pub const BIN_CENTERS: [f64; N_LEVELS] = [2.0, 7.0, 12.0, 17.0, 22.0];
/// Crop length standing in for a 10 s segment at the synthetic frame rate.
pub const CROP_FRAMES: usize = 100;
/// Binary label: depressed iff score ≥ this value.
pub const DEPRESSED_THRESHOLD: f64 = 10.0;
/// Standard deviation of the frames rendered for a pause.
pub const SILENCE_SIGMA: f64 = 0.1;

/// Map a score in `[0, 24]` to its bin: 0–4, 5–9, 10–14, 15–19, 20–24.
pub fn severity_to_level(score: f64) -> Result<usize> {
    if !(0.0..=SEVERITY_MAX).contains(&score) {
        return Err(Error::OutOfRange {
            what: "severity score",
            value: score,
            expected: "[0, 24]",
        });
    }
    Ok(((score / 5.0).floor() as usize).min(N_LEVELS - 1))
}

pub fn is_depressed(score: f64) -> bool {
    score >= DEPRESSED_THRESHOLD
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sentiment {
    Positive,
    Neutral,
    Negative,
}

impl Sentiment {
    pub const ALL: [Sentiment; 3] = [Sentiment::Positive, Sentiment::Neutral, Sentiment::Negative];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_benign(self) -> bool {
        self != Sentiment::Negative
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeverityMode {
    /// Subject `i` is placed in bin `i mod 5`, score uniform inside the bin.
    Stratified,
    /// Integer score uniform on 0..=24.
    Uniform,
}

/// World parameters; stored as a flat `key = value` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub seed: u64,
    /// Seed of the token templates; shared between worlds that share a vocabulary.
    pub template_seed: u64,
    pub id_prefix: String,
    pub speaker_id_offset: usize,
    pub n_subjects: usize,
    pub utterances_per_subject: usize,
    pub n_content_tokens: usize,
    pub tokens_min: usize,
    pub tokens_max: usize,
    pub frame_dim: usize,
    pub frames_per_token_min: usize,
    pub frames_per_token_max: usize,
    pub pause_frames_min: usize,
    pub pause_frames_max: usize,
    pub severity_mode: SeverityMode,
    pub bias: f64,
    pub marker_gain_silence: f64,
    pub marker_gain_centralization: f64,
    pub marker_gain_perturbation: f64,
    pub noise_sigma: f64,
    pub speaker_scale: f64,
    /// Log-scale spread of per-speaker spectral gains.
    pub speaker_timbre: f64,
    pub dev_fraction: f64,
    pub test_fraction: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            template_seed: 1234,
            id_prefix: "w".into(),
            speaker_id_offset: 0,
            n_subjects: 60,
            utterances_per_subject: 24,
            n_content_tokens: 24,
            tokens_min: 8,
            tokens_max: 18,
            frame_dim: 16,
            frames_per_token_min: 4,
            frames_per_token_max: 8,
            pause_frames_min: 2,
            pause_frames_max: 4,
            severity_mode: SeverityMode::Stratified,
            bias: 0.8,
            marker_gain_silence: 1.0,
            marker_gain_centralization: 1.0,
            marker_gain_perturbation: 1.0,
            noise_sigma: 0.3,
            speaker_scale: 0.8,
            speaker_timbre: 0.3,
            dev_fraction: 0.2,
            test_fraction: 0.2,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_subjects", self.n_subjects),
            ("utterances_per_subject", self.utterances_per_subject),
            ("n_content_tokens", self.n_content_tokens),
            ("tokens_min", self.tokens_min),
            ("frames_per_token_min", self.frames_per_token_min),
            ("pause_frames_min", self.pause_frames_min),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.n_content_tokens < 3 {
            return Err(Error::config("n_content_tokens", "need at least one token per sentiment"));
        }
        if self.frame_dim < 4 {
            return Err(Error::config("frame_dim", "must be at least 4"));
        }
        if self.tokens_max < self.tokens_min {
            return Err(Error::config("tokens_max", "smaller than tokens_min"));
        }
        if self.frames_per_token_max < self.frames_per_token_min {
            return Err(Error::config("frames_per_token_max", "smaller than frames_per_token_min"));
        }
        if self.pause_frames_max < self.pause_frames_min {
            return Err(Error::config("pause_frames_max", "smaller than pause_frames_min"));
        }
        if !(0.0..=1.0).contains(&self.bias) {
            return Err(Error::config("bias", format!("{} not in [0, 1]", self.bias)));
        }
        for (field, v) in [
            ("marker_gain_silence", self.marker_gain_silence),
            ("marker_gain_centralization", self.marker_gain_centralization),
            ("marker_gain_perturbation", self.marker_gain_perturbation),
            ("noise_sigma", self.noise_sigma),
            ("speaker_scale", self.speaker_scale),
            ("speaker_timbre", self.speaker_timbre),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(field, "must be finite and nonnegative"));
            }
        }
        for (field, v) in [("dev_fraction", self.dev_fraction), ("test_fraction", self.test_fraction)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(field, "must be in [0, 1)"));
            }
        }
        if self.dev_fraction + self.test_fraction >= 1.0 {
            return Err(Error::config("test_fraction", "dev + test fractions leave no training subjects"));
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

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }

    pub fn digest(&self) -> String {
        digest(self.to_text().as_bytes())
    }

    pub fn marker_gains(&self) -> BTreeMap<&'static str, f64> {
        BTreeMap::from([
            ("centralization", self.marker_gain_centralization),
            ("perturbation", self.marker_gain_perturbation),
            ("silence", self.marker_gain_silence),
        ])
    }

    /// Probability that a subject is negative-leaning, given the diagnosis.
    pub fn p_negative_disposition(&self, depressed: bool) -> f64 {
        if depressed {
            0.5 + 0.4 * self.bias
        } else {
            0.5 - 0.4 * self.bias
        }
    }

    /// Utterance sentiment distribution `[positive, neutral, negative]` for a disposition.
    pub fn sentiment_probs(&self, negative_leaning: bool) -> [f64; 3] {
        let p_neg = if negative_leaning {
            0.35 + 0.5 * self.bias
        } else {
            0.35 - 0.3 * self.bias
        };
        let rest = 1.0 - p_neg;
        [rest * 0.3 / 0.65, rest * 0.35 / 0.65, p_neg]
    }
}

/// Generative marker parameters; each is strictly increasing in the score
/// whenever its gain is positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkerTruth {
    /// Probability that a token is followed by a pause.
    pub silence: f64,
    /// Fraction by which templates shrink toward the vocabulary centroid.
    pub centralization: f64,
    /// Standard deviation of the multiplicative per-frame gain jitter.
    pub perturbation: f64,
}

impl MarkerTruth {
    pub fn for_score(cfg: &WorldConfig, score: f64) -> Self {
        let x = (score / SEVERITY_MAX).clamp(0.0, 1.0);
        Self {
            silence: (cfg.marker_gain_silence * (0.05 + 0.45 * x)).min(0.95),
            centralization: (cfg.marker_gain_centralization * 0.4 * x).min(0.95),
            perturbation: cfg.marker_gain_perturbation * (0.02 + 0.25 * x),
        }
    }

    pub fn as_map(&self) -> BTreeMap<&'static str, f64> {
        BTreeMap::from([
            ("centralization", self.centralization),
            ("perturbation", self.perturbation),
            ("silence", self.silence),
        ])
    }
}

/// Per-token frame templates shared by every world with the same `template_seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    pub templates: Array2<f64>,
    pub centroid: Array1<f64>,
}

impl Vocabulary {
    pub fn new(cfg: &WorldConfig) -> Self {
        let mut rng = stream(cfg.template_seed, &["templates"]);
        let templates = Array2::from_shape_fn((cfg.n_content_tokens, cfg.frame_dim), |_| {
            StandardNormal.sample(&mut rng)
        });
        let centroid = templates.mean_axis(ndarray::Axis(0)).expect("nonempty vocabulary");
        Self { templates, centroid }
    }

    pub fn len(&self) -> usize {
        self.templates.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sentiment carried by a token: the vocabulary is split into thirds.
    pub fn token_sentiment(&self, token: usize) -> Sentiment {
        token_sentiment(token, self.len())
    }

    pub fn tokens_for(&self, sentiment: Sentiment) -> std::ops::Range<usize> {
        tokens_for(sentiment, self.len())
    }

    /// Index of the template nearest (Euclidean) to `frame` after removing `offset`.
    pub fn nearest_token(&self, frame: &[f64], offset: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (k, t) in self.templates.rows().into_iter().enumerate() {
            let d: f64 = t
                .iter()
                .zip(frame)
                .zip(offset)
                .map(|((a, b), o)| (b - o - a).powi(2))
                .sum();
            if d < best.0 {
                best = (d, k);
            }
        }
        best.1
    }
}

pub fn tokens_for(sentiment: Sentiment, vocab: usize) -> std::ops::Range<usize> {
    let third = vocab / 3;
    match sentiment {
        Sentiment::Positive => 0..third,
        Sentiment::Neutral => third..2 * third,
        Sentiment::Negative => 2 * third..vocab,
    }
}

pub fn token_sentiment(token: usize, vocab: usize) -> Sentiment {
    let third = vocab / 3;
    if token < third {
        Sentiment::Positive
    } else if token < 2 * third {
        Sentiment::Neutral
    } else {
        Sentiment::Negative
    }
}

/// One utterance with its latent factors.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub subject_id: String,
    pub speaker_id: usize,
    pub content: Vec<usize>,
    pub durations: Vec<usize>,
    pub frames: Array2<f64>,
    pub severity_score: f64,
    pub severity_level: usize,
    pub sentiment: Sentiment,
    pub marker_truth: MarkerTruth,
}

impl Utterance {
    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn label(&self) -> bool {
        is_depressed(self.severity_score)
    }

    /// Token id of every frame, expanded from the durations.
    pub fn frame_tokens(&self) -> Vec<usize> {
        self.content
            .iter()
            .zip(&self.durations)
            .flat_map(|(&t, &d)| std::iter::repeat_n(t, d))
            .collect()
    }
}

/// Render frames for a token sequence. Returns frames and per-token durations
/// (voiced frames plus any trailing pause).
#[allow(clippy::too_many_arguments)]
pub fn render_frames<R: Rng>(
    cfg: &WorldConfig,
    vocab: &Vocabulary,
    speaker_offset: &Array1<f64>,
    speaker_gain: &Array1<f64>,
    content: &[usize],
    voiced: &[usize],
    markers: &MarkerTruth,
    rng: &mut R,
) -> (Array2<f64>, Vec<usize>) {
    let dim = cfg.frame_dim;
    let mut rows: Vec<f64> = Vec::new();
    let mut durations = Vec::with_capacity(content.len());
    for (&tok, &n) in content.iter().zip(voiced) {
        let centered = &vocab.templates.row(tok) - &vocab.centroid;
        for _ in 0..n {
            let jitter: f64 = StandardNormal.sample(rng);
            let gain = (1.0 - markers.centralization) * (1.0 + markers.perturbation * jitter);
            for d in 0..dim {
                let noise: f64 = StandardNormal.sample(rng);
                let v = vocab.centroid[d] + gain * speaker_gain[d] * centered[d] + speaker_offset[d] + cfg.noise_sigma * noise;
                rows.push(v as f32 as f64);
            }
        }
        let mut total = n;
        let u: f64 = rng.random();
        if u < markers.silence {
            let pause = rng.random_range(cfg.pause_frames_min..=cfg.pause_frames_max);
            for _ in 0..pause * dim {
                let noise: f64 = StandardNormal.sample(rng);
                rows.push((SILENCE_SIGMA * noise) as f32 as f64);
            }
            total += pause;
        }
        durations.push(total);
    }
    let t = rows.len() / dim;
    (
        Array2::from_shape_vec((t, dim), rows).expect("row-major frame buffer"),
        durations,
    )
}

/// Subject-level latents.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub index: usize,
    pub id: String,
    pub speaker_id: usize,
    pub severity_score: f64,
    pub negative_leaning: bool,
    pub speaker_offset: Array1<f64>,
    pub speaker_gain: Array1<f64>,
    pub split: Split,
}

fn sample_score(cfg: &WorldConfig, index: usize, rng: &mut ChaCha8Rng) -> f64 {
    match cfg.severity_mode {
        SeverityMode::Stratified => {
            let level = index % N_LEVELS;
            let lo = 5 * level;
            let hi = if level == N_LEVELS - 1 { 24 } else { lo + 4 };
            rng.random_range(lo..=hi) as f64
        }
        SeverityMode::Uniform => rng.random_range(0..=24) as f64,
    }
}

pub fn speaker_offset(cfg: &WorldConfig, speaker_id: usize) -> Array1<f64> {
    let mut rng = stream(cfg.seed, &["speaker", &speaker_id.to_string()]);
    Array1::from_shape_fn(cfg.frame_dim, |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        cfg.speaker_scale * z
    })
}

/// Per-dimension multiplicative gain on the token deviation, `exp(timbre · z)`.
pub fn speaker_gain(cfg: &WorldConfig, speaker_id: usize) -> Array1<f64> {
    let mut rng = stream(cfg.seed, &["timbre", &speaker_id.to_string()]);
    Array1::from_shape_fn(cfg.frame_dim, |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        (cfg.speaker_timbre * z).exp()
    })
}

pub fn subjects(cfg: &WorldConfig) -> Vec<Subject> {
    let mut subjects: Vec<Subject> = (0..cfg.n_subjects)
        .map(|i| {
            let mut rng = stream(cfg.seed, &["subject", &i.to_string()]);
            let score = sample_score(cfg, i, &mut rng);
            let negative_leaning = rng.random::<f64>() < cfg.p_negative_disposition(is_depressed(score));
            let speaker_id = cfg.speaker_id_offset + i;
            Subject {
                index: i,
                id: format!("{}{:03}", cfg.id_prefix, i),
                speaker_id,
                severity_score: score,
                negative_leaning,
                speaker_offset: speaker_offset(cfg, speaker_id),
                speaker_gain: speaker_gain(cfg, speaker_id),
                split: Split::Train,
            }
        })
        .collect();

    // Stratified subject-level split: within each bin, shuffle then carve test/dev.
    let mut rng = stream(cfg.seed, &["split"]);
    for level in 0..N_LEVELS {
        let mut members: Vec<usize> = subjects
            .iter()
            .filter(|s| severity_to_level(s.severity_score).expect("score in range") == level)
            .map(|s| s.index)
            .collect();
        members.shuffle(&mut rng);
        let n = members.len() as f64;
        let n_test = (n * cfg.test_fraction).round() as usize;
        let n_dev = (n * cfg.dev_fraction).round() as usize;
        for (k, &i) in members.iter().enumerate() {
            subjects[i].split = if k < n_test {
                Split::Test
            } else if k < n_test + n_dev {
                Split::Dev
            } else {
                Split::Train
            };
        }
    }
    subjects
}

fn sample_sentiment(probs: [f64; 3], rng: &mut ChaCha8Rng) -> Sentiment {
    let u: f64 = rng.random();
    if u < probs[0] {
        Sentiment::Positive
    } else if u < probs[0] + probs[1] {
        Sentiment::Neutral
    } else {
        Sentiment::Negative
    }
}

pub fn generate_utterance(cfg: &WorldConfig, vocab: &Vocabulary, subject: &Subject, k: usize) -> Utterance {
    let mut rng = stream(cfg.seed, &["utterance", &subject.index.to_string(), &k.to_string()]);
    let sentiment = sample_sentiment(cfg.sentiment_probs(subject.negative_leaning), &mut rng);
    let n_tokens = rng.random_range(cfg.tokens_min..=cfg.tokens_max);
    let range = vocab.tokens_for(sentiment);
    let content: Vec<usize> = (0..n_tokens).map(|_| rng.random_range(range.clone())).collect();
    let voiced: Vec<usize> = (0..n_tokens)
        .map(|_| rng.random_range(cfg.frames_per_token_min..=cfg.frames_per_token_max))
        .collect();
    let markers = MarkerTruth::for_score(cfg, subject.severity_score);
    let (frames, durations) =
        render_frames(cfg, vocab, &subject.speaker_offset, &subject.speaker_gain, &content, &voiced, &markers, &mut rng);
    Utterance {
        id: format!("{}_{:03}", subject.id, k),
        subject_id: subject.id.clone(),
        speaker_id: subject.speaker_id,
        content,
        durations,
        frames,
        severity_score: subject.severity_score,
        severity_level: severity_to_level(subject.severity_score).expect("score in range"),
        sentiment,
        marker_truth: markers,
    }
}

/// A generated corpus held in memory.
#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub vocab: Vocabulary,
    pub subjects: Vec<Subject>,
    pub utterances: Vec<Utterance>,
    pub manifest: DatasetManifest,
}

impl World {
    pub fn utterance(&self, id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.id == id)
    }

    pub fn split_of(&self, subject_id: &str) -> Option<Split> {
        self.subjects.iter().find(|s| s.id == subject_id).map(|s| s.split)
    }
}

pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let vocab = Vocabulary::new(cfg);
    let subjects = subjects(cfg);
    let jobs: Vec<(usize, usize)> = (0..subjects.len())
        .flat_map(|s| (0..cfg.utterances_per_subject).map(move |k| (s, k)))
        .collect();
    let utterances: Vec<Utterance> = jobs
        .par_iter()
        .map(|&(s, k)| generate_utterance(cfg, &vocab, &subjects[s], k))
        .collect();
    let records = utterances
        .iter()
        .map(|u| {
            let split = subjects
                .iter()
                .find(|s| s.id == u.subject_id)
                .expect("utterance subject exists")
                .split;
            ManifestRecord::from_utterance(u, split)
        })
        .collect();
    let manifest = DatasetManifest {
        seed: cfg.seed,
        config_digest: cfg.digest(),
        frame_dim: cfg.frame_dim,
        records,
    };
    Ok(World {
        config: cfg.clone(),
        vocab,
        subjects,
        utterances,
        manifest,
    })
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub subject_id: String,
    pub speaker_id: usize,
    pub split: Split,
    pub severity_score: f64,
    pub severity_level: usize,
    pub label: u8,
    pub sentiment: Sentiment,
    pub frames_path: String,
    pub n_frames: usize,
    pub content: Vec<usize>,
    pub durations: Vec<usize>,
    pub marker_truth: MarkerTruth,
    #[serde(default)]
    pub synthetic: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_text_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition_severity: Option<f64>,
}

impl ManifestRecord {
    pub fn from_utterance(u: &Utterance, split: Split) -> Self {
        Self {
            id: u.id.clone(),
            subject_id: u.subject_id.clone(),
            speaker_id: u.speaker_id,
            split,
            severity_score: u.severity_score,
            severity_level: u.severity_level,
            label: u8::from(u.label()),
            sentiment: u.sentiment,
            frames_path: format!("frames/{}.f32", u.id),
            n_frames: u.n_frames(),
            content: u.content.clone(),
            durations: u.durations.clone(),
            marker_truth: u.marker_truth,
            synthetic: false,
            source_text_id: None,
            condition_severity: None,
        }
    }

    pub fn depressed(&self) -> bool {
        self.label == 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestMeta {
    pub seed: u64,
    pub config_digest: String,
    pub frame_dim: usize,
    pub n_records: usize,
}

/// Records plus provenance. On disk: `manifest.jsonl` (one record per line)
/// and `manifest.meta.json`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub config_digest: String,
    pub frame_dim: usize,
    pub records: Vec<ManifestRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const MANIFEST_META_FILE: &str = "manifest.meta.json";

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Subject ids in first-appearance order.
    pub fn subjects(&self, split: Split) -> Vec<String> {
        let mut seen = Vec::new();
        for r in self.split(split) {
            if !seen.contains(&r.subject_id) {
                seen.push(r.subject_id.clone());
            }
        }
        seen
    }

    /// No subject in two splits and no synthetic record outside train.
    pub fn check_split_hygiene(&self) -> Result<()> {
        let mut owner: BTreeMap<&str, Split> = BTreeMap::new();
        for r in &self.records {
            if r.synthetic && r.split != Split::Train {
                return Err(Error::SplitHygiene(format!(
                    "synthetic record {} placed in {:?}",
                    r.id, r.split
                )));
            }
            match owner.get(r.subject_id.as_str()) {
                Some(&s) if s != r.split => {
                    return Err(Error::SplitHygiene(format!(
                        "subject {} appears in {:?} and {:?}",
                        r.subject_id, s, r.split
                    )))
                }
                _ => {
                    owner.insert(&r.subject_id, r.split);
                }
            }
        }
        Ok(())
    }

    pub fn meta(&self) -> ManifestMeta {
        ManifestMeta {
            seed: self.seed,
            config_digest: self.config_digest.clone(),
            frame_dim: self.frame_dim,
            n_records: self.records.len(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        let meta_path = dir.join(MANIFEST_META_FILE);
        fs::write(&meta_path, serde_json::to_string_pretty(&self.meta())?)
            .map_err(|e| Error::io(&meta_path, e))?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(MANIFEST_META_FILE);
        let meta: ManifestMeta = serde_json::from_str(
            &fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?,
        )?;
        let path = dir.join(MANIFEST_FILE);
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut records = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        Ok(Self {
            seed: meta.seed,
            config_digest: meta.config_digest,
            frame_dim: meta.frame_dim,
            records,
        })
    }

    /// Rebuild an utterance from its record and stored frames.
    pub fn load_utterance(&self, dir: &Path, record: &ManifestRecord) -> Result<Utterance> {
        let frames = read_frames(&dir.join(&record.frames_path))?;
        if frames.ncols() != self.frame_dim {
            return Err(Error::Shape(format!(
                "{}: frame_dim {} differs from manifest {}",
                record.id,
                frames.ncols(),
                self.frame_dim
            )));
        }
        Ok(Utterance {
            id: record.id.clone(),
            subject_id: record.subject_id.clone(),
            speaker_id: record.speaker_id,
            content: record.content.clone(),
            durations: record.durations.clone(),
            frames,
            severity_score: record.severity_score,
            severity_level: record.severity_level,
            sentiment: record.sentiment,
            marker_truth: record.marker_truth,
        })
    }

    pub fn load_all(&self, dir: &Path) -> Result<Vec<Utterance>> {
        self.records
            .par_iter()
            .map(|r| self.load_utterance(dir, r))
            .collect()
    }
}

fn header_path(path: &Path) -> PathBuf {
    path.with_extension("hdr")
}

/// Raw little-endian `f32` frames plus a `T frame_dim` text sidecar.
pub fn write_frames(path: &Path, frames: &Array2<f64>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut bytes = Vec::with_capacity(frames.len() * 4);
    for &v in frames.iter() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let hdr = header_path(path);
    fs::write(&hdr, format!("{} {}\n", frames.nrows(), frames.ncols())).map_err(|e| Error::io(&hdr, e))
}

pub fn read_frames(path: &Path) -> Result<Array2<f64>> {
    let hdr = header_path(path);
    let text = fs::read_to_string(&hdr).map_err(|e| Error::io(&hdr, e))?;
    let dims: Vec<usize> = text
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Parse {
            path: hdr.display().to_string(),
            reason: e.to_string(),
        })?;
    let [t, d] = dims[..] else {
        return Err(Error::Parse {
            path: hdr.display().to_string(),
            reason: "expected `T frame_dim`".into(),
        });
    };
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != t * d * 4 {
        return Err(Error::Shape(format!(
            "{}: {} bytes for {t}x{d} frames",
            path.display(),
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
        .collect();
    Array2::from_shape_vec((t, d), data).map_err(|e| Error::Shape(e.to_string()))
}

/// Write manifest, meta and every frame file under `dir`.
pub fn write_world(world: &World, dir: &Path) -> Result<()> {
    world
        .utterances
        .par_iter()
        .try_for_each(|u| write_frames(&dir.join(format!("frames/{}.f32", u.id)), &u.frames))?;
    world.manifest.write(dir)?;
    let cfg_path = dir.join("world.toml");
    fs::write(&cfg_path, world.config.to_text()).map_err(|e| Error::io(&cfg_path, e))
}

/// Write a standalone set of utterances with their records (used for synthetic corpora).
pub fn write_utterances(utterances: &[Utterance], dir: &Path) -> Result<()> {
    utterances
        .par_iter()
        .try_for_each(|u| write_frames(&dir.join(format!("frames/{}.f32", u.id)), &u.frames))
}

/// Contiguous window of at most `max_frames` frames; durations and content are
/// cut to the tokens overlapping the window.
pub fn crop_segment<R: Rng>(u: &Utterance, max_frames: usize, rng: &mut R) -> Utterance {
    assert!(max_frames >= 1, "max_frames must be positive");
    let t = u.n_frames();
    if t <= max_frames {
        return u.clone();
    }
    let start = rng.random_range(0..=t - max_frames);
    crop_at(u, start, max_frames)
}

pub fn crop_at(u: &Utterance, start: usize, len: usize) -> Utterance {
    let end = start + len;
    let mut content = Vec::new();
    let mut durations = Vec::new();
    let mut pos = 0;
    for (&tok, &d) in u.content.iter().zip(&u.durations) {
        let (a, b) = (pos.max(start), (pos + d).min(end));
        if b > a {
            content.push(tok);
            durations.push(b - a);
        }
        pos += d;
    }
    Utterance {
        frames: u.frames.slice(ndarray::s![start..end, ..]).to_owned(),
        content,
        durations,
        ..u.clone()
    }
}

/// The `n` longest items (ties by ascending id). The flag is set when fewer
/// than `n` were available.
pub fn select_eval_utterances<'a, T>(
    items: &'a [T],
    n: usize,
    len: impl Fn(&T) -> usize,
    id: impl Fn(&T) -> &str,
) -> (Vec<&'a T>, bool) {
    assert!(n >= 1, "n must be positive");
    let mut sorted: Vec<&T> = items.iter().collect();
    sorted.sort_by(|a, b| len(b).cmp(&len(a)).then_with(|| id(a).cmp(id(b))));
    let short = sorted.len() < n;
    sorted.truncate(n);
    (sorted, short)
}

/// Sentiment × diagnosis counts `[healthy, depressed] × [positive, neutral, negative]`.
pub fn sentiment_table<'a>(records: impl IntoIterator<Item = &'a ManifestRecord>) -> Vec<Vec<u64>> {
    let mut table = vec![vec![0u64; 3]; 2];
    for r in records {
        table[r.label as usize][r.sentiment.index()] += 1;
    }
    table
}

/// Negative-sentiment rate among (healthy, depressed) records.
pub fn negative_rates<'a>(records: impl IntoIterator<Item = &'a ManifestRecord>) -> (f64, f64) {
    let t = sentiment_table(records);
    let rate = |row: &Vec<u64>| {
        let total: u64 = row.iter().sum();
        if total == 0 {
            0.0
        } else {
            row[2] as f64 / total as f64
        }
    };
    (rate(&t[0]), rate(&t[1]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small() -> WorldConfig {
        WorldConfig {
            n_subjects: 10,
            utterances_per_subject: 3,
            ..WorldConfig::default()
        }
    }

    fn utt_with_len(id: &str, len: usize) -> Utterance {
        Utterance {
            id: id.into(),
            subject_id: "s".into(),
            speaker_id: 0,
            content: vec![0; len],
            durations: vec![1; len],
            frames: Array2::from_shape_fn((len, 4), |(i, j)| (i * 4 + j) as f64),
            severity_score: 3.0,
            severity_level: 0,
            sentiment: Sentiment::Neutral,
            marker_truth: MarkerTruth {
                silence: 0.0,
                centralization: 0.0,
                perturbation: 0.0,
            },
        }
    }

    #[test]
    fn level_bins() {
        assert_eq!(severity_to_level(3.0).unwrap(), 0);
        assert_eq!(severity_to_level(12.0).unwrap(), 2);
        assert_eq!(severity_to_level(20.0).unwrap(), 4);
        assert_eq!(severity_to_level(24.0).unwrap(), 4);
        assert_eq!(severity_to_level(9.9).unwrap(), 1);
        assert!(severity_to_level(-0.1).is_err());
        assert!(severity_to_level(24.5).is_err());
    }

    #[test]
    fn invalid_fields_are_named() {
        let cfg = WorldConfig { bias: 1.5, ..small() };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("`bias`"), "{err}");
        let cfg = WorldConfig { frame_dim: 3, ..small() };
        assert!(cfg.validate().unwrap_err().to_string().contains("`frame_dim`"));
        let cfg = WorldConfig { n_subjects: 0, ..small() };
        assert!(cfg.validate().unwrap_err().to_string().contains("`n_subjects`"));
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = small();
        let back = WorldConfig::from_text(&cfg.to_text(), "mem").unwrap();
        assert_eq!(back, cfg);
        assert!(WorldConfig::from_text("nonsense_key = 3", "mem").is_err());
    }

    #[test]
    fn utterance_invariants() {
        let w = generate_world(&small()).unwrap();
        for u in &w.utterances {
            assert_eq!(u.durations.iter().sum::<usize>(), u.n_frames());
            assert_eq!(u.severity_level, severity_to_level(u.severity_score).unwrap());
            assert!(u.frames.iter().all(|v| v.is_finite()));
            assert!(u.content.iter().all(|&t| w.vocab.token_sentiment(t) == u.sentiment));
        }
        w.manifest.check_split_hygiene().unwrap();
    }

    #[test]
    fn crop_short_and_long() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = utt_with_len("a", 50);
        assert_eq!(crop_segment(&u, 100, &mut rng), u);
        let u = utt_with_len("b", 300);
        let c = crop_segment(&u, 100, &mut rng);
        assert_eq!(c.n_frames(), 100);
        assert_eq!(c.durations.iter().sum::<usize>(), 100);
        let first = c.frames[[0, 0]] as usize / 4;
        for i in 0..100 {
            assert_eq!(c.frames[[i, 0]] as usize / 4, first + i, "contiguous");
        }
        let again = crop_segment(&u, 100, &mut ChaCha8Rng::seed_from_u64(1));
        let again2 = crop_segment(&u, 100, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(again, again2);
    }

    #[test]
    fn crop_cuts_durations_at_window_edges() {
        let mut u = utt_with_len("c", 10);
        u.content = vec![1, 2, 3];
        u.durations = vec![3, 4, 3];
        let c = crop_at(&u, 2, 6);
        assert_eq!(c.content, vec![1, 2, 3]);
        assert_eq!(c.durations, vec![1, 4, 1]);
        let c = crop_at(&u, 3, 4);
        assert_eq!(c.content, vec![2]);
        assert_eq!(c.durations, vec![4]);
    }

    #[test]
    fn eval_selection() {
        let items = vec![utt_with_len("u1", 5), utt_with_len("u2", 9), utt_with_len("u3", 7)];
        let (sel, short) = select_eval_utterances(&items, 2, |u| u.n_frames(), |u| &u.id);
        assert_eq!(sel.iter().map(|u| u.n_frames()).collect::<Vec<_>>(), vec![9, 7]);
        assert!(!short);

        let ties = vec![utt_with_len("c", 5), utt_with_len("a", 5), utt_with_len("b", 5)];
        let (sel, _) = select_eval_utterances(&ties, 2, |u| u.n_frames(), |u| &u.id);
        assert_eq!(sel.iter().map(|u| u.id.as_str()).collect::<Vec<_>>(), vec!["a", "b"]);

        let few: Vec<_> = (0..12).map(|i| utt_with_len(&format!("x{i:02}"), 10 + i)).collect();
        let (sel, short) = select_eval_utterances(&few, 20, |u| u.n_frames(), |u| &u.id);
        assert_eq!(sel.len(), 12);
        assert!(short);
    }

    #[test]
    fn frame_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let frames = Array2::from_shape_fn((7, 5), |(i, j)| (i as f64 - j as f64 * 0.25) as f32 as f64);
        let path = dir.path().join("frames/x.f32");
        write_frames(&path, &frames).unwrap();
        assert_eq!(fs::read_to_string(dir.path().join("frames/x.hdr")).unwrap(), "7 5\n");
        assert_eq!(read_frames(&path).unwrap(), frames);
    }
}

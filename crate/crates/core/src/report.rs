//! The four report kinds. Each is a pure function of loaded artifacts, so a
//! stored report can be recomputed and compared value by value.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dae::DaeModel;
use crate::detector::{compare_augmentations, ComparisonTable, DetectorEvaluation};
use crate::error::{Error, Result};
use crate::gen::{speaker_signature, token_recovery, FlowTts};
use crate::markers::{extract_markers, MARKER_NAMES};
use crate::metrics::{
    c_index, cka, cosine_similarity, eer, intra_group_marker_correlation, mean_std, median,
    pca_severity_coordinate, pearson_residuals, speaker_pair_scores, ContingencyTable,
    MarkerCorrelation,
};
use crate::severity::PrototypeBank;
use crate::world::{sentiment_table, ManifestRecord, Split, Utterance, Vocabulary, BIN_CENTERS, N_LEVELS};

pub const REPORT_KINDS: [&str; 4] = ["bias", "disentangle", "controllability", "augmentation"];

/// Seeds and config digests a report was produced from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seeds: BTreeMap<String, u64>,
    pub config_digests: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasSplit {
    pub split: String,
    pub n_utterances: usize,
    /// Rows: healthy, depressed. Columns: negative, neutral, positive.
    pub table: ContingencyTable,
    pub negative_rate_healthy: f64,
    pub negative_rate_depressed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub provenance: Provenance,
    pub splits: Vec<BiasSplit>,
}

/// Diagnosis × sentiment association of the real corpus, overall and per split.
pub fn bias_report(records: &[ManifestRecord], provenance: Provenance) -> Result<BiasReport> {
    let mut splits = Vec::new();
    let groups: [(&str, Option<Split>); 4] = [
        ("all", None),
        ("train", Some(Split::Train)),
        ("dev", Some(Split::Dev)),
        ("test", Some(Split::Test)),
    ];
    for (name, split) in groups {
        let rs: Vec<&ManifestRecord> = records
            .iter()
            .filter(|r| !r.synthetic && split.is_none_or(|s| r.split == s))
            .collect();
        if rs.is_empty() {
            continue;
        }
        let observed = sentiment_table(rs.iter().copied());
        let table = pearson_residuals(&observed)?;
        let rate = |row: &[u64]| row[0] as f64 / row.iter().sum::<u64>().max(1) as f64;
        splits.push(BiasSplit {
            split: name.into(),
            n_utterances: rs.len(),
            negative_rate_healthy: rate(&observed[0]),
            negative_rate_depressed: rate(&observed[1]),
            table,
        });
    }
    Ok(BiasReport { provenance, splits })
}

impl BiasReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("split,diagnosis,sentiment,observed,expected,residual,chi2,df,p_value\n");
        for s in &self.splits {
            for (i, diag) in ["healthy", "depressed"].iter().enumerate() {
                for (j, sent) in ["negative", "neutral", "positive"].iter().enumerate() {
                    out.push_str(&format!(
                        "{},{diag},{sent},{},{},{},{},{},{}\n",
                        s.split,
                        s.table.observed[i][j],
                        s.table.expected[i][j],
                        s.table.residuals[i][j],
                        s.table.chi2,
                        s.table.df,
                        s.table.p_value
                    ));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisentangleReport {
    pub provenance: Provenance,
    pub n_eval: usize,
    /// Depressed-vs-healthy linear probe on `d`.
    pub severity_roc_auc: Option<f64>,
    pub speaker_probe_accuracy: f64,
    /// Speaker verification with cosine scores on `d̃`.
    pub speaker_eer: f64,
    pub eer_threshold: f64,
    pub similarity_gap: f64,
    /// Linear CKA between `d̃` and the bag-of-tokens content vector.
    pub content_cka: f64,
    pub content_cka_degenerate: bool,
}

/// Normalized token histogram of an utterance's text.
pub fn bag_of_tokens(content: &[usize], n_tokens: usize) -> Vec<f64> {
    let mut v = vec![0.0; n_tokens];
    for &t in content {
        v[t] += 1.0;
    }
    let n = content.len().max(1) as f64;
    v.iter_mut().for_each(|x| *x /= n);
    v
}

pub fn disentangle_report(
    dae: &DaeModel,
    fit: &[&Utterance],
    eval: &[&Utterance],
    n_tokens: usize,
    provenance: Provenance,
) -> Result<DisentangleReport> {
    let emb = dae.encode_many(&eval.iter().map(|u| &u.frames).collect::<Vec<_>>())?;
    let d_norm: Vec<Vec<f64>> = emb.into_iter().map(|e| e.d_norm).collect();
    let speakers: Vec<usize> = eval.iter().map(|u| u.speaker_id).collect();
    let (same, diff) = speaker_pair_scores(&d_norm, &speakers)?;
    let ver = eer(&same, &diff)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let bags: Vec<Vec<f64>> = eval.iter().map(|u| bag_of_tokens(&u.content, n_tokens)).collect();
    let (content_cka, degenerate) = cka(&d_norm, &bags)?;
    Ok(DisentangleReport {
        provenance,
        n_eval: eval.len(),
        severity_roc_auc: crate::dae::severity_probe(dae, fit, eval)?,
        speaker_probe_accuracy: crate::dae::speaker_probe(dae, eval)?,
        speaker_eer: ver.eer,
        eer_threshold: ver.threshold,
        similarity_gap: mean(&same) - mean(&diff),
        content_cka,
        content_cka_degenerate: degenerate,
    })
}

impl DisentangleReport {
    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "metric,value\nn_eval,{}\nseverity_roc_auc,{}\nspeaker_probe_accuracy,{}\nspeaker_eer,{}\neer_threshold,{}\nsimilarity_gap,{}\ncontent_cka,{}\ncontent_cka_degenerate,{}\n",
            self.n_eval,
            f(self.severity_roc_auc),
            self.speaker_probe_accuracy,
            self.speaker_eer,
            self.eer_threshold,
            self.similarity_gap,
            self.content_cka,
            self.content_cka_degenerate
        )
    }
}

/// Severity sweep settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Base texts in the sweep; each is rendered at all five levels.
    pub sweep_bases: usize,
    pub ode_steps: usize,
    pub seed: u64,
    /// Bases re-sampled with twice the solver steps.
    pub refine_bases: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            sweep_bases: 50,
            ode_steps: 10,
            seed: 1000,
            refine_bases: 10,
        }
    }
}

impl ReportConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sweep_bases < 2 {
            return Err(Error::config("sweep_bases", "need at least 2 base texts"));
        }
        if self.ode_steps == 0 {
            return Err(Error::config("ode_steps", "must be positive"));
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
        crate::seed::digest(self.to_text().as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepItem {
    pub base_id: String,
    pub speaker_id: usize,
    pub level: usize,
    pub projection: f64,
    pub silence: f64,
    pub centralization: f64,
    pub perturbation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllabilityReport {
    pub provenance: Provenance,
    pub n_bases: usize,
    pub condition_scores: Vec<f64>,
    /// PCA coordinate over all sweep embeddings (`d̃`).
    pub c_index: f64,
    pub spearman: Option<f64>,
    pub explained_variance_ratio: f64,
    /// Same PCA coordinate, C-index computed inside each base group.
    pub per_group_c_index_mean: f64,
    pub per_group_c_index_median: f64,
    pub markers: BTreeMap<String, MarkerCorrelation>,
    /// Relative Frobenius change when the solver step count is doubled.
    pub refine_rel_diff_max: f64,
    pub refine_rel_diff_mean: f64,
    pub token_recovery_real: f64,
    pub token_recovery_synth: f64,
    /// Mean cosine of synthetic speaker signatures to the same / other speakers' real signatures.
    pub speaker_cos_same: f64,
    pub speaker_cos_other: f64,
    /// Largest |γ| difference between the lowest and highest prototype condition.
    pub film_gamma_max_diff: f64,
    pub items: Vec<SweepItem>,
}

/// Inputs of the controllability sweep.
pub struct SweepInputs<'a> {
    pub dae: &'a DaeModel,
    pub generator: &'a FlowTts,
    pub bank: &'a PrototypeBank,
    pub vocab: &'a Vocabulary,
    /// Held-out utterances supplying base texts.
    pub bases: &'a [&'a Utterance],
    /// Real utterances of the speakers the generator was finetuned on.
    pub speaker_pool: &'a [&'a Utterance],
}

/// Render every base text at the five bin-center severities with one speaker
/// and one noise seed per base, re-encode, and score ordering and markers.
pub fn controllability_report(
    inputs: &SweepInputs<'_>,
    cfg: &ReportConfig,
    provenance: Provenance,
) -> Result<ControllabilityReport> {
    cfg.validate()?;
    if inputs.bases.is_empty() || inputs.speaker_pool.is_empty() {
        return Err(Error::Empty("sweep needs base utterances and a speaker pool".into()));
    }
    let mut speakers: Vec<usize> = inputs.speaker_pool.iter().map(|u| u.speaker_id).collect();
    speakers.sort_unstable();
    speakers.dedup();
    let conditions: Vec<Vec<f64>> = BIN_CENTERS
        .iter()
        .map(|&s| inputs.bank.condition(s))
        .collect::<Result<_>>()?;
    let n = cfg.sweep_bases;
    let plan: Vec<(usize, &Utterance, usize)> = (0..n)
        .map(|b| (b, inputs.bases[(b * 7) % inputs.bases.len()], speakers[b % speakers.len()]))
        .collect();

    let rendered: Vec<Vec<ndarray::Array2<f64>>> = plan
        .par_iter()
        .map(|&(b, base, spk)| {
            let durs = inputs.generator.predict_durations(&base.content, spk)?;
            conditions
                .iter()
                .map(|c| {
                    inputs.generator.sample_with_durations(
                        &base.content,
                        &durs,
                        spk,
                        Some(c),
                        cfg.ode_steps,
                        cfg.seed + b as u64,
                    )
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let flat: Vec<&ndarray::Array2<f64>> = rendered.iter().flatten().collect();
    let emb = inputs.dae.encode_many(&flat)?;
    let d_norm: Vec<Vec<f64>> = emb.into_iter().map(|e| e.d_norm).collect();
    let grades: Vec<f64> = (0..n).flat_map(|_| (0..N_LEVELS).map(|l| l as f64)).collect();
    let pca = pca_severity_coordinate(&d_norm, &grades)?;

    let per_group: Vec<f64> = pca
        .projections
        .chunks(N_LEVELS)
        .zip(grades.chunks(N_LEVELS))
        .map(|(p, g)| c_index(p, g))
        .collect::<Result<_>>()?;

    let mut items = Vec::with_capacity(n * N_LEVELS);
    let mut groups: BTreeMap<&str, Vec<Vec<(usize, f64)>>> = BTreeMap::new();
    for (&(b, base, spk), frames) in plan.iter().zip(&rendered) {
        let mut g: BTreeMap<&str, Vec<(usize, f64)>> = BTreeMap::new();
        for (level, f) in frames.iter().enumerate() {
            let m = extract_markers(f)?;
            for name in MARKER_NAMES {
                g.entry(name).or_default().push((level, m.get(name).expect("known marker")));
            }
            items.push(SweepItem {
                base_id: base.id.clone(),
                speaker_id: spk,
                level,
                projection: pca.projections[b * N_LEVELS + level],
                silence: m.silence,
                centralization: m.centralization,
                perturbation: m.perturbation,
            });
        }
        for (name, pairs) in g {
            groups.entry(name).or_default().push(pairs);
        }
    }
    let markers = groups
        .into_iter()
        .map(|(name, gs)| (name.to_string(), intra_group_marker_correlation(&gs)))
        .collect();

    // solver refinement
    let refine: Vec<f64> = plan
        .par_iter()
        .take(cfg.refine_bases.min(n))
        .map(|&(b, base, spk)| {
            let durs = inputs.generator.predict_durations(&base.content, spk)?;
            let c = &conditions[N_LEVELS - 1];
            let seed = cfg.seed + b as u64;
            let a = inputs.generator.sample_with_durations(&base.content, &durs, spk, Some(c), cfg.ode_steps, seed)?;
            let z = inputs.generator.sample_with_durations(&base.content, &durs, spk, Some(c), 2 * cfg.ode_steps, seed)?;
            let num = (&z - &a).iter().map(|v| v * v).sum::<f64>().sqrt();
            let den = z.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            Ok(num / den)
        })
        .collect::<Result<_>>()?;

    // content and speaker proxies on ground-truth durations, middle severity
    let mid = &conditions[N_LEVELS / 2];
    let proxies: Vec<(f64, f64, usize, Vec<f64>)> = plan
        .par_iter()
        .map(|&(b, base, spk)| {
            let ft = base.frame_tokens();
            let real = token_recovery(&base.frames, &ft, &inputs.vocab.templates)?;
            let f = inputs.generator.sample_with_durations(
                &base.content,
                &base.durations,
                spk,
                Some(mid),
                cfg.ode_steps,
                cfg.seed + b as u64,
            )?;
            let synth = token_recovery(&f, &ft, &inputs.vocab.templates)?;
            Ok((real, synth, spk, speaker_signature(&f, &inputs.vocab.centroid)))
        })
        .collect::<Result<_>>()?;
    let mut real_sig: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for u in inputs.speaker_pool {
        let sig = speaker_signature(&u.frames, &inputs.vocab.centroid);
        let e = real_sig.entry(u.speaker_id).or_insert((vec![0.0; sig.len()], 0));
        e.0.iter_mut().zip(&sig).for_each(|(a, b)| *a += b);
        e.1 += 1;
    }
    let (mut same, mut other) = (Vec::new(), Vec::new());
    for (_, _, spk, sig) in &proxies {
        for (id, (sum, _)) in &real_sig {
            let c = cosine_similarity(sig, sum);
            if id == spk {
                same.push(c);
            } else {
                other.push(c);
            }
        }
    }
    let avg = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };

    let lo = inputs.generator.film_generate(&conditions[0])?;
    let hi = inputs.generator.film_generate(&conditions[N_LEVELS - 1])?;
    let film_gamma_max_diff = lo
        .blocks
        .iter()
        .zip(&hi.blocks)
        .flat_map(|(a, b)| a.0.iter().zip(&b.0).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max);

    Ok(ControllabilityReport {
        provenance,
        n_bases: n,
        condition_scores: BIN_CENTERS.to_vec(),
        c_index: pca.c_index,
        spearman: pca.spearman,
        explained_variance_ratio: pca.explained_variance_ratio,
        per_group_c_index_mean: mean_std(&per_group).0,
        per_group_c_index_median: median(&per_group).unwrap_or(f64::NAN),
        markers,
        refine_rel_diff_max: refine.iter().copied().fold(0.0, f64::max),
        refine_rel_diff_mean: avg(&refine),
        token_recovery_real: avg(&proxies.iter().map(|p| p.0).collect::<Vec<_>>()),
        token_recovery_synth: avg(&proxies.iter().map(|p| p.1).collect::<Vec<_>>()),
        speaker_cos_same: avg(&same),
        speaker_cos_other: avg(&other),
        film_gamma_max_diff,
        items,
    })
}

impl ControllabilityReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("base_id,speaker_id,level,projection,silence,centralization,perturbation\n");
        for i in &self.items {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                i.base_id, i.speaker_id, i.level, i.projection, i.silence, i.centralization, i.perturbation
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationReport {
    pub provenance: Provenance,
    pub table: ComparisonTable,
    pub runs: Vec<(String, Vec<DetectorEvaluation>)>,
}

pub fn augmentation_report(
    runs: Vec<(String, Vec<DetectorEvaluation>)>,
    provenance: Provenance,
) -> Result<AugmentationReport> {
    Ok(AugmentationReport {
        provenance,
        table: compare_augmentations(&runs)?,
        runs,
    })
}

/// Largest absolute difference between numeric leaves of two JSON documents;
/// `Err` names the first structural difference.
pub fn json_max_abs_diff(a: &serde_json::Value, b: &serde_json::Value) -> std::result::Result<f64, String> {
    use serde_json::Value;
    fn walk(a: &Value, b: &Value, path: &str) -> std::result::Result<f64, String> {
        match (a, b) {
            (Value::Number(x), Value::Number(y)) => {
                let (x, y) = (x.as_f64().unwrap_or(f64::NAN), y.as_f64().unwrap_or(f64::NAN));
                if x == y {
                    Ok(0.0)
                } else {
                    let d = (x - y).abs();
                    if d.is_nan() {
                        Err(format!("{path}: {x} vs {y}"))
                    } else {
                        Ok(d)
                    }
                }
            }
            (Value::Array(x), Value::Array(y)) => {
                if x.len() != y.len() {
                    return Err(format!("{path}: length {} vs {}", x.len(), y.len()));
                }
                x.iter()
                    .zip(y)
                    .enumerate()
                    .try_fold(0.0, |m, (i, (p, q))| Ok(f64::max(m, walk(p, q, &format!("{path}[{i}]"))?)))
            }
            (Value::Object(x), Value::Object(y)) => {
                if x.len() != y.len() || x.keys().zip(y.keys()).any(|(p, q)| p != q) {
                    return Err(format!("{path}: different keys"));
                }
                x.iter()
                    .zip(y.values())
                    .try_fold(0.0, |m, ((k, p), q)| Ok(f64::max(m, walk(p, q, &format!("{path}.{k}"))?)))
            }
            _ if a == b => Ok(0.0),
            _ => Err(format!("{path}: {a} vs {b}")),
        }
    }
    walk(a, b, "$")
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn bag_sums_to_one() {
        let b = bag_of_tokens(&[0, 0, 2, 1], 4);
        assert_eq!(b, vec![0.5, 0.25, 0.25, 0.0]);
    }

    #[test]
    fn json_diff_walks_numbers() {
        let a = json!({"x": [1.0, 2.0], "s": "k", "n": null});
        let b = json!({"x": [1.0, 2.5], "s": "k", "n": null});
        assert_eq!(json_max_abs_diff(&a, &b).unwrap(), 0.5);
        assert!(json_max_abs_diff(&a, &json!({"x": [1.0], "s": "k", "n": null})).is_err());
        assert!(json_max_abs_diff(&json!({"s": "a"}), &json!({"s": "b"})).is_err());
    }

    #[test]
    fn report_config_round_trip() {
        let c = ReportConfig { sweep_bases: 7, ..Default::default() };
        assert_eq!(ReportConfig::from_text(&c.to_text(), "x").unwrap(), c);
        assert!(ReportConfig { sweep_bases: 1, ..Default::default() }.validate().is_err());
    }
}

//! Camouflage-oriented augmentation: sentiment-stratified text banks, class
//! balancing quotas and generation of depressive-acoustics/benign-text utterances.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gen::FlowTts;
use crate::seed::{derive_seed, stream};
use crate::severity::PrototypeBank;
use crate::world::{token_sentiment, ManifestRecord, Sentiment, Split, Utterance, N_LEVELS};

/// Per-subject synthesis counts by severity level used for the clinical corpus.
pub const CLINICAL_LEVEL_QUOTAS: [usize; N_LEVELS] = [13, 34, 2, 91, 194];
/// Training subjects per severity level of the clinical corpus. The split of
/// the 57 moderate-or-worse subjects is the smallest one consistent with the
/// reported synthetic totals.
pub const CLINICAL_SUBJECTS_PER_LEVEL: [usize; N_LEVELS] = [86, 46, 35, 15, 7];
/// Per-class size of the clinical combined corpus.
pub const CLINICAL_CLASS_TARGET: usize = 2880;

/// Assigns a sentiment to the text of one utterance.
pub trait Annotator: Sync {
    fn annotate(&self, record: &ManifestRecord) -> std::result::Result<Sentiment, String>;
}

/// Uses the sentiment stored with each record.
#[derive(Debug, Clone, Copy, Default)]
pub struct GroundTruthAnnotator;

impl Annotator for GroundTruthAnnotator {
    fn annotate(&self, record: &ManifestRecord) -> std::result::Result<Sentiment, String> {
        Ok(record.sentiment)
    }
}

/// Majority sentiment of the content tokens; ties and empty content give neutral.
#[derive(Debug, Clone, Copy)]
pub struct LexiconAnnotator {
    pub vocab_size: usize,
}

impl Annotator for LexiconAnnotator {
    fn annotate(&self, record: &ManifestRecord) -> std::result::Result<Sentiment, String> {
        let mut counts = [0usize; 3];
        for &t in &record.content {
            if t >= self.vocab_size {
                return Err(format!("token {t} outside vocabulary of {}", self.vocab_size));
            }
            counts[token_sentiment(t, self.vocab_size).index()] += 1;
        }
        let max = *counts.iter().max().unwrap_or(&0);
        let winners: Vec<usize> = (0..3).filter(|&i| counts[i] == max).collect();
        Ok(match winners.as_slice() {
            [0] => Sentiment::Positive,
            [2] => Sentiment::Negative,
            _ => Sentiment::Neutral,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEntry {
    pub source_id: String,
    pub content: Vec<usize>,
    pub sentiment: Sentiment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextBank {
    pub benign: Vec<TextEntry>,
    pub depressive: Vec<TextEntry>,
}

impl TextBank {
    pub fn depressive_empty(&self) -> bool {
        self.depressive.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Every real training record goes to exactly one bank.
pub fn build_text_banks(records: &[ManifestRecord], annotator: &dyn Annotator) -> Result<TextBank> {
    let mut bank = TextBank {
        benign: Vec::new(),
        depressive: Vec::new(),
    };
    for r in records.iter().filter(|r| r.split == Split::Train && !r.synthetic) {
        let sentiment = annotator.annotate(r).map_err(|reason| Error::Annotator {
            id: r.id.clone(),
            reason,
        })?;
        let entry = TextEntry {
            source_id: r.id.clone(),
            content: r.content.clone(),
            sentiment,
        };
        if sentiment.is_benign() {
            bank.benign.push(entry);
        } else {
            bank.depressive.push(entry);
        }
    }
    Ok(bank)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QuotaStrategy {
    /// Synthesize only for the minority class, just enough to balance.
    Minimal,
    /// A fixed count per depressed subject, healthy subjects fill to balance.
    /// Every original utterance is kept.
    Balanced { per_depressed_subject: usize },
    /// Fixed counts per severity level; original utterances are subsampled so
    /// that each class reaches the same total. Without a target the largest
    /// feasible total is used.
    PerLevel {
        per_level: [usize; N_LEVELS],
        class_target: Option<usize>,
    },
    /// Both classes reach the largest common total in which the given fraction
    /// is synthetic; originals are subsampled, synthetic counts spread evenly.
    EqualShare { synthetic_share: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectQuota {
    pub subject_id: String,
    pub speaker_id: usize,
    pub severity_score: f64,
    pub severity_level: usize,
    pub depressed: bool,
    /// Real training utterances available.
    pub originals: usize,
    /// Real utterances kept in the combined corpus.
    pub kept: usize,
    pub synthetic: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuotaPlan {
    pub strategy: QuotaStrategy,
    pub subjects: Vec<SubjectQuota>,
    /// Real utterances kept per class, `[healthy, depressed]`.
    pub kept: [usize; 2],
    pub synthetic: [usize; 2],
    pub synthetic_per_level: [usize; N_LEVELS],
}

impl QuotaPlan {
    pub fn class_totals(&self) -> [usize; 2] {
        [self.kept[0] + self.synthetic[0], self.kept[1] + self.synthetic[1]]
    }

    pub fn total(&self) -> usize {
        self.class_totals().iter().sum()
    }

    pub fn total_synthetic(&self) -> usize {
        self.synthetic.iter().sum()
    }

    /// Recount from the per-subject entries.
    pub fn verify(&self) -> Result<()> {
        let mut kept = [0usize; 2];
        let mut syn = [0usize; 2];
        let mut lvl = [0usize; N_LEVELS];
        for s in &self.subjects {
            if s.kept > s.originals {
                return Err(Error::Degenerate(format!("subject {} keeps more utterances than it has", s.subject_id)));
            }
            kept[s.depressed as usize] += s.kept;
            syn[s.depressed as usize] += s.synthetic;
            lvl[s.severity_level] += s.synthetic;
        }
        if kept != self.kept || syn != self.synthetic || lvl != self.synthetic_per_level {
            return Err(Error::Degenerate("quota plan totals disagree with subject entries".into()));
        }
        let [h, d] = self.class_totals();
        if h.abs_diff(d) > 1 {
            return Err(Error::Infeasible(format!("plan leaves classes at {h} vs {d}")));
        }
        Ok(())
    }

    pub fn subject(&self, subject_id: &str) -> Option<&SubjectQuota> {
        self.subjects.iter().find(|s| s.subject_id == subject_id)
    }

    pub fn quota_of(&self, subject_id: &str) -> Option<usize> {
        self.subject(subject_id).map(|s| s.synthetic)
    }
}

fn subject_table(records: &[ManifestRecord]) -> Vec<SubjectQuota> {
    let mut by_id: BTreeMap<&str, SubjectQuota> = BTreeMap::new();
    for r in records.iter().filter(|r| r.split == Split::Train && !r.synthetic) {
        let s = by_id.entry(&r.subject_id).or_insert_with(|| SubjectQuota {
            subject_id: r.subject_id.clone(),
            speaker_id: r.speaker_id,
            severity_score: r.severity_score,
            severity_level: r.severity_level,
            depressed: r.depressed(),
            originals: 0,
            kept: 0,
            synthetic: 0,
        });
        s.originals += 1;
        s.kept += 1;
    }
    by_id.into_values().collect()
}

/// Spread `extra` over the subjects of one class as evenly as possible,
/// earlier subject ids receiving the remainder.
fn spread(subjects: &mut [SubjectQuota], depressed: bool, extra: usize) {
    let idx: Vec<usize> = (0..subjects.len()).filter(|&i| subjects[i].depressed == depressed).collect();
    let n = idx.len();
    for (k, &i) in idx.iter().enumerate() {
        subjects[i].synthetic += extra / n + usize::from(k < extra % n);
    }
}

/// Keep `total` originals of one class, filling subjects level by level so
/// the kept counts differ by at most one where availability allows.
fn keep_evenly(subjects: &mut [SubjectQuota], depressed: bool, total: usize) {
    let idx: Vec<usize> = (0..subjects.len()).filter(|&i| subjects[i].depressed == depressed).collect();
    for &i in &idx {
        subjects[i].kept = 0;
    }
    let mut left = total;
    while left > 0 {
        let mut progressed = false;
        for &i in &idx {
            if left > 0 && subjects[i].kept < subjects[i].originals {
                subjects[i].kept += 1;
                left -= 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
}

pub fn plan_quotas(records: &[ManifestRecord], strategy: QuotaStrategy) -> Result<QuotaPlan> {
    let mut subjects = subject_table(records);
    if subjects.is_empty() {
        return Err(Error::Empty("training split has no records".into()));
    }
    let n_dep = subjects.iter().filter(|s| s.depressed).count();
    let n_healthy = subjects.len() - n_dep;
    if n_dep == 0 || n_healthy == 0 {
        return Err(Error::Infeasible(format!(
            "class balance needs both classes; training split has {n_healthy} healthy and {n_dep} depressed subjects"
        )));
    }
    let class_sum = |subjects: &[SubjectQuota], d: bool, f: fn(&SubjectQuota) -> usize| -> usize {
        subjects.iter().filter(|s| s.depressed == d).map(f).sum()
    };
    match strategy {
        QuotaStrategy::Minimal | QuotaStrategy::Balanced { .. } => {
            if let QuotaStrategy::Balanced { per_depressed_subject } = strategy {
                for s in subjects.iter_mut().filter(|s| s.depressed) {
                    s.synthetic = per_depressed_subject;
                }
            }
            let total = |s: &SubjectQuota| s.kept + s.synthetic;
            let (h, d) = (class_sum(&subjects, false, total), class_sum(&subjects, true, total));
            if h < d {
                spread(&mut subjects, false, d - h);
            } else if d < h {
                spread(&mut subjects, true, h - d);
            }
        }
        QuotaStrategy::PerLevel { per_level, class_target } => {
            for s in subjects.iter_mut() {
                s.synthetic = per_level[s.severity_level];
            }
            let syn = [
                class_sum(&subjects, false, |s| s.synthetic),
                class_sum(&subjects, true, |s| s.synthetic),
            ];
            let avail = [
                class_sum(&subjects, false, |s| s.originals),
                class_sum(&subjects, true, |s| s.originals),
            ];
            let target = class_target.unwrap_or_else(|| (syn[0] + avail[0]).min(syn[1] + avail[1]));
            for c in 0..2 {
                if target < syn[c] || target > syn[c] + avail[c] {
                    return Err(Error::Infeasible(format!(
                        "class target {target} unreachable for class {c}: {} synthetic, {} originals",
                        syn[c], avail[c]
                    )));
                }
                keep_evenly(&mut subjects, c == 1, target - syn[c]);
            }
        }
        QuotaStrategy::EqualShare { synthetic_share } => {
            if !(0.0..1.0).contains(&synthetic_share) {
                return Err(Error::OutOfRange {
                    what: "synthetic_share",
                    value: synthetic_share,
                    expected: "[0, 1)",
                });
            }
            let avail = [
                class_sum(&subjects, false, |s| s.originals),
                class_sum(&subjects, true, |s| s.originals),
            ];
            let keep_fraction = 1.0 - synthetic_share;
            let target = (avail[0].min(avail[1]) as f64 / keep_fraction).floor() as usize;
            let keep = ((target as f64 * keep_fraction).round() as usize).min(avail[0].min(avail[1]));
            for c in 0..2 {
                keep_evenly(&mut subjects, c == 1, keep);
                spread(&mut subjects, c == 1, target - keep);
            }
        }
    }
    let mut plan = QuotaPlan {
        strategy,
        kept: [0; 2],
        synthetic: [0; 2],
        synthetic_per_level: [0; N_LEVELS],
        subjects,
    };
    for s in &plan.subjects {
        plan.kept[s.depressed as usize] += s.kept;
        plan.synthetic[s.depressed as usize] += s.synthetic;
        plan.synthetic_per_level[s.severity_level] += s.synthetic;
    }
    plan.verify()?;
    Ok(plan)
}

/// Ids of the original training utterances the plan keeps; each subject's
/// subset is a seeded draw over its ids.
pub fn select_originals(records: &[ManifestRecord], plan: &QuotaPlan, seed: u64) -> Result<Vec<String>> {
    let mut by_subject: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.split == Split::Train && !r.synthetic) {
        by_subject.entry(&r.subject_id).or_default().push(&r.id);
    }
    let mut kept = Vec::with_capacity(plan.kept.iter().sum());
    for s in &plan.subjects {
        let ids = by_subject
            .get_mut(s.subject_id.as_str())
            .ok_or_else(|| Error::MissingLabels(format!("subject {} not in training records", s.subject_id)))?;
        if ids.len() != s.originals {
            return Err(Error::Degenerate(format!("subject {} has {} records, plan expects {}", s.subject_id, ids.len(), s.originals)));
        }
        ids.sort_unstable();
        let mut rng = stream(seed, &["cdoa", "keep", &s.subject_id]);
        ids.shuffle(&mut rng);
        let mut chosen: Vec<&str> = ids[..s.kept].to_vec();
        chosen.sort_unstable();
        kept.extend(chosen.into_iter().map(String::from));
    }
    Ok(kept)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusTotals {
    /// `[healthy, depressed]` throughout.
    pub synthetic: [usize; 2],
    pub original: [usize; 2],
    pub class: [usize; 2],
    pub total: usize,
}

/// Corpus composition when each subject of level `l` receives `per_level[l]`
/// synthetic utterances and real utterances fill each class up to `class_target`.
/// Levels 0 and 1 are healthy.
pub fn level_quota_totals(
    subjects_per_level: [usize; N_LEVELS],
    per_level: [usize; N_LEVELS],
    class_target: usize,
) -> Result<CorpusTotals> {
    let mut synthetic = [0usize; 2];
    for l in 0..N_LEVELS {
        synthetic[usize::from(l >= 2)] += subjects_per_level[l] * per_level[l];
    }
    let mut original = [0usize; 2];
    for c in 0..2 {
        original[c] = class_target.checked_sub(synthetic[c]).ok_or_else(|| {
            Error::Infeasible(format!(
                "class {c} already has {} synthetic utterances, above the target {class_target}",
                synthetic[c]
            ))
        })?;
    }
    Ok(CorpusTotals {
        synthetic,
        original,
        class: [class_target; 2],
        total: 2 * class_target,
    })
}

#[derive(Debug, Clone)]
pub struct CdoaOutput {
    pub utterances: Vec<Utterance>,
    pub records: Vec<ManifestRecord>,
    /// Set when the benign bank ran out and texts were reused.
    pub with_replacement: bool,
}

struct Slot<'a> {
    subject: &'a SubjectQuota,
    k: usize,
    text: &'a TextEntry,
}

/// Synthesize every quota slot: the subject's own severity mapped to a
/// condition, a benign text, the subject's speaker. Outputs belong to the train split.
pub fn generate_cdoa(
    records: &[ManifestRecord],
    bank: &TextBank,
    plan: &QuotaPlan,
    generator: &FlowTts,
    prototypes: &PrototypeBank,
    seed: u64,
) -> Result<CdoaOutput> {
    let n_slots = plan.total_synthetic();
    if n_slots > 0 && bank.benign.is_empty() {
        return Err(Error::Empty("benign text bank".into()));
    }
    let mut truth = BTreeMap::new();
    for r in records.iter().filter(|r| r.split == Split::Train && !r.synthetic) {
        truth.entry(r.subject_id.as_str()).or_insert(r.marker_truth);
    }
    let mut rng = stream(seed, &["cdoa", "texts"]);
    let mut order: Vec<usize> = (0..bank.benign.len()).collect();
    order.shuffle(&mut rng);
    let with_replacement = n_slots > order.len();
    let mut slots = Vec::with_capacity(n_slots);
    for subject in &plan.subjects {
        if subject.synthetic > 0 && !truth.contains_key(subject.subject_id.as_str()) {
            return Err(Error::MissingLabels(format!("subject {} not in training records", subject.subject_id)));
        }
        for k in 0..subject.synthetic {
            let i = slots.len();
            let idx = if i < order.len() {
                order[i]
            } else {
                rng.random_range(0..bank.benign.len())
            };
            slots.push(Slot {
                subject,
                k,
                text: &bank.benign[idx],
            });
        }
    }
    let made: Vec<(Utterance, ManifestRecord)> = slots
        .par_iter()
        .map(|slot| {
            let s = slot.subject;
            let condition = prototypes.condition(s.severity_score)?;
            let k = slot.k.to_string();
            let slot_seed = derive_seed(seed, &["cdoa", &s.subject_id, &k]);
            let (frames, durations) =
                generator.sample(&slot.text.content, s.speaker_id, Some(&condition), slot_seed)?;
            let u = Utterance {
                id: format!("{}_cdoa{:03}", s.subject_id, slot.k),
                subject_id: s.subject_id.clone(),
                speaker_id: s.speaker_id,
                content: slot.text.content.clone(),
                durations,
                frames,
                severity_score: s.severity_score,
                severity_level: s.severity_level,
                sentiment: slot.text.sentiment,
                marker_truth: truth[s.subject_id.as_str()],
            };
            let mut r = ManifestRecord::from_utterance(&u, Split::Train);
            r.synthetic = true;
            r.source_text_id = Some(slot.text.source_id.clone());
            r.condition_severity = Some(s.severity_score);
            Ok((u, r))
        })
        .collect::<Result<_>>()?;
    let (utterances, records) = made.into_iter().unzip();
    Ok(CdoaOutput {
        utterances,
        records,
        with_replacement,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::MarkerTruth;

    fn rec(id: &str, subject: &str, score: f64, sentiment: Sentiment) -> ManifestRecord {
        let level = crate::world::severity_to_level(score).unwrap();
        ManifestRecord {
            id: id.into(),
            subject_id: subject.into(),
            speaker_id: 0,
            split: Split::Train,
            severity_score: score,
            severity_level: level,
            label: u8::from(score >= 10.0),
            sentiment,
            frames_path: String::new(),
            n_frames: 3,
            content: vec![0, 1, 2],
            durations: vec![1, 1, 1],
            marker_truth: MarkerTruth {
                silence: 0.0,
                centralization: 0.0,
                perturbation: 0.0,
            },
            synthetic: false,
            source_text_id: None,
            condition_severity: None,
        }
    }

    fn corpus(healthy: &[usize], depressed: &[usize]) -> Vec<ManifestRecord> {
        let mut out = Vec::new();
        for (i, &n) in healthy.iter().enumerate() {
            for k in 0..n {
                out.push(rec(&format!("h{i}_{k}"), &format!("h{i}"), 3.0, Sentiment::Positive));
            }
        }
        for (i, &n) in depressed.iter().enumerate() {
            for k in 0..n {
                out.push(rec(&format!("d{i}_{k}"), &format!("d{i}"), 22.0, Sentiment::Negative));
            }
        }
        out
    }

    #[test]
    fn banks_partition_by_sentiment() {
        let mut rs = corpus(&[2], &[2]);
        rs[1].sentiment = Sentiment::Neutral;
        let bank = build_text_banks(&rs, &GroundTruthAnnotator).unwrap();
        assert_eq!(bank.benign.len(), 2);
        assert_eq!(bank.depressive.len(), 2);
        let all_pos = corpus(&[3], &[]);
        assert!(build_text_banks(&all_pos, &GroundTruthAnnotator).unwrap().depressive_empty());
    }

    struct Failing;
    impl Annotator for Failing {
        fn annotate(&self, r: &ManifestRecord) -> std::result::Result<Sentiment, String> {
            if r.id == "d0_1" {
                Err("no verdict".into())
            } else {
                Ok(r.sentiment)
            }
        }
    }

    #[test]
    fn annotator_failure_names_utterance() {
        let err = build_text_banks(&corpus(&[2], &[2]), &Failing).unwrap_err();
        assert!(matches!(err, Error::Annotator { ref id, .. } if id == "d0_1"));
    }

    #[test]
    fn minimal_zero_when_balanced() {
        let plan = plan_quotas(&corpus(&[3, 3], &[2, 4]), QuotaStrategy::Minimal).unwrap();
        assert_eq!(plan.total_synthetic(), 0);
    }

    #[test]
    fn balanced_fills_healthy() {
        let plan = plan_quotas(&corpus(&[5, 5], &[7, 7, 7]), QuotaStrategy::Balanced { per_depressed_subject: 3 }).unwrap();
        assert_eq!(plan.synthetic[1], 9);
        assert_eq!(plan.class_totals(), [30, 30]);
        assert_eq!(plan.quota_of("h0"), Some(10));
    }

    #[test]
    fn odd_deficit_spreads() {
        let plan = plan_quotas(&corpus(&[1, 1, 1], &[8]), QuotaStrategy::Minimal).unwrap();
        let q: Vec<usize> = ["h0", "h1", "h2"].iter().map(|s| plan.quota_of(s).unwrap()).collect();
        assert_eq!(q, vec![2, 2, 1]);
    }

    #[test]
    fn one_class_infeasible() {
        assert!(matches!(
            plan_quotas(&corpus(&[3], &[]), QuotaStrategy::Minimal),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn balanced_keeps_everything() {
        let plan = plan_quotas(&corpus(&[5, 5], &[7, 7, 7]), QuotaStrategy::Balanced { per_depressed_subject: 3 }).unwrap();
        assert!(plan.subjects.iter().all(|s| s.kept == s.originals));
        assert_eq!(plan.kept, [10, 21]);
    }

    #[test]
    fn equal_share_equalizes_fraction() {
        let plan = plan_quotas(&corpus(&[10, 10], &[6, 6, 6]), QuotaStrategy::EqualShare { synthetic_share: 0.3 }).unwrap();
        assert_eq!(plan.kept, [18, 18]);
        assert_eq!(plan.synthetic, [7, 7]);
        assert_eq!(plan.class_totals(), [25, 25]);
        plan.verify().unwrap();
        assert!(plan_quotas(&corpus(&[4], &[4]), QuotaStrategy::EqualShare { synthetic_share: 1.0 }).is_err());
    }

    #[test]
    fn per_level_subsamples_to_common_target() {
        // healthy level 0 gets 1 each, depressed level 4 gets 4 each
        let plan = plan_quotas(
            &corpus(&[6, 6], &[3, 3]),
            QuotaStrategy::PerLevel { per_level: [1, 0, 0, 0, 4], class_target: None },
        )
        .unwrap();
        assert_eq!(plan.synthetic, [2, 8]);
        assert_eq!(plan.class_totals(), [14, 14]);
        assert_eq!(plan.kept, [12, 6]);
        let over = QuotaStrategy::PerLevel { per_level: [1, 0, 0, 0, 4], class_target: Some(40) };
        assert!(matches!(plan_quotas(&corpus(&[6, 6], &[3, 3]), over), Err(Error::Infeasible(_))));
        let fewer = QuotaStrategy::PerLevel { per_level: [1, 0, 0, 0, 4], class_target: Some(10) };
        let plan = plan_quotas(&corpus(&[6, 6], &[3, 3]), fewer).unwrap();
        assert_eq!(plan.kept, [8, 2]);
        let per: Vec<usize> = plan.subjects.iter().filter(|s| !s.depressed).map(|s| s.kept).collect();
        assert_eq!(per, vec![4, 4]);
    }

    #[test]
    fn clinical_totals() {
        let t = level_quota_totals(CLINICAL_SUBJECTS_PER_LEVEL, CLINICAL_LEVEL_QUOTAS, CLINICAL_CLASS_TARGET).unwrap();
        assert_eq!(t.total, 5760);
        assert_eq!(t.class, [2880, 2880]);
        assert_eq!(t.synthetic, [2682, 2793]);
        assert_eq!(t.original, [198, 87]);
        assert!(level_quota_totals(CLINICAL_SUBJECTS_PER_LEVEL, CLINICAL_LEVEL_QUOTAS, 2700).is_err());
    }

    #[test]
    fn kept_selection_is_seeded_and_sized() {
        let rs = corpus(&[10, 10], &[6, 6, 6]);
        let plan = plan_quotas(&rs, QuotaStrategy::EqualShare { synthetic_share: 0.3 }).unwrap();
        let a = select_originals(&rs, &plan, 3).unwrap();
        assert_eq!(a.len(), 36);
        assert_eq!(a, select_originals(&rs, &plan, 3).unwrap());
        assert_ne!(a, select_originals(&rs, &plan, 4).unwrap());
        for s in &plan.subjects {
            let n = a.iter().filter(|id| id.starts_with(&format!("{}_", s.subject_id))).count();
            assert_eq!(n, s.kept);
        }
    }

    #[test]
    fn lexicon_majority() {
        let a = LexiconAnnotator { vocab_size: 24 };
        let mut r = rec("x", "s", 1.0, Sentiment::Neutral);
        r.content = vec![20, 21, 0];
        assert_eq!(a.annotate(&r).unwrap(), Sentiment::Negative);
        r.content = vec![30];
        assert!(a.annotate(&r).is_err());
    }
}

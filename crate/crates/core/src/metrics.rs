//! Evaluation kernels: contingency statistics, verification error rates,
//! representation similarity, ranking agreement and screening metrics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};

/// Observed counts with independence-model expectations and Pearson residuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub observed: Vec<Vec<u64>>,
    pub expected: Vec<Vec<f64>>,
    pub residuals: Vec<Vec<f64>>,
    pub chi2: f64,
    pub df: usize,
    pub p_value: f64,
}

/// `r_ij = (O_ij − E_ij)/√E_ij` with `E` from the row/column marginals.
pub fn pearson_residuals(observed: &[Vec<u64>]) -> Result<ContingencyTable> {
    let rows = observed.len();
    if rows == 0 || observed[0].is_empty() {
        return Err(Error::Empty("contingency table".into()));
    }
    let cols = observed[0].len();
    if observed.iter().any(|r| r.len() != cols) {
        return Err(Error::Shape("ragged contingency table".into()));
    }
    let row_sums: Vec<f64> = observed
        .iter()
        .map(|r| r.iter().sum::<u64>() as f64)
        .collect();
    let col_sums: Vec<f64> = (0..cols)
        .map(|j| observed.iter().map(|r| r[j]).sum::<u64>() as f64)
        .collect();
    if let Some(i) = row_sums.iter().position(|&s| s == 0.0) {
        return Err(Error::Degenerate(format!("row {i} has zero marginal")));
    }
    if let Some(j) = col_sums.iter().position(|&s| s == 0.0) {
        return Err(Error::Degenerate(format!("column {j} has zero marginal")));
    }
    let total: f64 = row_sums.iter().sum();

    let mut expected = vec![vec![0.0; cols]; rows];
    let mut residuals = vec![vec![0.0; cols]; rows];
    let mut chi2 = 0.0;
    for i in 0..rows {
        for j in 0..cols {
            let e = row_sums[i] * col_sums[j] / total;
            let r = (observed[i][j] as f64 - e) / e.sqrt();
            expected[i][j] = e;
            residuals[i][j] = r;
            chi2 += r * r;
        }
    }
    let df = (rows - 1) * (cols - 1);
    let p_value = if df == 0 {
        1.0
    } else {
        ChiSquared::new(df as f64)
            .expect("positive df")
            .sf(chi2)
    };
    Ok(ContingencyTable {
        observed: observed.to_vec(),
        expected,
        residuals,
        chi2,
        df,
        p_value,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EerResult {
    pub eer: f64,
    pub threshold: f64,
}

/// One point of a verification sweep: a trial is accepted when `score ≥ threshold`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatePoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// FAR/FRR at every distinct score plus one threshold above the maximum
/// (where everything is rejected).
pub fn far_frr_curve(same: &[f64], diff: &[f64]) -> Result<Vec<RatePoint>> {
    if same.is_empty() || diff.is_empty() {
        return Err(Error::Empty("verification score set".into()));
    }
    if same.iter().chain(diff).any(|s| !s.is_finite()) {
        return Err(Error::Degenerate("non-finite verification score".into()));
    }
    let mut s = same.to_vec();
    let mut d = diff.to_vec();
    s.sort_by(f64::total_cmp);
    d.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = s.iter().chain(&d).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(thresholds[thresholds.len() - 1] + 1.0);

    // Two-pointer sweep: counts of scores strictly below the current threshold.
    let (mut si, mut di) = (0usize, 0usize);
    let mut out = Vec::with_capacity(thresholds.len());
    for &t in &thresholds {
        while si < s.len() && s[si] < t {
            si += 1;
        }
        while di < d.len() && d[di] < t {
            di += 1;
        }
        out.push(RatePoint {
            threshold: t,
            far: (d.len() - di) as f64 / d.len() as f64,
            frr: si as f64 / s.len() as f64,
        });
    }
    Ok(out)
}

/// Equal error rate, linearly interpolated between the two sweep thresholds
/// that bracket the FAR/FRR crossing.
pub fn eer(same: &[f64], diff: &[f64]) -> Result<EerResult> {
    let curve = far_frr_curve(same, diff)?;
    Ok(crossing(&curve))
}

pub(crate) fn crossing(curve: &[RatePoint]) -> EerResult {
    let gap = |p: &RatePoint| p.far - p.frr;
    let i = curve
        .iter()
        .position(|p| gap(p) <= 0.0)
        .expect("FAR is 0 and FRR is 1 above the maximum score");
    let p = curve[i];
    if gap(&p) == 0.0 || i == 0 {
        return EerResult {
            eer: p.far,
            threshold: p.threshold,
        };
    }
    let q = curve[i - 1];
    let w = gap(&q) / (gap(&q) - gap(&p));
    EerResult {
        eer: q.far + w * (p.far - q.far),
        threshold: q.threshold + w * (p.threshold - q.threshold),
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    cosine(a, b)
}

/// Mean cosine over same-speaker pairs minus mean cosine over different-speaker
/// pairs, all unordered pairs enumerated.
pub fn similarity_gap(embeddings: &[Vec<f64>], speakers: &[usize]) -> Result<f64> {
    let (same, diff) = speaker_pair_scores(embeddings, speakers)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(mean(&same) - mean(&diff))
}

/// Cosine scores of all same-speaker and different-speaker pairs.
pub fn speaker_pair_scores(
    embeddings: &[Vec<f64>],
    speakers: &[usize],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if embeddings.len() != speakers.len() {
        return Err(Error::Shape("one speaker label per embedding".into()));
    }
    let mut same = Vec::new();
    let mut diff = Vec::new();
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            let c = cosine(&embeddings[i], &embeddings[j]);
            if speakers[i] == speakers[j] {
                same.push(c);
            } else {
                diff.push(c);
            }
        }
    }
    if same.is_empty() || diff.is_empty() {
        return Err(Error::Empty(
            "need at least 2 speakers with at least 2 utterances each".into(),
        ));
    }
    Ok((same, diff))
}

/// Average ranks (1-based), ties share the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some(sxy / (sxx * syy).sqrt())
    }
}

/// Tie-aware Spearman ρ. `Ok(None)` flags an undefined coefficient (constant ranks).
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    if x.len() != y.len() {
        return Err(Error::Shape("spearman inputs differ in length".into()));
    }
    if x.len() < 3 {
        return Err(Error::Empty("spearman needs at least 3 items".into()));
    }
    Ok(pearson(&average_ranks(x), &average_ranks(y)))
}

/// Concordance over all pairs with different grades: concordant 1, tied value ½.
pub fn c_index(values: &[f64], grades: &[f64]) -> Result<f64> {
    if values.len() != grades.len() {
        return Err(Error::Shape("c-index inputs differ in length".into()));
    }
    let mut score = 0.0;
    let mut pairs = 0u64;
    for i in 0..values.len() {
        for j in i + 1..values.len() {
            if grades[i] == grades[j] {
                continue;
            }
            let (lo, hi) = if grades[i] < grades[j] { (i, j) } else { (j, i) };
            pairs += 1;
            if values[hi] > values[lo] {
                score += 1.0;
            } else if values[hi] == values[lo] {
                score += 0.5;
            }
        }
    }
    if pairs == 0 {
        return Err(Error::Degenerate("no comparable pairs for c-index".into()));
    }
    Ok(score / pairs as f64)
}

/// Binary ROC-AUC by the Mann–Whitney statistic; `None` when one class is absent.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let grades: Vec<f64> = positive.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect();
    c_index(scores, &grades).ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub macro_f1: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
    /// Set when some per-class F1 had a zero denominator and was taken as 0.
    pub zero_division: bool,
}

/// Binary screening metrics; `true` is the depressed (positive) class.
pub fn classification_report(y_true: &[bool], y_pred: &[bool]) -> Result<ClassificationReport> {
    if y_true.is_empty() {
        return Err(Error::Empty("classification report".into()));
    }
    if y_true.len() != y_pred.len() {
        return Err(Error::Shape("prediction count differs from labels".into()));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0.0, 0.0, 0.0, 0.0);
    for (&t, &p) in y_true.iter().zip(y_pred) {
        match (t, p) {
            (true, true) => tp += 1.0,
            (false, true) => fp += 1.0,
            (true, false) => fn_ += 1.0,
            (false, false) => tn += 1.0,
        }
    }
    let mut zero_division = false;
    let mut f1 = |tp: f64, fp: f64, fn_: f64| {
        let denom = 2.0 * tp + fp + fn_;
        if denom == 0.0 {
            zero_division = true;
            0.0
        } else {
            2.0 * tp / denom
        }
    };
    let f1_pos = f1(tp, fp, fn_);
    let f1_neg = f1(tn, fn_, fp);
    let ratio = |a: f64, b: f64| if a + b == 0.0 { 0.0 } else { a / (a + b) };
    Ok(ClassificationReport {
        macro_f1: (f1_pos + f1_neg) / 2.0,
        sensitivity: ratio(tp, fn_),
        specificity: ratio(tn, fp),
        accuracy: (tp + tn) / y_true.len() as f64,
        zero_division,
    })
}

/// Linear CKA with column centering. Returns `(value, defined)`; a side with
/// no variance makes the index undefined and it is reported as 0.
pub fn cka(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<(f64, bool)> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "cka row mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 3 {
        return Err(Error::Empty("cka needs at least 3 rows".into()));
    }
    let xc = centered(x);
    let yc = centered(y);
    let cross = (yc.transpose() * &xc).norm_squared();
    let xx = (xc.transpose() * &xc).norm();
    let yy = (yc.transpose() * &yc).norm();
    if xx == 0.0 || yy == 0.0 {
        return Ok((0.0, false));
    }
    Ok((cross / (xx * yy), true))
}

fn to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(n, d, |i, j| rows[i][j])
}

fn centered(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let mut m = to_matrix(rows);
    for mut col in m.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ProbeMode {
    Regression,
    Classification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ProbeReport {
    Regression {
        mse: f64,
        r2: f64,
    },
    Classification {
        accuracy: f64,
        macro_f1: f64,
        /// Binary tasks only; `None` when the eval split holds a single class.
        roc_auc: Option<f64>,
    },
}

/// Ridge strength of the closed-form regression probe.
pub const RIDGE_LAMBDA: f64 = 1e-3;

/// Closed-form ridge regression (unpenalized intercept). Returns weights and bias.
pub fn ridge_fit(x: &[Vec<f64>], y: &[f64], lambda: f64) -> Result<(Vec<f64>, f64)> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::Shape("ridge needs one target per nonempty row".into()));
    }
    let d = x[0].len();
    let n = x.len() as f64;
    let xm: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let ym = y.iter().sum::<f64>() / n;
    let xc = DMatrix::from_fn(x.len(), d, |i, j| x[i][j] - xm[j]);
    let yc = DVector::from_iterator(y.len(), y.iter().map(|v| v - ym));
    let mut gram = xc.transpose() * &xc;
    for i in 0..d {
        gram[(i, i)] += lambda;
    }
    let rhs = xc.transpose() * yc;
    let w = gram
        .cholesky()
        .ok_or_else(|| Error::Degenerate("ridge system not positive definite".into()))?
        .solve(&rhs);
    let bias = ym - w.iter().zip(&xm).map(|(a, b)| a * b).sum::<f64>();
    Ok((w.iter().copied().collect(), bias))
}

/// Multinomial logistic regression trained by full-batch gradient descent on
/// standardized inputs. Deterministic (zero init).
#[derive(Debug, Clone)]
pub struct LogisticProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    weights: DMatrix<f64>,
    bias: DVector<f64>,
    pub classes: usize,
}

impl LogisticProbe {
    pub fn fit(x: &[Vec<f64>], y: &[usize], classes: usize, l2: f64, iters: usize) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::Shape("logistic probe needs one label per nonempty row".into()));
        }
        let n = x.len();
        let d = x[0].len();
        let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
        let scale: Vec<f64> = (0..d)
            .map(|j| {
                let v = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
                if v > 1e-12 { v.sqrt() } else { 1.0 }
            })
            .collect();
        let xs = DMatrix::from_fn(n, d, |i, j| (x[i][j] - mean[j]) / scale[j]);
        let mut w = DMatrix::zeros(d, classes);
        let mut b = DVector::zeros(classes);
        let lr = 0.5;
        for _ in 0..iters {
            let probs = softmax_rows(&(&xs * &w), &b);
            let mut grad = probs;
            for (i, &c) in y.iter().enumerate() {
                grad[(i, c)] -= 1.0;
            }
            grad /= n as f64;
            let gw = xs.transpose() * &grad + &w * l2;
            let gb = DVector::from_iterator(classes, grad.column_iter().map(|c| c.sum()));
            w -= gw * lr;
            b -= gb * lr;
        }
        Ok(Self {
            mean,
            scale,
            weights: w,
            bias: b,
            classes,
        })
    }

    pub fn predict_proba(&self, x: &[Vec<f64>]) -> DMatrix<f64> {
        let d = self.mean.len();
        let xs = DMatrix::from_fn(x.len(), d, |i, j| (x[i][j] - self.mean[j]) / self.scale[j]);
        softmax_rows(&(&xs * &self.weights), &self.bias)
    }

    pub fn predict(&self, x: &[Vec<f64>]) -> Vec<usize> {
        let p = self.predict_proba(x);
        p.row_iter().map(|r| r.transpose().argmax().0).collect()
    }
}

fn softmax_rows(logits: &DMatrix<f64>, bias: &DVector<f64>) -> DMatrix<f64> {
    let mut out = logits.clone();
    for mut row in out.row_iter_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v += bias[j];
        }
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

/// Multi-class macro-F1 over classes present in truth or predictions.
pub fn macro_f1(y_true: &[usize], y_pred: &[usize]) -> f64 {
    let classes = y_true.iter().chain(y_pred).copied().max().map_or(0, |m| m + 1);
    let mut total = 0.0;
    let mut present = 0;
    for c in 0..classes {
        let tp = y_true.iter().zip(y_pred).filter(|(&t, &p)| t == c && p == c).count() as f64;
        let fp = y_true.iter().zip(y_pred).filter(|(&t, &p)| t != c && p == c).count() as f64;
        let fn_ = y_true.iter().zip(y_pred).filter(|(&t, &p)| t == c && p != c).count() as f64;
        if tp + fp + fn_ == 0.0 {
            continue;
        }
        present += 1;
        total += 2.0 * tp / (2.0 * tp + fp + fn_);
    }
    if present == 0 {
        0.0
    } else {
        total / present as f64
    }
}

pub enum ProbeTargets<'a> {
    Regression { train: &'a [f64], eval: &'a [f64] },
    Classification { train: &'a [usize], eval: &'a [usize], classes: usize },
}

/// Fit a linear probe on `train_x` and score it on `eval_x`.
pub fn linear_probe(
    train_x: &[Vec<f64>],
    eval_x: &[Vec<f64>],
    targets: ProbeTargets<'_>,
) -> Result<ProbeReport> {
    if train_x.is_empty() || eval_x.is_empty() {
        return Err(Error::Empty("probe split".into()));
    }
    match targets {
        ProbeTargets::Regression { train, eval } => {
            if eval.len() != eval_x.len() {
                return Err(Error::Shape("probe eval targets".into()));
            }
            let (w, b) = ridge_fit(train_x, train, RIDGE_LAMBDA)?;
            let pred: Vec<f64> = eval_x
                .iter()
                .map(|r| r.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b)
                .collect();
            let n = eval.len() as f64;
            let mse = pred.iter().zip(eval).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n;
            let mean = eval.iter().sum::<f64>() / n;
            let var = eval.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
            let r2 = if var == 0.0 { 0.0 } else { 1.0 - mse / var };
            Ok(ProbeReport::Regression { mse, r2 })
        }
        ProbeTargets::Classification {
            train,
            eval,
            classes,
        } => {
            if eval.len() != eval_x.len() {
                return Err(Error::Shape("probe eval labels".into()));
            }
            let probe = LogisticProbe::fit(train_x, train, classes, 1e-3, 300)?;
            let pred = probe.predict(eval_x);
            let accuracy =
                pred.iter().zip(eval).filter(|(p, t)| p == t).count() as f64 / eval.len() as f64;
            let roc_auc = if classes == 2 {
                let proba = probe.predict_proba(eval_x);
                let scores: Vec<f64> = (0..eval.len()).map(|i| proba[(i, 1)]).collect();
                let pos: Vec<bool> = eval.iter().map(|&c| c == 1).collect();
                roc_auc(&scores, &pos)
            } else {
                None
            };
            Ok(ProbeReport::Classification {
                accuracy,
                macro_f1: macro_f1(eval, &pred),
                roc_auc,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeverityCoordinate {
    pub projections: Vec<f64>,
    pub c_index: f64,
    pub spearman: Option<f64>,
    pub explained_variance_ratio: f64,
}

/// First principal direction of the mean-centered embeddings, oriented so the
/// projections correlate nonnegatively with the intended grades.
pub fn pca_severity_coordinate(embeddings: &[Vec<f64>], grades: &[f64]) -> Result<SeverityCoordinate> {
    if embeddings.len() < 3 {
        return Err(Error::Empty("pca needs at least 3 embeddings".into()));
    }
    if embeddings.len() != grades.len() {
        return Err(Error::Shape("one grade per embedding".into()));
    }
    let xc = centered(embeddings);
    let cov = xc.transpose() * &xc / (embeddings.len() as f64 - 1.0);
    let eig = cov.clone().symmetric_eigen();
    let (top, &lambda) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .ok_or_else(|| Error::Empty("zero-dimensional embeddings".into()))?;
    if lambda <= 0.0 {
        return Err(Error::Degenerate("zero covariance".into()));
    }
    let dir = eig.eigenvectors.column(top).into_owned();
    let mut proj: Vec<f64> = (&xc * dir).iter().copied().collect();
    if pearson(&proj, grades).unwrap_or(0.0) < 0.0 {
        proj.iter_mut().for_each(|p| *p = -*p);
    }
    let trace: f64 = eig.eigenvalues.iter().sum();
    Ok(SeverityCoordinate {
        c_index: c_index(&proj, grades)?,
        spearman: if proj.len() >= 3 {
            spearman_rho(&proj, grades)?
        } else {
            None
        },
        projections: proj,
        explained_variance_ratio: lambda / trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerCorrelation {
    pub mean_rho: Option<f64>,
    pub median_rho: Option<f64>,
    pub per_group: Vec<Option<f64>>,
    /// Groups without all five severity variants.
    pub skipped_incomplete: usize,
    /// Groups whose marker was constant (ρ undefined).
    pub undefined: usize,
}

/// Spearman ρ between intended level and a marker inside each base-utterance
/// group; groups are lists of `(level, marker)` pairs.
pub fn intra_group_marker_correlation(groups: &[Vec<(usize, f64)>]) -> MarkerCorrelation {
    let mut per_group = Vec::with_capacity(groups.len());
    let mut skipped = 0;
    let mut undefined = 0;
    let mut values = Vec::new();
    for g in groups {
        let mut levels: Vec<usize> = g.iter().map(|p| p.0).collect();
        levels.sort_unstable();
        levels.dedup();
        if levels != [0, 1, 2, 3, 4] {
            skipped += 1;
            continue;
        }
        let x: Vec<f64> = g.iter().map(|p| p.0 as f64).collect();
        let y: Vec<f64> = g.iter().map(|p| p.1).collect();
        let rho = spearman_rho(&x, &y).ok().flatten();
        match rho {
            Some(r) => values.push(r),
            None => undefined += 1,
        }
        per_group.push(rho);
    }
    MarkerCorrelation {
        mean_rho: (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64),
        median_rho: median(&values),
        per_group,
        skipped_incomplete: skipped,
        undefined,
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (m, 0.0);
    }
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_table_has_zero_residuals() {
        let t = pearson_residuals(&[vec![5, 5, 5], vec![5, 5, 5]]).unwrap();
        assert!(t.residuals.iter().flatten().all(|&r| r == 0.0));
        assert_eq!(t.chi2, 0.0);
        assert_eq!(t.df, 2);
        assert!((t.p_value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn residual_matches_hand_arithmetic() {
        // Row sums 24/12, column sums 18/18; E[0][0] = 24*18/36 = 12 ... pick a
        // table whose first expected count is 9: rows 18/18, cols 18/18 -> E = 9.
        let t = pearson_residuals(&[vec![16, 2], vec![2, 16]]).unwrap();
        assert_eq!(t.expected[0][0], 9.0);
        assert!((t.residuals[0][0] - 7.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_marginal_is_rejected() {
        assert!(pearson_residuals(&[vec![0, 0, 0], vec![1, 2, 3]]).is_err());
        assert!(pearson_residuals(&[vec![0, 1, 1], vec![0, 2, 3]]).is_err());
    }

    #[test]
    fn eer_extremes() {
        let r = eer(&[0.9, 0.8, 0.95], &[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(r.eer, 0.0);
        let r = eer(&[0.1, 0.5, 0.9], &[0.1, 0.5, 0.9]).unwrap();
        assert!((r.eer - 0.5).abs() < 1e-12);
        assert!(eer(&[], &[1.0]).is_err());
    }

    #[test]
    fn similarity_gap_extremes() {
        let e = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]];
        assert!((similarity_gap(&e, &[0, 0, 1, 1]).unwrap() - 1.0).abs() < 1e-12);
        let same = vec![vec![0.3, 0.4]; 4];
        assert!(similarity_gap(&same, &[0, 0, 1, 1]).unwrap().abs() < 1e-12);
        assert!(similarity_gap(&e[..2], &[0, 0]).is_err());
    }

    #[test]
    fn c_index_orders() {
        let g = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(c_index(&[1.0, 2.0, 3.0, 4.0, 5.0], &g).unwrap(), 1.0);
        assert_eq!(c_index(&[5.0, 4.0, 3.0, 2.0, 1.0], &g).unwrap(), 0.0);
        assert!(c_index(&[1.0, 2.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn spearman_basic_and_ties() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman_rho(&x, &[2.0, 4.0, 8.0, 16.0]).unwrap().unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman_rho(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap().unwrap() + 1.0).abs() < 1e-12);
        // ranks of [1,2,2,3] are [1,2.5,2.5,4]; Pearson with [1,2,3,4]:
        // centered a = [-1.5,0,0,1.5], b = [-1.5,-0.5,0.5,1.5]; a·b = 4.5,
        // |a|² = 4.5, |b|² = 5 -> ρ = 4.5/sqrt(22.5)
        let rho = spearman_rho(&[1.0, 2.0, 2.0, 3.0], &x).unwrap().unwrap();
        assert!((rho - 4.5 / 22.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(spearman_rho(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap(), None);
    }

    #[test]
    fn classification_report_cases() {
        let t = [true, true, false, false];
        let r = classification_report(&t, &t).unwrap();
        assert_eq!((r.macro_f1, r.sensitivity, r.specificity), (1.0, 1.0, 1.0));
        let r = classification_report(&t, &[false; 4]).unwrap();
        assert_eq!((r.sensitivity, r.specificity), (0.0, 1.0));
        // TP=3 FP=1 FN=2 TN=4
        let y_true = [true, true, true, true, true, false, false, false, false, false];
        let y_pred = [true, true, true, false, false, true, false, false, false, false];
        let r = classification_report(&y_true, &y_pred).unwrap();
        let f1_pos = 6.0 / (6.0 + 1.0 + 2.0);
        let f1_neg = 8.0 / (8.0 + 2.0 + 1.0);
        assert!((r.macro_f1 - (f1_pos + f1_neg) / 2.0).abs() < 1e-12);
        assert!((r.sensitivity - 0.6).abs() < 1e-12);
        assert!((r.specificity - 0.8).abs() < 1e-12);
        assert!(classification_report(&[], &[]).is_err());
    }

    #[test]
    fn all_negative_truth_flags_zero_division() {
        let r = classification_report(&[false, false], &[false, false]).unwrap();
        assert!(r.zero_division);
        assert_eq!(r.specificity, 1.0);
    }

    #[test]
    fn cka_identities() {
        let x: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64 % 5.0, 1.0 - i as f64 * 0.3]).collect();
        assert!((cka(&x, &x).unwrap().0 - 1.0).abs() < 1e-12);
        let c = vec![vec![2.0, 2.0]; 6];
        assert_eq!(cka(&x, &c).unwrap(), (0.0, false));
        assert!(cka(&x, &x[..5]).is_err());
    }

    #[test]
    fn pca_recovers_a_line() {
        let v = [0.6, -0.8, 0.0];
        let t = [-2.0, -1.0, 0.5, 1.0, 3.0];
        let e: Vec<Vec<f64>> = t.iter().map(|&s| v.iter().map(|c| c * s).collect()).collect();
        let r = pca_severity_coordinate(&e, &t).unwrap();
        assert_eq!(r.c_index, 1.0);
        for (p, s) in r.projections.iter().zip(&t) {
            assert!((p - (s - 0.3)).abs() < 1e-9, "{p} vs {s}");
        }
        assert!(pca_severity_coordinate(&vec![vec![1.0, 1.0]; 4], &[0.0, 1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn marker_correlation_cases() {
        let g: Vec<(usize, f64)> = (0..5).map(|l| (l, l as f64)).collect();
        let r = intra_group_marker_correlation(&[g.clone(), g.clone()]);
        assert_eq!(r.mean_rho, Some(1.0));
        let flat: Vec<(usize, f64)> = (0..5).map(|l| (l, 0.7)).collect();
        let r = intra_group_marker_correlation(&[flat, g[..4].to_vec()]);
        assert_eq!(r.undefined, 1);
        assert_eq!(r.skipped_incomplete, 1);
        assert_eq!(r.mean_rho, None);
    }

    #[test]
    fn probes_on_exact_and_separable_targets() {
        let x: Vec<Vec<f64>> = (0..40)
            .map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 1.3).cos(), i as f64 / 40.0])
            .collect();
        let y: Vec<f64> = x.iter().map(|r| 2.0 * r[0] - r[1] + 0.5 * r[2] + 1.0).collect();
        let rep = linear_probe(&x[..30], &x[30..], ProbeTargets::Regression { train: &y[..30], eval: &y[30..] }).unwrap();
        let ProbeReport::Regression { r2, .. } = rep else { panic!() };
        assert!(r2 >= 0.999, "r2 {r2}");

        let labels: Vec<usize> = x.iter().map(|r| usize::from(r[0] > 0.0)).collect();
        let rep = linear_probe(
            &x[..30],
            &x[30..],
            ProbeTargets::Classification { train: &labels[..30], eval: &labels[30..], classes: 2 },
        )
        .unwrap();
        let ProbeReport::Classification { roc_auc, .. } = rep else { panic!() };
        assert_eq!(roc_auc, Some(1.0));
    }
}

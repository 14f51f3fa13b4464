//! Oracles and gradient-check drivers shared by the suites and the acceptance run.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use depflow::dae::{class_balanced_weights, ordinal_loss, DaeConfig, DaeExample, DaeModel};
use depflow::gen::{
    duration_loss, duration_loss_graph, fm_loss, masked_sq_mean, prior_loss, prior_loss_graph, FlowTts, GenConfig,
    GenExample, GenLosses,
};
use depflow_nn::gradcheck::numeric_grad;
use depflow_nn::{ParamId, ParamStore, Session, Var};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

// ---- metric oracles ----

pub fn counting_rank(x: &[f64], i: usize) -> f64 {
    let less = x.iter().filter(|&&v| v < x[i]).count() as f64;
    let equal = x.iter().filter(|&&v| v == x[i]).count() as f64;
    less + (equal + 1.0) / 2.0
}

/// FAR/FRR by direct counting at every candidate threshold, linear
/// interpolation at the first crossing.
pub fn eer_oracle(same: &[f64], diff: &[f64]) -> f64 {
    let mut ts: Vec<f64> = same.iter().chain(diff).copied().collect();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    ts.push(ts[ts.len() - 1] + 1.0);
    let rates: Vec<(f64, f64)> = ts
        .iter()
        .map(|&t| {
            let far = diff.iter().filter(|&&d| d >= t).count() as f64 / diff.len() as f64;
            let frr = same.iter().filter(|&&s| s < t).count() as f64 / same.len() as f64;
            (far, frr)
        })
        .collect();
    for i in 0..rates.len() {
        let (far, frr) = rates[i];
        if far <= frr {
            if far == frr || i == 0 {
                return far;
            }
            let (pf, pr) = rates[i - 1];
            let w = (pf - pr) / ((pf - pr) - (far - frr));
            return pf + w * (far - pf);
        }
    }
    unreachable!("everything is rejected above the maximum score")
}

/// Ordered-pair concordance; `None` without comparable pairs.
pub fn c_index_oracle(values: &[f64], grades: &[f64]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..values.len() {
        for j in 0..values.len() {
            if grades[i] < grades[j] {
                den += 1.0;
                num += if values[j] > values[i] {
                    1.0
                } else if values[j] == values[i] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

/// Pearson correlation of counting ranks.
pub fn spearman_oracle(x: &[f64], y: &[f64]) -> Option<f64> {
    let rx: Vec<f64> = (0..x.len()).map(|i| counting_rank(x, i)).collect();
    let ry: Vec<f64> = (0..y.len()).map(|i| counting_rank(y, i)).collect();
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let sxy: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

fn gram(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    x.iter().map(|a| x.iter().map(|b| a.iter().zip(b).map(|(p, q)| p * q).sum()).collect()).collect()
}

/// HSIC-style CKA from doubly centered Gram matrices.
pub fn cka_oracle(x: &[Vec<f64>], y: &[Vec<f64>]) -> Option<f64> {
    let n = x.len();
    let center = |k: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        let row: Vec<f64> = k.iter().map(|r| r.iter().sum::<f64>() / n as f64).collect();
        let all = row.iter().sum::<f64>() / n as f64;
        (0..n).map(|i| (0..n).map(|j| k[i][j] - row[i] - row[j] + all).collect()).collect()
    };
    let (kc, lc) = (center(gram(x)), center(gram(y)));
    let dot = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| -> f64 {
        (0..n).map(|i| (0..n).map(|j| a[i][j] * b[i][j]).sum::<f64>()).sum()
    };
    let (kk, ll) = (dot(&kc, &kc), dot(&lc, &lc));
    if kk <= 1e-24 || ll <= 1e-24 {
        return None;
    }
    Some(dot(&kc, &lc) / (kk * ll).sqrt())
}

/// Residual matrix and `χ² = N(Σ O²/(R·C) − 1)`.
pub fn chi2_oracle(table: &[Vec<u64>]) -> (Vec<Vec<f64>>, f64) {
    let n: f64 = table.iter().flatten().sum::<u64>() as f64;
    let rs: Vec<f64> = table.iter().map(|r| r.iter().sum::<u64>() as f64).collect();
    let cs: Vec<f64> = (0..table[0].len()).map(|j| table.iter().map(|r| r[j]).sum::<u64>() as f64).collect();
    let mut s = 0.0;
    let mut res = vec![vec![0.0; cs.len()]; rs.len()];
    for (i, row) in table.iter().enumerate() {
        for (j, &o) in row.iter().enumerate() {
            let e = rs[i] * cs[j] / n;
            res[i][j] = (o as f64 - e) / e.sqrt();
            s += (o as f64).powi(2) / (rs[i] * cs[j]);
        }
    }
    (res, n * (s - 1.0))
}

/// Binary macro-F1 from per-class precision and recall.
pub fn macro_f1_oracle(t: &[bool], p: &[bool]) -> f64 {
    let f1 = |pos: bool| -> f64 {
        let tp = t.iter().zip(p).filter(|(&a, &b)| a == pos && b == pos).count() as f64;
        let pred = p.iter().filter(|&&b| b == pos).count() as f64;
        let real = t.iter().filter(|&&a| a == pos).count() as f64;
        let prec = if pred == 0.0 { 0.0 } else { tp / pred };
        let rec = if real == 0.0 { 0.0 } else { tp / real };
        if prec + rec == 0.0 {
            0.0
        } else {
            2.0 * prec * rec / (prec + rec)
        }
    };
    (f1(true) + f1(false)) / 2.0
}

// ---- gradient checks ----

pub const EPS: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
const COORDS: usize = 16;

#[derive(Debug, Clone)]
pub struct Point {
    pub what: &'static str,
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
}

impl Point {
    pub fn rel_error(&self) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(1e-6)
    }
}

pub fn randn(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Uniformly sampled coordinates across every parameter that received a gradient.
fn coords(store: &ParamStore, grads: &HashMap<ParamId, Array2<f64>>, n: usize, rng: &mut ChaCha8Rng) -> Vec<(ParamId, usize, usize)> {
    let ids: Vec<ParamId> = store.ids().filter(|id| grads.contains_key(id)).collect();
    let total: usize = ids.iter().map(|&id| store.get(id).len()).sum();
    (0..n)
        .map(|_| {
            let mut k = rng.random_range(0..total);
            for &id in &ids {
                let len = store.get(id).len();
                if k < len {
                    let cols = store.get(id).ncols();
                    return (id, k / cols, k % cols);
                }
                k -= len;
            }
            unreachable!()
        })
        .collect()
}

/// Weighted ordinal loss: graph value against the scalar form, then every logit.
pub fn ordinal_points() -> Vec<Point> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut model = DaeModel::new(DaeConfig { n_speakers: 1, ..Default::default() }, BTreeMap::from([(0, 0)])).unwrap();
    model.class_weights = class_balanced_weights(&[0, 0, 1, 2, 2, 2, 3, 4]);
    let levels = [0usize, 2, 4, 1, 3, 2];
    let mut store = ParamStore::new();
    let id = store.add("logits", randn(levels.len(), 4, 2.0, &mut rng));
    let value = |st: &ParamStore| {
        let s = Session::eval(st);
        let l = model.ordinal_loss_graph(&s, s.param(id), &levels).unwrap();
        s.scalar(l)
    };
    let direct: f64 = levels
        .iter()
        .enumerate()
        .map(|(r, &l)| ordinal_loss(&store.get(id).row(r).to_vec(), l, &model.class_weights).unwrap())
        .sum::<f64>()
        / levels.len() as f64;
    assert!((value(&store) - direct).abs() < 1e-12, "graph and scalar ordinal loss disagree");
    let g = {
        let s = Session::eval(&store);
        let l = model.ordinal_loss_graph(&s, s.param(id), &levels).unwrap();
        s.backward(l).param(id).unwrap().clone()
    };
    let mut out = Vec::new();
    for r in 0..levels.len() {
        for c in 0..4 {
            let numeric = numeric_grad(&mut store, id, r, c, EPS, &mut |st| value(st));
            out.push(Point { what: "ordinal", name: format!("logits[{r},{c}]"), analytic: g[[r, c]], numeric });
        }
    }
    out
}

pub fn small_dae(grl: bool) -> (DaeModel, Vec<DaeExample>) {
    let cfg = DaeConfig {
        frame_dim: 4,
        conv_channels: 5,
        conv_kernel: 3,
        frame_proj_dim: 6,
        attn_hidden: 4,
        embed_dim: 5,
        head_hidden: 6,
        dropout: 0.0,
        n_speakers: 3,
        n_content_units: 4,
        lambda_spk: if grl { 0.2 } else { 0.0 },
        lambda_con: if grl { 0.1 } else { 0.0 },
        seed: 3,
        ..Default::default()
    };
    let model = DaeModel::new(cfg, BTreeMap::from([(10, 0), (11, 1), (12, 2)])).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch = (0..4)
        .map(|i| DaeExample {
            frames: randn(7 + i, 4, 1.0, &mut rng),
            level: i % 5,
            speaker: Some(i % 3),
            content: Some((i + 1) % 4),
        })
        .collect();
    (model, batch)
}

/// Total encoder objective. Encoder parameters see the reversed adversarial
/// terms and, with the detached identification branch, no identification
/// loss; head parameters see the plain weighted sum.
pub fn dae_total_points(grl: bool) -> Vec<Point> {
    let (mut model, batch) = small_dae(grl);
    let c = model.config.clone();
    let probe = model.clone();
    let terms = |st: &ParamStore| {
        let s = Session::eval(st);
        probe.total_loss(&s, &batch).unwrap().values(&s)
    };
    let grads = {
        let s = Session::eval(&model.store);
        let l = model.total_loss(&s, &batch).unwrap();
        s.backward(l.total).params().clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut out = Vec::new();
    for (id, r, col) in coords(&model.store, &grads, COORDS, &mut rng) {
        let name = model.store.name(id).to_string();
        let encoder = DaeModel::is_encoder_param(&name);
        let mut objective = |st: &ParamStore| {
            let v = terms(st);
            if encoder {
                c.lambda_sup * v.sup - c.grl_scale * (c.lambda_spk * v.adv_spk + c.lambda_con * v.adv_con)
            } else {
                v.total
            }
        };
        let numeric = numeric_grad(&mut model.store, id, r, col, EPS, &mut objective);
        out.push(Point { what: "dae total", name: format!("{name}[{r},{col}]"), analytic: grads[&id][[r, col]], numeric });
    }
    out
}

/// The reversed speaker branch gives exactly the negated encoder gradient of
/// the plain branch and identical head gradients. Returns the number of
/// encoder tensors compared.
pub fn grl_negation() -> Result<usize, String> {
    let (mut model, batch) = small_dae(true);
    model.config.id_grad_to_encoder = true;
    let speakers: Vec<usize> = batch.iter().map(|e| e.speaker.unwrap()).collect();
    let frames: Vec<&Array2<f64>> = batch.iter().map(|e| &e.frames).collect();
    let grads = |reversed: bool| {
        let s = Session::eval(&model.store);
        let fwd = model.forward(&s, &frames).unwrap();
        let l = model.speaker_loss(&s, fwd.d_norm, &speakers, reversed);
        s.backward(l).params().clone()
    };
    let (plain, rev) = (grads(false), grads(true));
    let mut encoder = 0;
    for (id, name, _) in model.store.iter() {
        let (Some(a), Some(b)) = (plain.get(&id), rev.get(&id)) else {
            continue;
        };
        if DaeModel::is_encoder_param(name) {
            encoder += 1;
            if !a.iter().zip(b).all(|(x, y)| *x == -*y) {
                return Err(format!("{name} not negated"));
            }
            if a.iter().all(|&x| x == 0.0) {
                return Err(format!("{name} has a zero gradient"));
            }
        } else if a != b {
            return Err(format!("{name} differs on the head side"));
        }
    }
    if encoder == 0 {
        return Err("no encoder gradient".into());
    }
    Ok(encoder)
}

type Build<'a> = Box<dyn Fn(&Session) -> Var + 'a>;

/// Graph forms of the duration, prior and flow-matching losses: values against
/// the scalar forms, then every input coordinate.
pub fn loss_form_points() -> Vec<Point> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w: Vec<f64> = (0..7).map(|_| rng.random_range(1..9) as f64).collect();
    let mut store = ParamStore::new();
    let logw = store.add("log_w_hat", randn(7, 1, 1.0, &mut rng));
    let mu = store.add("mu", randn(8, 3, 1.0, &mut rng));
    let pred = store.add("pred", randn(8, 3, 1.0, &mut rng));
    let y = randn(8, 3, 1.0, &mut rng);
    let u = randn(8, 3, 1.0, &mut rng);
    let mask = [true, true, false, true, true, true, false, true];

    {
        let w_hat: Vec<f64> = store.get(logw).iter().map(|v| v.exp()).collect();
        let s = Session::eval(&store);
        let dur = duration_loss_graph(&s, s.param(logw), &w).unwrap();
        assert!((s.scalar(dur) - duration_loss(&w, &w_hat).unwrap()).abs() < 1e-12);
        let pr = prior_loss_graph(&s, s.input(y.clone()), s.param(mu), &mask).unwrap();
        assert!((s.scalar(pr) - prior_loss(&y, store.get(mu), &mask).unwrap()).abs() < 1e-12);
        let fm = masked_sq_mean(&s, s.param(pred), s.input(u.clone()), &mask).unwrap();
        assert!((s.scalar(fm) - fm_loss(store.get(pred), &u, &mask).unwrap()).abs() < 1e-12);
    }

    let cases: Vec<(&'static str, ParamId, Build)> = vec![
        ("duration", logw, Box::new(|s: &Session| duration_loss_graph(s, s.param(logw), &w).unwrap())),
        ("prior", mu, Box::new(|s: &Session| prior_loss_graph(s, s.input(y.clone()), s.param(mu), &mask).unwrap())),
        ("flow matching", pred, Box::new(|s: &Session| masked_sq_mean(s, s.param(pred), s.input(u.clone()), &mask).unwrap())),
    ];
    let mut out = Vec::new();
    for (what, id, build) in cases {
        let g = {
            let s = Session::eval(&store);
            let l = build(&s);
            s.backward(l).param(id).unwrap().clone()
        };
        let (rows, cols) = g.dim();
        for r in 0..rows {
            for c in 0..cols {
                let numeric = numeric_grad(&mut store, id, r, c, EPS, &mut |st| {
                    let s = Session::eval(st);
                    let l = build(&s);
                    s.scalar(l)
                });
                out.push(Point { what, name: format!("[{r},{c}]"), analytic: g[[r, c]], numeric });
            }
        }
    }
    out
}

pub fn small_generator() -> (FlowTts, GenExample) {
    let cfg = GenConfig {
        n_tokens: 6,
        frame_dim: 4,
        text_dim: 6,
        speaker_dim: 3,
        channels: 8,
        time_dim: 4,
        duration_hidden: 5,
        cond_dim: 5,
        film_hidden: 6,
        film_dropout: 0.0,
        segment_frames: 12,
        seed: 8,
        ..Default::default()
    };
    let mut model = FlowTts::new(cfg, &[7, 9]).unwrap();
    model.enable_film();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // move off the zero init so the FiLM hidden layer receives gradient
    let out = model.store.id("film.out.weight").unwrap();
    let shape = model.store.get(out).dim();
    *model.store.get_mut(out) = randn(shape.0, shape.1, 0.1, &mut rng);
    let durations = vec![2, 3, 1, 3, 2];
    let ex = GenExample {
        tokens: vec![1, 3, 2, 5, 0],
        frames: randn(durations.iter().sum(), 4, 1.0, &mut rng),
        durations,
        speaker_id: 9,
        c_dep: Some((0..5).map(|_| rng.random_range(-1.0..1.0)).collect()),
    };
    (model, ex)
}

/// Duration, prior and flow-matching losses through the full generator. The
/// duration predictor reads a detached text encoding, so its loss is checked
/// on the parameters it trains.
pub fn generator_points() -> Vec<Point> {
    let (mut model, ex) = small_generator();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let draw = model.draw(&ex, &mut rng);
    let parts: [(&'static str, fn(&str) -> bool); 3] = [
        ("duration", |n| n.starts_with("duration.") || n.starts_with("speaker.")),
        ("prior", |_| true),
        ("flow matching", |_| true),
    ];
    let mut out = Vec::new();
    for (k, (what, keep)) in parts.into_iter().enumerate() {
        let pick = |l: &GenLosses| [l.dur, l.prior, l.fm][k];
        let grads: HashMap<ParamId, Array2<f64>> = {
            let s = Session::eval(&model.store);
            let l = model.losses(&s, &ex, &draw).unwrap();
            s.backward(pick(&l))
                .params()
                .iter()
                .filter(|(id, _)| keep(model.store.name(**id)))
                .map(|(id, g)| (*id, g.clone()))
                .collect()
        };
        if what == "flow matching" {
            assert!(grads.keys().any(|id| model.store.name(*id).starts_with("film.")));
        }
        let mut crng = ChaCha8Rng::seed_from_u64(11 + k as u64);
        let probe = model.clone();
        for (id, r, c) in coords(&model.store, &grads, COORDS, &mut crng) {
            let name = model.store.name(id).to_string();
            let numeric = numeric_grad(&mut model.store, id, r, c, EPS, &mut |st| {
                let s = Session::eval(st);
                let l = probe.losses(&s, &ex, &draw).unwrap();
                s.scalar(pick(&l))
            });
            out.push(Point { what, name: format!("generator {name}[{r},{c}]"), analytic: grads[&id][[r, c]], numeric });
        }
    }
    out
}

//! Distance-threshold classification of subsumption pairs, and the h-norm
//! versus depth analysis.

use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{LabeledPair, Task, Taxonomy};
use crate::model::HimModel;

/// Distance between the two texts' embeddings; lower means more likely a
/// subsumption.
pub fn score_pair(model: &HimModel, child: &str, candidate: &str) -> Result<f64> {
    let e = model.embed(&[child, candidate])?;
    model.distance(&e[0], &e[1])
}

/// Eval-mode embedding of every entity label, indexed by node.
pub fn embed_entities(model: &HimModel, tax: &Taxonomy) -> Result<Vec<Vec<f64>>> {
    let labels: Vec<&str> = tax.labels().iter().map(String::as_str).collect();
    model.embed(&labels)
}

pub fn pair_scores(model: &HimModel, points: &[Vec<f64>], pairs: &[LabeledPair]) -> Result<Vec<f64>> {
    pairs
        .iter()
        .map(|p| {
            let (a, b) = (points.get(p.child), points.get(p.candidate));
            match (a, b) {
                (Some(a), Some(b)) => model.distance(a, b),
                _ => Err(Error::dim("pair refers to a node without an embedding")),
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_predictions(predicted: &[bool], labels: &[bool]) -> Self {
        let mut c = Confusion::default();
        for (&p, &l) in predicted.iter().zip(labels) {
            match (p, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        f1(self.precision(), self.recall())
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Calibration {
    pub threshold: f64,
    pub f1: f64,
}

/// Threshold maximizing F1 for the rule `score < threshold`.
///
/// Candidates are the midpoints between consecutive distinct scores and one
/// value above the maximum. Ties go to the larger threshold (higher recall).
pub fn calibrate_threshold(scores: &[f64], labels: &[bool]) -> Result<Calibration> {
    if scores.len() != labels.len() {
        return Err(Error::dim("scores and labels differ in length"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(Error::invalid("calibration needs both positive and negative pairs"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut best = Calibration {
        threshold: f64::NAN,
        f1: -1.0,
    };
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let threshold = match order.get(i) {
            Some(&next) => (s + scores[next]) / 2.0,
            None => s + 1.0,
        };
        let c = Confusion {
            tp,
            fp,
            fn_: n_pos - tp,
            tn: 0,
        };
        let f = c.f1();
        if f >= best.f1 {
            best = Calibration { threshold, f1: f };
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    /// F1 over the positives at each hop count together with all negatives.
    pub per_hop: BTreeMap<String, f64>,
}

/// Report for precomputed scores, predicting positive iff `score < threshold`.
pub fn evaluate_scores(task: Task, pairs: &[LabeledPair], scores: &[f64], threshold: f64) -> Result<EvalReport> {
    if pairs.len() != scores.len() {
        return Err(Error::dim("pairs and scores differ in length"));
    }
    let predicted: Vec<bool> = scores.iter().map(|&s| s < threshold).collect();
    let labels: Vec<bool> = pairs.iter().map(|p| p.positive).collect();
    let all = Confusion::from_predictions(&predicted, &labels);
    let negatives = Confusion {
        tp: 0,
        fn_: 0,
        ..all
    };
    let mut hops: BTreeMap<u32, Confusion> = BTreeMap::new();
    for (p, &pred) in pairs.iter().zip(&predicted) {
        if p.positive {
            let c = hops.entry(p.hops).or_insert(negatives);
            if pred {
                c.tp += 1;
            } else {
                c.fn_ += 1;
            }
        }
    }
    Ok(EvalReport {
        task,
        threshold,
        precision: all.precision(),
        recall: all.recall(),
        f1: all.f1(),
        n_pos: all.tp + all.fn_,
        n_neg: all.fp + all.tn,
        per_hop: hops.into_iter().map(|(h, c)| (h.to_string(), c.f1())).collect(),
    })
}

pub fn evaluate(model: &HimModel, tax: &Taxonomy, pairs: &[LabeledPair], threshold: f64, task: Task) -> Result<EvalReport> {
    let points = embed_entities(model, tax)?;
    let scores = pair_scores(model, &points, pairs)?;
    evaluate_scores(task, pairs, &scores, threshold)
}

/// Calibrate on `val`, then report on `test` with the frozen threshold.
pub fn calibrate_and_evaluate(
    model: &HimModel,
    tax: &Taxonomy,
    val: &[LabeledPair],
    test: &[LabeledPair],
    task: Task,
) -> Result<EvalReport> {
    let points = embed_entities(model, tax)?;
    let val_scores = pair_scores(model, &points, val)?;
    let labels: Vec<bool> = val.iter().map(|p| p.positive).collect();
    let cal = calibrate_threshold(&val_scores, &labels)?;
    let test_scores = pair_scores(model, &points, test)?;
    evaluate_scores(task, test, &test_scores, cal.threshold)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spearman {
    pub rho: f64,
    /// Set when either input is constant; `rho` is then 0.
    pub degenerate: bool,
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of the average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Spearman> {
    if x.len() != y.len() {
        return Err(Error::dim("spearman inputs differ in length"));
    }
    if x.len() < 2 {
        return Err(Error::invalid("spearman needs at least two points"));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(Spearman {
            rho: 0.0,
            degenerate: true,
        });
    }
    Ok(Spearman {
        rho: sxy / (sxx * syy).sqrt(),
        degenerate: false,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HnormRow {
    pub id: String,
    pub label: String,
    pub depth: u32,
    pub h_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HnormAnalysis {
    pub rows: Vec<HnormRow>,
    pub spearman: Spearman,
    pub mean_h_norm: f64,
}

/// h-norm and depth for `sample` (every entity if `None`).
pub fn hnorm_depth_analysis(model: &HimModel, tax: &Taxonomy, sample: Option<&[usize]>) -> Result<HnormAnalysis> {
    let nodes: Vec<usize> = match sample {
        Some(s) => s.to_vec(),
        None => (0..tax.len()).collect(),
    };
    if let Some(&bad) = nodes.iter().find(|&&u| u >= tax.len()) {
        return Err(Error::invalid(format!("node {bad} out of range")));
    }
    let labels: Vec<&str> = nodes.iter().map(|&u| tax.label(u)).collect();
    let points = model.embed(&labels)?;
    let rows = nodes
        .iter()
        .zip(&points)
        .map(|(&u, e)| {
            Ok(HnormRow {
                id: tax.id(u).to_string(),
                label: tax.label(u).to_string(),
                depth: tax.depth(u),
                h_norm: model.h_norm(e)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let h: Vec<f64> = rows.iter().map(|r| r.h_norm).collect();
    let d: Vec<f64> = rows.iter().map(|r| r.depth as f64).collect();
    let spearman = spearman(&h, &d)?;
    let mean_h_norm = h.iter().sum::<f64>() / h.len() as f64;
    Ok(HnormAnalysis {
        rows,
        spearman,
        mean_h_norm,
    })
}

/// TSV `id, label, depth, h_norm, coord_0..coord_k`, one row per entity.
pub fn export_embeddings(model: &HimModel, tax: &Taxonomy, path: &Path) -> Result<usize> {
    let points = embed_entities(model, tax)?;
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    let dim = points.first().map_or(0, Vec::len);
    write!(out, "#id\tlabel\tdepth\th_norm")?;
    for k in 0..dim {
        write!(out, "\tcoord_{k}")?;
    }
    writeln!(out)?;
    for (u, e) in points.iter().enumerate() {
        write!(out, "{}\t{}\t{}\t{}", tax.id(u), tax.label(u), tax.depth(u), model.h_norm(e)?)?;
        for v in e {
            write!(out, "\t{v}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(points.len())
}

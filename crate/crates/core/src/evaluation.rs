//! Token-level and chunk-level scores, position buckets, per-label relative
//! improvements, Welch's t-test over repeated runs, and potential summaries.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::Chunk;
use crate::crf::PotentialRow;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Gold occurrences.
    pub support: usize,
    pub predicted: usize,
}

impl LabelMetrics {
    /// Seen in gold or predictions.
    pub fn is_present(&self) -> bool {
        self.support > 0 || self.predicted > 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenReport {
    pub labels: Vec<LabelMetrics>,
    /// Unweighted mean F1 over the labels that occur in gold or predictions.
    pub macro_f1: f64,
    pub tokens: usize,
}

impl TokenReport {
    pub fn get(&self, label: &str) -> Option<&LabelMetrics> {
        self.labels.iter().find(|m| m.label == label)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn check_aligned(gold: &[Vec<usize>], pred: &[Vec<usize>]) -> Result<()> {
    if gold.len() != pred.len() {
        return Err(Error::Dimension(format!(
            "{} gold sequences but {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    for (i, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.len() != p.len() {
            return Err(Error::Dimension(format!(
                "sequence {i}: {} gold labels but {} predicted",
                g.len(),
                p.len()
            )));
        }
    }
    Ok(())
}

/// Counts (tp, gold, predicted) per label over a token iterator.
fn count_pairs<I: IntoIterator<Item = (usize, usize)>>(
    pairs: I,
    num_labels: usize,
) -> Result<(Vec<[usize; 3]>, usize)> {
    let mut counts = vec![[0usize; 3]; num_labels];
    let mut n = 0;
    for (g, p) in pairs {
        if g >= num_labels || p >= num_labels {
            return Err(Error::InvalidArgument(format!(
                "label id {} outside 0..{num_labels}",
                g.max(p)
            )));
        }
        if g == p {
            counts[g][0] += 1;
        }
        counts[g][1] += 1;
        counts[p][2] += 1;
        n += 1;
    }
    Ok((counts, n))
}

fn report_from_counts(
    counts: &[[usize; 3]],
    tokens: usize,
    names: &[String],
    exclude: Option<usize>,
) -> TokenReport {
    let labels: Vec<LabelMetrics> = counts
        .iter()
        .zip(names)
        .map(|(&[tp, gold, predicted], name)| {
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, gold);
            LabelMetrics {
                label: name.clone(),
                precision,
                recall,
                f1: harmonic(precision, recall),
                support: gold,
                predicted,
            }
        })
        .collect();
    let scored: Vec<f64> = labels
        .iter()
        .enumerate()
        .filter(|(i, m)| m.is_present() && Some(*i) != exclude)
        .map(|(_, m)| m.f1)
        .collect();
    let macro_f1 = if scored.is_empty() {
        0.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    TokenReport {
        labels,
        macro_f1,
        tokens,
    }
}

/// Per-label one-vs-rest scores over all tokens pooled together. `exclude`
/// drops one label (usually the background) from the macro average only.
pub fn token_macro_f1(
    gold: &[Vec<usize>],
    pred: &[Vec<usize>],
    label_names: &[String],
    exclude: Option<usize>,
) -> Result<TokenReport> {
    check_aligned(gold, pred)?;
    let pairs = gold
        .iter()
        .zip(pred)
        .flat_map(|(g, p)| g.iter().copied().zip(p.iter().copied()));
    let (counts, n) = count_pairs(pairs, label_names.len())?;
    Ok(report_from_counts(&counts, n, label_names, exclude))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ChunkReport {
    fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        ChunkReport {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1: harmonic(precision, recall),
        }
    }
}

fn sorted_disjoint(chunks: &[Chunk], side: &str, seq: usize) -> Result<Vec<Chunk>> {
    let mut sorted = chunks.to_vec();
    sorted.sort();
    for w in sorted.windows(2) {
        if w[1].start < w[0].end {
            return Err(Error::InvalidArgument(format!(
                "overlapping {side} chunks in sequence {seq}: [{}, {}) and [{}, {})",
                w[0].start, w[0].end, w[1].start, w[1].end
            )));
        }
    }
    if let Some(c) = sorted.iter().find(|c| c.start >= c.end) {
        return Err(Error::InvalidArgument(format!(
            "empty {side} chunk [{}, {}) in sequence {seq}",
            c.start, c.end
        )));
    }
    Ok(sorted)
}

/// A prediction counts when it shares a position with a same-label gold chunk
/// not yet credited. Predictions are visited left to right and each takes the
/// leftmost eligible gold chunk.
pub fn approx_chunk_f1(gold: &[Vec<Chunk>], pred: &[Vec<Chunk>]) -> Result<ChunkReport> {
    if gold.len() != pred.len() {
        return Err(Error::Dimension(format!(
            "{} gold sequences but {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (i, (g, p)) in gold.iter().zip(pred).enumerate() {
        let g = sorted_disjoint(g, "gold", i)?;
        let p = sorted_disjoint(p, "predicted", i)?;
        let mut credited = vec![false; g.len()];
        for pc in &p {
            let hit = g.iter().enumerate().find(|(j, gc)| {
                !credited[*j] && gc.label == pc.label && gc.start < pc.end && pc.start < gc.end
            });
            match hit {
                Some((j, _)) => {
                    credited[j] = true;
                    tp += 1;
                }
                None => fp += 1,
            }
        }
        fn_ += credited.iter().filter(|c| !**c).count();
    }
    Ok(ChunkReport::from_counts(tp, fp, fn_))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionBin {
    pub start: usize,
    pub end: usize,
    pub tokens: usize,
    /// `None` when no token falls in the bin.
    pub macro_f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionBucketReport {
    pub edges: Vec<usize>,
    pub bins: Vec<PositionBin>,
}

/// Edges `0, w, 2w, ...` up to the first multiple of `w` at or beyond `max_len`.
pub fn default_bin_edges(max_len: usize, width: usize) -> Result<Vec<usize>> {
    if width == 0 {
        return Err(Error::InvalidArgument("bin width must be >= 1".into()));
    }
    let bins = max_len.div_ceil(width).max(1);
    Ok((0..=bins).map(|i| i * width).collect())
}

/// Macro-F1 within each position bin `[edges[i], edges[i+1])`.
pub fn position_bucket_f1(
    gold: &[Vec<usize>],
    pred: &[Vec<usize>],
    label_names: &[String],
    edges: &[usize],
    exclude: Option<usize>,
) -> Result<PositionBucketReport> {
    check_aligned(gold, pred)?;
    if edges.len() < 2 || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(
            "bin edges must be strictly increasing with at least two entries".into(),
        ));
    }
    let first = edges[0];
    let last = edges[edges.len() - 1];
    let longest = gold.iter().map(Vec::len).max().unwrap_or(0);
    if longest > last || (first > 0 && longest > 0) {
        return Err(Error::InvalidArgument(format!(
            "bin edges [{first}, {last}) do not cover positions up to {longest}"
        )));
    }
    let mut bins = Vec::with_capacity(edges.len() - 1);
    for w in edges.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let pairs = gold.iter().zip(pred).flat_map(|(g, p)| {
            let end = g.len().min(hi);
            let start = lo.min(end);
            g[start..end]
                .iter()
                .copied()
                .zip(p[start..end].iter().copied())
        });
        let (counts, n) = count_pairs(pairs, label_names.len())?;
        bins.push(PositionBin {
            start: lo,
            end: hi,
            tokens: n,
            macro_f1: (n > 0)
                .then(|| report_from_counts(&counts, n, label_names, exclude).macro_f1),
        });
    }
    Ok(PositionBucketReport {
        edges: edges.to_vec(),
        bins,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelImprovement {
    pub label: String,
    pub f1: f64,
    pub base_f1: f64,
    /// `(f1 - base) / base`; `None` when the base F1 is zero.
    pub relative: Option<f64>,
}

impl LabelImprovement {
    /// Percentage with one decimal, or an em-dash sentinel for an undefined ratio.
    pub fn display(&self) -> String {
        match self.relative {
            Some(r) => format!("{:.1}%", 100.0 * r),
            None => "\u{2014}".to_string(),
        }
    }
}

pub fn label_improvement(
    combined: &TokenReport,
    base: &TokenReport,
) -> Result<Vec<LabelImprovement>> {
    let names = |r: &TokenReport| r.labels.iter().map(|m| m.label.clone()).collect::<Vec<_>>();
    if names(combined) != names(base) {
        return Err(Error::InvalidArgument(
            "reports cover different label sets".into(),
        ));
    }
    Ok(combined
        .labels
        .iter()
        .zip(&base.labels)
        .map(|(c, b)| LabelImprovement {
            label: c.label.clone(),
            f1: c.f1,
            base_f1: b.f1,
            relative: (b.f1 != 0.0).then(|| (c.f1 - b.f1) / b.f1),
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub mean_a: f64,
    pub mean_b: f64,
    pub t_statistic: f64,
    pub degrees_of_freedom: f64,
    pub p_value: f64,
    pub n_runs: (usize, usize),
    /// Set when either side has three runs or fewer.
    pub low_power: bool,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Two-sided Welch's t-test with Welch-Satterthwaite degrees of freedom.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<SignificanceResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument(
            "Welch's t-test needs at least two runs per side".into(),
        ));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    let (t, df, p) = if se2 == 0.0 {
        if ma == mb {
            (0.0, f64::INFINITY, 1.0)
        } else {
            let t = if ma > mb {
                f64::INFINITY
            } else {
                f64::NEG_INFINITY
            };
            (t, f64::INFINITY, 0.0)
        }
    } else {
        let t = (ma - mb) / se2.sqrt();
        let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
        let dist = StudentsT::new(0.0, 1.0, df)
            .map_err(|e| Error::NonFinite(format!("t distribution: {e}")))?;
        let p = (2.0 * dist.cdf(-t.abs())).clamp(0.0, 1.0);
        (t, df, p)
    };
    Ok(SignificanceResult {
        mean_a: ma,
        mean_b: mb,
        t_statistic: t,
        degrees_of_freedom: df,
        p_value: p,
        n_runs: (a.len(), b.len()),
        low_power: a.len() <= 3 || b.len() <= 3,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceStats {
    pub mean: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialSummary {
    pub cells: usize,
    pub lstm: SourceStats,
    pub hb: SourceStats,
    pub total: SourceStats,
}

/// Mean and maximum over every (token, label) cell of a potential dump.
pub fn potential_summary(rows: &[PotentialRow]) -> Result<PotentialSummary> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("empty potential dump".into()));
    }
    let stats = |f: fn(&PotentialRow) -> f64| SourceStats {
        mean: rows.iter().map(f).sum::<f64>() / rows.len() as f64,
        max: rows.iter().map(f).fold(f64::NEG_INFINITY, f64::max),
    };
    Ok(PotentialSummary {
        cells: rows.len(),
        lstm: stats(|r| r.phi_lstm),
        hb: stats(|r| r.phi_hb),
        total: stats(|r| r.phi_total),
    })
}

//! Dawid-Skene label aggregation over redundant noisy annotations, plus
//! raw agreement and Cohen's kappa.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sparse item × annotator label matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationMatrix {
    items: Vec<String>,
    annotators: Vec<String>,
    labels: Vec<String>,
    /// Per item, `(annotator, label)` sorted by annotator id.
    responses: Vec<Vec<(usize, usize)>>,
}

impl AnnotationMatrix {
    /// Build from `(item, annotator, label)` triples. Items and annotators keep
    /// first-seen order; `labels` fixes the label ids.
    pub fn from_triples<'a, I>(triples: I, labels: &[String]) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str, &'a str)>,
    {
        if labels.len() < 2 {
            return Err(Error::InvalidArgument(
                "at least two labels are required".into(),
            ));
        }
        let label_index: HashMap<&str, usize> = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i))
            .collect();
        let mut items = Vec::new();
        let mut item_index = HashMap::new();
        let mut annotators = Vec::new();
        let mut annotator_index = HashMap::new();
        let mut responses: Vec<Vec<(usize, usize)>> = Vec::new();
        for (item, annotator, label) in triples {
            let l = *label_index
                .get(label)
                .ok_or_else(|| Error::UnknownLabel(label.to_string()))?;
            let i = *item_index.entry(item.to_string()).or_insert_with(|| {
                items.push(item.to_string());
                responses.push(Vec::new());
                items.len() - 1
            });
            let a = *annotator_index
                .entry(annotator.to_string())
                .or_insert_with(|| {
                    annotators.push(annotator.to_string());
                    annotators.len() - 1
                });
            if responses[i].iter().any(|&(b, _)| b == a) {
                return Err(Error::InvalidArgument(format!(
                    "annotator {annotator} labeled item {item} more than once"
                )));
            }
            responses[i].push((a, l));
        }
        let mut m = AnnotationMatrix {
            items,
            annotators,
            labels: labels.to_vec(),
            responses,
        };
        m.sort_responses();
        Ok(m)
    }

    /// Build from dense ids. `responses[i]` lists `(annotator, label)` for item `i`.
    pub fn new(
        items: Vec<String>,
        annotators: Vec<String>,
        labels: Vec<String>,
        responses: Vec<Vec<(usize, usize)>>,
    ) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::InvalidArgument(
                "at least two labels are required".into(),
            ));
        }
        if responses.len() != items.len() {
            return Err(Error::Dimension(format!(
                "{} items but {} response lists",
                items.len(),
                responses.len()
            )));
        }
        for (i, r) in responses.iter().enumerate() {
            let mut seen = BTreeSet::new();
            for &(a, l) in r {
                if a >= annotators.len() || l >= labels.len() {
                    return Err(Error::InvalidArgument(format!(
                        "response out of range on item {}",
                        items[i]
                    )));
                }
                if !seen.insert(a) {
                    return Err(Error::InvalidArgument(format!(
                        "annotator {} labeled item {} more than once",
                        annotators[a], items[i]
                    )));
                }
            }
        }
        let mut m = AnnotationMatrix {
            items,
            annotators,
            labels,
            responses,
        };
        m.sort_responses();
        Ok(m)
    }

    // Fixed summation order makes results independent of annotator order.
    fn sort_responses(&mut self) {
        let names = &self.annotators;
        for r in &mut self.responses {
            r.sort_by(|x, y| names[x.0].cmp(&names[y.0]));
        }
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn annotators(&self) -> &[String] {
        &self.annotators
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn responses(&self, item: usize) -> &[(usize, usize)] {
        &self.responses[item]
    }

    pub fn num_responses(&self) -> usize {
        self.responses.iter().map(Vec::len).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregationResult {
    pub items: Vec<String>,
    pub annotators: Vec<String>,
    pub labels: Vec<String>,
    /// Per item, a distribution over labels.
    pub posteriors: Vec<Vec<f64>>,
    /// Per annotator, `confusions[a][true][given]`.
    pub confusions: Vec<Vec<Vec<f64>>>,
    pub class_priors: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Observed-data log-likelihood after each M-step.
    pub log_likelihood: Vec<f64>,
    /// Log-likelihood plus the log of the smoothing prior; EM never decreases it.
    pub objective: Vec<f64>,
}

struct Params {
    priors: Vec<f64>,
    confusions: Vec<Vec<Vec<f64>>>,
}

fn majority_vote(m: &AnnotationMatrix) -> Vec<Vec<f64>> {
    let l = m.labels.len();
    m.responses
        .iter()
        .map(|r| {
            let mut counts = vec![0usize; l];
            for &(_, k) in r {
                counts[k] += 1;
            }
            let top = *counts.iter().max().unwrap_or(&0);
            let tied = counts.iter().filter(|&&c| c == top).count() as f64;
            counts
                .iter()
                .map(|&c| if c == top { 1.0 / tied } else { 0.0 })
                .collect()
        })
        .collect()
}

fn m_step(m: &AnnotationMatrix, post: &[Vec<f64>], alpha: f64) -> Params {
    let l = m.labels.len();
    let n = m.items.len() as f64;
    let mut priors = vec![alpha; l];
    let mut counts = vec![vec![vec![alpha; l]; l]; m.annotators.len()];
    for (r, t) in m.responses.iter().zip(post) {
        for k in 0..l {
            priors[k] += t[k];
        }
        for &(a, given) in r {
            for k in 0..l {
                counts[a][k][given] += t[k];
            }
        }
    }
    priors.iter_mut().for_each(|p| *p /= n + alpha * l as f64);
    for conf in &mut counts {
        for row in conf.iter_mut() {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            } else {
                row.fill(1.0 / l as f64);
            }
        }
    }
    Params {
        priors,
        confusions: counts,
    }
}

fn logsumexp(x: &[f64]) -> f64 {
    let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mx + x.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

/// New posteriors and the observed-data log-likelihood under `p`.
fn e_step(m: &AnnotationMatrix, p: &Params) -> (Vec<Vec<f64>>, f64) {
    let l = m.labels.len();
    let mut ll = 0.0;
    let post = m
        .responses
        .iter()
        .map(|r| {
            let joint: Vec<f64> = (0..l)
                .map(|k| {
                    p.priors[k].ln()
                        + r.iter()
                            .map(|&(a, given)| p.confusions[a][k][given].ln())
                            .sum::<f64>()
                })
                .collect();
            ll += logsumexp(&joint);
            let mx = joint.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = joint.iter().map(|j| (j - mx).exp()).collect();
            let s: f64 = w.iter().sum();
            w.iter().map(|v| v / s).collect()
        })
        .collect();
    (post, ll)
}

fn log_prior(p: &Params, alpha: f64) -> f64 {
    if alpha == 0.0 {
        return 0.0;
    }
    alpha
        * (p.priors.iter().map(|v| v.ln()).sum::<f64>()
            + p.confusions
                .iter()
                .flat_map(|c| c.iter().flatten())
                .map(|v| v.ln())
                .sum::<f64>())
}

/// Dawid-Skene EM: majority-vote start, add-one smoothed M-step, stop once
/// no posterior entry moves by `tol` or more.
pub fn dawid_skene_em(
    m: &AnnotationMatrix,
    max_iters: usize,
    tol: f64,
) -> Result<AggregationResult> {
    dawid_skene_em_smoothed(m, max_iters, tol, 1.0)
}

/// [`dawid_skene_em`] with `pseudo_count` added to every prior and confusion
/// count. Zero gives maximum-likelihood EM, where `objective` equals the
/// observed-data log-likelihood.
pub fn dawid_skene_em_smoothed(
    m: &AnnotationMatrix,
    max_iters: usize,
    tol: f64,
    pseudo_count: f64,
) -> Result<AggregationResult> {
    if !(pseudo_count >= 0.0 && pseudo_count.is_finite()) {
        return Err(Error::InvalidArgument(
            "pseudo_count must be finite and >= 0".into(),
        ));
    }
    if max_iters == 0 {
        return Err(Error::InvalidArgument("max_iters must be >= 1".into()));
    }
    if let Some(i) = m.responses.iter().position(Vec::is_empty) {
        return Err(Error::InvalidArgument(format!(
            "item {} has no responses",
            m.items[i]
        )));
    }
    let mut post = majority_vote(m);
    let mut params = m_step(m, &post, pseudo_count);
    let mut lls = Vec::new();
    let mut objective = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let (next, ll) = e_step(m, &params);
        lls.push(ll);
        objective.push(ll + log_prior(&params, pseudo_count));
        let delta = post
            .iter()
            .zip(&next)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max);
        post = next;
        params = m_step(m, &post, pseudo_count);
        if delta < tol {
            converged = true;
            break;
        }
    }
    Ok(AggregationResult {
        items: m.items.clone(),
        annotators: m.annotators.clone(),
        labels: m.labels.clone(),
        posteriors: post,
        confusions: params.confusions,
        class_priors: params.priors,
        iterations,
        converged,
        log_likelihood: lls,
        objective,
    })
}

/// Argmax label id per item; ties go to the lower id.
pub fn infer_hard_labels(r: &AggregationResult) -> Vec<usize> {
    r.posteriors
        .iter()
        .map(|p| {
            let mut best = 0;
            for (k, &v) in p.iter().enumerate() {
                if v > p[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub n: usize,
    pub raw: f64,
    /// Cohen's kappa; `None` when chance agreement is 1.
    pub kappa: Option<f64>,
}

/// Raw agreement and Cohen's kappa between two labelings of the same items.
pub fn agreement<L: Ord + Clone>(
    a: &BTreeMap<String, L>,
    b: &BTreeMap<String, L>,
) -> Result<Agreement> {
    if a.len() != b.len() || a.keys().zip(b.keys()).any(|(x, y)| x != y) {
        let missing = a
            .keys()
            .find(|k| !b.contains_key(*k))
            .or_else(|| b.keys().find(|k| !a.contains_key(*k)));
        return Err(Error::InvalidArgument(format!(
            "labelings cover different items (first difference: {})",
            missing.map(String::as_str).unwrap_or("?")
        )));
    }
    if a.is_empty() {
        return Err(Error::InvalidArgument("no items to compare".into()));
    }
    let n = a.len() as f64;
    let mut ma: BTreeMap<&L, f64> = BTreeMap::new();
    let mut mb: BTreeMap<&L, f64> = BTreeMap::new();
    let mut same = 0usize;
    for (x, y) in a.values().zip(b.values()) {
        *ma.entry(x).or_default() += 1.0;
        *mb.entry(y).or_default() += 1.0;
        same += (x == y) as usize;
    }
    let p_o = same as f64 / n;
    let p_e: f64 = ma
        .iter()
        .map(|(k, ca)| ca / n * mb.get(k).copied().unwrap_or(0.0) / n)
        .sum();
    let kappa = if (1.0 - p_e).abs() < 1e-15 {
        None
    } else {
        Some((p_o - p_e) / (1.0 - p_e))
    };
    Ok(Agreement {
        n: a.len(),
        raw: p_o,
        kappa,
    })
}

/// How annotator errors are planted in [`planted_annotations`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Planting {
    /// Each response is independently correct with probability `accuracy`.
    Independent,
    /// For every annotator and true class exactly `round((1 - accuracy) n_k)`
    /// randomly chosen items get a uniformly drawn wrong label, so the
    /// realized confusion diagonals equal `accuracy` up to rounding.
    Balanced,
}

/// Draw a synthetic annotation matrix with uniform true labels. Every
/// annotator labels every item. Returns the matrix and the planted labels.
pub fn planted_annotations(
    n_items: usize,
    n_labels: usize,
    n_annotators: usize,
    accuracy: f64,
    planting: Planting,
    seed: u64,
) -> Result<(AnnotationMatrix, Vec<usize>)> {
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    if !(0.0..=1.0).contains(&accuracy) || n_labels < 2 {
        return Err(Error::InvalidArgument(
            "need accuracy in [0, 1] and >= 2 labels".into(),
        ));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let truth: Vec<usize> = (0..n_items)
        .map(|_| rng.random_range(0..n_labels))
        .collect();
    let wrong = |t: usize, r: usize| (t + 1 + r % (n_labels - 1)) % n_labels;
    let mut responses: Vec<Vec<(usize, usize)>> = vec![Vec::with_capacity(n_annotators); n_items];
    for a in 0..n_annotators {
        match planting {
            Planting::Independent => {
                for (i, &t) in truth.iter().enumerate() {
                    let given = if rng.random_bool(accuracy) {
                        t
                    } else {
                        wrong(t, rng.random_range(0..n_labels - 1))
                    };
                    responses[i].push((a, given));
                }
            }
            Planting::Balanced => {
                let mut given = truth.clone();
                for k in 0..n_labels {
                    let mut members: Vec<usize> = (0..n_items).filter(|&i| truth[i] == k).collect();
                    members.shuffle(&mut rng);
                    let flips = ((1.0 - accuracy) * members.len() as f64).round() as usize;
                    for &i in members.iter().take(flips) {
                        given[i] = wrong(k, rng.random_range(0..n_labels - 1));
                    }
                }
                for (i, &g) in given.iter().enumerate() {
                    responses[i].push((a, g));
                }
            }
        }
    }
    let m = AnnotationMatrix::new(
        (0..n_items).map(|i| format!("item{i:04}")).collect(),
        (0..n_annotators).map(|a| format!("worker{a}")).collect(),
        (0..n_labels).map(|k| format!("L{k}")).collect(),
        responses,
    )?;
    Ok((m, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|k| format!("L{k}")).collect()
    }

    fn assert_valid(r: &AggregationResult) {
        for p in r.posteriors.iter().chain(std::iter::once(&r.class_priors)) {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        for row in r.confusions.iter().flatten() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn unanimous_annotators() {
        let l = labels(3);
        let mut triples = Vec::new();
        let items: Vec<String> = (0..20).map(|i| format!("i{i}")).collect();
        for (i, item) in items.iter().enumerate() {
            for a in ["a", "b", "c", "d", "e"] {
                triples.push((item.as_str(), a, l[i % 3].as_str()));
            }
        }
        let m = AnnotationMatrix::from_triples(triples, &l).unwrap();
        let r = dawid_skene_em(&m, 100, 1e-8).unwrap();
        assert_valid(&r);
        for (i, p) in r.posteriors.iter().enumerate() {
            assert!(p[i % 3] >= 0.99);
        }
        assert_eq!(
            infer_hard_labels(&r),
            (0..20).map(|i| i % 3).collect::<Vec<_>>()
        );
    }

    #[test]
    fn symmetric_disagreement_stays_uniform() {
        let l = labels(2);
        let triples = [
            ("x", "a", "L0"),
            ("x", "b", "L1"),
            ("y", "a", "L1"),
            ("y", "b", "L0"),
        ];
        let m = AnnotationMatrix::from_triples(triples, &l).unwrap();
        let r = dawid_skene_em(&m, 50, 1e-12).unwrap();
        for p in &r.posteriors {
            assert_eq!(p, &vec![0.5, 0.5]);
        }
        assert_eq!(infer_hard_labels(&r), vec![0, 0]);
    }

    #[test]
    fn planted_recovery() {
        let (m, truth) = planted_annotations(500, 3, 5, 0.8, Planting::Balanced, 0).unwrap();
        let r = dawid_skene_em(&m, 200, 1e-6).unwrap();
        assert_valid(&r);
        let hard = infer_hard_labels(&r);
        let hits = hard.iter().zip(&truth).filter(|(a, b)| a == b).count();
        assert!(hits as f64 >= 0.95 * 500.0, "{hits}");
        for conf in &r.confusions {
            for k in 0..3 {
                assert!((conf[k][k] - 0.8).abs() <= 0.05, "{}", conf[k][k]);
            }
        }
        for w in r.objective.windows(2) {
            assert!(w[1] >= w[0] - 1e-9);
        }

        // without smoothing EM climbs the plain likelihood
        let ml = dawid_skene_em_smoothed(&m, 200, 1e-6, 0.0).unwrap();
        assert_eq!(ml.objective, ml.log_likelihood);
        for w in ml.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-9);
        }
    }

    #[test]
    fn errors() {
        let l = labels(2);
        assert!(AnnotationMatrix::from_triples([("x", "a", "L9")], &l).is_err());
        assert!(AnnotationMatrix::from_triples([("x", "a", "L0"), ("x", "a", "L1")], &l).is_err());
        assert!(AnnotationMatrix::from_triples([("x", "a", "L0")], &labels(1)).is_err());
        let m = AnnotationMatrix::new(
            vec!["x".into(), "y".into()],
            vec!["a".into()],
            l,
            vec![vec![(0, 1)], vec![]],
        )
        .unwrap();
        assert!(dawid_skene_em(&m, 10, 1e-6).is_err());
    }

    #[test]
    fn hard_label_ties() {
        let mut r = dawid_skene_em(
            &AnnotationMatrix::from_triples([("x", "a", "L0"), ("y", "a", "L1")], &labels(2))
                .unwrap(),
            1,
            0.0,
        )
        .unwrap();
        r.posteriors = vec![vec![0.7, 0.3], vec![0.5, 0.5], vec![0.2, 0.4, 0.4]];
        assert_eq!(infer_hard_labels(&r), vec![0, 0, 1]);
    }

    fn map(v: &[u8]) -> BTreeMap<String, u8> {
        v.iter()
            .enumerate()
            .map(|(i, &l)| (format!("{i:05}"), l))
            .collect()
    }

    #[test]
    fn agreement_examples() {
        let a = map(&[0, 1, 0, 1, 1]);
        let r = agreement(&a, &a).unwrap();
        assert_eq!((r.raw, r.kappa), (1.0, Some(1.0)));

        // 8 of 10 agree, both marginals 5/5: p_e = 0.5
        let a = map(&[0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
        let b = map(&[0, 0, 0, 0, 1, 0, 1, 1, 1, 1]);
        let r = agreement(&a, &b).unwrap();
        assert!((r.raw - 0.8).abs() < 1e-15);
        assert!((r.kappa.unwrap() - 0.6).abs() < 1e-12);

        let c = map(&[1, 1, 1]);
        assert_eq!(agreement(&c, &c).unwrap().kappa, None);
        assert!(agreement(&a, &c).is_err());
    }

    #[test]
    fn independent_labelings_have_kappa_near_zero() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a: Vec<u8> = (0..10_000).map(|_| rng.random_range(0..2)).collect();
        let b: Vec<u8> = (0..10_000).map(|_| rng.random_range(0..2)).collect();
        let r = agreement(&map(&a), &map(&b)).unwrap();
        assert!((r.raw - 0.5).abs() < 0.03);
        assert!(r.kappa.unwrap().abs() < 0.05);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn annotator_order_does_not_matter(seed in 0u64..1000, perm_seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let (m, _) = planted_annotations(40, 3, 4, 0.6, Planting::Independent, seed).unwrap();
            let mut triples = Vec::new();
            for (i, item) in m.items().iter().enumerate() {
                for &(a, l) in m.responses(i) {
                    triples.push((item.as_str(), m.annotators()[a].as_str(), m.labels()[l].as_str()));
                }
            }
            triples.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
            // keep item order, only annotator first-seen order changes
            triples.sort_by_key(|t| t.0);
            let m2 = AnnotationMatrix::from_triples(triples, m.labels()).unwrap();
            let r1 = dawid_skene_em(&m, 30, 1e-9).unwrap();
            let r2 = dawid_skene_em(&m2, 30, 1e-9).unwrap();
            prop_assert_eq!(&r1.posteriors, &r2.posteriors);
            for (a, name) in r1.annotators.iter().enumerate() {
                let b = r2.annotators.iter().position(|x| x == name).unwrap();
                prop_assert_eq!(&r1.confusions[a], &r2.confusions[b]);
            }
        }

        #[test]
        fn em_objective_is_monotone_and_distributions_valid(seed in 0u64..1000, acc in 0.3f64..0.95) {
            let (m, _) = planted_annotations(60, 3, 3, acc, Planting::Independent, seed).unwrap();
            let r = dawid_skene_em(&m, 40, 1e-12).unwrap();
            assert_valid(&r);
            for w in r.objective.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-9, "{} -> {}", w[0], w[1]);
            }
        }

        #[test]
        fn hard_labels_match_argmax(post in proptest::collection::vec(proptest::collection::vec(0u8..5, 3), 1..20)) {
            let mut r = dawid_skene_em(
                &AnnotationMatrix::from_triples([("x", "a", "L0")], &labels(3)).unwrap(), 1, 0.0).unwrap();
            r.posteriors = post.iter().map(|p| p.iter().map(|&v| v as f64).collect()).collect();
            let hard = infer_hard_labels(&r);
            for (p, h) in r.posteriors.iter().zip(hard) {
                let mx = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(h, p.iter().position(|&v| v == mx).unwrap());
            }
        }
    }
}

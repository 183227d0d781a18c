//! Linear-chain CRF head: projection to per-label potentials, forward-backward
//! in log space, Viterbi decoding, and the per-token softmax alternative.

use ndarray::{s, Array1, Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::glorot_uniform_with;
use crate::error::{Error, Result};

/// Unary scores, one row per token and one column per label.
#[derive(Clone, Debug, PartialEq)]
pub struct PotentialMatrix {
    scores: Array2<f64>,
}

impl PotentialMatrix {
    pub fn new(scores: Array2<f64>) -> Result<Self> {
        if let Some(bad) = scores.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("potential score {bad}")));
        }
        Ok(PotentialMatrix { scores })
    }

    pub fn scores(&self) -> &Array2<f64> {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.nrows() == 0
    }

    pub fn num_labels(&self) -> usize {
        self.scores.ncols()
    }
}

/// `a[[i, j]]` scores label `j` following label `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionParams {
    pub a: Array2<f64>,
    pub start: Array1<f64>,
    pub stop: Array1<f64>,
}

impl TransitionParams {
    pub fn zeros(num_labels: usize) -> Self {
        TransitionParams {
            a: Array2::zeros((num_labels, num_labels)),
            start: Array1::zeros(num_labels),
            stop: Array1::zeros(num_labels),
        }
    }

    pub fn num_labels(&self) -> usize {
        self.start.len()
    }

    fn check(&self, labels: usize) -> Result<()> {
        if self.a.dim() != (labels, labels)
            || self.start.len() != labels
            || self.stop.len() != labels
        {
            return Err(Error::Dimension(format!(
                "transition parameters sized for {} labels, potentials have {labels}",
                self.start.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionParams {
    /// `L x K`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    /// First column belonging to the hand-built block.
    pub split: usize,
}

impl ProjectionParams {
    pub fn new(w: Array2<f64>, b: Array1<f64>, split: usize) -> Result<Self> {
        if b.len() != w.nrows() {
            return Err(Error::Dimension(format!(
                "bias length {} for {} labels",
                b.len(),
                w.nrows()
            )));
        }
        if split > w.ncols() {
            return Err(Error::InvalidArgument(format!(
                "split {split} beyond width {}",
                w.ncols()
            )));
        }
        Ok(ProjectionParams { w, b, split })
    }

    pub fn init<R: Rng + ?Sized>(
        width: usize,
        num_labels: usize,
        split: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(
            glorot_uniform_with(width, num_labels, rng),
            Array1::zeros(num_labels),
            split,
        )
    }

    pub fn width(&self) -> usize {
        self.w.ncols()
    }

    pub fn num_labels(&self) -> usize {
        self.w.nrows()
    }
}

pub fn potentials(fused: &Array2<f64>, proj: &ProjectionParams) -> Result<PotentialMatrix> {
    if fused.ncols() != proj.width() {
        return Err(Error::Dimension(format!(
            "fused width {} but projection expects {}",
            fused.ncols(),
            proj.width()
        )));
    }
    let mut scores = fused.dot(&proj.w.t());
    scores += &proj.b;
    PotentialMatrix::new(scores)
}

/// Split the potentials into the LSTM and hand-built contributions; the bias
/// stays outside both so `lstm + hb + b` reproduces [`potentials`].
pub fn decompose_potentials(
    fused: &Array2<f64>,
    proj: &ProjectionParams,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if fused.ncols() != proj.width() {
        return Err(Error::Dimension(format!(
            "fused width {} but projection expects {}",
            fused.ncols(),
            proj.width()
        )));
    }
    if proj.split == 0 || proj.split >= proj.width() {
        return Err(Error::InvalidArgument(
            "potential decomposition needs both an LSTM and a hand-built block".into(),
        ));
    }
    let k = proj.split;
    let lstm = fused.slice(s![.., ..k]).dot(&proj.w.slice(s![.., ..k]).t());
    let hb = fused.slice(s![.., k..]).dot(&proj.w.slice(s![.., k..]).t());
    Ok((lstm, hb))
}

fn logsumexp<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn check_inputs(phi: &PotentialMatrix, tau: &TransitionParams) -> Result<()> {
    if phi.is_empty() {
        return Err(Error::InvalidArgument("empty sequence".into()));
    }
    tau.check(phi.num_labels())
}

/// `alpha[t][y]`: log-sum of all prefixes ending in `y` at `t`, start included.
fn forward(phi: &Array2<f64>, tau: &TransitionParams) -> Array2<f64> {
    let (steps, labels) = phi.dim();
    let mut alpha = Array2::zeros((steps, labels));
    for y in 0..labels {
        alpha[[0, y]] = tau.start[y] + phi[[0, y]];
    }
    for t in 1..steps {
        for y in 0..labels {
            alpha[[t, y]] =
                phi[[t, y]] + logsumexp((0..labels).map(|i| alpha[[t - 1, i]] + tau.a[[i, y]]));
        }
    }
    alpha
}

/// `beta[t][y]`: log-sum of all suffixes after `t` given `y` at `t`, stop included.
fn backward(phi: &Array2<f64>, tau: &TransitionParams) -> Array2<f64> {
    let (steps, labels) = phi.dim();
    let mut beta = Array2::zeros((steps, labels));
    for y in 0..labels {
        beta[[steps - 1, y]] = tau.stop[y];
    }
    for t in (0..steps - 1).rev() {
        for y in 0..labels {
            beta[[t, y]] =
                logsumexp((0..labels).map(|j| tau.a[[y, j]] + phi[[t + 1, j]] + beta[[t + 1, j]]));
        }
    }
    beta
}

pub fn log_partition(phi: &PotentialMatrix, tau: &TransitionParams) -> Result<f64> {
    check_inputs(phi, tau)?;
    let alpha = forward(&phi.scores, tau);
    let last = alpha.nrows() - 1;
    Ok(logsumexp(
        (0..phi.num_labels()).map(|y| alpha[[last, y]] + tau.stop[y]),
    ))
}

pub fn path_score(phi: &PotentialMatrix, tau: &TransitionParams, path: &[usize]) -> Result<f64> {
    check_inputs(phi, tau)?;
    check_path(phi, path)?;
    let mut score = tau.start[path[0]] + tau.stop[path[path.len() - 1]];
    for (t, &y) in path.iter().enumerate() {
        score += phi.scores[[t, y]];
        if t > 0 {
            score += tau.a[[path[t - 1], y]];
        }
    }
    Ok(score)
}

fn check_path(phi: &PotentialMatrix, path: &[usize]) -> Result<()> {
    if path.len() != phi.len() {
        return Err(Error::Dimension(format!(
            "label path has {} entries for {} tokens",
            path.len(),
            phi.len()
        )));
    }
    if let Some(&bad) = path.iter().find(|&&y| y >= phi.num_labels()) {
        return Err(Error::InvalidArgument(format!(
            "label id {bad} outside 0..{}",
            phi.num_labels()
        )));
    }
    Ok(())
}

/// Node and edge posteriors. `pairwise[t]` covers the edge between `t` and `t + 1`.
#[derive(Clone, Debug)]
pub struct Marginals {
    pub log_z: f64,
    pub unary: Array2<f64>,
    pub pairwise: Vec<Array2<f64>>,
}

pub fn marginals(phi: &PotentialMatrix, tau: &TransitionParams) -> Result<Marginals> {
    check_inputs(phi, tau)?;
    let scores = &phi.scores;
    let (steps, labels) = scores.dim();
    let alpha = forward(scores, tau);
    let beta = backward(scores, tau);
    let log_z = logsumexp((0..labels).map(|y| alpha[[steps - 1, y]] + tau.stop[y]));
    let unary = Array2::from_shape_fn((steps, labels), |(t, y)| {
        (alpha[[t, y]] + beta[[t, y]] - log_z).exp()
    });
    let pairwise = (0..steps - 1)
        .map(|t| {
            Array2::from_shape_fn((labels, labels), |(i, j)| {
                (alpha[[t, i]] + tau.a[[i, j]] + scores[[t + 1, j]] + beta[[t + 1, j]] - log_z)
                    .exp()
            })
        })
        .collect();
    Ok(Marginals {
        log_z,
        unary,
        pairwise,
    })
}

#[derive(Clone, Debug)]
pub struct CrfGradient {
    pub loss: f64,
    pub grad_phi: Array2<f64>,
    pub grad_tau: TransitionParams,
}

/// Negative log-likelihood of `gold` and its gradient w.r.t. potentials and transitions.
pub fn nll_and_grad(
    phi: &PotentialMatrix,
    tau: &TransitionParams,
    gold: &[usize],
) -> Result<CrfGradient> {
    check_inputs(phi, tau)?;
    check_path(phi, gold)?;
    let m = marginals(phi, tau)?;
    let loss = m.log_z - path_score(phi, tau, gold)?;
    let mut grad_phi = m.unary.clone();
    for (t, &y) in gold.iter().enumerate() {
        grad_phi[[t, y]] -= 1.0;
    }
    let labels = phi.num_labels();
    let mut grad_tau = TransitionParams::zeros(labels);
    for pw in &m.pairwise {
        grad_tau.a += pw;
    }
    for w in gold.windows(2) {
        grad_tau.a[[w[0], w[1]]] -= 1.0;
    }
    grad_tau.start.assign(&m.unary.row(0));
    grad_tau.start[gold[0]] -= 1.0;
    grad_tau.stop.assign(&m.unary.row(m.unary.nrows() - 1));
    grad_tau.stop[gold[gold.len() - 1]] -= 1.0;
    Ok(CrfGradient {
        loss,
        grad_phi,
        grad_tau,
    })
}

/// Highest-scoring path. Among equal maxima the lowest label id wins, both for
/// the final label and for every backpointer.
pub fn viterbi(phi: &PotentialMatrix, tau: &TransitionParams) -> Result<(Vec<usize>, f64)> {
    check_inputs(phi, tau)?;
    let scores = &phi.scores;
    let (steps, labels) = scores.dim();
    let mut delta = Array2::zeros((steps, labels));
    let mut back = Array2::<usize>::zeros((steps, labels));
    for y in 0..labels {
        delta[[0, y]] = tau.start[y] + scores[[0, y]];
    }
    for t in 1..steps {
        for y in 0..labels {
            let mut best = 0;
            let mut best_score = delta[[t - 1, 0]] + tau.a[[0, y]];
            for i in 1..labels {
                let cand = delta[[t - 1, i]] + tau.a[[i, y]];
                if cand > best_score {
                    best = i;
                    best_score = cand;
                }
            }
            delta[[t, y]] = best_score + scores[[t, y]];
            back[[t, y]] = best;
        }
    }
    let final_scores: Vec<f64> = (0..labels)
        .map(|y| delta[[steps - 1, y]] + tau.stop[y])
        .collect();
    let mut last = argmax(ArrayView1::from(&final_scores));
    let mut path = vec![0; steps];
    path[steps - 1] = last;
    for t in (1..steps).rev() {
        last = back[[t, last]];
        path[t - 1] = last;
    }
    let score = path_score(phi, tau, &path)?;
    Ok((path, score))
}

fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn softmax_decode(phi: &PotentialMatrix) -> Vec<usize> {
    phi.scores.rows().into_iter().map(argmax).collect()
}

/// Summed per-token cross-entropy and its gradient w.r.t. the potentials.
pub fn softmax_nll_and_grad(phi: &PotentialMatrix, gold: &[usize]) -> Result<(f64, Array2<f64>)> {
    check_path(phi, gold)?;
    let mut grad = Array2::zeros(phi.scores.dim());
    let mut loss = 0.0;
    for (t, row) in phi.scores.rows().into_iter().enumerate() {
        let lz = logsumexp(row.iter().copied());
        loss += lz - row[gold[t]];
        for (y, &v) in row.iter().enumerate() {
            grad[[t, y]] = (v - lz).exp();
        }
        grad[[t, gold[t]]] -= 1.0;
    }
    Ok((loss, grad))
}

/// One line of a potential dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialRow {
    pub doc_id: String,
    pub token_index: usize,
    pub label: String,
    pub phi_total: f64,
    pub phi_lstm: f64,
    pub phi_hb: f64,
}

pub fn potential_rows(
    doc_id: &str,
    fused: &Array2<f64>,
    proj: &ProjectionParams,
    label_names: &[String],
) -> Result<Vec<PotentialRow>> {
    if label_names.len() != proj.num_labels() {
        return Err(Error::Dimension(format!(
            "{} label names for {} projection rows",
            label_names.len(),
            proj.num_labels()
        )));
    }
    let (lstm, hb) = decompose_potentials(fused, proj)?;
    let total = potentials(fused, proj)?;
    let mut rows = Vec::with_capacity(fused.nrows() * label_names.len());
    for t in 0..fused.nrows() {
        for (y, name) in label_names.iter().enumerate() {
            rows.push(PotentialRow {
                doc_id: doc_id.to_string(),
                token_index: t,
                label: name.clone(),
                phi_total: total.scores[[t, y]],
                phi_lstm: lstm[[t, y]],
                phi_hb: hb[[t, y]],
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_instance(
        rng: &mut ChaCha8Rng,
        steps: usize,
        labels: usize,
        scale: f64,
    ) -> (PotentialMatrix, TransitionParams) {
        let mut u = || rng.random_range(-scale..scale);
        let phi =
            PotentialMatrix::new(Array2::from_shape_simple_fn((steps, labels), &mut u)).unwrap();
        let tau = TransitionParams {
            a: Array2::from_shape_simple_fn((labels, labels), &mut u),
            start: Array1::from_shape_simple_fn(labels, &mut u),
            stop: Array1::from_shape_simple_fn(labels, &mut u),
        };
        (phi, tau)
    }

    /// Every label path in lexicographic order.
    fn all_paths(steps: usize, labels: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for _ in 0..steps {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..labels).map(move |y| {
                        let mut q = p.clone();
                        q.push(y);
                        q
                    })
                })
                .collect();
        }
        out
    }

    fn naive_score(phi: &PotentialMatrix, tau: &TransitionParams, path: &[usize]) -> f64 {
        let mut s = tau.start[path[0]];
        for t in 0..path.len() {
            s += phi.scores()[[t, path[t]]];
            if t + 1 < path.len() {
                s += tau.a[[path[t], path[t + 1]]];
            }
        }
        s + tau.stop[*path.last().unwrap()]
    }

    fn naive_logsumexp(v: &[f64]) -> f64 {
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    }

    #[test]
    fn projection_examples() {
        let fused = Array2::from_shape_vec((2, 3), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let zero =
            ProjectionParams::new(Array2::zeros((2, 3)), Array1::from(vec![1.0, 2.0]), 1).unwrap();
        let phi = potentials(&fused, &zero).unwrap();
        assert!(phi
            .scores()
            .rows()
            .into_iter()
            .all(|r| r.to_vec() == vec![1.0, 2.0]));

        let sq = Array2::from_shape_vec((2, 2), vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let id = ProjectionParams::new(Array2::eye(2), Array1::zeros(2), 1).unwrap();
        assert_eq!(potentials(&sq, &id).unwrap().scores(), &sq);

        assert!(potentials(&Array2::zeros((2, 4)), &zero).is_err());
        assert!(ProjectionParams::new(Array2::zeros((2, 3)), Array1::zeros(2), 4).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let proj = ProjectionParams::init(3, 4, 2, &mut rng).unwrap();
        let phi = potentials(&fused, &proj).unwrap();
        for t in 0..2 {
            for y in 0..4 {
                let mut acc = proj.b[y];
                for k in 0..3 {
                    acc += proj.w[[y, k]] * fused[[t, k]];
                }
                assert!((phi.scores()[[t, y]] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn partition_closed_forms() {
        let phi = PotentialMatrix::new(Array2::zeros((1, 2))).unwrap();
        let tau = TransitionParams::zeros(2);
        assert!((log_partition(&phi, &tau).unwrap() - 2f64.ln()).abs() < 1e-15);
        let phi = PotentialMatrix::new(Array2::zeros((5, 3))).unwrap();
        let tau = TransitionParams::zeros(3);
        assert!((log_partition(&phi, &tau).unwrap() - 5.0 * 3f64.ln()).abs() < 1e-12);
        let empty = PotentialMatrix::new(Array2::zeros((0, 3))).unwrap();
        assert!(log_partition(&empty, &tau).is_err());
        assert!(viterbi(&empty, &tau).is_err());
        assert!(PotentialMatrix::new(Array2::from_elem((1, 1), f64::NAN)).is_err());
    }

    #[test]
    fn large_scores_do_not_overflow() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (phi, tau) = random_instance(&mut rng, 4, 3, 700.0);
        let z = log_partition(&phi, &tau).unwrap();
        assert!(z.is_finite());
        let (_, best) = viterbi(&phi, &tau).unwrap();
        assert!(z >= best - 1e-9 && z <= best + 4.0 * 3f64.ln() + 1e-9);
    }

    #[test]
    fn matches_exhaustive_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let steps = rng.random_range(1..=6);
            let labels = rng.random_range(1..=4);
            let (phi, tau) = random_instance(&mut rng, steps, labels, 2.0);
            let paths = all_paths(steps, labels);
            let scores: Vec<f64> = paths.iter().map(|p| naive_score(&phi, &tau, p)).collect();
            let oracle_z = naive_logsumexp(&scores);
            let z = log_partition(&phi, &tau).unwrap();
            assert!((z - oracle_z).abs() <= 1e-8);
            let total: f64 = scores.iter().map(|s| (s - z).exp()).sum();
            assert!((total - 1.0).abs() <= 1e-8);

            let (path, score) = viterbi(&phi, &tau).unwrap();
            let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!((score - best).abs() <= 1e-9);
            assert!((score - naive_score(&phi, &tau, &path)).abs() <= 1e-12);
            let arg = (0..paths.len()).find(|&i| scores[i] == best).unwrap();
            assert_eq!(path, paths[arg]);
        }
    }

    /// Integer-valued scores create exact ties. The backtrack rule selects the
    /// optimal path whose labels, read from the last token backwards, are smallest.
    #[test]
    fn ties_follow_backtrack_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let steps = rng.random_range(1..=5);
            let labels = rng.random_range(1..=3);
            let mut int = || rng.random_range(0..2) as f64;
            let phi = PotentialMatrix::new(Array2::from_shape_simple_fn((steps, labels), &mut int))
                .unwrap();
            let tau = TransitionParams {
                a: Array2::from_shape_simple_fn((labels, labels), &mut int),
                start: Array1::from_shape_simple_fn(labels, &mut int),
                stop: Array1::from_shape_simple_fn(labels, &mut int),
            };
            let paths = all_paths(steps, labels);
            let best = paths
                .iter()
                .map(|p| naive_score(&phi, &tau, p))
                .fold(f64::NEG_INFINITY, f64::max);
            let expected = paths
                .iter()
                .filter(|p| naive_score(&phi, &tau, p) == best)
                .min_by(|a, b| a.iter().rev().cmp(b.iter().rev()))
                .unwrap();
            assert_eq!(&viterbi(&phi, &tau).unwrap().0, expected);
        }
    }

    #[test]
    fn viterbi_examples() {
        let phi =
            PotentialMatrix::new(Array2::from_shape_vec((1, 3), vec![1.0, 3.0, 2.0]).unwrap())
                .unwrap();
        assert_eq!(
            viterbi(&phi, &TransitionParams::zeros(3)).unwrap(),
            (vec![1], 3.0)
        );
        let zeros = PotentialMatrix::new(Array2::zeros((4, 3))).unwrap();
        assert_eq!(
            viterbi(&zeros, &TransitionParams::zeros(3)).unwrap().0,
            vec![0; 4]
        );
        assert_eq!(softmax_decode(&phi), vec![1]);
    }

    #[test]
    fn softmax_decode_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let (steps, labels) = (rng.random_range(1..7), rng.random_range(1..5));
            let (phi, _) = random_instance(&mut rng, steps, labels, 3.0);
            let decoded = softmax_decode(&phi);
            let oracle: Vec<usize> = (0..steps)
                .map(|t| {
                    let row: Vec<f64> = (0..labels).map(|y| phi.scores()[[t, y]]).collect();
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    row.iter().position(|&v| v == m).unwrap()
                })
                .collect();
            assert_eq!(decoded, oracle);
            assert_eq!(
                viterbi(&phi, &TransitionParams::zeros(labels)).unwrap().0,
                decoded
            );
        }
    }

    #[test]
    fn nll_closed_forms() {
        let phi = PotentialMatrix::new(Array2::zeros((1, 2))).unwrap();
        let g = nll_and_grad(&phi, &TransitionParams::zeros(2), &[0]).unwrap();
        assert!((g.loss - 2f64.ln()).abs() < 1e-15);
        assert!((g.grad_phi[[0, 0]] + 0.5).abs() < 1e-15);
        assert!((g.grad_phi[[0, 1]] - 0.5).abs() < 1e-15);

        // gold path dominates by a wide margin
        let gold = [1, 0, 2];
        let mut scores = Array2::zeros((3, 3));
        for (t, &y) in gold.iter().enumerate() {
            scores[[t, y]] = 60.0;
        }
        let phi = PotentialMatrix::new(scores).unwrap();
        let g = nll_and_grad(&phi, &TransitionParams::zeros(3), &gold).unwrap();
        assert!(g.loss < 1e-20);
        assert!(g.grad_phi.iter().all(|v| v.abs() < 1e-20));

        assert!(nll_and_grad(&phi, &TransitionParams::zeros(3), &[0, 3, 1]).is_err());
        assert!(nll_and_grad(&phi, &TransitionParams::zeros(3), &[0, 1]).is_err());
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn nll_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let eps = 1e-5;
        for _ in 0..60 {
            let steps = rng.random_range(1..=5);
            let labels = rng.random_range(2..=4);
            let (phi, tau) = random_instance(&mut rng, steps, labels, 1.5);
            let gold: Vec<usize> = (0..steps).map(|_| rng.random_range(0..labels)).collect();
            let g = nll_and_grad(&phi, &tau, &gold).unwrap();
            let loss = |phi: &PotentialMatrix, tau: &TransitionParams| {
                nll_and_grad(phi, tau, &gold).unwrap().loss
            };

            for t in 0..steps {
                for y in 0..labels {
                    let mut p = phi.scores().clone();
                    let mut m = phi.scores().clone();
                    p[[t, y]] += eps;
                    m[[t, y]] -= eps;
                    let numeric = (loss(&PotentialMatrix::new(p).unwrap(), &tau)
                        - loss(&PotentialMatrix::new(m).unwrap(), &tau))
                        / (2.0 * eps);
                    assert!(rel_err(g.grad_phi[[t, y]], numeric) <= 1e-6);
                }
            }
            let perturb = |f: &dyn Fn(&mut TransitionParams)| {
                let mut p = tau.clone();
                f(&mut p);
                p
            };
            for i in 0..labels {
                for j in 0..labels {
                    let numeric = (loss(&phi, &perturb(&|p| p.a[[i, j]] += eps))
                        - loss(&phi, &perturb(&|p| p.a[[i, j]] -= eps)))
                        / (2.0 * eps);
                    assert!(rel_err(g.grad_tau.a[[i, j]], numeric) <= 1e-6);
                }
                let numeric = (loss(&phi, &perturb(&|p| p.start[i] += eps))
                    - loss(&phi, &perturb(&|p| p.start[i] -= eps)))
                    / (2.0 * eps);
                assert!(rel_err(g.grad_tau.start[i], numeric) <= 1e-6);
                let numeric = (loss(&phi, &perturb(&|p| p.stop[i] += eps))
                    - loss(&phi, &perturb(&|p| p.stop[i] -= eps)))
                    / (2.0 * eps);
                assert!(rel_err(g.grad_tau.stop[i], numeric) <= 1e-6);
            }
        }
    }

    #[test]
    fn softmax_loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let eps = 1e-5;
        for _ in 0..30 {
            let (steps, labels) = (rng.random_range(1..5), rng.random_range(2..5));
            let (phi, _) = random_instance(&mut rng, steps, labels, 2.0);
            let gold: Vec<usize> = (0..steps).map(|_| rng.random_range(0..labels)).collect();
            let (_, grad) = softmax_nll_and_grad(&phi, &gold).unwrap();
            for t in 0..steps {
                for y in 0..labels {
                    let mut p = phi.scores().clone();
                    let mut m = phi.scores().clone();
                    p[[t, y]] += eps;
                    m[[t, y]] -= eps;
                    let lp = softmax_nll_and_grad(&PotentialMatrix::new(p).unwrap(), &gold)
                        .unwrap()
                        .0;
                    let lm = softmax_nll_and_grad(&PotentialMatrix::new(m).unwrap(), &gold)
                        .unwrap()
                        .0;
                    assert!(rel_err(grad[[t, y]], (lp - lm) / (2.0 * eps)) <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn decomposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let proj = ProjectionParams::init(5, 3, 2, &mut rng).unwrap();
        let mut proj = proj;
        proj.b = Array1::from(vec![0.3, -0.2, 0.1]);
        let fused = Array2::from_shape_simple_fn((4, 5), || rng.random_range(-1.0..1.0));
        let (lstm, hb) = decompose_potentials(&fused, &proj).unwrap();
        let total = potentials(&fused, &proj).unwrap();
        let rebuilt = &lstm + &hb + &proj.b;
        assert!((&rebuilt - total.scores()).iter().all(|d| d.abs() <= 1e-12));

        let mut no_hb = fused.clone();
        no_hb.slice_mut(s![.., 2..]).fill(0.0);
        assert!(decompose_potentials(&no_hb, &proj)
            .unwrap()
            .1
            .iter()
            .all(|&v| v == 0.0));

        let single = ProjectionParams::init(5, 3, 0, &mut rng).unwrap();
        assert!(decompose_potentials(&fused, &single).is_err());
        let single = ProjectionParams::init(5, 3, 5, &mut rng).unwrap();
        assert!(decompose_potentials(&fused, &single).is_err());

        let names: Vec<String> = ["O", "A", "B"].iter().map(|s| s.to_string()).collect();
        let rows = potential_rows("d1", &fused, &proj, &names).unwrap();
        assert_eq!(rows.len(), 12);
        assert_eq!((rows[4].token_index, rows[4].label.as_str()), (1, "A"));
        assert!((rows[4].phi_total - total.scores()[[1, 1]]).abs() < 1e-15);
    }

    fn instance_strategy() -> impl Strategy<Value = (u64, usize, usize)> {
        (any::<u64>(), 1usize..6, 1usize..5)
    }

    proptest! {
        #[test]
        fn marginals_are_consistent((seed, steps, labels) in instance_strategy()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (phi, tau) = random_instance(&mut rng, steps, labels, 3.0);
            let m = marginals(&phi, &tau).unwrap();
            for row in m.unary.rows() {
                prop_assert!((row.sum() - 1.0).abs() <= 1e-10);
            }
            for (t, pw) in m.pairwise.iter().enumerate() {
                for i in 0..labels {
                    prop_assert!((pw.row(i).sum() - m.unary[[t, i]]).abs() <= 1e-10);
                    prop_assert!((pw.column(i).sum() - m.unary[[t + 1, i]]).abs() <= 1e-10);
                }
            }
        }

        #[test]
        fn gold_probability_and_viterbi_bound((seed, steps, labels) in instance_strategy()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (phi, tau) = random_instance(&mut rng, steps, labels, 5.0);
            let gold: Vec<usize> = (0..steps).map(|_| rng.random_range(0..labels)).collect();
            let z = log_partition(&phi, &tau).unwrap();
            let gs = path_score(&phi, &tau, &gold).unwrap();
            let p = (gs - z).exp();
            prop_assert!(p > 0.0 && p <= 1.0 + 1e-12);
            prop_assert!(viterbi(&phi, &tau).unwrap().1 >= gs - 1e-12);
        }

        #[test]
        fn nll_is_shift_invariant_per_row((seed, steps, labels) in instance_strategy(), row in 0usize..6, c in -50.0f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (phi, tau) = random_instance(&mut rng, steps, labels, 3.0);
            let gold: Vec<usize> = (0..steps).map(|_| rng.random_range(0..labels)).collect();
            let mut shifted = phi.scores().clone();
            shifted.row_mut(row % steps).mapv_inplace(|v| v + c);
            let a = nll_and_grad(&phi, &tau, &gold).unwrap().loss;
            let b = nll_and_grad(&PotentialMatrix::new(shifted).unwrap(), &tau, &gold).unwrap().loss;
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }
}

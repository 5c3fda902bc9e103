//! Per-cell softmax scoring, probability averaging, sum-rule fusion and
//! rank-k metrics.

use serde::{Deserialize, Serialize};

use crate::angular::LstmModel;
use crate::error::{Error, Result};
use crate::numerics::{softmax, Matrix};

/// Softmax classifier shared by every LSTM cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxHead {
    /// `class_count × hidden_dim`
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl SoftmaxHead {
    pub fn zeros(class_count: usize, hidden_dim: usize) -> Self {
        SoftmaxHead {
            weights: Matrix::zeros(class_count, hidden_dim),
            bias: vec![0.0; class_count],
        }
    }

    pub fn class_count(&self) -> usize {
        self.weights.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn logits(&self, hidden: &[f64]) -> Result<Vec<f64>> {
        if hidden.len() != self.hidden_dim() {
            return Err(Error::shape("SoftmaxHead", self.hidden_dim(), hidden.len()));
        }
        let mut z = self.bias.clone();
        self.weights.mul_vec_acc(hidden, &mut z);
        Ok(z)
    }

    pub fn probabilities(&self, hidden: &[f64]) -> Result<ScoreVector> {
        Ok(ScoreVector::new(softmax(&self.logits(hidden)?)?))
    }
}

/// Per-class scores indexed by class id. Probabilities before fusion,
/// unnormalized sums after.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub scores: Vec<f64>,
}

impl ScoreVector {
    pub fn new(scores: Vec<f64>) -> Self {
        ScoreVector { scores }
    }

    pub fn uniform(classes: usize) -> Self {
        ScoreVector::new(vec![1.0 / classes as f64; classes])
    }

    pub fn class_count(&self) -> usize {
        self.scores.len()
    }

    /// Highest-scoring class, lowest id on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &s) in self.scores.iter().enumerate() {
            if s > self.scores[best] {
                best = i;
            }
        }
        best
    }

    /// 1-based rank of `class`: classes scoring higher, or equal with a
    /// lower id, rank ahead.
    pub fn rank_of(&self, class: usize) -> usize {
        let s = self.scores[class];
        1 + self
            .scores
            .iter()
            .enumerate()
            .filter(|&(i, &x)| x > s || (x == s && i < class))
            .count()
    }
}

/// How the per-cell distributions of one sequence are combined.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    #[default]
    Mean,
    LastCell,
}

pub fn cell_scores(hidden_states: &[Vec<f64>], head: &SoftmaxHead) -> Result<Vec<ScoreVector>> {
    hidden_states.iter().map(|h| head.probabilities(h)).collect()
}

pub fn average_scores(scores: &[ScoreVector]) -> Result<ScoreVector> {
    let first = scores.first().ok_or(Error::Empty("average_scores"))?;
    let n = first.class_count();
    let mut mean = vec![0.0; n];
    // Running mean: identical inputs reproduce themselves exactly.
    for (k, s) in scores.iter().enumerate() {
        if s.class_count() != n {
            return Err(Error::shape("average_scores", n, s.class_count()));
        }
        for (m, x) in mean.iter_mut().zip(&s.scores) {
            *m += (x - *m) / (k + 1) as f64;
        }
    }
    Ok(ScoreVector::new(mean))
}

pub fn aggregate(scores: &[ScoreVector], how: Aggregation) -> Result<ScoreVector> {
    match how {
        Aggregation::Mean => average_scores(scores),
        Aggregation::LastCell => scores.last().cloned().ok_or(Error::Empty("aggregate")),
    }
}

/// Sum-rule fusion; the result is not renormalized.
pub fn fuse_sum(a: &ScoreVector, b: &ScoreVector) -> Result<ScoreVector> {
    if a.class_count() != b.class_count() {
        return Err(Error::shape("fuse_sum", a.class_count(), b.class_count()));
    }
    Ok(ScoreVector::new(a.scores.iter().zip(&b.scores).map(|(x, y)| x + y).collect()))
}

/// Fuses already-aggregated branch scores: one branch is passed through,
/// two are sum-fused.
pub fn combine_branches(branches: &[ScoreVector]) -> Result<ScoreVector> {
    match branches {
        [one] => Ok(one.clone()),
        [a, b] => fuse_sum(a, b),
        [] => Err(Error::Empty("combine_branches")),
        more => Err(Error::InvalidArgument(format!("{} branches; at most 2 supported", more.len()))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub scores: ScoreVector,
}

/// Scores every branch sequence with its model (a single model is shared by
/// all branches), aggregates per branch, then sum-fuses across branches.
pub fn predict(models: &[&LstmModel], branches: &[Matrix], how: Aggregation) -> Result<Prediction> {
    let first = models.first().ok_or(Error::Empty("predict models"))?;
    if models.len() != 1 && models.len() != branches.len() {
        return Err(Error::shape("predict", format!("{} models", models.len()), format!("{} branches", branches.len())));
    }
    if let Some(m) = models.iter().find(|m| m.class_count() != first.class_count()) {
        return Err(Error::shape("predict class count", first.class_count(), m.class_count()));
    }
    let per_branch = branches
        .iter()
        .enumerate()
        .map(|(b, seq)| {
            let model = models[if models.len() == 1 { 0 } else { b }];
            aggregate(&model.cell_scores(seq)?, how)
        })
        .collect::<Result<Vec<_>>>()?;
    let scores = combine_branches(&per_branch)?;
    Ok(Prediction { label: scores.argmax(), scores })
}

/// Multinomial logistic regression on z-scored feature vectors, trained by
/// full-batch gradient descent. Serves as a single-view reference classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearBaseline {
    pub head: SoftmaxHead,
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl LinearBaseline {
    pub fn fit(features: &[Vec<f64>], labels: &[usize], classes: usize, steps: usize, learning_rate: f64) -> Result<Self> {
        let dim = features.first().ok_or(Error::Empty("LinearBaseline::fit"))?.len();
        if features.len() != labels.len() {
            return Err(Error::shape("LinearBaseline::fit", features.len(), labels.len()));
        }
        if let Some(bad) = features.iter().find(|f| f.len() != dim) {
            return Err(Error::shape("LinearBaseline::fit", dim, bad.len()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::shape("LinearBaseline::fit label", classes, l));
        }
        let n = features.len() as f64;
        let mut mean = vec![0.0; dim];
        for f in features {
            for (m, x) in mean.iter_mut().zip(f) {
                *m += x / n;
            }
        }
        let mut scale = vec![0.0; dim];
        for f in features {
            for ((s, x), m) in scale.iter_mut().zip(f).zip(&mean) {
                *s += (x - m).powi(2) / n;
            }
        }
        for s in &mut scale {
            *s = if *s > 0.0 { 1.0 / s.sqrt() } else { 1.0 };
        }
        let mut model = LinearBaseline {
            head: SoftmaxHead::zeros(classes, dim),
            mean,
            scale,
        };
        let z: Vec<Vec<f64>> = features.iter().map(|f| model.standardize(f)).collect();
        for _ in 0..steps {
            let mut gw = Matrix::zeros(classes, dim);
            let mut gb = vec![0.0; classes];
            for (x, &label) in z.iter().zip(labels) {
                let mut g = model.head.probabilities(x)?.scores;
                g[label] -= 1.0;
                for (c, gc) in g.iter_mut().enumerate() {
                    *gc /= n;
                    gb[c] += *gc;
                }
                gw.add_outer(&g, x);
            }
            for (w, g) in model.head.weights.data_mut().iter_mut().zip(gw.data()) {
                *w -= learning_rate * g;
            }
            for (b, g) in model.head.bias.iter_mut().zip(&gb) {
                *b -= learning_rate * g;
            }
        }
        Ok(model)
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.scale).map(|((x, m), s)| (x - m) * s).collect()
    }

    pub fn scores(&self, x: &[f64]) -> Result<ScoreVector> {
        if x.len() != self.mean.len() {
            return Err(Error::shape("LinearBaseline::scores", self.mean.len(), x.len()));
        }
        self.head.probabilities(&self.standardize(x))
    }
}

/// Fraction of samples whose true class is within the top `k`.
pub fn rank_k(scores: &[ScoreVector], labels: &[usize], k: usize) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty("rank_k"));
    }
    if scores.len() != labels.len() {
        return Err(Error::shape("rank_k", scores.len(), labels.len()));
    }
    let classes = scores[0].class_count();
    if k == 0 || k > classes {
        return Err(Error::InvalidArgument(format!("rank k = {k} with {classes} classes")));
    }
    let mut hits = 0usize;
    for (s, &label) in scores.iter().zip(labels) {
        if s.class_count() != classes || label >= classes {
            return Err(Error::shape("rank_k", classes, format!("label {label} / {} scores", s.class_count())));
        }
        if s.rank_of(label) <= k {
            hits += 1;
        }
    }
    Ok(hits as f64 / scores.len() as f64)
}

/// Cumulative match curve, entry `k - 1` holding rank-k accuracy.
pub fn rank_curve(scores: &[ScoreVector], labels: &[usize]) -> Result<Vec<f64>> {
    let classes = scores.first().ok_or(Error::Empty("rank_curve"))?.class_count();
    (1..=classes).map(|k| rank_k(scores, labels, k)).collect()
}

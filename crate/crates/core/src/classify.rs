//! Linear classifiers on sparse codes, losses with gradients, group pooling
//! and the gap regularizer.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::dictionary::GroupPartition;
use crate::error::{invalid, mismatch, Result};
use crate::io;

/// Scores `W x + b`. With a single row the classifier is binary: class 1 when
/// the score is positive, class 0 otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl LinearClassifier {
    pub fn new(weights: DMatrix<f64>, bias: DVector<f64>) -> Result<Self> {
        if weights.nrows() == 0 || weights.ncols() == 0 {
            return Err(invalid("classifier needs at least one row and one feature"));
        }
        if bias.len() != weights.nrows() {
            return Err(mismatch(format!("{} bias entries for {} rows", bias.len(), weights.nrows())));
        }
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(invalid("classifier contains non-finite parameters"));
        }
        Ok(LinearClassifier { weights, bias })
    }

    /// Binary classifier `w . x` with zero bias.
    pub fn binary(w: DVector<f64>) -> Result<Self> {
        Self::new(DMatrix::from_row_slice(1, w.len(), w.as_slice()), DVector::zeros(1))
    }

    pub fn zeros(classes: usize, features: usize) -> Self {
        let rows = if classes <= 2 { 1 } else { classes };
        LinearClassifier { weights: DMatrix::zeros(rows, features), bias: DVector::zeros(rows) }
    }

    pub fn is_binary(&self) -> bool {
        self.weights.nrows() == 1
    }

    pub fn n_classes(&self) -> usize {
        if self.is_binary() {
            2
        } else {
            self.weights.nrows()
        }
    }

    pub fn n_features(&self) -> usize {
        self.weights.ncols()
    }

    pub fn scores(&self, features: &DVector<f64>) -> Result<DVector<f64>> {
        if features.len() != self.n_features() {
            return Err(mismatch(format!("{} features for a classifier over {}", features.len(), self.n_features())));
        }
        Ok(&self.weights * features + &self.bias)
    }

    /// Largest `||w_i - w_j||_2` over pairs of rows, or `||w||_2` when binary.
    pub fn weight_spread(&self) -> f64 {
        if self.is_binary() {
            return self.weights.row(0).norm();
        }
        let c = self.weights.nrows();
        let mut best = 0.0_f64;
        for i in 0..c {
            for j in i + 1..c {
                best = best.max((self.weights.row(i) - self.weights.row(j)).norm());
            }
        }
        best
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (c, d) = self.weights.shape();
        let mut m = DMatrix::zeros(c, d + 1);
        m.view_mut((0, 0), (c, d)).copy_from(&self.weights);
        m.set_column(d, &self.bias);
        io::save_matrix(path, io::CLASSIFIER_MAGIC, &m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m = io::load_matrix(path, io::CLASSIFIER_MAGIC)?;
        if m.ncols() < 2 {
            return Err(invalid("classifier file has no feature columns"));
        }
        let d = m.ncols() - 1;
        Self::new(m.columns(0, d).into_owned(), m.column(d).into_owned())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub class: usize,
    /// Top score minus runner-up (multiclass) or `|score|` (binary).
    pub margin: f64,
}

pub fn predict_and_margin(clf: &LinearClassifier, features: &DVector<f64>) -> Result<Prediction> {
    let s = clf.scores(features)?;
    if clf.is_binary() {
        let f = s[0];
        return Ok(Prediction { class: usize::from(f > 0.0), margin: f.abs() });
    }
    let mut best = 0;
    for i in 1..s.len() {
        if s[i] > s[best] {
            best = i;
        }
    }
    let runner = (0..s.len()).filter(|&i| i != best).map(|i| s[i]).fold(f64::NEG_INFINITY, f64::max);
    Ok(Prediction { class: best, margin: s[best] - runner })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// `max(0, 1 - y f)` for binary; `max(0, 1 + max_{j != y} f_j - f_y)`
    /// for multiclass.
    Hinge,
    /// Logistic loss for binary, softmax cross-entropy for multiclass.
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad_features: DVector<f64>,
    pub grad_weights: DMatrix<f64>,
    pub grad_bias: DVector<f64>,
}

/// Loss and its gradient with respect to the features.
pub fn classification_loss(
    clf: &LinearClassifier,
    features: &DVector<f64>,
    label: usize,
    kind: LossKind,
) -> Result<(f64, DVector<f64>)> {
    let g = loss_with_gradients(clf, features, label, kind)?;
    Ok((g.loss, g.grad_features))
}

/// Loss with gradients for the features and the classifier parameters.
pub fn loss_with_gradients(
    clf: &LinearClassifier,
    features: &DVector<f64>,
    label: usize,
    kind: LossKind,
) -> Result<LossGrad> {
    if label >= clf.n_classes() {
        return Err(invalid(format!("label {label} out of range for {} classes", clf.n_classes())));
    }
    let s = clf.scores(features)?;
    // dL/dscores
    let (loss, ds) = if clf.is_binary() {
        let y = if label == 1 { 1.0 } else { -1.0 };
        let f = s[0];
        match kind {
            LossKind::Hinge => {
                let l = (1.0 - y * f).max(0.0);
                (l, DVector::from_element(1, if l > 0.0 { -y } else { 0.0 }))
            }
            LossKind::CrossEntropy => {
                let z = -y * f;
                // log(1 + e^z) and its derivative, computed stably.
                let l = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
                let sig = 1.0 / (1.0 + (-z).exp());
                (l, DVector::from_element(1, -y * sig))
            }
        }
    } else {
        match kind {
            LossKind::Hinge => {
                let (j, fj) = (0..s.len())
                    .filter(|&j| j != label)
                    .map(|j| (j, s[j]))
                    .fold((usize::MAX, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
                let l = (1.0 + fj - s[label]).max(0.0);
                let mut ds = DVector::zeros(s.len());
                if l > 0.0 {
                    ds[j] = 1.0;
                    ds[label] = -1.0;
                }
                (l, ds)
            }
            LossKind::CrossEntropy => {
                let max = s.max();
                let exp = s.map(|v| (v - max).exp());
                let total = exp.sum();
                let l = -(s[label] - max - total.ln());
                let mut ds = exp / total;
                ds[label] -= 1.0;
                (l, ds)
            }
        }
    };
    Ok(LossGrad {
        loss,
        grad_features: clf.weights.tr_mul(&ds),
        grad_weights: &ds * features.transpose(),
        grad_bias: ds,
    })
}

/// Euclidean norm of each group.
pub fn pool_groups(code: &DVector<f64>, partition: &GroupPartition) -> Result<DVector<f64>> {
    partition.check_len(code.len())?;
    Ok(partition.group_norms(code))
}

/// Pulls a gradient with respect to pooled norms back to the code. Groups
/// with zero norm get a zero gradient.
pub fn pool_backward(code: &DVector<f64>, partition: &GroupPartition, grad_pooled: &DVector<f64>) -> DVector<f64> {
    let norms = partition.group_norms(code);
    let mut out = DVector::zeros(code.len());
    for (g, members) in partition.groups().iter().enumerate() {
        if norms[g] > 0.0 {
            for &j in members {
                out[j] = grad_pooled[g] * code[j] / norms[g];
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapValue {
    /// `-min_i (smallest active group norm - largest inactive group norm)`.
    pub value: f64,
    /// Subgradient with respect to each code of the batch.
    pub grads: Vec<DVector<f64>>,
    /// Samples without both an active and an inactive group.
    pub skipped: usize,
    /// Every sample was skipped; `value` is then 0.
    pub degenerate: bool,
}

/// Gap regularizer over a batch. A group is active when its norm exceeds
/// `threshold`.
pub fn gap_regularizer(batch: &[DVector<f64>], partition: &GroupPartition, threshold: f64) -> Result<GapValue> {
    let mut worst: Option<(usize, f64, usize, usize)> = None;
    let mut skipped = 0;
    for (i, code) in batch.iter().enumerate() {
        partition.check_len(code.len())?;
        let norms = partition.group_norms(code);
        let mut act: Option<(usize, f64)> = None;
        let mut inact: Option<(usize, f64)> = None;
        for (g, &n) in norms.iter().enumerate() {
            if n > threshold {
                if act.is_none_or(|(_, m)| n < m) {
                    act = Some((g, n));
                }
            } else if inact.is_none_or(|(_, m)| n > m) {
                inact = Some((g, n));
            }
        }
        match (act, inact) {
            (Some((ga, a)), Some((gi, b))) => {
                let gap = a - b;
                if worst.is_none_or(|w| gap < w.1) {
                    worst = Some((i, gap, ga, gi));
                }
            }
            _ => skipped += 1,
        }
    }
    let mut grads: Vec<DVector<f64>> = batch.iter().map(|c| DVector::zeros(c.len())).collect();
    let Some((i, gap, ga, gi)) = worst else {
        return Ok(GapValue { value: 0.0, grads, skipped, degenerate: true });
    };
    let code = &batch[i];
    let na = group_norm(code, partition.group(ga));
    for &j in partition.group(ga) {
        grads[i][j] -= code[j] / na;
    }
    let ni = group_norm(code, partition.group(gi));
    if ni > 0.0 {
        for &j in partition.group(gi) {
            grads[i][j] += code[j] / ni;
        }
    }
    Ok(GapValue { value: -gap, grads, skipped, degenerate: false })
}

fn group_norm(code: &DVector<f64>, members: &[usize]) -> f64 {
    members.iter().map(|&j| code[j] * code[j]).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_groups(a: f64, b: f64) -> DVector<f64> {
        DVector::from_vec(vec![a, 0.0, b, 0.0])
    }

    #[test]
    fn gap_of_single_sample() {
        let p = GroupPartition::contiguous(4, 2).unwrap();
        let g = gap_regularizer(&[two_groups(5.0, 0.1)], &p, 1.0).unwrap();
        assert!((g.value + 4.9).abs() < 1e-12);
        assert!(!g.degenerate);
    }

    #[test]
    fn gap_takes_worst_sample() {
        let p = GroupPartition::contiguous(4, 2).unwrap();
        let batch = [two_groups(5.0, 0.1), two_groups(2.5, 0.5)];
        let g = gap_regularizer(&batch, &p, 1.0).unwrap();
        assert!((g.value + 2.0).abs() < 1e-12);
        assert_eq!(g.grads[0].norm(), 0.0);
        assert_eq!(g.grads[1], DVector::from_vec(vec![-1.0, 0.0, 1.0, 0.0]));
    }

    #[test]
    fn gap_all_degenerate_is_zero() {
        let p = GroupPartition::contiguous(4, 2).unwrap();
        let g = gap_regularizer(&[two_groups(5.0, 3.0)], &p, 1.0).unwrap();
        assert_eq!(g.value, 0.0);
        assert!(g.degenerate);
        assert_eq!(g.skipped, 1);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let clf = LinearClassifier::new(DMatrix::identity(3, 3), DVector::zeros(3)).unwrap();
        let p = predict_and_margin(&clf, &DVector::from_vec(vec![1.0, 2.0, 2.0])).unwrap();
        assert_eq!(p, Prediction { class: 1, margin: 0.0 });
    }

    #[test]
    fn binary_prediction() {
        let clf = LinearClassifier::binary(DVector::from_vec(vec![1.0, -2.0])).unwrap();
        let p = predict_and_margin(&clf, &DVector::from_vec(vec![1.0, 1.0])).unwrap();
        assert_eq!(p, Prediction { class: 0, margin: 1.0 });
        assert_eq!(clf.weight_spread(), 5f64.sqrt());
    }

    #[test]
    fn hinge_values() {
        let clf = LinearClassifier::binary(DVector::from_vec(vec![1.0])).unwrap();
        let x = DVector::from_vec(vec![0.25]);
        let (l, g) = classification_loss(&clf, &x, 1, LossKind::Hinge).unwrap();
        assert_eq!((l, g[0]), (0.75, -1.0));
        let (l, g) = classification_loss(&clf, &DVector::from_vec(vec![2.0]), 1, LossKind::Hinge).unwrap();
        assert_eq!((l, g[0]), (0.0, 0.0));
        assert!(classification_loss(&clf, &x, 2, LossKind::Hinge).is_err());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let w = DMatrix::from_row_slice(3, 4, &[0.3, -0.2, 0.5, 0.1, -0.4, 0.6, 0.2, -0.3, 0.1, 0.1, -0.5, 0.7]);
        let clf3 = LinearClassifier::new(w.clone(), DVector::from_vec(vec![0.1, -0.2, 0.05])).unwrap();
        let clf1 = LinearClassifier::new(w.rows(0, 1).into_owned(), DVector::from_vec(vec![0.1])).unwrap();
        let x = DVector::from_vec(vec![0.7, -1.1, 0.4, 0.9]);
        for (clf, label) in [(&clf3, 2usize), (&clf1, 0usize)] {
            for kind in [LossKind::Hinge, LossKind::CrossEntropy] {
                let g = loss_with_gradients(clf, &x, label, kind).unwrap();
                let h = 1e-6;
                for j in 0..4 {
                    let mut a = x.clone();
                    let mut b = x.clone();
                    a[j] += h;
                    b[j] -= h;
                    let fd = (classification_loss(clf, &a, label, kind).unwrap().0
                        - classification_loss(clf, &b, label, kind).unwrap().0)
                        / (2.0 * h);
                    assert!((fd - g.grad_features[j]).abs() < 1e-6, "{kind:?} feature {j}");
                }
                for r in 0..clf.weights.nrows() {
                    for c in 0..4 {
                        let mut p = clf.clone();
                        p.weights[(r, c)] += h;
                        let mut q = clf.clone();
                        q.weights[(r, c)] -= h;
                        let fd = (classification_loss(&p, &x, label, kind).unwrap().0
                            - classification_loss(&q, &x, label, kind).unwrap().0)
                            / (2.0 * h);
                        assert!((fd - g.grad_weights[(r, c)]).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn pooling_and_backward() {
        let p = GroupPartition::contiguous(4, 2).unwrap();
        let code = DVector::from_vec(vec![3.0, 4.0, 0.0, 0.0]);
        assert_eq!(pool_groups(&code, &p).unwrap(), DVector::from_vec(vec![5.0, 0.0]));
        let g = pool_backward(&code, &p, &DVector::from_vec(vec![1.0, 1.0]));
        assert_eq!(g, DVector::from_vec(vec![0.6, 0.8, 0.0, 0.0]));
    }

    #[test]
    fn classifier_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.gbpc");
        let clf = LinearClassifier::new(DMatrix::from_fn(3, 5, |r, c| (r * 5 + c) as f64 / 7.0), DVector::from_vec(vec![0.1, 0.2, 0.3]))
            .unwrap();
        clf.save(&path).unwrap();
        assert_eq!(LinearClassifier::load(&path).unwrap(), clf);
    }
}

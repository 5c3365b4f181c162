//! Prototype bank and distance-based classification.
//!
//! Each class owns a small set of prototype vectors in the final feature
//! space. A sample's distance to a class is its distance to the *nearest*
//! prototype of that class; class probabilities are a softmax over negated
//! distances. Classification therefore happens in the same metric the energy
//! losses shape, which is the whole point: pulling a sample toward its class
//! prototypes and ordering its pair energies are the same kind of motion.

use crate::energy::{FeatureBatch, ZERO_DISTANCE_EPS};
use crate::losses::sum_value_ordered;
use crate::rng::Stream;
use crate::{Error, Result};

/// Floor applied to the predicted probability inside the log loss. Keeps the
/// loss finite when the true class's softmax weight underflows to zero; the
/// gradient keeps its mathematical direction so training can recover.
const PROB_FLOOR: f64 = 1e-300;

/// `classes x per_class` prototype vectors of dimension `dim`, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    classes: usize,
    per_class: usize,
    dim: usize,
    data: Vec<f64>,
}

impl PrototypeBank {
    fn check_shape(classes: usize, per_class: usize, dim: usize) -> Result<()> {
        if classes < 2 {
            return Err(Error::InvalidArgument(format!("prototype bank needs at least 2 classes, got {classes}")));
        }
        if per_class == 0 || dim == 0 {
            return Err(Error::InvalidArgument("prototype bank needs per_class >= 1 and dim >= 1".into()));
        }
        Ok(())
    }

    /// Gaussian initialization with standard deviation `1/sqrt(dim)`, so the
    /// expected prototype norm is about 1 regardless of feature width.
    pub fn new_gaussian(classes: usize, per_class: usize, dim: usize, stream: &mut Stream) -> Result<Self> {
        Self::check_shape(classes, per_class, dim)?;
        let std = 1.0 / (dim as f64).sqrt();
        let mut data = vec![0.0; classes * per_class * dim];
        for v in data.iter_mut() {
            *v = stream.next_gaussian() * std;
        }
        Ok(PrototypeBank { classes, per_class, dim, data })
    }

    pub fn from_flat(classes: usize, per_class: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        Self::check_shape(classes, per_class, dim)?;
        if data.len() != classes * per_class * dim {
            return Err(Error::DimensionMismatch { expected: classes * per_class * dim, actual: data.len() });
        }
        Ok(PrototypeBank { classes, per_class, dim, data })
    }

    #[inline]
    pub fn classes(&self) -> usize {
        self.classes
    }

    #[inline]
    pub fn per_class(&self) -> usize {
        self.per_class
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, class: usize, proto: usize) -> &[f64] {
        let start = (class * self.per_class + proto) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Distances from one sample to every prototype.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    classes: usize,
    per_class: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    #[inline]
    pub fn get(&self, class: usize, proto: usize) -> f64 {
        self.data[class * self.per_class + proto]
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn per_class(&self) -> usize {
        self.per_class
    }
}

/// Euclidean distance from `features` to every prototype in the bank.
pub fn prototype_distances(features: &[f64], bank: &PrototypeBank) -> Result<DistanceMatrix> {
    if features.len() != bank.dim {
        return Err(Error::DimensionMismatch { expected: bank.dim, actual: features.len() });
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("prototype distance input".into()));
    }
    let mut data = vec![0.0; bank.classes * bank.per_class];
    for c in 0..bank.classes {
        for p in 0..bank.per_class {
            let proto = bank.get(c, p);
            let mut acc = 0.0;
            for (x, m) in features.iter().zip(proto) {
                let d = x - m;
                acc += d * d;
            }
            data[c * bank.per_class + p] = acc.sqrt();
        }
    }
    Ok(DistanceMatrix { classes: bank.classes, per_class: bank.per_class, data })
}

/// Per-class minimum distance and the index of the prototype achieving it.
/// Ties resolve to the lowest prototype index.
pub fn min_class_distance(distances: &DistanceMatrix) -> (Vec<f64>, Vec<usize>) {
    let mut mins = Vec::with_capacity(distances.classes);
    let mut args = Vec::with_capacity(distances.classes);
    for c in 0..distances.classes {
        let mut best = f64::INFINITY;
        let mut best_p = 0;
        for p in 0..distances.per_class {
            let d = distances.get(c, p);
            if d < best {
                best = d;
                best_p = p;
            }
        }
        mins.push(best);
        args.push(best_p);
    }
    (mins, args)
}

/// Softmax over negated distances, stabilized by shifting with the minimum
/// distance so the largest exponent is exactly zero.
pub fn class_probabilities(min_distances: &[f64]) -> Result<Vec<f64>> {
    if min_distances.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "class probabilities need at least 2 classes, got {}",
            min_distances.len()
        )));
    }
    if min_distances.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("class probability distances".into()));
    }
    let shift = min_distances.iter().copied().fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = min_distances.iter().map(|d| (shift - d).exp()).collect();
    let mut scratch = weights.clone();
    let norm = sum_value_ordered(&mut scratch);
    Ok(weights.into_iter().map(|w| w / norm).collect())
}

/// Negative log-likelihood of the labeled class, floored so an underflowed
/// probability yields a large finite loss instead of infinity.
pub fn classification_loss(probabilities: &[f64], label: usize) -> Result<f64> {
    if label >= probabilities.len() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            probabilities.len()
        )));
    }
    Ok(-probabilities[label].max(PROB_FLOOR).ln())
}

/// Predicted class: the one whose nearest prototype is nearest overall.
/// Ties resolve to the lowest class index.
pub fn predict(features: &[f64], bank: &PrototypeBank) -> Result<usize> {
    let distances = prototype_distances(features, bank)?;
    let (mins, _) = min_class_distance(&distances);
    let mut best = 0;
    for (c, d) in mins.iter().enumerate() {
        if *d < mins[best] {
            best = c;
        }
    }
    Ok(best)
}

/// Mean classification loss over a batch, with gradients for both the
/// features and the prototype bank.
#[derive(Debug, Clone)]
pub struct ClsBatchEval {
    pub mean_loss: f64,
    pub grad_features: FeatureBatch,
    /// Flat gradient aligned with `PrototypeBank::data()`.
    pub grad_prototypes: Vec<f64>,
    /// Distance to the nearest non-differentiability: a within-class argmin
    /// changing hands, or a sample landing exactly on a prototype.
    pub smooth_margin: f64,
}

/// Classification loss for a whole batch. The per-sample loss routes its
/// distance gradient through the single nearest prototype of each class (the
/// argmin choice), which is the subgradient consistent with how the distance
/// itself is defined.
pub fn classification_batch_with_grad(
    features: &FeatureBatch,
    labels: &[usize],
    bank: &PrototypeBank,
) -> Result<ClsBatchEval> {
    if features.rows() != labels.len() {
        return Err(Error::DimensionMismatch { expected: features.rows(), actual: labels.len() });
    }
    if features.dim() != bank.dim {
        return Err(Error::DimensionMismatch { expected: bank.dim, actual: features.dim() });
    }
    features.ensure_finite("classification features")?;
    let n = features.rows();
    let mut grad_features = FeatureBatch::zeros(n, features.dim());
    let mut grad_prototypes = vec![0.0; bank.data.len()];
    let mut losses = Vec::with_capacity(n);
    let mut smooth_margin = f64::INFINITY;
    let inv_n = 1.0 / n as f64;

    for i in 0..n {
        let label = labels[i];
        if label >= bank.classes {
            return Err(Error::InvalidArgument(format!("label {label} out of range for {} classes", bank.classes)));
        }
        let f = features.row(i);
        let distances = prototype_distances(f, bank)?;
        let (mins, argmins) = min_class_distance(&distances);
        let probs = class_probabilities(&mins)?;
        losses.push(classification_loss(&probs, label)?);

        for c in 0..bank.classes {
            // Margin to the argmin switching prototypes within this class.
            if bank.per_class > 1 {
                let mut second = f64::INFINITY;
                for p in 0..bank.per_class {
                    if p != argmins[c] {
                        second = second.min(distances.get(c, p));
                    }
                }
                smooth_margin = smooth_margin.min(second - mins[c]);
            }
            smooth_margin = smooth_margin.min(mins[c]);

            // dL/dd_c = (1 if c == label else 0) - p_c, averaged over batch.
            let coeff = (if c == label { 1.0 } else { 0.0 } - probs[c]) * inv_n;
            if coeff == 0.0 || mins[c] < ZERO_DISTANCE_EPS {
                continue;
            }
            let proto_start = (c * bank.per_class + argmins[c]) * bank.dim;
            let scale = coeff / mins[c];
            let f_start = i * features.dim();
            for k in 0..bank.dim {
                let diff = f[k] - bank.data[proto_start + k];
                grad_features.data_mut()[f_start + k] += scale * diff;
                grad_prototypes[proto_start + k] -= scale * diff;
            }
        }
    }

    let mean_loss = sum_value_ordered(&mut losses) * inv_n;
    Ok(ClsBatchEval { mean_loss, grad_features, grad_prototypes, smooth_margin })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_class_bank() -> PrototypeBank {
        // Class 0 prototypes near the origin, class 1 prototypes near (4, 0).
        PrototypeBank::from_flat(
            2,
            2,
            2,
            vec![
                0.0, 0.0, //
                0.5, 0.0, //
                4.0, 0.0, //
                4.5, 0.0,
            ],
        )
        .unwrap()
    }

    #[test]
    fn distances_and_argmin_are_correct() {
        let bank = two_class_bank();
        let d = prototype_distances(&[1.0, 0.0], &bank).unwrap();
        assert_eq!(d.get(0, 0), 1.0);
        assert_eq!(d.get(0, 1), 0.5);
        assert_eq!(d.get(1, 0), 3.0);
        let (mins, args) = min_class_distance(&d);
        assert_eq!(mins, vec![0.5, 3.0]);
        assert_eq!(args, vec![1, 0]);
    }

    #[test]
    fn argmin_tie_picks_lowest_prototype_index() {
        let bank = PrototypeBank::from_flat(2, 2, 1, vec![1.0, -1.0, 5.0, 5.0]).unwrap();
        let d = prototype_distances(&[0.0], &bank).unwrap();
        let (_, args) = min_class_distance(&d);
        assert_eq!(args, vec![0, 0]);
    }

    #[test]
    fn probabilities_match_hand_computation() {
        // d = [0, ln 2] gives weights [1, 1/2] and p = [2/3, 1/3].
        let p = class_probabilities(&[0.0, 2.0f64.ln()]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);

        let loss0 = classification_loss(&p, 0).unwrap();
        let loss1 = classification_loss(&p, 1).unwrap();
        assert!((loss0 - (1.5f64).ln()).abs() < 1e-12);
        assert!((loss1 - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn probabilities_survive_extreme_distances() {
        let p = class_probabilities(&[1e6, 1e6 + 1.0, 2e6]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p[0] > p[1] && p[1] > p[2]);
    }

    #[test]
    fn underflowed_probability_gives_large_finite_loss() {
        let loss = classification_loss(&[1.0, 0.0], 1).unwrap();
        assert!(loss.is_finite());
        assert_eq!(loss, -(PROB_FLOOR.ln()));
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        assert!(matches!(classification_loss(&[0.5, 0.5], 2), Err(crate::Error::InvalidArgument(_))));
    }

    #[test]
    fn predict_picks_nearest_class() {
        let bank = two_class_bank();
        assert_eq!(predict(&[0.1, 0.2], &bank).unwrap(), 0);
        assert_eq!(predict(&[4.2, -0.3], &bank).unwrap(), 1);
    }

    #[test]
    fn bank_shape_validation() {
        let mut rng = crate::rng::Stream::from_seed(0);
        assert!(PrototypeBank::new_gaussian(1, 3, 4, &mut rng).is_err());
        assert!(PrototypeBank::new_gaussian(2, 0, 4, &mut rng).is_err());
        assert!(PrototypeBank::from_flat(2, 1, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn batch_gradients_match_finite_differences() {
        let mut rng = crate::rng::Stream::from_seed(77);
        let mut bank = PrototypeBank::new_gaussian(3, 2, 4, &mut rng).unwrap();
        // Spread prototypes out so no argmin sits near a tie.
        for (i, v) in bank.data_mut().iter_mut().enumerate() {
            *v += (i % 7) as f64 * 0.3;
        }
        let mut rows = vec![vec![0.0; 4]; 6];
        for r in rows.iter_mut() {
            rng.fill_gaussian(r);
        }
        let features = FeatureBatch::from_rows(&rows).unwrap();
        let labels = vec![0, 1, 2, 0, 1, 2];

        let eval = classification_batch_with_grad(&features, &labels, &bank).unwrap();
        assert!(eval.smooth_margin > 1e-4, "test point too close to a kink");
        let eps = 1e-6;

        let loss_of = |features: &FeatureBatch, bank: &PrototypeBank| -> f64 {
            classification_batch_with_grad(features, &labels, bank).unwrap().mean_loss
        };

        for i in 0..features.rows() {
            for k in 0..features.dim() {
                let mut hi = features.clone();
                hi.row_mut(i)[k] += eps;
                let mut lo = features.clone();
                lo.row_mut(i)[k] -= eps;
                let numeric = (loss_of(&hi, &bank) - loss_of(&lo, &bank)) / (2.0 * eps);
                let analytic = eval.grad_features.row(i)[k];
                assert!(
                    (analytic - numeric).abs() / numeric.abs().max(analytic.abs()).max(1e-6) < 1e-4,
                    "feature ({i},{k}): analytic {analytic} numeric {numeric}"
                );
            }
        }
        for idx in 0..bank.data().len() {
            let mut hi = bank.clone();
            hi.data_mut()[idx] += eps;
            let mut lo = bank.clone();
            lo.data_mut()[idx] -= eps;
            let numeric = (loss_of(&features, &hi) - loss_of(&features, &lo)) / (2.0 * eps);
            let analytic = eval.grad_prototypes[idx];
            assert!(
                (analytic - numeric).abs() / numeric.abs().max(analytic.abs()).max(1e-6) < 1e-4,
                "prototype flat index {idx}: analytic {analytic} numeric {numeric}"
            );
        }
    }

    proptest! {
        #[test]
        fn probability_invariants(d in proptest::collection::vec(0.0f64..50.0, 2..8)) {
            let p = class_probabilities(&d).unwrap();
            prop_assert!(p.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);

            // argmax probability must agree with argmin distance.
            let argmin = d.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            let argmax = p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            prop_assert!((p[argmax] - p[argmin]).abs() < 1e-15);

            for (i, pi) in p.iter().enumerate() {
                let loss = classification_loss(&p, i).unwrap();
                prop_assert!(loss >= 0.0);
                if *pi < 1.0 {
                    prop_assert!(loss > 0.0);
                }
            }
        }
    }
}

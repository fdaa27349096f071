//! One-vs-all linear max-margin classification. Each class gets a binary
//! hinge-loss classifier trained by seeded subgradient descent; the
//! predicted class is the one whose classifier scores highest.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Internal, fixed training schedule: the classifier is a deterministic
/// building block of the evaluation protocol, not a tunable model.
const EPOCHS: usize = 200;
const BASE_RATE: f64 = 1.0;
const SHUFFLE_SEED: u64 = 0x4f56_4121;

#[derive(Debug, Clone)]
pub struct LinearOva {
    /// One weight row per class.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    pub dim: usize,
}

impl LinearOva {
    pub fn class_count(&self) -> usize {
        self.weights.len()
    }

    /// Per-class scores w_c . x + b_c for one feature vector.
    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::config(format!(
                "feature dimension {} does not match model dimension {}",
                x.len(),
                self.dim
            )));
        }
        Ok(self
            .weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>() + b)
            .collect())
    }

    /// Highest-scoring class; ties resolve to the smallest index.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let scores = self.scores(x)?;
        let mut best = 0;
        for (c, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = c;
            }
        }
        Ok(best)
    }

    pub fn predict_all(&self, features: &[Vec<f64>]) -> Result<Vec<usize>> {
        features.iter().map(|x| self.predict(x)).collect()
    }
}

/// Train one binary hinge classifier per class by subgradient descent on
/// lambda/2 |w|^2 + mean hinge loss, with a harmonically decaying step
/// size and a fixed internal shuffle seed. Callers are expected to feed
/// L2-normalized features.
pub fn train_linear_ova(
    features: &[Vec<f64>],
    labels: &[usize],
    class_count: usize,
    regularization: f64,
) -> Result<LinearOva> {
    if features.is_empty() {
        return Err(Error::data("no training features"));
    }
    if features.len() != labels.len() {
        return Err(Error::config(format!(
            "{} feature rows but {} labels",
            features.len(),
            labels.len()
        )));
    }
    if class_count < 2 {
        return Err(Error::config("need at least 2 classes"));
    }
    if !(regularization.is_finite() && regularization >= 0.0) {
        return Err(Error::config(format!(
            "regularization = {regularization} must be non-negative"
        )));
    }
    let dim = features[0].len();
    if dim == 0 || features.iter().any(|f| f.len() != dim) {
        return Err(Error::config("feature rows must share a positive dimension"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
        return Err(Error::data(format!(
            "label {bad} out of range for {class_count} classes"
        )));
    }
    let distinct = {
        let mut seen = vec![false; class_count];
        labels.iter().for_each(|&l| seen[l] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(Error::data(
            "training labels cover a single class; nothing to separate",
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(SHUFFLE_SEED);
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut weights = vec![vec![0.0; dim]; class_count];
    let mut biases = vec![0.0; class_count];
    for epoch in 0..EPOCHS {
        order.shuffle(&mut rng);
        let rate = BASE_RATE / (1.0 + epoch as f64);
        for &i in &order {
            let x = &features[i];
            for c in 0..class_count {
                let y = if labels[i] == c { 1.0 } else { -1.0 };
                let w = &mut weights[c];
                let margin =
                    y * (w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>() + biases[c]);
                let shrink = 1.0 - rate * regularization;
                w.iter_mut().for_each(|wi| *wi *= shrink);
                if margin < 1.0 {
                    w.iter_mut().zip(x).for_each(|(wi, xi)| *wi += rate * y * xi);
                    biases[c] += rate * y;
                }
            }
        }
    }
    Ok(LinearOva {
        weights,
        biases,
        dim,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Three well-separated 2D clusters.
    fn clusters(scale: f64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let centers = [(0.0, 0.0), (4.0, 0.0), (0.0, 4.0)];
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (c, &(cx, cy)) in centers.iter().enumerate() {
            for i in 0..8 {
                let dx = 0.2 * ((i % 3) as f64 - 1.0);
                let dy = 0.2 * ((i / 3) as f64 - 1.0);
                features.push(vec![scale * (cx + dx), scale * (cy + dy)]);
                labels.push(c);
            }
        }
        (features, labels)
    }

    #[test]
    fn separates_toy_clusters() {
        let (features, labels) = clusters(1.0);
        let model = train_linear_ova(&features, &labels, 3, 1e-4).unwrap();
        assert_eq!(model.predict_all(&features).unwrap(), labels);
    }

    #[test]
    fn feature_scaling_keeps_predictions() {
        let (f1, labels) = clusters(1.0);
        let (f2, _) = clusters(2.0);
        let m1 = train_linear_ova(&f1, &labels, 3, 1e-4).unwrap();
        let m2 = train_linear_ova(&f2, &labels, 3, 1e-4).unwrap();
        assert_eq!(
            m1.predict_all(&f1).unwrap(),
            m2.predict_all(&f2).unwrap()
        );
    }

    #[test]
    fn training_is_deterministic() {
        let (features, labels) = clusters(1.0);
        let a = train_linear_ova(&features, &labels, 3, 1e-4).unwrap();
        let b = train_linear_ova(&features, &labels, 3, 1e-4).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.biases, b.biases);
    }

    #[test]
    fn prediction_is_argmax_of_scores() {
        let model = LinearOva {
            weights: vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, -1.0]],
            biases: vec![0.0, 0.1, 0.0],
            dim: 2,
        };
        let scores = model.scores(&[2.0, 1.0]).unwrap();
        assert_eq!(scores, vec![2.0, 1.1, -3.0]);
        assert_eq!(model.predict(&[2.0, 1.0]).unwrap(), 0);
        // exact tie between classes 0 and 1 goes to the smaller index
        let tie = LinearOva {
            weights: vec![vec![1.0], vec![1.0]],
            biases: vec![0.0, 0.0],
            dim: 1,
        };
        assert_eq!(tie.predict(&[3.0]).unwrap(), 0);
    }

    #[test]
    fn rejects_degenerate_input() {
        let feats = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(train_linear_ova(&[], &[], 2, 1e-4).is_err());
        assert!(train_linear_ova(&feats, &[0, 0], 2, 1e-4).is_err()); // single class present
        assert!(train_linear_ova(&feats, &[0, 1], 1, 1e-4).is_err()); // class_count too small
        assert!(train_linear_ova(&feats, &[0, 2], 2, 1e-4).is_err()); // label out of range
        assert!(train_linear_ova(&feats, &[0], 2, 1e-4).is_err()); // length mismatch
        let ragged = vec![vec![1.0, 0.0], vec![0.0]];
        assert!(train_linear_ova(&ragged, &[0, 1], 2, 1e-4).is_err());
        assert!(train_linear_ova(&feats, &[0, 1], 2, -1.0).is_err());
    }

    #[test]
    fn dimension_mismatch_at_prediction() {
        let (features, labels) = clusters(1.0);
        let model = train_linear_ova(&features, &labels, 3, 1e-4).unwrap();
        assert!(model.predict(&[1.0, 2.0, 3.0]).is_err());
    }
}

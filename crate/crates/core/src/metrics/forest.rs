//! Bagged CART classification trees with Gini splits.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::MetricError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForestParams {
    pub n_estimators: usize,
    pub max_depth: usize,
    /// Features tried per split; `None` means `⌈√D⌉`.
    pub max_features: Option<usize>,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_estimators: 20,
            max_depth: 20,
            max_features: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Node {
    Leaf(usize),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, x: &[f64]) -> usize {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf(c) => return c,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if x[feature] <= threshold { left } else { right },
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RandomForest {
    trees: Vec<Tree>,
    n_classes: usize,
    n_features: usize,
    importances: Vec<f64>,
    degenerate: bool,
}

fn gini(counts: &[usize], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

fn majority(counts: &[usize]) -> usize {
    let mut best = 0;
    for (c, &k) in counts.iter().enumerate() {
        if k > counts[best] {
            best = c;
        }
    }
    best
}

struct Grower<'a, R> {
    x: &'a [f64],
    d: usize,
    y: &'a [usize],
    n_classes: usize,
    max_depth: usize,
    max_features: usize,
    rng: &'a mut R,
    nodes: Vec<Node>,
    importance: Vec<f64>,
    scratch: Vec<(f64, usize)>,
}

impl<R: Rng> Grower<'_, R> {
    fn counts(&self, rows: &[usize]) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for &r in rows {
            c[self.y[r]] += 1;
        }
        c
    }

    /// Best `(feature, threshold, weighted child impurity)` among a random
    /// subset of features, or `None` when every sampled feature is constant.
    fn best_split(&mut self, rows: &[usize], parent: &[usize]) -> Option<(usize, f64, f64)> {
        let n = rows.len();
        let m = self.max_features.min(self.d);
        let features = sample(self.rng, self.d, m);
        let mut best: Option<(usize, f64, f64)> = None;
        let mut left = vec![0usize; self.n_classes];
        let mut right = vec![0usize; self.n_classes];
        for f in features.iter() {
            self.scratch.clear();
            self.scratch.extend(rows.iter().map(|&r| (self.x[r * self.d + f], self.y[r])));
            self.scratch.sort_by(|a, b| a.0.total_cmp(&b.0));
            left.iter_mut().for_each(|c| *c = 0);
            right.copy_from_slice(parent);
            for i in 0..n - 1 {
                let (v, c) = self.scratch[i];
                left[c] += 1;
                right[c] -= 1;
                let next = self.scratch[i + 1].0;
                if next <= v {
                    continue;
                }
                let nl = i + 1;
                let score = nl as f64 * gini(&left, nl) + (n - nl) as f64 * gini(&right, n - nl);
                if best.is_none_or(|b| score < b.2) {
                    let mid = v + (next - v) / 2.0;
                    // Guard against the midpoint rounding onto `next`.
                    let threshold = if mid < next { mid } else { v };
                    best = Some((f, threshold, score));
                }
            }
        }
        best
    }

    fn grow(&mut self, rows: &mut [usize], depth: usize) -> usize {
        let id = self.nodes.len();
        let counts = self.counts(rows);
        let n = rows.len();
        let impurity = gini(&counts, n);
        self.nodes.push(Node::Leaf(majority(&counts)));
        if depth >= self.max_depth || n < 2 || impurity == 0.0 {
            return id;
        }
        let Some((feature, threshold, child)) = self.best_split(rows, &counts) else {
            return id;
        };
        let decrease = n as f64 * impurity - child;
        if decrease <= 0.0 {
            return id;
        }
        self.importance[feature] += decrease;
        let mut k = 0;
        for i in 0..n {
            if self.x[rows[i] * self.d + feature] <= threshold {
                rows.swap(i, k);
                k += 1;
            }
        }
        let (l, r) = rows.split_at_mut(k);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[id] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }
}

fn normalize(v: &mut [f64]) -> bool {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter_mut().for_each(|x| *x /= s);
        true
    } else {
        false
    }
}

impl RandomForest {
    /// Fits `params.n_estimators` trees, each on a bootstrap resample of the
    /// `n x d` row-major matrix `x`.
    pub fn fit<R: Rng>(x: &[f64], d: usize, y: &[usize], params: &ForestParams, rng: &mut R) -> Result<Self, MetricError> {
        let n = y.len();
        if n < 10 {
            return Err(MetricError::Input(format!("forest needs at least 10 samples, got {n}")));
        }
        if d == 0 || x.len() != n * d {
            return Err(MetricError::Input(format!("feature matrix has {} values for {n} x {d}", x.len())));
        }
        if params.n_estimators == 0 {
            return Err(MetricError::Input("forest needs at least one tree".into()));
        }
        let n_classes = y.iter().max().map_or(0, |m| m + 1);
        let first = y[0];
        if y.iter().all(|&c| c == first) {
            return Ok(Self {
                trees: vec![Tree {
                    nodes: vec![Node::Leaf(first)],
                }],
                n_classes,
                n_features: d,
                importances: vec![0.0; d],
                degenerate: true,
            });
        }
        let max_features = params.max_features.unwrap_or_else(|| (d as f64).sqrt().ceil() as usize).max(1);
        let mut importances = vec![0.0; d];
        let mut trees = Vec::with_capacity(params.n_estimators);
        for _ in 0..params.n_estimators {
            let mut rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let mut g = Grower {
                x,
                d,
                y,
                n_classes,
                max_depth: params.max_depth,
                max_features,
                rng,
                nodes: Vec::new(),
                importance: vec![0.0; d],
                scratch: Vec::with_capacity(n),
            };
            g.grow(&mut rows, 0);
            let mut imp = g.importance;
            if normalize(&mut imp) {
                importances.iter_mut().zip(&imp).for_each(|(a, b)| *a += b);
            }
            trees.push(Tree { nodes: g.nodes });
        }
        normalize(&mut importances);
        Ok(Self {
            trees,
            n_classes,
            n_features: d,
            importances,
            degenerate: false,
        })
    }

    /// Majority vote over trees; ties go to the smaller class.
    pub fn predict(&self, x: &[f64]) -> usize {
        let mut votes = vec![0usize; self.n_classes];
        for t in &self.trees {
            votes[t.predict(x)] += 1;
        }
        majority(&votes)
    }

    pub fn predict_rows(&self, x: &[f64]) -> Vec<usize> {
        x.chunks(self.n_features).map(|row| self.predict(row)).collect()
    }

    /// Mean decrease in impurity per feature, summing to 1 unless the forest
    /// is degenerate.
    pub fn importances(&self) -> &[f64] {
        &self.importances
    }

    /// True when the training labels had a single class.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn accuracy(&self, x: &[f64], y: &[usize]) -> f64 {
        let hits = self.predict_rows(x).iter().zip(y).filter(|(p, t)| p == t).count();
        hits as f64 / y.len().max(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn threshold_data(n: usize, d: usize, seed: u64) -> (Vec<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n * d).map(|_| rng.random::<f64>()).collect();
        let y = (0..n).map(|i| usize::from(x[i * d] > 0.5)).collect();
        (x, y)
    }

    #[test]
    fn thresholded_dimension_dominates_importance() {
        let (x, y) = threshold_data(500, 6, 1);
        let f = RandomForest::fit(&x, 6, &y, &ForestParams::default(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(f.importances()[0] > 0.8, "{:?}", f.importances());
        assert!((f.importances().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn separable_training_accuracy() {
        let (x, y) = threshold_data(200, 4, 3);
        let f = RandomForest::fit(&x, 4, &y, &ForestParams::default(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert!(f.accuracy(&x, &y) >= 0.99);
    }

    #[test]
    fn same_rng_same_forest() {
        let (x, y) = threshold_data(100, 5, 5);
        let a = RandomForest::fit(&x, 5, &y, &ForestParams::default(), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let b = RandomForest::fit(&x, 5, &y, &ForestParams::default(), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.predict_rows(&x), b.predict_rows(&x));
    }

    #[test]
    fn single_class_is_degenerate() {
        let (x, _) = threshold_data(20, 3, 7);
        let f = RandomForest::fit(&x, 3, &[2; 20], &ForestParams::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(f.is_degenerate());
        assert!(f.importances().iter().all(|&v| v == 0.0));
        assert_eq!(f.predict(&x[..3]), 2);
    }

    #[test]
    fn multiclass_xor_is_learned() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 400;
        let x: Vec<f64> = (0..n * 2).map(|_| rng.random::<f64>()).collect();
        let y: Vec<usize> = (0..n)
            .map(|i| usize::from(x[2 * i] > 0.5) * 2 + usize::from(x[2 * i + 1] > 0.5))
            .collect();
        let f = RandomForest::fit(&x, 2, &y, &ForestParams::default(), &mut rng).unwrap();
        assert!(f.accuracy(&x, &y) > 0.98);
    }

    #[test]
    fn rejects_tiny_inputs() {
        assert!(RandomForest::fit(&[0.0; 9], 1, &[0; 9], &ForestParams::default(), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}

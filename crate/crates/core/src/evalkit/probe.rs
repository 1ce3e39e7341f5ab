use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    /// Full-batch gradient iterations.
    pub iterations: usize,
    /// L2 penalty on the weights.
    pub l2: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { iterations: 500, l2: 1e-3, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    /// `None` for classes absent from the evaluated split.
    pub per_class: Vec<Option<f64>>,
    pub train_size: usize,
    pub val_size: usize,
    pub seed: u64,
}

/// Multinomial logistic regression on standardized features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    /// `dim × classes`, row-major.
    w: Vec<f64>,
    b: Vec<f64>,
    classes: usize,
    train_size: usize,
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in z.iter_mut() {
        *v /= s;
    }
}

/// Largest eigenvalue of `XᵀX / n` by power iteration.
fn gram_top_eigenvalue(x: &[Vec<f64>], dim: usize) -> f64 {
    let mut v = vec![1.0 / (dim as f64).sqrt(); dim];
    let mut lambda = 0.0;
    for _ in 0..50 {
        let mut out = vec![0.0; dim];
        for row in x {
            let dot: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum();
            for (o, a) in out.iter_mut().zip(row) {
                *o += dot * a;
            }
        }
        let norm = out.iter().map(|a| a * a).sum::<f64>().sqrt() / x.len() as f64;
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        let n = out.iter().map(|a| a * a).sum::<f64>().sqrt();
        v = out.into_iter().map(|a| a / n).collect();
    }
    lambda
}

impl LinearProbe {
    /// Fits by accelerated full-batch gradient descent from zero, with the
    /// step set from the curvature bound of the standardized features.
    pub fn fit(x: &[Vec<f64>], y: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<Self> {
        if x.len() != y.len() || x.is_empty() {
            return Err(Error::contract("probe needs one label per feature row"));
        }
        if y.iter().any(|&c| c >= classes) {
            return Err(Error::contract("probe label out of range"));
        }
        let first = y[0];
        if y.iter().all(|&c| c == first) {
            return Err(Error::config("linear probe needs at least two classes in the training split"));
        }
        let dim = x[0].len();
        let n = x.len() as f64;
        let mut mean = vec![0.0; dim];
        for row in x {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; dim];
        for row in x {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| if *v > 1e-12 { 1.0 / v.sqrt() } else { 0.0 }).collect();
        let xs: Vec<Vec<f64>> =
            x.iter().map(|row| row.iter().zip(&mean).zip(&inv_std).map(|((v, m), s)| (v - m) * s).collect()).collect();

        // Softmax cross-entropy curvature is at most half the feature Gram
        // spectrum (plus the bias column).
        let lipschitz = 0.5 * (gram_top_eigenvalue(&xs, dim) + 1.0) + cfg.l2;
        let step = 1.0 / lipschitz;
        let k = classes;
        let mut w = vec![0.0; dim * k];
        let mut b = vec![0.0; k];
        let (mut w_prev, mut b_prev) = (w.clone(), b.clone());
        for it in 0..cfg.iterations {
            let mom = it as f64 / (it as f64 + 3.0);
            let wy: Vec<f64> = w.iter().zip(&w_prev).map(|(a, p)| a + mom * (a - p)).collect();
            let by: Vec<f64> = b.iter().zip(&b_prev).map(|(a, p)| a + mom * (a - p)).collect();
            let mut gw: Vec<f64> = wy.iter().map(|v| cfg.l2 * v).collect();
            let mut gb = vec![0.0; k];
            for (row, &label) in xs.iter().zip(y) {
                let mut z = by.clone();
                for (d, &v) in row.iter().enumerate() {
                    if v != 0.0 {
                        for c in 0..k {
                            z[c] += v * wy[d * k + c];
                        }
                    }
                }
                softmax_in_place(&mut z);
                z[label] -= 1.0;
                for c in 0..k {
                    gb[c] += z[c] / n;
                }
                for (d, &v) in row.iter().enumerate() {
                    for c in 0..k {
                        gw[d * k + c] += v * z[c] / n;
                    }
                }
            }
            w_prev = std::mem::replace(&mut w, wy.iter().zip(&gw).map(|(a, g)| a - step * g).collect());
            b_prev = std::mem::replace(&mut b, by.iter().zip(&gb).map(|(a, g)| a - step * g).collect());
        }
        Ok(Self { mean, inv_std, w, b, classes, train_size: x.len() })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let k = self.classes;
        let mut z = self.b.clone();
        for (d, v) in x.iter().enumerate() {
            let s = (v - self.mean[d]) * self.inv_std[d];
            for (zc, w) in z.iter_mut().zip(&self.w[d * k..(d + 1) * k]) {
                *zc += s * w;
            }
        }
        z
    }

    /// Arg-max class; ties go to the lowest index.
    pub fn predict(&self, x: &[f64]) -> usize {
        let z = self.logits(x);
        let mut best = 0;
        for c in 1..z.len() {
            if z[c] > z[best] {
                best = c;
            }
        }
        best
    }

    pub fn evaluate(&self, x: &[Vec<f64>], y: &[usize], seed: u64) -> ProbeResult {
        let mut hits = vec![0usize; self.classes];
        let mut counts = vec![0usize; self.classes];
        for (row, &label) in x.iter().zip(y) {
            counts[label] += 1;
            if self.predict(row) == label {
                hits[label] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        ProbeResult {
            accuracy: if total == 0 { 0.0 } else { hits.iter().sum::<usize>() as f64 / total as f64 },
            per_class: hits.iter().zip(&counts).map(|(&h, &c)| (c > 0).then(|| h as f64 / c as f64)).collect(),
            train_size: self.train_size,
            val_size: total,
            seed,
        }
    }
}

/// Fits on the training rows and scores on the held-out rows.
pub fn probe_features(
    train: (&[Vec<f64>], &[usize]),
    val: (&[Vec<f64>], &[usize]),
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<(LinearProbe, ProbeResult)> {
    let probe = LinearProbe::fit(train.0, train.1, classes, cfg)?;
    let result = probe.evaluate(val.0, val.1, cfg.seed);
    Ok((probe, result))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding;
    use rand::seq::SliceRandom;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian_rows(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = seeding::rng(seed, &[]);
        (0..n).map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect()).collect()
    }

    #[test]
    fn separable_two_class_toy_is_solved() {
        let mut x = gaussian_rows(200, 5, 1);
        let y: Vec<usize> = (0..200).map(|i| i % 2).collect();
        for (row, &c) in x.iter_mut().zip(&y) {
            row[0] = if c == 1 { 3.0 + row[0].abs() } else { -3.0 - row[0].abs() };
        }
        let (tx, vx) = x.split_at(150);
        let (ty, vy) = y.split_at(150);
        let (_, r) = probe_features((tx, ty), (vx, vy), 2, &ProbeConfig::default()).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.per_class, vec![Some(1.0), Some(1.0)]);
        assert_eq!((r.train_size, r.val_size), (150, 50));
    }

    #[test]
    fn shuffled_labels_sit_at_chance() {
        // Permutation null: labels carry no information about the features,
        // so held-out accuracy is Binomial(n, 1/K) / n.
        let k = 4;
        let n_val = 600;
        let x = gaussian_rows(400 + n_val, 8, 2);
        let mut y: Vec<usize> = (0..x.len()).map(|i| i % k).collect();
        y.shuffle(&mut seeding::rng(3, &[]));
        let (tx, vx) = x.split_at(400);
        let (ty, vy) = y.split_at(400);
        let (_, r) = probe_features((tx, ty), (vx, vy), k, &ProbeConfig::default()).unwrap();
        let p = 1.0 / k as f64;
        let sigma = (p * (1.0 - p) / n_val as f64).sqrt();
        assert!((r.accuracy - p).abs() <= 3.0 * sigma, "accuracy {}", r.accuracy);
    }

    #[test]
    fn single_class_training_set_is_rejected() {
        let x = gaussian_rows(10, 3, 4);
        let y = vec![2; 10];
        assert!(matches!(LinearProbe::fit(&x, &y, 4, &ProbeConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn fitting_is_deterministic() {
        let x = gaussian_rows(60, 6, 5);
        let y: Vec<usize> = (0..60).map(|i| (i * 7) % 3).collect();
        let a = LinearProbe::fit(&x, &y, 3, &ProbeConfig::default()).unwrap();
        let b = LinearProbe::fit(&x, &y, 3, &ProbeConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_feature_columns_are_ignored() {
        let mut x = gaussian_rows(80, 3, 6);
        let y: Vec<usize> = x.iter().map(|r| (r[1] > 0.0) as usize).collect();
        for row in x.iter_mut() {
            row[0] = 7.0;
        }
        let p = LinearProbe::fit(&x, &y, 2, &ProbeConfig::default()).unwrap();
        assert!(p.logits(&x[0]).iter().all(|v| v.is_finite()));
        assert!(p.evaluate(&x, &y, 0).accuracy > 0.95);
    }

    #[test]
    fn chance_for_eight_classes() {
        assert_eq!(1.0 / crate::scenegen::SHAPE_CLASSES as f64, 0.125);
    }
}

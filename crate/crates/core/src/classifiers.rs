//! Small classifiers for post-hoc analysis: an RBF-kernel max-margin
//! classifier (random Fourier features + Pegasos + Platt scaling), a
//! one-hidden-layer softmax network and discrete AdaBoost over stumps.
//!
//! All work in `f64` on row-per-sample matrices regardless of the model scalar.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DaliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    /// Random Fourier features approximating the RBF kernel.
    pub rff_features: usize,
    /// Kernel scale; `None` uses `1 / n_features` (inputs are standardised).
    pub rbf_gamma: Option<f64>,
    pub svm_c: f64,
    pub svm_epochs: usize,
    pub mlp_hidden: usize,
    pub mlp_epochs: usize,
    pub mlp_lr: f64,
    pub mlp_weight_decay: f64,
    pub stumps: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            rff_features: 256,
            rbf_gamma: None,
            svm_c: 1.0,
            svm_epochs: 10,
            mlp_hidden: 64,
            mlp_epochs: 150,
            mlp_lr: 1e-2,
            mlp_weight_decay: 1e-4,
            stumps: 100,
        }
    }
}

/// Builds a matrix from sample rows.
pub fn rows_to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let d = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j])
}

/// Standardises every column to zero mean and unit variance in place;
/// constant columns become zero.
pub fn standardize(x: &mut DMatrix<f64>) {
    let n = x.nrows() as f64;
    for mut col in x.column_iter_mut() {
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        for v in col.iter_mut() {
            *v = if sd > 1e-12 { (*v - mean) / sd } else { 0.0 };
        }
    }
}

pub fn select_rows(x: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), x.ncols(), |i, j| x[(idx[i], j)])
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn check_binary(x: &DMatrix<f64>, y: &[bool]) -> Result<()> {
    if x.nrows() != y.len() || y.is_empty() {
        return Err(DaliError::Shape(format!("{} samples but {} labels", x.nrows(), y.len())));
    }
    if y.iter().all(|&v| v) || y.iter().all(|&v| !v) {
        return Err(DaliError::Invalid("training data holds a single class".into()));
    }
    Ok(())
}

/// Platt scaling: `p = σ(a f + b)` fitted by Newton's method on smoothed targets.
fn platt(f: &[f64], y: &[bool]) -> (f64, f64) {
    let pos = y.iter().filter(|&&v| v).count() as f64;
    let neg = y.len() as f64 - pos;
    let hi = (pos + 1.0) / (pos + 2.0);
    let lo = 1.0 / (neg + 2.0);
    let (mut a, mut b) = (1.0, 0.0);
    for _ in 0..100 {
        let (mut ga, mut gb, mut haa, mut hab, mut hbb) = (0.0, 0.0, 1e-9, 0.0, 1e-9);
        for (&fi, &yi) in f.iter().zip(y) {
            let t = if yi { hi } else { lo };
            let p = sigmoid(a * fi + b);
            let d = p - t;
            let w = p * (1.0 - p);
            ga += d * fi;
            gb += d;
            haa += w * fi * fi;
            hab += w * fi;
            hbb += w;
        }
        let det = haa * hbb - hab * hab;
        if det.abs() < 1e-15 {
            break;
        }
        let da = (hbb * ga - hab * gb) / det;
        let db = (haa * gb - hab * ga) / det;
        a -= da;
        b -= db;
        if da.abs() + db.abs() < 1e-10 {
            break;
        }
    }
    (a, b)
}

/// Max-margin classifier on random Fourier features of an RBF kernel.
#[derive(Clone, Debug)]
pub struct RffSvm {
    omega: DMatrix<f64>,
    phase: DVector<f64>,
    w: DVector<f64>,
    platt: (f64, f64),
}

impl RffSvm {
    /// Fourier features plus a constant column acting as the bias.
    fn features(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let nf = self.omega.ncols();
        let scale = (2.0 / nf as f64).sqrt();
        let proj = x * &self.omega;
        DMatrix::from_fn(x.nrows(), nf + 1, |i, j| if j < nf { scale * (proj[(i, j)] + self.phase[j]).cos() } else { 1.0 })
    }

    pub fn fit<R: Rng>(x: &DMatrix<f64>, y: &[bool], cfg: &ClassifierConfig, rng: &mut R) -> Result<Self> {
        check_binary(x, y)?;
        let d = x.ncols();
        let gamma = cfg.rbf_gamma.unwrap_or(1.0 / d.max(1) as f64);
        let sd = (2.0 * gamma).sqrt();
        let nf = cfg.rff_features;
        let omega = DMatrix::from_fn(d, nf, |_, _| sd * Distribution::<f64>::sample(&StandardNormal, rng));
        let phase = DVector::from_fn(nf, |_, _| rng.gen_range(0.0..std::f64::consts::TAU));
        let mut m = Self { omega, phase, w: DVector::zeros(nf + 1), platt: (1.0, 0.0) };
        let phi = m.features(x);
        let n = y.len();
        let lambda = 1.0 / (cfg.svm_c * n as f64);
        let mut t = 0usize;
        let mut order: Vec<usize> = (0..n).collect();
        for _ in 0..cfg.svm_epochs {
            rand::seq::SliceRandom::shuffle(&mut order[..], rng);
            for &i in &order {
                t += 1;
                let eta = 1.0 / (lambda * t as f64);
                let yi = if y[i] { 1.0 } else { -1.0 };
                let row = phi.row(i);
                let margin = yi * row.dot(&m.w.transpose());
                m.w *= 1.0 - eta * lambda;
                if margin < 1.0 {
                    m.w += row.transpose() * (eta * yi);
                }
                let norm = m.w.norm();
                let cap = 1.0 / lambda.sqrt();
                if norm > cap {
                    m.w *= cap / norm;
                }
            }
        }
        let f = m.decision_features(&phi);
        m.platt = platt(&f, y);
        Ok(m)
    }

    fn decision_features(&self, phi: &DMatrix<f64>) -> Vec<f64> {
        (phi * &self.w).iter().copied().collect()
    }

    pub fn decision(&self, x: &DMatrix<f64>) -> Vec<f64> {
        self.decision_features(&self.features(x))
    }

    pub fn predict_proba(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let (a, b) = self.platt;
        self.decision(x).into_iter().map(|f| sigmoid(a * f + b)).collect()
    }
}

/// One-hidden-layer tanh network with a softmax output, trained full-batch with Adam.
#[derive(Clone, Debug)]
pub struct MlpClassifier {
    w1: DMatrix<f64>,
    b1: DVector<f64>,
    w2: DMatrix<f64>,
    b2: DVector<f64>,
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamState {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) {
        self.t += 1;
        let (b1, b2) = (0.9f64, 0.999f64);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let mut k = 0;
        for (p, g) in params.iter_mut().zip(grads) {
            for (pi, &gi) in p.iter_mut().zip(g.iter()) {
                self.m[k] = b1 * self.m[k] + (1.0 - b1) * gi;
                self.v[k] = b2 * self.v[k] + (1.0 - b2) * gi * gi;
                *pi -= lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + 1e-8);
                k += 1;
            }
        }
    }
}

impl MlpClassifier {
    pub fn fit<R: Rng>(x: &DMatrix<f64>, y: &[usize], classes: usize, cfg: &ClassifierConfig, rng: &mut R) -> Result<Self> {
        if x.nrows() != y.len() || y.is_empty() {
            return Err(DaliError::Shape(format!("{} samples but {} labels", x.nrows(), y.len())));
        }
        if classes < 2 || y.iter().any(|&c| c >= classes) {
            return Err(DaliError::Invalid(format!("labels must lie in 0..{classes} with at least two classes")));
        }
        let (n, d, h) = (x.nrows(), x.ncols(), cfg.mlp_hidden);
        let s1 = (1.0 / d.max(1) as f64).sqrt();
        let s2 = (1.0 / h as f64).sqrt();
        let mut m = Self {
            w1: DMatrix::from_fn(d, h, |_, _| s1 * Distribution::<f64>::sample(&StandardNormal, rng)),
            b1: DVector::zeros(h),
            w2: DMatrix::from_fn(h, classes, |_, _| s2 * Distribution::<f64>::sample(&StandardNormal, rng)),
            b2: DVector::zeros(classes),
        };
        let onehot = DMatrix::from_fn(n, classes, |i, c| if y[i] == c { 1.0 } else { 0.0 });
        let mut adam = AdamState::new(d * h + h + h * classes + classes);
        for _ in 0..cfg.mlp_epochs {
            let (a1, p) = m.forward(x);
            let mut dz2 = p - &onehot;
            dz2 /= n as f64;
            let mut gw2 = a1.transpose() * &dz2;
            let gb2 = DVector::from_fn(classes, |c, _| dz2.column(c).sum());
            let mut da1 = &dz2 * m.w2.transpose();
            da1.zip_apply(&a1, |g, a| *g *= 1.0 - a * a);
            let mut gw1 = x.transpose() * &da1;
            let gb1 = DVector::from_fn(h, |j, _| da1.column(j).sum());
            gw1 += &m.w1 * cfg.mlp_weight_decay;
            gw2 += &m.w2 * cfg.mlp_weight_decay;
            adam.step(
                &mut [m.w1.as_mut_slice(), m.b1.as_mut_slice(), m.w2.as_mut_slice(), m.b2.as_mut_slice()],
                &[gw1.as_slice(), gb1.as_slice(), gw2.as_slice(), gb2.as_slice()],
                cfg.mlp_lr,
            );
        }
        Ok(m)
    }

    fn forward(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut a1 = x * &self.w1;
        for (j, mut col) in a1.column_iter_mut().enumerate() {
            col.apply(|v| *v = (*v + self.b1[j]).tanh());
        }
        let mut z = &a1 * &self.w2;
        for mut row in z.row_iter_mut() {
            let mut mx = f64::NEG_INFINITY;
            for (c, v) in row.iter_mut().enumerate() {
                *v += self.b2[c];
                mx = mx.max(*v);
            }
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row /= s;
        }
        (a1, z)
    }

    /// Class probabilities, one row per sample.
    pub fn predict_proba(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.forward(x).1
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<usize> {
        self.predict_proba(x).row_iter().map(|r| r.transpose().argmax().0).collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct Stump {
    feature: usize,
    threshold: f64,
    /// +1 predicts positive above the threshold.
    polarity: f64,
    alpha: f64,
}

/// Discrete AdaBoost over decision stumps.
#[derive(Clone, Debug)]
pub struct AdaBoost {
    stumps: Vec<Stump>,
}

impl AdaBoost {
    pub fn fit(x: &DMatrix<f64>, y: &[bool], cfg: &ClassifierConfig) -> Result<Self> {
        check_binary(x, y)?;
        let (n, d) = (x.nrows(), x.ncols());
        let ys: Vec<f64> = y.iter().map(|&v| if v { 1.0 } else { -1.0 }).collect();
        let orders: Vec<Vec<usize>> = (0..d)
            .map(|j| {
                let mut o: Vec<usize> = (0..n).collect();
                o.sort_by(|&a, &b| x[(a, j)].total_cmp(&x[(b, j)]));
                o
            })
            .collect();
        let mut w = vec![1.0 / n as f64; n];
        let mut stumps = Vec::with_capacity(cfg.stumps);
        for _ in 0..cfg.stumps {
            // weighted error of "positive above threshold" for every split
            let total_pos: f64 = w.iter().zip(&ys).filter(|(_, &y)| y > 0.0).map(|(w, _)| w).sum();
            let mut best = (f64::INFINITY, 0usize, f64::NEG_INFINITY, 1.0);
            for (j, order) in orders.iter().enumerate() {
                // threshold below everything: all predicted positive
                let mut err = 1.0 - total_pos;
                let consider = |err: f64, thr: f64, best: &mut (f64, usize, f64, f64)| {
                    if err < best.0 {
                        *best = (err, j, thr, 1.0);
                    }
                    if 1.0 - err < best.0 {
                        *best = (1.0 - err, j, thr, -1.0);
                    }
                };
                consider(err, f64::NEG_INFINITY, &mut best);
                for k in 0..n {
                    let i = order[k];
                    err += if ys[i] > 0.0 { w[i] } else { -w[i] };
                    let v = x[(i, j)];
                    if k + 1 < n && x[(order[k + 1], j)] == v {
                        continue;
                    }
                    let thr = if k + 1 < n { 0.5 * (v + x[(order[k + 1], j)]) } else { f64::INFINITY };
                    consider(err, thr, &mut best);
                }
            }
            let (err, feature, threshold, polarity) = best;
            let err = err.clamp(1e-10, 1.0 - 1e-10);
            if err >= 0.5 {
                break;
            }
            let alpha = 0.5 * ((1.0 - err) / err).ln();
            let s = Stump { feature, threshold, polarity, alpha };
            let mut z = 0.0;
            for i in 0..n {
                w[i] *= (-alpha * ys[i] * s.predict(x[(i, feature)])).exp();
                z += w[i];
            }
            for wi in &mut w {
                *wi /= z;
            }
            stumps.push(s);
        }
        Ok(Self { stumps })
    }

    pub fn decision(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.nrows()).map(|i| self.stumps.iter().map(|s| s.alpha * s.predict(x[(i, s.feature)])).sum()).collect()
    }

    /// `σ(2F)`, the additive-logistic reading of the boosted score.
    pub fn predict_proba(&self, x: &DMatrix<f64>) -> Vec<f64> {
        self.decision(x).into_iter().map(|f| sigmoid(2.0 * f)).collect()
    }
}

impl Stump {
    fn predict(&self, v: f64) -> f64 {
        if v > self.threshold {
            self.polarity
        } else {
            -self.polarity
        }
    }
}

/// Mean positive-class probability of the three families.
pub fn ensemble_proba<R: Rng>(
    train_x: &DMatrix<f64>,
    train_y: &[bool],
    test_x: &DMatrix<f64>,
    cfg: &ClassifierConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let svm = RffSvm::fit(train_x, train_y, cfg, rng)?.predict_proba(test_x);
    let labels: Vec<usize> = train_y.iter().map(|&v| v as usize).collect();
    let mlp = MlpClassifier::fit(train_x, &labels, 2, cfg, rng)?.predict_proba(test_x);
    let ada = AdaBoost::fit(train_x, train_y, cfg)?.predict_proba(test_x);
    Ok((0..test_x.nrows()).map(|i| (svm[i] + mlp[(i, 1)] + ada[i]) / 3.0).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn blobs(n: usize, shift: f64, seed: u64) -> (DMatrix<f64>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let x = DMatrix::from_fn(n, 3, |i, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z + if y[i] { shift } else { 0.0 }
        });
        (x, y)
    }

    fn accuracy(p: &[f64], y: &[bool]) -> f64 {
        p.iter().zip(y).filter(|(p, y)| (**p > 0.5) == **y).count() as f64 / y.len() as f64
    }

    #[test]
    fn every_family_separates_shifted_blobs() {
        let (x, y) = blobs(200, 4.0, 1);
        let (tx, ty) = blobs(100, 4.0, 2);
        let cfg = ClassifierConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(accuracy(&RffSvm::fit(&x, &y, &cfg, &mut rng).unwrap().predict_proba(&tx), &ty) > 0.9);
        let labels: Vec<usize> = y.iter().map(|&v| v as usize).collect();
        let mlp = MlpClassifier::fit(&x, &labels, 2, &cfg, &mut rng).unwrap();
        let p: Vec<f64> = mlp.predict_proba(&tx).column(1).iter().copied().collect();
        assert!(accuracy(&p, &ty) > 0.9);
        assert!(accuracy(&AdaBoost::fit(&x, &y, &cfg).unwrap().predict_proba(&tx), &ty) > 0.9);
    }

    #[test]
    fn xor_needs_the_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 400;
        let x = DMatrix::from_fn(n, 2, |_, _| rng.gen_range(-1.0..1.0));
        let y: Vec<bool> = (0..n).map(|i| x[(i, 0)] * x[(i, 1)] > 0.0).collect();
        let cfg = ClassifierConfig { rbf_gamma: Some(2.0), svm_epochs: 30, ..ClassifierConfig::default() };
        let svm = RffSvm::fit(&x, &y, &cfg, &mut rng).unwrap();
        assert!(accuracy(&svm.predict_proba(&x), &y) > 0.85);
    }

    #[test]
    fn single_class_is_rejected() {
        let x = DMatrix::zeros(4, 2);
        let cfg = ClassifierConfig::default();
        assert!(AdaBoost::fit(&x, &[true; 4], &cfg).is_err());
        assert!(RffSvm::fit(&x, &[false; 4], &cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn standardize_handles_constant_columns() {
        let mut x = DMatrix::from_row_slice(3, 2, &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0]);
        standardize(&mut x);
        assert!(x.column(0).sum().abs() < 1e-12);
        assert!(x.column(1).iter().all(|&v| v == 0.0));
    }
}

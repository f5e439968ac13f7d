//! Learning substrate: synthetic non-IID data, multinomial logistic
//! regression, local mini-batch SGD and the weighted global average.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mixes a master seed with a path of indices into an independent seed.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    path.iter().fold(mix(master), |acc, &p| mix(acc ^ mix(p)))
}

pub fn rng(master: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, path))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: usize,
    pub classes: usize,
    /// Row-major `len × features`.
    pub x: Vec<f64>,
    pub y: Vec<usize>,
}

impl Dataset {
    pub fn empty(features: usize, classes: usize) -> Self {
        Dataset {
            features,
            classes,
            x: Vec::new(),
            y: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.features..(i + 1) * self.features]
    }

    pub fn push(&mut self, x: &[f64], y: usize) {
        debug_assert_eq!(x.len(), self.features);
        self.x.extend_from_slice(x);
        self.y.push(y);
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &y in &self.y {
            c[y] += 1;
        }
        c
    }
}

/// Gaussian class-conditional clusters around fixed random means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub classes: usize,
    pub features: usize,
    pub means: Vec<Vec<f64>>,
    pub noise_std: f64,
}

impl SyntheticTask {
    pub fn new(classes: usize, features: usize, separation: f64, noise_std: f64, seed: u64) -> Result<Self> {
        if classes < 2 || features == 0 {
            return Err(Error::Config(format!(
                "synthetic task needs at least 2 classes and 1 feature, got {classes} and {features}"
            )));
        }
        if !(separation > 0.0 && noise_std > 0.0) {
            return Err(Error::Config("synthetic separation and noise must be positive".into()));
        }
        let mut r = rng(seed, &[0x7a5c]);
        let n = Normal::new(0.0, separation).map_err(|e| Error::Config(e.to_string()))?;
        let means = (0..classes)
            .map(|_| (0..features).map(|_| n.sample(&mut r)).collect())
            .collect();
        Ok(SyntheticTask {
            classes,
            features,
            means,
            noise_std,
        })
    }

    /// `n` samples with labels drawn uniformly at random.
    pub fn sample(&self, n: usize, seed: u64) -> Dataset {
        let mut r = rng(seed, &[0xda7a]);
        let noise = Normal::new(0.0, self.noise_std).expect("validated noise");
        let mut d = Dataset::empty(self.features, self.classes);
        let mut row = vec![0.0; self.features];
        for _ in 0..n {
            let y = r.random_range(0..self.classes);
            for (v, m) in row.iter_mut().zip(&self.means[y]) {
                *v = m + noise.sample(&mut r);
            }
            d.push(&row, y);
        }
        d
    }
}

pub fn synth_dataset(classes: usize, features: usize, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("dataset size must be positive".into()));
    }
    Ok(SyntheticTask::new(classes, features, 1.0, 1.0, seed)?.sample(n, seed))
}

/// Split `data` across `clients` with per-class shares drawn from a
/// symmetric Dirichlet(`alpha`). Empty clients take one sample from the
/// currently largest client.
pub fn dirichlet_partition(data: &Dataset, clients: usize, alpha: f64, seed: u64) -> Result<Vec<Dataset>> {
    if clients == 0 {
        return Err(Error::Config("number of clients must be at least 1".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("Dirichlet concentration must be positive, got {alpha}")));
    }
    if data.len() < clients {
        return Err(Error::Config(format!(
            "{} samples cannot cover {clients} clients",
            data.len()
        )));
    }
    let mut r = rng(seed, &[0xd1c1]);
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let mut owner: Vec<Vec<usize>> = vec![Vec::new(); clients];
    for c in 0..data.classes {
        let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data.y[i] == c).collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut r);
        let mut g: Vec<f64> = (0..clients).map(|_| gamma.sample(&mut r)).collect();
        let sum: f64 = g.iter().sum();
        if sum <= 0.0 {
            // every draw underflowed: put the class on one client
            g.iter_mut().for_each(|v| *v = 0.0);
            g[r.random_range(0..clients)] = 1.0;
        }
        let sum: f64 = g.iter().sum();
        let n = idx.len();
        let mut acc = 0.0;
        let mut start = 0;
        for (k, share) in g.iter().enumerate() {
            acc += share / sum;
            let end = if k + 1 == clients { n } else { ((acc * n as f64).round() as usize).min(n) };
            owner[k].extend_from_slice(&idx[start..end.max(start)]);
            start = end.max(start);
        }
    }
    while let Some(empty) = owner.iter().position(|o| o.is_empty()) {
        let largest = (0..clients).max_by_key(|&k| (owner[k].len(), std::cmp::Reverse(k))).expect("clients > 0");
        let moved = owner[largest].pop().expect("largest client is non-empty");
        owner[empty].push(moved);
    }
    Ok(owner
        .into_iter()
        .map(|mut ix| {
            ix.sort_unstable();
            let mut d = Dataset::empty(data.features, data.classes);
            for i in ix {
                d.push(data.row(i), data.y[i]);
            }
            d
        })
        .collect())
}

/// Multinomial logistic regression; parameters are the `classes × features`
/// weight matrix (row-major) followed by one bias per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub classes: usize,
    pub features: usize,
}

impl LogisticModel {
    pub fn new(classes: usize, features: usize) -> Self {
        LogisticModel { classes, features }
    }

    pub fn dim(&self) -> usize {
        self.classes * self.features + self.classes
    }

    pub fn zeros(&self) -> Vec<f64> {
        vec![0.0; self.dim()]
    }

    fn check(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.dim() {
            return Err(Error::Protocol(format!(
                "parameter vector has {} entries, model needs {}",
                w.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Class probabilities for one sample, written into `p`.
    fn probs(&self, w: &[f64], x: &[f64], p: &mut [f64]) {
        let bias = &w[self.classes * self.features..];
        for c in 0..self.classes {
            let row = &w[c * self.features..(c + 1) * self.features];
            p[c] = bias[c] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        let m = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in p.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in p.iter_mut() {
            *v /= z;
        }
    }

    /// Cross-entropy of one sample; adds its gradient into `grad` if given.
    pub fn sample_loss(&self, w: &[f64], x: &[f64], y: usize, grad: Option<&mut [f64]>) -> f64 {
        let mut p = vec![0.0; self.classes];
        self.probs(w, x, &mut p);
        let loss = -p[y].max(f64::MIN_POSITIVE).ln();
        if let Some(g) = grad {
            let off = self.classes * self.features;
            for c in 0..self.classes {
                let e = p[c] - if c == y { 1.0 } else { 0.0 };
                for (gj, xj) in g[c * self.features..(c + 1) * self.features].iter_mut().zip(x) {
                    *gj += e * xj;
                }
                g[off + c] += e;
            }
        }
        loss
    }

    /// Mean loss over `data` plus the optional proximal term
    /// `λ/2·‖w − anchor‖²`.
    pub fn objective(&self, w: &[f64], data: &Dataset, prox: f64, anchor: &[f64]) -> f64 {
        let mean = (0..data.len())
            .map(|i| self.sample_loss(w, data.row(i), data.y[i], None))
            .sum::<f64>()
            / data.len() as f64;
        let pen: f64 = w.iter().zip(anchor).map(|(a, b)| (a - b) * (a - b)).sum();
        mean + 0.5 * prox * pen
    }

    pub fn predict(&self, w: &[f64], x: &[f64]) -> usize {
        let mut p = vec![0.0; self.classes];
        self.probs(w, x, &mut p);
        // first maximum wins
        p.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
            .0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: u32,
    /// Proximal weight λ toward the previous global model.
    pub prox: f64,
    pub seed: u64,
    /// Index of the first epoch, so a run can be split across calls.
    pub first_epoch: u32,
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be non-negative, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.prox >= 0.0 && self.prox.is_finite()) {
            return Err(Error::Config(format!("regularization must be non-negative, got {}", self.prox)));
        }
        Ok(())
    }
}

/// Mini-batch SGD for `hp.epochs` epochs starting from `w_in`. Each epoch
/// reshuffles with a seed derived from `(hp.seed, epoch index)`.
pub fn local_sgd(model: &LogisticModel, w_in: &[f64], data: &Dataset, hp: &HyperParams, anchor: &[f64]) -> Result<Vec<f64>> {
    hp.validate()?;
    model.check(w_in)?;
    model.check(anchor)?;
    if data.is_empty() {
        return Err(Error::Config("local dataset is empty".into()));
    }
    let mut w = w_in.to_vec();
    let mut grad = vec![0.0; w.len()];
    let mut order: Vec<usize> = (0..data.len()).collect();
    for e in 0..hp.epochs {
        let epoch = hp.first_epoch + e;
        order.sort_unstable();
        order.shuffle(&mut rng(hp.seed, &[epoch as u64]));
        let mut loss = 0.0;
        for batch in order.chunks(hp.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                loss += model.sample_loss(&w, data.row(i), data.y[i], Some(&mut grad));
            }
            let scale = hp.learning_rate / batch.len() as f64;
            for ((wj, gj), aj) in w.iter_mut().zip(&grad).zip(anchor) {
                *wj -= scale * gj + hp.learning_rate * hp.prox * (*wj - aj);
            }
        }
        if !loss.is_finite() || w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { epoch });
        }
    }
    Ok(w)
}

/// How contribution parameters are presented to [`global_update`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Plain `w_k`; the update multiplies by `D_k`.
    #[default]
    Raw,
    /// Already `D_k · w_k`.
    PreWeighted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Contribution {
    /// Summation order key.
    pub id: usize,
    pub samples: u64,
    pub params: Vec<f64>,
}

/// `Σ D_k w_k / Σ D_k`, summed in ascending `id` order with compensation.
pub fn global_update(contributions: &[Contribution], weighting: Weighting) -> Result<Vec<f64>> {
    let first = contributions
        .first()
        .ok_or_else(|| Error::Protocol("global update with no contributions".into()))?;
    let dim = first.params.len();
    let mut sorted: Vec<&Contribution> = contributions.iter().collect();
    sorted.sort_by_key(|c| c.id);
    if let Some(bad) = sorted.iter().find(|c| c.params.len() != dim) {
        return Err(Error::Protocol(format!(
            "contribution {} has {} parameters, expected {dim}",
            bad.id,
            bad.params.len()
        )));
    }
    let total: u64 = sorted.iter().map(|c| c.samples).sum();
    if total == 0 {
        return Err(Error::Protocol("contributions carry zero samples".into()));
    }
    let mut sum = vec![0.0; dim];
    let mut comp = vec![0.0; dim];
    for c in &sorted {
        let d = match weighting {
            Weighting::Raw => c.samples as f64,
            Weighting::PreWeighted => 1.0,
        };
        for j in 0..dim {
            // Neumaier summation
            let v = d * c.params[j];
            let t = sum[j] + v;
            if sum[j].abs() >= v.abs() {
                comp[j] += (sum[j] - t) + v;
            } else {
                comp[j] += (v - t) + sum[j];
            }
            sum[j] = t;
        }
    }
    Ok(sum.iter().zip(&comp).map(|(s, c)| (s + c) / total as f64).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

pub fn evaluate(model: &LogisticModel, w: &[f64], test: &Dataset) -> Result<Evaluation> {
    model.check(w)?;
    if test.is_empty() {
        return Err(Error::Config("test set is empty".into()));
    }
    let mut correct = 0usize;
    let mut loss = 0.0;
    for i in 0..test.len() {
        let x = test.row(i);
        if model.predict(w, x) == test.y[i] {
            correct += 1;
        }
        loss += model.sample_loss(w, x, test.y[i], None);
    }
    let n = test.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        loss: loss / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};
    use rand_distr::Dirichlet;

    fn hp(lr: f64, batch: usize, epochs: u32) -> HyperParams {
        HyperParams {
            learning_rate: lr,
            batch_size: batch,
            epochs,
            prox: 0.0,
            seed: 11,
            first_epoch: 0,
        }
    }

    #[test]
    fn synth_is_deterministic() {
        assert_eq!(synth_dataset(2, 2, 100, 7).unwrap(), synth_dataset(2, 2, 100, 7).unwrap());
        assert_ne!(synth_dataset(2, 2, 100, 7).unwrap(), synth_dataset(2, 2, 100, 8).unwrap());
    }

    #[test]
    fn synth_priors_uniform() {
        let d = synth_dataset(10, 4, 10_000, 3).unwrap();
        for c in d.class_counts() {
            // ±5 standard deviations of a binomial(10000, 0.1)
            assert!((c as f64 - 1000.0).abs() < 150.0, "{c}");
        }
    }

    #[test]
    fn nearest_centroid_beats_chance() {
        let task = SyntheticTask::new(10, 8, 1.0, 1.0, 5).unwrap();
        let train = task.sample(2000, 1);
        let test = task.sample(1000, 2);
        let mut cent = vec![vec![0.0; 8]; 10];
        let counts = train.class_counts();
        for i in 0..train.len() {
            for (c, x) in cent[train.y[i]].iter_mut().zip(train.row(i)) {
                *c += x / counts[train.y[i]] as f64;
            }
        }
        let hits = (0..test.len())
            .filter(|&i| {
                let x = test.row(i);
                let best = (0..10)
                    .min_by(|&a, &b| {
                        let da: f64 = cent[a].iter().zip(x).map(|(c, v)| (c - v) * (c - v)).sum();
                        let db: f64 = cent[b].iter().zip(x).map(|(c, v)| (c - v) * (c - v)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                best == test.y[i]
            })
            .count();
        assert!(hits as f64 / 1000.0 > 0.2, "{hits}");
    }

    #[test]
    fn partition_identity_and_conservation() {
        let d = synth_dataset(10, 3, 500, 1).unwrap();
        let one = dirichlet_partition(&d, 1, 0.5, 4).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0], d);

        let parts = dirichlet_partition(&d, 40, 0.5, 4).unwrap();
        assert_eq!(parts.iter().map(Dataset::len).sum::<usize>(), 500);
        assert!(parts.iter().all(|p| !p.is_empty()));

        // tiny concentration still leaves nobody empty
        let sparse = dirichlet_partition(&d, 40, 1e-3, 4).unwrap();
        assert!(sparse.iter().all(|p| !p.is_empty()));

        assert!(matches!(dirichlet_partition(&d, 501, 0.5, 4), Err(Error::Config(_))));
    }

    #[test]
    fn partition_large_alpha_is_uniform() {
        let d = synth_dataset(4, 2, 40_000, 2).unwrap();
        let global: Vec<f64> = d.class_counts().iter().map(|&c| c as f64 / d.len() as f64).collect();
        for p in dirichlet_partition(&d, 5, 1e6, 3).unwrap() {
            let n = p.len() as f64;
            let tv: f64 = p.class_counts().iter().zip(&global).map(|(&c, g)| (c as f64 / n - g).abs()).sum::<f64>() / 2.0;
            assert!(tv < 0.05, "{tv}");
        }
    }

    fn entropy(counts: &[f64]) -> f64 {
        let n: f64 = counts.iter().sum();
        counts
            .iter()
            .filter(|&&c| c > 0.0)
            .map(|&c| -(c / n) * (c / n).ln())
            .sum()
    }

    fn ks(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let (mut i, mut j, mut d) = (0, 0, 0.0f64);
        while i < a.len() && j < b.len() {
            let x = a[i].min(b[j]);
            while i < a.len() && a[i] <= x {
                i += 1;
            }
            while j < b.len() && b[j] <= x {
                j += 1;
            }
            d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
        }
        d
    }

    #[test]
    fn partition_entropies_match_dirichlet_oracle() {
        let d = synth_dataset(10, 2, 5000, 9).unwrap();
        let counts = d.class_counts();
        let mut ours = Vec::new();
        let mut oracle = Vec::new();
        let dir = Dirichlet::new([0.5; 40]).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(1234);
        for rep in 0..5 {
            for p in dirichlet_partition(&d, 40, 0.5, 100 + rep).unwrap() {
                let h: Vec<f64> = p.class_counts().iter().map(|&c| c as f64).collect();
                ours.push(entropy(&h));
            }
            // expected per-client class mass straight from Dirichlet shares
            let shares: Vec<[f64; 40]> = (0..10).map(|_| dir.sample(&mut r)).collect();
            for k in 0..40 {
                let h: Vec<f64> = shares.iter().zip(&counts).map(|(s, &n)| (s[k] * n as f64).round()).collect();
                if h.iter().sum::<f64>() > 0.0 {
                    oracle.push(entropy(&h));
                } else {
                    oracle.push(0.0);
                }
            }
        }
        assert_eq!(ours.len(), 200);
        let stat = ks(ours, oracle);
        assert!(stat < 0.2, "KS {stat}");
    }

    #[test]
    fn zero_step_is_identity() {
        let m = LogisticModel::new(3, 2);
        let d = synth_dataset(3, 2, 30, 1).unwrap();
        let w: Vec<f64> = (0..m.dim()).map(|i| i as f64 * 0.1).collect();
        assert_eq!(local_sgd(&m, &w, &d, &hp(0.0, 4, 3), &w).unwrap(), w);
    }

    #[test]
    fn single_sample_step_matches_closed_form() {
        let m = LogisticModel::new(2, 2);
        let mut d = Dataset::empty(2, 2);
        d.push(&[1.0, 2.0], 1);
        let w = vec![0.0; m.dim()];
        let out = local_sgd(&m, &w, &d, &hp(0.5, 1, 1), &w).unwrap();
        // zero logits give p = (1/2, 1/2); gradient rows (p - e_y) x
        let want = [-0.25, -0.5, 0.25, 0.5, -0.25, 0.25];
        for (a, b) in out.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn prox_pulls_toward_anchor() {
        let m = LogisticModel::new(3, 2);
        let d = synth_dataset(3, 2, 20, 5).unwrap();
        let anchor = vec![0.0; m.dim()];
        let w_in = vec![1.0; m.dim()];
        let mut h = hp(0.001, 5, 2);
        h.prox = 500.0;
        let out = local_sgd(&m, &w_in, &d, &h, &anchor).unwrap();
        let dist = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(dist(&out) < dist(&w_in));
    }

    #[test]
    fn divergence_names_epoch() {
        let m = LogisticModel::new(2, 1);
        let mut d = Dataset::empty(1, 2);
        d.push(&[1e300], 0);
        d.push(&[-1e300], 1);
        let w = vec![0.0; m.dim()];
        let mut h = hp(1e10, 1, 3);
        h.first_epoch = 4;
        assert!(matches!(local_sgd(&m, &w, &d, &h, &w), Err(Error::Divergence { epoch: 4 })));
    }

    #[test]
    fn epochs_decompose() {
        let m = LogisticModel::new(4, 3);
        let d = synth_dataset(4, 3, 57, 2).unwrap();
        let w0 = vec![0.01; m.dim()];
        let full = local_sgd(&m, &w0, &d, &hp(0.1, 10, 5), &w0).unwrap();
        let a = local_sgd(&m, &w0, &d, &hp(0.1, 10, 2), &w0).unwrap();
        let mut second = hp(0.1, 10, 3);
        second.first_epoch = 2;
        let b = local_sgd(&m, &a, &d, &second, &w0).unwrap();
        assert_eq!(full, b);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = LogisticModel::new(4, 3);
        let task = SyntheticTask::new(4, 3, 1.0, 1.0, 8).unwrap();
        let data = task.sample(5, 8);
        let mut r = ChaCha8Rng::seed_from_u64(77);
        let mut worst = 0.0f64;
        for point in 0..100 {
            let w: Vec<f64> = (0..m.dim()).map(|_| r.random_range(-1.0..1.0)).collect();
            let anchor: Vec<f64> = (0..m.dim()).map(|_| r.random_range(-1.0..1.0)).collect();
            let prox = if point % 2 == 0 { 0.0 } else { 0.3 };
            let mut g = vec![0.0; m.dim()];
            for i in 0..data.len() {
                m.sample_loss(&w, data.row(i), data.y[i], Some(&mut g));
            }
            for (j, gj) in g.iter_mut().enumerate() {
                *gj = *gj / data.len() as f64 + prox * (w[j] - anchor[j]);
            }
            let h = 1e-6;
            for j in 0..m.dim() {
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp[j] += h;
                wm[j] -= h;
                let fd = (m.objective(&wp, &data, prox, &anchor) - m.objective(&wm, &data, prox, &anchor)) / (2.0 * h);
                let err = (fd - g[j]).abs() / g[j].abs().max(1e-3);
                worst = worst.max(err);
            }
        }
        assert!(worst <= 1e-5, "{worst}");
    }

    #[test]
    fn global_update_cases() {
        let c = |id, samples, params: Vec<f64>| Contribution { id, samples, params };
        let same = vec![c(0, 3, vec![1.5, -2.0]), c(1, 9, vec![1.5, -2.0])];
        assert_eq!(global_update(&same, Weighting::Raw).unwrap(), vec![1.5, -2.0]);
        let two = vec![c(0, 1, vec![0.0]), c(1, 3, vec![4.0])];
        assert_eq!(global_update(&two, Weighting::Raw).unwrap(), vec![3.0]);
        let pre = vec![c(0, 1, vec![0.0]), c(1, 3, vec![12.0])];
        assert_eq!(global_update(&pre, Weighting::PreWeighted).unwrap(), vec![3.0]);
        assert!(matches!(global_update(&[], Weighting::Raw), Err(Error::Protocol(_))));
        let bad = vec![c(0, 1, vec![0.0]), c(1, 1, vec![0.0, 1.0])];
        assert!(matches!(global_update(&bad, Weighting::Raw), Err(Error::Protocol(_))));
    }

    /// Double-double accumulation of the weighted mean.
    fn dd_mean(cs: &[Contribution], j: usize) -> f64 {
        fn two_sum(a: f64, b: f64) -> (f64, f64) {
            let s = a + b;
            let bb = s - a;
            (s, (a - (s - bb)) + (b - bb))
        }
        fn two_prod(a: f64, b: f64) -> (f64, f64) {
            let p = a * b;
            (p, a.mul_add(b, -p))
        }
        let (mut hi, mut lo) = (0.0, 0.0);
        for c in cs {
            let (p, pe) = two_prod(c.samples as f64, c.params[j]);
            let (s, e) = two_sum(hi, p);
            lo += e + pe;
            let (h2, l2) = two_sum(s, lo);
            hi = h2;
            lo = l2;
        }
        let total: u64 = cs.iter().map(|c| c.samples).sum();
        (hi + lo) / total as f64
    }

    proptest! {
        #[test]
        fn global_update_matches_high_precision(seed in any::<u64>()) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let mut cs: Vec<Contribution> = (0..40)
                .map(|id| Contribution {
                    id,
                    samples: r.random_range(1..500),
                    params: (0..16).map(|_| r.random_range(-10.0..10.0)).collect(),
                })
                .collect();
            let got = global_update(&cs, Weighting::Raw).unwrap();
            for (j, g) in got.iter().enumerate() {
                let want = dd_mean(&cs, j);
                prop_assert!((g - want).abs() <= 1e-12 * want.abs().max(1e-300), "{} vs {}", g, want);
            }
            cs.shuffle(&mut r);
            prop_assert_eq!(global_update(&cs, Weighting::Raw).unwrap(), got);
        }

        #[test]
        fn first_epoch_lowers_training_loss(seed in 0u64..1000) {
            let task = SyntheticTask::new(10, 8, 1.0, 1.0, seed).unwrap();
            let d = task.sample(200, seed);
            let m = LogisticModel::new(10, 8);
            let w0 = m.zeros();
            let mut h = hp(0.01, 10, 1);
            h.seed = seed;
            let w1 = local_sgd(&m, &w0, &d, &h, &w0).unwrap();
            prop_assert!(m.objective(&w1, &d, 0.0, &w0) < m.objective(&w0, &d, 0.0, &w0));
        }
    }

    #[test]
    fn zero_model_evaluation() {
        let m = LogisticModel::new(10, 4);
        let d = synth_dataset(10, 4, 2000, 6).unwrap();
        let e = evaluate(&m, &m.zeros(), &d).unwrap();
        let prior0 = d.class_counts()[0] as f64 / d.len() as f64;
        assert_eq!(e.accuracy, prior0);
        assert!((e.accuracy - 0.1).abs() < 0.05);
        assert!((e.loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn separable_set_trains_to_perfect() {
        let m = LogisticModel::new(2, 2);
        let mut d = Dataset::empty(2, 2);
        for i in 0..20 {
            let t = i as f64 * 0.1;
            d.push(&[1.0 + t, 1.0 - t], 0);
            d.push(&[-1.0 - t, -1.0 + t], 1);
        }
        let w0 = m.zeros();
        let w = local_sgd(&m, &w0, &d, &hp(0.5, 4, 50), &w0).unwrap();
        assert_eq!(evaluate(&m, &w, &d).unwrap().accuracy, 1.0);
    }
}

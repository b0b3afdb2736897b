//! Frozen text-embedding providers and the trainable Text Affine Layer.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::layers::{normal_vec, Linear};
use super::params::{join, push, push_mut, ParamMut, ParamRef, ParamSet};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Source of frozen label embeddings.
#[derive(Clone, Debug, PartialEq)]
pub enum TextEmbedder {
    /// Seeded hash of the label onto a fixed pseudo-random unit vector.
    Hashed { dim: usize, seed: u64 },
    /// Embeddings read from a `label<TAB>v1,v2,...` file.
    Table {
        dim: usize,
        table: BTreeMap<String, Vec<f64>>,
    },
}

impl TextEmbedder {
    pub fn hashed(dim: usize, seed: u64) -> Self {
        TextEmbedder::Hashed { dim, seed }
    }

    pub fn dim(&self) -> usize {
        match self {
            TextEmbedder::Hashed { dim, .. } | TextEmbedder::Table { dim, .. } => *dim,
        }
    }

    /// Parses the tab-separated embedding file format.
    pub fn parse_table(text: &str, dim: usize) -> Result<Self> {
        let mut table = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (label, values) = line.split_once('\t').ok_or_else(|| {
                Error::Config(format!(
                    "embedding line {}: missing tab separator",
                    lineno + 1
                ))
            })?;
            let vec = values
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Config(format!("embedding line {}: {e}", lineno + 1)))?;
            if vec.len() != dim {
                return Err(Error::Config(format!(
                    "embedding line {}: {} values, expected {dim}",
                    lineno + 1,
                    vec.len()
                )));
            }
            if vec.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("embedding for {label:?}")));
            }
            table.insert(label.to_string(), vec);
        }
        Ok(TextEmbedder::Table { dim, table })
    }

    pub fn load_table(path: &Path, dim: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_table(&text, dim)
    }

    pub fn embed(&self, label: &str) -> Result<Vec<f64>> {
        match self {
            TextEmbedder::Hashed { dim, seed } => {
                let mut h = Sha256::new();
                h.update(seed.to_le_bytes());
                h.update(label.as_bytes());
                let digest: [u8; 32] = h.finalize().into();
                let mut rng = ChaCha8Rng::from_seed(digest);
                let mut v: Vec<f64> = (0..*dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter_mut().for_each(|x| *x /= norm);
                Ok(v)
            }
            TextEmbedder::Table { table, .. } => table
                .get(label)
                .cloned()
                .ok_or_else(|| Error::MissingEmbedding(label.to_string())),
        }
    }

    /// Fails if two labels of `vocab` map to parallel embeddings.
    pub fn check_distinct(&self, vocab: &[String]) -> Result<()> {
        let embs = vocab
            .iter()
            .map(|l| self.embed(l))
            .collect::<Result<Vec<_>>>()?;
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                if cosine(&embs[i], &embs[j]) >= 1.0 - 1e-12 {
                    return Err(Error::Config(format!(
                        "labels {:?} and {:?} share an embedding",
                        vocab[i], vocab[j]
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const TAL_EPS: f64 = 1e-5;
pub const TAL_MOMENTUM: f64 = 0.1;

/// `y = BatchNorm(ReLU(x·W + b))`, refining frozen text embeddings into
/// prompt embeddings.
#[derive(Clone, Debug)]
pub struct TextAffineParams<T> {
    pub affine: Linear<T>,
    pub norm_gamma: Vec<T>,
    pub norm_beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

/// Batch statistics produced by a train-mode pass, applied separately so
/// the forward itself stays read-only.
#[derive(Clone, Debug)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub(crate) struct TalCache<T> {
    x: Vec<T>,
    pre: Vec<T>,
    xhat: Vec<T>,
    rstd: Vec<T>,
    batch: usize,
}

impl<T: Scalar> TextAffineParams<T> {
    pub fn new<R: rand::Rng>(rng: &mut R, text_dim: usize, prompt_dim: usize) -> Self {
        Self {
            affine: Linear {
                inp: text_dim,
                out: prompt_dim,
                weight: normal_vec(rng, text_dim * prompt_dim, 1.0 / (text_dim as f64).sqrt()),
                bias: vec![T::zero(); prompt_dim],
                shift: None,
                frozen: false,
            },
            norm_gamma: vec![T::one(); prompt_dim],
            norm_beta: vec![T::zero(); prompt_dim],
            running_mean: vec![T::zero(); prompt_dim],
            running_var: vec![T::one(); prompt_dim],
        }
    }

    pub fn text_dim(&self) -> usize {
        self.affine.inp
    }

    pub fn prompt_dim(&self) -> usize {
        self.affine.out
    }

    fn check_input(&self, x: &[T]) -> Result<usize> {
        let d = self.text_dim();
        if x.is_empty() || !x.len().is_multiple_of(d) {
            return Err(Error::Shape(format!(
                "text embedding batch of {} values is not a multiple of text_dim {d}",
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("text embedding".into()));
        }
        Ok(x.len() / d)
    }

    /// Affine map followed by the rectifier (pre-normalisation activations).
    pub fn rectified(&self, x: &[T], batch: usize) -> Vec<T> {
        let mut pre = self.affine.forward(x, batch);
        pre.iter_mut().for_each(|v| *v = v.max(T::zero()));
        pre
    }

    pub fn forward_eval(&self, x: &[T]) -> Result<Vec<T>> {
        let batch = self.check_input(x)?;
        let c = self.prompt_dim();
        let mut y = self.rectified(x, batch);
        for row in y.chunks_mut(c) {
            for (j, v) in row.iter_mut().enumerate() {
                let rs = T::one() / (self.running_var[j] + T::of(TAL_EPS)).sqrt();
                *v = (*v - self.running_mean[j]) * rs * self.norm_gamma[j] + self.norm_beta[j];
            }
        }
        Ok(y)
    }

    pub(crate) fn forward_train(&self, x: &[T]) -> Result<(Vec<T>, TalCache<T>, RunningStats<T>)> {
        let batch = self.check_input(x)?;
        if batch < 2 {
            return Err(Error::BatchTooSmall(batch));
        }
        let c = self.prompt_dim();
        let pre = self.rectified(x, batch);
        let bt = T::of(batch as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for row in pre.chunks(c) {
            for j in 0..c {
                mean[j] += row[j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= bt);
        for row in pre.chunks(c) {
            for j in 0..c {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= bt);
        let rstd: Vec<T> = var
            .iter()
            .map(|&v| T::one() / (v + T::of(TAL_EPS)).sqrt())
            .collect();
        let mut xhat = vec![T::zero(); pre.len()];
        let mut y = vec![T::zero(); pre.len()];
        for r in 0..batch {
            for j in 0..c {
                let h = (pre[r * c + j] - mean[j]) * rstd[j];
                xhat[r * c + j] = h;
                y[r * c + j] = h * self.norm_gamma[j] + self.norm_beta[j];
            }
        }
        let m = T::of(TAL_MOMENTUM);
        let unbias = bt / T::of((batch - 1) as f64);
        let stats = RunningStats {
            mean: (0..c)
                .map(|j| (T::one() - m) * self.running_mean[j] + m * mean[j])
                .collect(),
            var: (0..c)
                .map(|j| (T::one() - m) * self.running_var[j] + m * var[j] * unbias)
                .collect(),
        };
        let cache = TalCache {
            x: x.to_vec(),
            pre,
            xhat,
            rstd,
            batch,
        };
        Ok((y, cache, stats))
    }

    pub fn apply_running(&mut self, stats: RunningStats<T>) {
        self.running_mean = stats.mean;
        self.running_var = stats.var;
    }

    /// Mode-dispatching entry point; train mode updates the running statistics.
    pub fn text_affine(&mut self, x: &[T], mode: Mode) -> Result<Vec<T>> {
        match mode {
            Mode::Eval => self.forward_eval(x),
            Mode::Train => {
                let (y, _, stats) = self.forward_train(x)?;
                self.apply_running(stats);
                Ok(y)
            }
        }
    }

    pub(crate) fn backward_train(
        &self,
        cache: &TalCache<T>,
        dy: &[T],
        grad: &mut TextAffineParams<T>,
    ) {
        let c = self.prompt_dim();
        let b = cache.batch;
        let bt = T::of(b as f64);
        let mut dpre = vec![T::zero(); dy.len()];
        for j in 0..c {
            let mut sum = T::zero();
            let mut sum_xh = T::zero();
            for r in 0..b {
                let g = dy[r * c + j];
                let xh = cache.xhat[r * c + j];
                grad.norm_gamma[j] += g * xh;
                grad.norm_beta[j] += g;
                let dxh = g * self.norm_gamma[j];
                sum += dxh;
                sum_xh += dxh * xh;
            }
            for r in 0..b {
                let xh = cache.xhat[r * c + j];
                let dxh = dy[r * c + j] * self.norm_gamma[j];
                let d = cache.rstd[j] / bt * (bt * dxh - sum - xh * sum_xh);
                dpre[r * c + j] = if cache.pre[r * c + j] > T::zero() {
                    d
                } else {
                    T::zero()
                };
            }
        }
        self.affine
            .backward(&cache.x, &dpre, b, &mut grad.affine, false);
    }
}

impl<T: Scalar> ParamSet<T> for TextAffineParams<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        let c = self.prompt_dim();
        self.affine.collect(&join(prefix, "affine"), out);
        push(out, prefix, "norm.gamma", vec![c], &self.norm_gamma, true);
        push(out, prefix, "norm.beta", vec![c], &self.norm_beta, true);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        self.affine.collect_mut(&join(prefix, "affine"), out);
        push_mut(out, prefix, "norm.gamma", &mut self.norm_gamma, true);
        push_mut(out, prefix, "norm.beta", &mut self.norm_beta, true);
    }

    fn zero_grad(&self) -> Self {
        let c = self.prompt_dim();
        Self {
            affine: self.affine.zero_grad(),
            norm_gamma: vec![T::zero(); c],
            norm_beta: vec![T::zero(); c],
            running_mean: Vec::new(),
            running_var: Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tal(text_dim: usize, prompt_dim: usize) -> TextAffineParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        TextAffineParams::new(&mut rng, text_dim, prompt_dim)
    }

    fn batch(n: usize, d: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        normal_vec(&mut rng, n * d, 1.0)
    }

    #[test]
    fn train_mode_output_is_standardised() {
        let t = tal(6, 5);
        // large activations so that eps is negligible next to the batch variance
        let x: Vec<f64> = batch(8, 6, 1).iter().map(|v| v * 100.0).collect();
        let (y, cache, _) = t.forward_train(&x).unwrap();
        for j in 0..5 {
            let col: Vec<f64> = (0..8).map(|r| y[r * 5 + j]).collect();
            let mean = col.iter().sum::<f64>() / 8.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-5);
            // features that are dead across the batch normalise to zero variance
            let dead = (0..8).all(|r| cache.pre[r * 5 + j] == 0.0);
            if !dead {
                assert!((var - 1.0).abs() < 1e-5, "feature {j} var {var}");
            }
        }
    }

    #[test]
    fn pre_normalisation_is_non_negative() {
        let t = tal(6, 5);
        assert!(t.rectified(&batch(4, 6, 2), 4).iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn constant_bias_normalises_to_zero_in_eval() {
        let mut t = tal(4, 3);
        let c = 0.7;
        t.affine.weight.iter_mut().for_each(|w| *w = 0.0);
        t.affine.bias = vec![c; 3];
        t.running_mean = vec![c; 3];
        t.running_var = vec![TAL_EPS; 3];
        let y = t.forward_eval(&batch(1, 4, 3)).unwrap();
        assert!(y.iter().all(|v| v.abs() < 1e-12), "{y:?}");
    }

    #[test]
    fn batch_of_one_is_rejected_in_train_mode() {
        let mut t = tal(4, 3);
        assert!(matches!(
            t.text_affine(&batch(1, 4, 4), Mode::Train),
            Err(Error::BatchTooSmall(1))
        ));
        assert!(t.text_affine(&batch(1, 4, 4), Mode::Eval).is_ok());
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let t = tal(2, 2);
        assert!(t.forward_eval(&[f64::NAN, 0.0]).is_err());
        assert!(t.forward_eval(&[0.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn train_mode_updates_running_stats() {
        let mut t = tal(4, 3);
        let before = t.running_var.clone();
        t.text_affine(&batch(5, 4, 5), Mode::Train).unwrap();
        assert_ne!(before, t.running_var);
        assert!(t.running_var.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let t = tal(4, 3);
        let x = batch(5, 4, 6);
        let w = batch(5, 3, 7);
        let loss = |t: &TextAffineParams<f64>| -> f64 {
            let (y, _, _) = t.forward_train(&x).unwrap();
            y.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let (_, cache, _) = t.forward_train(&x).unwrap();
        let mut g = t.zero_grad();
        t.backward_train(&cache, &w, &mut g);
        let h = 1e-6;
        for i in 0..t.affine.weight.len() {
            let mut p = t.clone();
            p.affine.weight[i] += h;
            let mut m = t.clone();
            m.affine.weight[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!(
                (fd - g.affine.weight[i]).abs() < 1e-6,
                "w[{i}] {fd} vs {}",
                g.affine.weight[i]
            );
        }
        for j in 0..3 {
            let mut p = t.clone();
            p.norm_gamma[j] += h;
            let mut m = t.clone();
            m.norm_gamma[j] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - g.norm_gamma[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn hashed_embeddings_are_deterministic_and_distinct() {
        let e = TextEmbedder::hashed(16, 0);
        let a = e.embed("Grasper").unwrap();
        assert_eq!(a, e.embed("Grasper").unwrap());
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        let b = e.embed("Forceps").unwrap();
        assert!(cosine(&a, &b) < 1.0);
        e.check_distinct(&["Grasper".into(), "Forceps".into(), "Scissors".into()])
            .unwrap();
    }

    #[test]
    fn table_lookup_and_errors() {
        let e = TextEmbedder::parse_table("Grasper\t1,0,0\nForceps\t0, 1, 0\n", 3).unwrap();
        assert_eq!(e.embed("Forceps").unwrap(), vec![0.0, 1.0, 0.0]);
        assert!(matches!(
            e.embed("Scissors"),
            Err(Error::MissingEmbedding(_))
        ));
        assert!(TextEmbedder::parse_table("Grasper\t1,0\n", 3).is_err());
        assert!(TextEmbedder::parse_table("Grasper 1,0,0\n", 3).is_err());
    }
}

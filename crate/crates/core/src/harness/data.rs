//! Deterministic synthetic sequence-classification data.
//!
//! Each example is `seq_len` token vectors with uniform entries; the label
//! is the class whose hidden direction vector best matches the mean token.
//! Samples too close to the decision boundary are redrawn, so a small float
//! model separates the task cleanly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Token vector width produced by [`synth_dataset`].
pub const INPUT_DIM: usize = 16;

/// Minimum top1-top2 score margin accepted during generation.
const MARGIN: f64 = 0.45;

#[derive(Debug, Clone)]
pub struct Dataset {
    /// `n * seq_len * input_dim` values, row-major per token.
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    pub n: usize,
    pub seq_len: usize,
    pub input_dim: usize,
    pub classes: usize,
}

impl Dataset {
    /// Token block and label of example `i`.
    pub fn example(&self, i: usize) -> (&[f64], usize) {
        let stride = self.seq_len * self.input_dim;
        (&self.inputs[i * stride..(i + 1) * stride], self.labels[i])
    }

    /// Split off the first `n` examples. Both halves share the hidden
    /// class directions, so they are train/eval splits of one task.
    pub fn split(self, n: usize) -> (Dataset, Dataset) {
        assert!(n <= self.n);
        let stride = self.seq_len * self.input_dim;
        let head = Dataset {
            inputs: self.inputs[..n * stride].to_vec(),
            labels: self.labels[..n].to_vec(),
            n,
            ..self.clone()
        };
        let tail = Dataset {
            inputs: self.inputs[n * stride..].to_vec(),
            labels: self.labels[n..].to_vec(),
            n: self.n - n,
            ..self
        };
        (head, tail)
    }

    /// Fraction of examples carrying each label.
    pub fn label_fractions(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts.iter().map(|&c| c as f64 / self.n as f64).collect()
    }
}

/// Generate `n` labeled sequences. Identical arguments produce identical
/// datasets, bit for bit.
pub fn synth_dataset(seed: u64, n: usize, seq_len: usize, classes: usize) -> Dataset {
    synth_dataset_with_dim(seed, n, seq_len, classes, INPUT_DIM)
}

pub(crate) fn synth_dataset_with_dim(
    seed: u64,
    n: usize,
    seq_len: usize,
    classes: usize,
    input_dim: usize,
) -> Dataset {
    assert!(n > 0 && seq_len > 0 && classes >= 2 && input_dim > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Hidden unit-norm class directions.
    let mut directions = vec![0.0f64; classes * input_dim];
    for row in directions.chunks_mut(input_dim) {
        let mut norm = 0.0;
        for v in row.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
            norm += *v * *v;
        }
        let norm = norm.sqrt().max(1e-9);
        for v in row.iter_mut() {
            *v /= norm;
        }
    }

    let stride = seq_len * input_dim;
    let mut inputs = Vec::with_capacity(n * stride);
    let mut labels = Vec::with_capacity(n);
    let mut tokens = vec![0.0f64; stride];
    let mut mean = vec![0.0f64; input_dim];
    while labels.len() < n {
        for v in tokens.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        mean.fill(0.0);
        for token in tokens.chunks(input_dim) {
            for (m, &t) in mean.iter_mut().zip(token) {
                *m += t / seq_len as f64;
            }
        }
        let mut best = (0usize, f64::NEG_INFINITY);
        let mut second = f64::NEG_INFINITY;
        for (c, dir) in directions.chunks(input_dim).enumerate() {
            let score: f64 = dir.iter().zip(&mean).map(|(d, m)| d * m).sum();
            if score > best.1 {
                second = best.1;
                best = (c, score);
            } else if score > second {
                second = score;
            }
        }
        if best.1 - second < MARGIN {
            continue;
        }
        inputs.extend_from_slice(&tokens);
        labels.push(best.0);
    }

    Dataset {
        inputs,
        labels,
        n,
        seq_len,
        input_dim,
        classes,
    }
}

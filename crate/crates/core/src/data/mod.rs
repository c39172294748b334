//! Datasets, temporal encoding, augmentation and batch prefetch.

mod augment;
mod cifar;
mod prefetch;
mod synthetic;

pub use augment::{augment, hflip_sample, AugmentFlags};
pub use cifar::{load_cifar10, load_cifar10_pair, Split, CIFAR_RECORD_LEN};
pub use prefetch::{batch_plan, BatchStream};
pub use synthetic::{gen_synthetic, read_text, write_text};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Labelled samples. `inputs` is `[N, C, H, W]` for images or `[N, D]` for
/// feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<S> {
    pub inputs: Tensor<S>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl<S: Scalar> Dataset<S> {
    pub fn new(inputs: Tensor<S>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.shape().is_empty() || inputs.dim(0) != labels.len() {
            return Err(Error::Shape(format!(
                "{} labels for inputs of shape {:?}",
                labels.len(),
                inputs.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Config(format!("label {bad} outside 0..{num_classes}")));
        }
        if !inputs.is_finite() {
            return Err(Error::NonFinite("dataset inputs".into()));
        }
        Ok(Dataset {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of one sample, without the batch dimension.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    /// Gathers the given rows into a batch.
    pub fn gather(&self, idx: &[usize]) -> Result<(Tensor<S>, Vec<usize>)> {
        let k = self.sample_len();
        let mut data = Vec::with_capacity(idx.len() * k);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.len() {
                return Err(Error::Shape(format!("sample {i} of {}", self.len())));
            }
            data.extend_from_slice(&self.inputs.data()[i * k..(i + 1) * k]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(self.sample_shape());
        Ok((Tensor::new(&shape, data)?, labels))
    }

    /// Keeps the first `n` samples.
    pub fn truncate(&mut self, n: usize) {
        if n >= self.len() {
            return;
        }
        let k = self.sample_len();
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = n;
        let data = self.inputs.data()[..n * k].to_vec();
        self.inputs = Tensor::new(&shape, data).expect("prefix keeps shape consistent");
        self.labels.truncate(n);
    }
}

/// Per-channel affine normalization. Feature-vector inputs treat every
/// feature as its own channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization<S> {
    pub mean: Vec<S>,
    pub std: Vec<S>,
}

fn channel_view(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape[0];
    match shape.len() {
        2 => (n, shape[1], 1),
        _ => (n, shape.get(1).copied().unwrap_or(1), shape[2..].iter().product()),
    }
}

impl<S: Scalar> Normalization<S> {
    /// Population statistics of `x`; a zero spread is replaced by 1.
    pub fn fit(x: &Tensor<S>) -> Result<Self> {
        let (n, c, inner) = channel_view(x.shape());
        if n * inner == 0 {
            return Err(Error::EmptyInput("normalization statistics".into()));
        }
        let d = x.data();
        let count = S::lit((n * inner) as f64);
        let mut mean = vec![S::zero(); c];
        let mut std = vec![S::zero(); c];
        for ch in 0..c {
            let mut s = S::zero();
            for i in 0..n {
                let base = (i * c + ch) * inner;
                s = s + d[base..base + inner].iter().copied().sum::<S>();
            }
            let m = s / count;
            let mut v = S::zero();
            for i in 0..n {
                let base = (i * c + ch) * inner;
                v = v + d[base..base + inner].iter().map(|&a| (a - m) * (a - m)).sum::<S>();
            }
            let sd = (v / count).sqrt();
            mean[ch] = m;
            std[ch] = if sd > S::lit(1e-12) { sd } else { S::one() };
        }
        Ok(Normalization { mean, std })
    }

    pub fn apply(&self, x: &mut Tensor<S>) -> Result<()> {
        let (_, c, inner) = channel_view(x.shape());
        if c != self.mean.len() {
            return Err(Error::Shape(format!(
                "normalization for {} channels applied to {c}",
                self.mean.len()
            )));
        }
        for (i, chunk) in x.data_mut().chunks_mut(inner).enumerate() {
            let ch = i % c;
            let (m, s) = (self.mean[ch], self.std[ch]);
            chunk.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        Ok(())
    }
}

/// Input currents for every timestep plus labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedBatch<S> {
    pub steps: Vec<Tensor<S>>,
    pub labels: Vec<usize>,
}

impl<S: Scalar> EncodedBatch<S> {
    /// Direct encoding: the analog input is the current at every step.
    pub fn direct(x: &Tensor<S>, labels: Vec<usize>, t: usize) -> Result<Self> {
        if t == 0 {
            return Err(Error::Contract("direct encoding needs T >= 1".into()));
        }
        if x.shape().first() != Some(&labels.len()) {
            return Err(Error::Shape(format!(
                "{} labels for a batch of shape {:?}",
                labels.len(),
                x.shape()
            )));
        }
        let mut step = x.clone();
        step.requires_grad = false;
        step.grad = None;
        Ok(EncodedBatch {
            steps: vec![step; t],
            labels,
        })
    }

    pub fn timesteps(&self) -> usize {
        self.steps.len()
    }

    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }

    /// The same inputs at a different number of steps.
    pub fn with_timesteps(&self, t: usize) -> Result<Self> {
        let first = self
            .steps
            .first()
            .ok_or_else(|| Error::Contract("empty encoded batch".into()))?;
        Self::direct(first, self.labels.clone(), t)
    }
}

/// Direct encoding of a dataset slice.
pub fn direct_encode<S: Scalar>(x: &Tensor<S>, labels: &[usize], t: usize) -> Result<EncodedBatch<S>> {
    EncodedBatch::direct(x, labels.to_vec(), t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn direct_encode_repeats_input() {
        let x = Tensor::new(&[2, 3], vec![0.1, -2.0, 3.5, 0.0, 1.0, 7.25]).unwrap();
        let one = direct_encode(&x, &[0, 1], 1).unwrap();
        assert_eq!(one.steps, vec![x.clone()]);
        let many = direct_encode(&x, &[0, 1], 6).unwrap();
        assert!(many.steps.iter().all(|s| s == &many.steps[0]));
        assert!(direct_encode(&x, &[0, 1], 0).is_err());
        assert!(direct_encode(&x, &[0], 2).is_err());
    }

    #[test]
    fn normalization_zero_mean_unit_std() {
        let x = Tensor::new(&[2, 2, 1, 2], vec![1.0, 3.0, 10.0, 10.0, 5.0, 7.0, 10.0, 10.0]).unwrap();
        let norm = Normalization::fit(&x).unwrap();
        assert_eq!(norm.mean, vec![4.0, 10.0]);
        assert_eq!(norm.std[1], 1.0);
        let mut y = x.clone();
        norm.apply(&mut y).unwrap();
        let again = Normalization::fit(&y).unwrap();
        assert!(again.mean.iter().all(|m: &f64| m.abs() < 1e-12));
        assert!((again.std[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dataset_rejects_bad_labels_and_gathers_rows() {
        let x = Tensor::new(&[3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert!(Dataset::new(x.clone(), vec![0, 1, 2], 2).is_err());
        let ds = Dataset::new(x, vec![0, 1, 1], 2).unwrap();
        let (b, y) = ds.gather(&[2, 0]).unwrap();
        assert_eq!(b.data(), &[4.0, 5.0, 0.0, 1.0]);
        assert_eq!(y, vec![1, 0]);
        assert!(ds.gather(&[3]).is_err());
    }
}

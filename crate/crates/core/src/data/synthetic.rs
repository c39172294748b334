use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Dataset, Normalization};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const TEXT_MAGIC: &str = "resd-dataset v1";

/// Gaussian class blobs: every class gets a random unit-variance centre and
/// its samples are centre plus `noise`-scaled Gaussian noise. Samples are
/// interleaved by class and normalized per channel.
pub fn gen_synthetic<S: Scalar>(
    num_classes: usize,
    n_per_class: usize,
    dim: &[usize],
    noise: f64,
    seed: u64,
) -> Result<Dataset<S>> {
    if num_classes < 2 {
        return Err(Error::Config("synthetic data needs at least 2 classes".into()));
    }
    if dim.is_empty() || dim.contains(&0) {
        return Err(Error::Config(format!("invalid sample shape {dim:?}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Config(format!("noise must be finite and >= 0, got {noise}")));
    }
    let k: usize = dim.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..k).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let n = num_classes * n_per_class;
    let mut data = Vec::with_capacity(n * k);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % num_classes;
        for &c in &centres[y] {
            let e: f64 = StandardNormal.sample(&mut rng);
            data.push(S::lit(c + noise * e));
        }
        labels.push(y);
    }
    let mut shape = vec![n];
    shape.extend_from_slice(dim);
    let mut inputs = Tensor::new(&shape, data)?;
    if n > 0 {
        Normalization::fit(&inputs)?.apply(&mut inputs)?;
    }
    Dataset::new(inputs, labels, num_classes)
}

/// Writes a dataset as text: a magic line, `shape`, `classes`, then one
/// `label v0 v1 ...` line per sample. Values are printed in shortest
/// round-trip form.
pub fn write_text<S: Scalar>(ds: &Dataset<S>, path: &Path) -> Result<()> {
    let mut out = String::new();
    let dims: Vec<String> = ds.inputs.shape().iter().map(usize::to_string).collect();
    let _ = writeln!(out, "{TEXT_MAGIC}");
    let _ = writeln!(out, "shape {}", dims.join(" "));
    let _ = writeln!(out, "classes {}", ds.num_classes);
    let k = ds.sample_len();
    for (i, y) in ds.labels.iter().enumerate() {
        let _ = write!(out, "{y}");
        for v in &ds.inputs.data()[i * k..(i + 1) * k] {
            let _ = write!(out, " {:?}", v.as_f64());
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_text<S: Scalar>(path: &Path) -> Result<Dataset<S>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let bad = |msg: &str| Error::Format {
        offset: 0,
        msg: format!("{}: {msg}", path.display()),
    };
    if lines.next() != Some(TEXT_MAGIC) {
        return Err(bad("missing header"));
    }
    let shape: Vec<usize> = lines
        .next()
        .and_then(|l| l.strip_prefix("shape "))
        .ok_or_else(|| bad("missing shape line"))?
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad("bad shape"))?;
    let classes: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("classes "))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| bad("missing classes line"))?;
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for line in lines {
        let mut it = line.split_whitespace();
        let y = it.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad("bad label"))?;
        labels.push(y);
        for v in it {
            data.push(S::lit(v.parse::<f64>().map_err(|_| bad("bad value"))?));
        }
    }
    Dataset::new(Tensor::new(&shape, data)?, labels, classes)
}

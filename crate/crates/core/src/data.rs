//! Labeled examples, the seeded synthetic stripe task and dataset files.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tensorfile::{self, find_f32, NamedTensor};

/// One clip: one or more `[H, W, C]` patches and a class index.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub patches: Vec<Tensor<f32>>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

impl Dataset {
    pub fn one_hot(&self, label: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.num_classes];
        v[label] = 1.0;
        v
    }

    pub fn split(&self, name: &str) -> Result<&[Example]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}` (train, val, test)"))),
        }
    }
}

/// Parameters of the synthetic stripe task. Each class is a Gaussian
/// stripe with its own orientation (along time or along frequency) and
/// position; examples add amplitude and position jitter, weaker distractor
/// stripes and white noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub shape: [usize; 3],
    pub noise: f64,
    /// Standard deviation of the stripe position, in pixels.
    pub jitter: f64,
    /// Stripe width (Gaussian standard deviation), in pixels.
    pub width: f64,
    /// Constant displacement of every class position, in pixels.
    pub offset: f64,
    pub distractors: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            per_class: 50,
            shape: crate::model::TOY_INPUT,
            noise: 0.5,
            jitter: 1.0,
            width: 1.2,
            offset: 0.0,
            distractors: 1,
            seed: 0,
        }
    }
}

fn stripe(patch: &mut [f32], shape: [usize; 3], vertical: bool, pos: f64, width: f64, amp: f64) {
    let [h, w, c] = shape;
    for y in 0..h {
        for x in 0..w {
            let d = if vertical { y as f64 - pos } else { x as f64 - pos };
            let v = amp * (-d * d / (2.0 * width * width)).exp();
            for ch in 0..c {
                patch[(y * w + x) * c + ch] += v as f32;
            }
        }
    }
}

fn class_stripe(cfg: &SynthConfig, class: usize) -> (bool, f64) {
    let [h, w, _] = cfg.shape;
    let vertical = class % 2 == 1;
    let slots = cfg.classes.div_ceil(2);
    let extent = if vertical { h } else { w } as f64;
    let pos = (class / 2) as f64 + 0.5;
    (vertical, pos * extent / slots as f64 + cfg.offset)
}

fn synth_example(cfg: &SynthConfig, class: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n = cfg.shape.iter().product();
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).expect("nonnegative std");
    let mut data: Vec<f32> = (0..n).map(|_| noise.sample(rng) as f32).collect();
    let (vertical, pos) = class_stripe(cfg, class);
    let jitter = Normal::new(0.0, cfg.jitter.max(0.0)).expect("nonnegative std");
    let amp = rng.gen_range(0.7..1.3);
    stripe(&mut data, cfg.shape, vertical, pos + jitter.sample(rng), cfg.width, amp);
    for _ in 0..cfg.distractors {
        let other = rng.gen_range(0..cfg.classes);
        let (v, p) = class_stripe(cfg, other);
        stripe(&mut data, cfg.shape, v, p + jitter.sample(rng) * 2.0, cfg.width, rng.gen_range(0.2..0.5));
    }
    Tensor::new(cfg.shape.to_vec(), data).expect("shape matches")
}

/// Balanced synthetic dataset split 0.8 / 0.1 / 0.1 within each class.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.classes < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {}", cfg.classes)));
    }
    if cfg.shape.contains(&0) {
        return Err(Error::InvalidDimension(format!("patch shape {:?}", cfg.shape)));
    }
    if cfg.per_class == 0 {
        return Err(Error::InvalidArgument("per-class count must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    let n_test = cfg.per_class / 10;
    let n_val = cfg.per_class / 10;
    for class in 0..cfg.classes {
        for i in 0..cfg.per_class {
            let ex = Example { patches: vec![synth_example(cfg, class, &mut rng)], label: class };
            if i < n_test {
                test.push(ex);
            } else if i < n_test + n_val {
                val.push(ex);
            } else {
                train.push(ex);
            }
        }
    }
    train.shuffle(&mut rng);
    val.shuffle(&mut rng);
    test.shuffle(&mut rng);
    Ok(Dataset { num_classes: cfg.classes, train, val, test })
}

fn split_tensors(name: &str, examples: &[Example], out: &mut Vec<NamedTensor>) -> Result<()> {
    let Some(first) = examples.first() else {
        out.push(NamedTensor::f32(format!("{name}/labels"), Tensor::new(vec![0], vec![])?));
        return Ok(());
    };
    let p = first.patches.len();
    let shape = first.patches[0].shape().to_vec();
    let mut data = Vec::new();
    for ex in examples {
        if ex.patches.len() != p || ex.patches.iter().any(|t| t.shape() != shape.as_slice()) {
            return Err(Error::Shape(format!("split `{name}` mixes clip layouts")));
        }
        for t in &ex.patches {
            data.extend_from_slice(t.data());
        }
    }
    let mut dims = vec![examples.len(), p];
    dims.extend(&shape);
    out.push(NamedTensor::f32(format!("{name}/patches"), Tensor::new(dims, data)?));
    let labels = examples.iter().map(|e| e.label as f32).collect();
    out.push(NamedTensor::f32(format!("{name}/labels"), Tensor::new(vec![examples.len()], labels)?));
    Ok(())
}

fn read_split(name: &str, tensors: &[NamedTensor]) -> Result<Vec<Example>> {
    let labels = find_f32(tensors, &format!("{name}/labels"))?;
    if labels.is_empty() {
        return Ok(Vec::new());
    }
    let patches = find_f32(tensors, &format!("{name}/patches"))?;
    let dims = patches.shape();
    if dims.len() < 3 || dims[0] != labels.len() {
        return Err(Error::Malformed(format!("split `{name}` has patches {dims:?} for {} labels", labels.len())));
    }
    let (n, p) = (dims[0], dims[1]);
    let shape = dims[2..].to_vec();
    let size: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let clip = (0..p)
            .map(|j| {
                let start = (i * p + j) * size;
                Tensor::new(shape.clone(), patches.data()[start..start + size].to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        let l = labels.data()[i];
        if l < 0.0 || l.fract() != 0.0 {
            return Err(Error::Malformed(format!("label {l} is not a class index")));
        }
        out.push(Example { patches: clip, label: l as usize });
    }
    Ok(out)
}

/// Stores splits as `<split>/patches` `[N, P, H, W, C]` and `<split>/labels` `[N]`.
pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut tensors = vec![NamedTensor::f32("num_classes", Tensor::new(vec![1], vec![ds.num_classes as f32])?)];
    for (name, split) in [("train", &ds.train), ("val", &ds.val), ("test", &ds.test)] {
        split_tensors(name, split, &mut tensors)?;
    }
    tensorfile::save_tensors(path, &tensors)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let tensors = tensorfile::load_tensors(path)?;
    let num_classes = find_f32(&tensors, "num_classes")?.data().first().copied().unwrap_or(0.0) as usize;
    let ds = Dataset {
        num_classes,
        train: read_split("train", &tensors)?,
        val: read_split("val", &tensors)?,
        test: read_split("test", &tensors)?,
    };
    if let Some(bad) = ds.train.iter().chain(&ds.val).chain(&ds.test).find(|e| e.label >= num_classes) {
        return Err(Error::Malformed(format!("label {} out of range for {num_classes} classes", bad.label)));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig { per_class: 20, seed: 7, ..SynthConfig::default() }
    }

    #[test]
    fn deterministic_and_balanced() {
        let a = synth_dataset(&small()).unwrap();
        assert_eq!(a, synth_dataset(&small()).unwrap());
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (160, 20, 20));
        for split in [&a.train, &a.val, &a.test] {
            let mut hist = [0; 10];
            for e in split.iter() {
                hist[e.label] += 1;
            }
            assert!(hist.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn nearest_centroid_beats_chance() {
        let ds = synth_dataset(&SynthConfig { per_class: 40, ..small() }).unwrap();
        let n = 24 * 16;
        let mut centroids = vec![vec![0.0f64; n]; 10];
        let mut counts = vec![0.0; 10];
        for e in &ds.train {
            for (c, v) in centroids[e.label].iter_mut().zip(e.patches[0].data()) {
                *c += *v as f64;
            }
            counts[e.label] += 1.0;
        }
        for (c, k) in centroids.iter_mut().zip(&counts) {
            c.iter_mut().for_each(|v| *v /= k);
        }
        let correct = ds
            .test
            .iter()
            .filter(|e| {
                let score = |c: &Vec<f64>| -> f64 {
                    c.iter().zip(e.patches[0].data()).map(|(a, b)| a * *b as f64).sum::<f64>()
                        - 0.5 * c.iter().map(|a| a * a).sum::<f64>()
                };
                let best =
                    (0..10).max_by(|&a, &b| score(&centroids[a]).partial_cmp(&score(&centroids[b])).unwrap()).unwrap();
                best == e.label
            })
            .count();
        assert!(correct as f64 / ds.test.len() as f64 > 0.2);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(synth_dataset(&SynthConfig { classes: 1, ..small() }).is_err());
        assert!(synth_dataset(&SynthConfig { shape: [0, 16, 1], ..small() }).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let ds = synth_dataset(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.tsed");
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
    }
}

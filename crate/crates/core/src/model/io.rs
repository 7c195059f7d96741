//! Model files: a JSON architecture descriptor next to a tensor blob.
//!
//! `save_model(m, "net.tsed")` writes the weights to `net.tsed` and the
//! descriptor to `net.json`.

use std::fs;
use std::path::{Path, PathBuf};

use super::weights::{expected_shapes, LayerParams, Model, ModelWeights};
use super::ModelArch;
use crate::error::{Error, Result};
use crate::tensorfile::{self, find_f32, NamedTensor};

pub const WEIGHTS_EXTENSION: &str = "tsed";
pub const ARCH_EXTENSION: &str = "json";

pub fn arch_path(weights: &Path) -> PathBuf {
    weights.with_extension(ARCH_EXTENSION)
}

pub(crate) fn weight_tensors(model: &Model<f32>) -> Vec<NamedTensor> {
    model
        .arch
        .layers
        .iter()
        .zip(&model.weights.layers)
        .flat_map(|(layer, params)| {
            params
                .tensors()
                .into_iter()
                .map(move |(suffix, t)| NamedTensor::f32(format!("{}/{suffix}", layer.name), t.clone()))
        })
        .collect()
}

pub(crate) fn weights_from_tensors(arch: &ModelArch, tensors: &[NamedTensor]) -> Result<ModelWeights<f32>> {
    let shapes = expected_shapes(arch)?;
    let mut layers = Vec::with_capacity(arch.layers.len());
    for (layer, want) in arch.layers.iter().zip(shapes) {
        let mut got = Vec::with_capacity(want.len());
        for (suffix, shape) in &want {
            let name = format!("{}/{suffix}", layer.name);
            let t = find_f32(tensors, &name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "tensor `{name}` has shape {:?}, architecture needs {shape:?}",
                    t.shape()
                )));
            }
            got.push(t.clone());
        }
        let mut it = got.into_iter();
        let mut next = || it.next().expect("count matches expected shapes");
        let params = match want.len() {
            0 => LayerParams::None,
            _ => match &layer.kind {
                super::LayerKind::Conv2d { .. } => LayerParams::Conv { kernel: next(), bias: next() },
                super::LayerKind::Dense { .. } => LayerParams::Dense { weight: next(), bias: next() },
                super::LayerKind::BatchNorm => {
                    LayerParams::BatchNorm { gamma: next(), beta: next(), mean: next(), var: next() }
                }
                super::LayerKind::Recurrent { .. } => {
                    LayerParams::Recurrent { input: next(), recurrent: next(), bias: next() }
                }
                _ => LayerParams::None,
            },
        };
        layers.push(params);
    }
    let expected: usize = layers.iter().map(|p| p.tensors().len()).sum();
    if expected != tensors.len() {
        return Err(Error::Shape(format!(
            "file holds {} tensors, architecture `{}` needs {expected}",
            tensors.len(),
            arch.name
        )));
    }
    Ok(ModelWeights { layers })
}

pub fn save_model(model: &Model<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(arch_path(path), serde_json::to_string_pretty(&model.arch)?)?;
    tensorfile::save_tensors(path, &weight_tensors(model))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model<f32>> {
    let path = path.as_ref();
    let arch: ModelArch = serde_json::from_str(&fs::read_to_string(arch_path(path))?)?;
    let tensors = tensorfile::load_tensors(path)?;
    let weights = weights_from_tensors(&arch, &tensors)?;
    Model::new(arch, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{preset, LayerKind};

    #[test]
    fn save_load_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m20k.tsed");
        let m = Model::<f32>::init(preset("M20k").unwrap(), 9).unwrap();
        save_model(&m, &path).unwrap();
        let first = fs::read(&path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back, m);
        save_model(&back, &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
    }

    #[test]
    fn truncated_file_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.tsed");
        let m = Model::<f32>::init(preset("toy_student").unwrap(), 1).unwrap();
        save_model(&m, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Malformed(_))));
    }

    #[test]
    fn shape_mismatch_against_declared_arch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.tsed");
        let m = Model::<f32>::init(preset("toy_student").unwrap(), 1).unwrap();
        save_model(&m, &path).unwrap();
        let mut arch = m.arch.clone();
        arch.layers[0].kind = match arch.layers[0].kind.clone() {
            LayerKind::Conv2d { padding, activation, .. } => LayerKind::Conv2d { out_channels: 8, padding, activation },
            k => k,
        };
        fs::write(arch_path(&path), serde_json::to_string(&arch).unwrap()).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Shape(_))));
    }

    #[test]
    fn non_multiple_of_four_channels_load_fine() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("odd.tsed");
        let mut arch = preset("toy_student").unwrap();
        if let LayerKind::Conv2d { out_channels, .. } = &mut arch.layers[0].kind {
            *out_channels = 3;
        }
        let m = Model::<f32>::init(arch, 1).unwrap();
        save_model(&m, &path).unwrap();
        assert_eq!(load_model(&path).unwrap(), m);
    }
}

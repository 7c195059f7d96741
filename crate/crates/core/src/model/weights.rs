use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{shape_trace, Activation, LayerKind, ModelArch, Shape, KERNEL};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const BN_EPSILON: f64 = 1e-5;

/// Parameters of one layer. Parameter-free layers hold [`LayerParams::None`].
#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams<T> {
    None,
    /// Kernel laid out `[3, 3, in_channels, out_channels]` (HWCF).
    Conv {
        kernel: Tensor<T>,
        bias: Tensor<T>,
    },
    /// Weight laid out `[in, out]`.
    Dense {
        weight: Tensor<T>,
        bias: Tensor<T>,
    },
    BatchNorm {
        gamma: Tensor<T>,
        beta: Tensor<T>,
        mean: Tensor<T>,
        var: Tensor<T>,
    },
    /// Gate blocks are stacked along the output axis in the order
    /// update, reset, candidate (GRU) or a single block (vanilla).
    Recurrent {
        input: Tensor<T>,
        recurrent: Tensor<T>,
        bias: Tensor<T>,
    },
}

impl<T> LayerParams<T> {
    /// `(suffix, tensor)` pairs in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match self {
            LayerParams::None => vec![],
            LayerParams::Conv { kernel, bias } => vec![("kernel", kernel), ("bias", bias)],
            LayerParams::Dense { weight, bias } => vec![("weight", weight), ("bias", bias)],
            LayerParams::BatchNorm { gamma, beta, mean, var } => {
                vec![("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)]
            }
            LayerParams::Recurrent { input, recurrent, bias } => {
                vec![("input_kernel", input), ("recurrent_kernel", recurrent), ("bias", bias)]
            }
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        match self {
            LayerParams::None => vec![],
            LayerParams::Conv { kernel, bias } => vec![("kernel", kernel), ("bias", bias)],
            LayerParams::Dense { weight, bias } => vec![("weight", weight), ("bias", bias)],
            LayerParams::BatchNorm { gamma, beta, mean, var } => {
                vec![("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)]
            }
            LayerParams::Recurrent { input, recurrent, bias } => {
                vec![("input_kernel", input), ("recurrent_kernel", recurrent), ("bias", bias)]
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn map<U>(&self, mut f: impl FnMut(&Tensor<T>) -> Tensor<U>) -> LayerParams<U> {
        match self {
            LayerParams::None => LayerParams::None,
            LayerParams::Conv { kernel, bias } => LayerParams::Conv { kernel: f(kernel), bias: f(bias) },
            LayerParams::Dense { weight, bias } => LayerParams::Dense { weight: f(weight), bias: f(bias) },
            LayerParams::BatchNorm { gamma, beta, mean, var } => {
                LayerParams::BatchNorm { gamma: f(gamma), beta: f(beta), mean: f(mean), var: f(var) }
            }
            LayerParams::Recurrent { input, recurrent, bias } => {
                LayerParams::Recurrent { input: f(input), recurrent: f(recurrent), bias: f(bias) }
            }
        }
    }
}

type NamedShapes = Vec<(&'static str, Vec<usize>)>;

/// Parameter shapes expected by `arch`, one entry per layer.
pub(crate) fn expected_shapes(arch: &ModelArch) -> Result<Vec<NamedShapes>> {
    let trace = shape_trace(arch)?;
    Ok(arch
        .layers
        .iter()
        .zip(&trace)
        .map(|(layer, t)| match (&layer.kind, t.input) {
            (LayerKind::Conv2d { out_channels, .. }, Shape::Spatial { c, .. }) => {
                vec![("kernel", vec![KERNEL, KERNEL, c, *out_channels]), ("bias", vec![*out_channels])]
            }
            (LayerKind::Dense { units, .. }, input) => {
                vec![("weight", vec![input.elements(), *units]), ("bias", vec![*units])]
            }
            (LayerKind::BatchNorm, input) => {
                let c = input.channels();
                vec![("gamma", vec![c]), ("beta", vec![c]), ("mean", vec![c]), ("var", vec![c])]
            }
            (LayerKind::Recurrent { mode, hidden }, input) => {
                let g = mode.gates() * hidden;
                vec![
                    ("input_kernel", vec![input.elements(), g]),
                    ("recurrent_kernel", vec![*hidden, g]),
                    ("bias", vec![g]),
                ]
            }
            _ => vec![],
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<T> {
    pub layers: Vec<LayerParams<T>>,
}

impl<T: Real> ModelWeights<T> {
    pub fn cast<U: Real>(&self) -> ModelWeights<U> {
        ModelWeights { layers: self.layers.iter().map(|p| p.map(|t| t.cast())).collect() }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|p| p.param_count()).sum()
    }

    /// Checks every tensor against the shapes implied by `arch`.
    pub fn check(&self, arch: &ModelArch) -> Result<()> {
        let expected = expected_shapes(arch)?;
        if expected.len() != self.layers.len() {
            return Err(Error::Shape(format!("{} parameter groups for {} layers", self.layers.len(), expected.len())));
        }
        for ((layer, params), want) in arch.layers.iter().zip(&self.layers).zip(&expected) {
            let have = params.tensors();
            let same = have.len() == want.len()
                && have.iter().zip(want).all(|((hn, ht), (wn, ws))| hn == wn && ht.shape() == ws.as_slice());
            if !same {
                let have: Vec<_> = have.iter().map(|(n, t)| (*n, t.shape().to_vec())).collect();
                return Err(Error::Shape(format!("layer `{}`: parameters {have:?}, expected {want:?}", layer.name)));
            }
        }
        Ok(())
    }
}

/// Architecture plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub arch: ModelArch,
    pub weights: ModelWeights<T>,
}

impl<T: Real> Model<T> {
    pub fn new(arch: ModelArch, weights: ModelWeights<T>) -> Result<Self> {
        arch.validate()?;
        weights.check(&arch)?;
        Ok(Self { arch, weights })
    }

    /// He-normal conv/dense kernels, Glorot-uniform recurrent kernels, zero
    /// biases, identity batch norm.
    pub fn init(arch: ModelArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = expected_shapes(&arch)?;
        let layers =
            arch.layers.iter().zip(shapes).map(|(layer, shapes)| init_layer(&layer.kind, &shapes, &mut rng)).collect();
        Ok(Self { arch, weights: ModelWeights { layers } })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model { arch: self.arch.clone(), weights: self.weights.cast() }
    }

    pub fn param_count(&self) -> usize {
        self.weights.param_count()
    }
}

fn init_layer<T: Real>(
    kind: &LayerKind,
    shapes: &[(&'static str, Vec<usize>)],
    rng: &mut ChaCha8Rng,
) -> LayerParams<T> {
    let zeros = |i: usize| Tensor::<T>::zeros(shapes[i].1.clone());
    let he = |i: usize, fan_in: usize, rng: &mut ChaCha8Rng| {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        Tensor::from_fn(shapes[i].1.clone(), |_| T::of(normal.sample(rng)))
    };
    match kind {
        LayerKind::Conv2d { .. } => {
            let s = &shapes[0].1;
            let fan_in = s[0] * s[1] * s[2];
            LayerParams::Conv { kernel: he(0, fan_in, rng), bias: zeros(1) }
        }
        LayerKind::Dense { .. } => {
            let fan_in = shapes[0].1[0];
            LayerParams::Dense { weight: he(0, fan_in, rng), bias: zeros(1) }
        }
        LayerKind::BatchNorm => {
            let ones = |i: usize| Tensor::from_fn(shapes[i].1.clone(), |_| T::one());
            LayerParams::BatchNorm { gamma: ones(0), beta: zeros(1), mean: zeros(2), var: ones(3) }
        }
        LayerKind::Recurrent { .. } => {
            let mut glorot = |i: usize| {
                let s = &shapes[i].1;
                let limit = (6.0 / (s[0] + s[1]) as f64).sqrt();
                Tensor::from_fn(s.clone(), |_| T::of(rng.gen_range(-limit..limit)))
            };
            LayerParams::Recurrent { input: glorot(0), recurrent: glorot(1), bias: zeros(2) }
        }
        _ => LayerParams::None,
    }
}

/// Folds every batch-norm layer into the linear dense layer before it:
/// `w' = w * s`, `b' = (b - mean) * s + beta` with `s = gamma / sqrt(var + eps)`.
pub fn fold_batchnorm<T: Real>(model: &Model<T>) -> Result<Model<T>> {
    let mut layers = Vec::with_capacity(model.arch.layers.len());
    let mut params: Vec<LayerParams<T>> = Vec::with_capacity(layers.capacity());
    for (spec, p) in model.arch.layers.iter().zip(&model.weights.layers) {
        let LayerParams::BatchNorm { gamma, beta, mean, var } = p else {
            layers.push(spec.clone());
            params.push(p.clone());
            continue;
        };
        let prev_ok = matches!(
            layers.last().map(|l: &super::LayerSpec| &l.kind),
            Some(LayerKind::Dense { activation: Activation::None, .. })
        );
        let Some(LayerParams::Dense { weight, bias }) = params.last_mut().filter(|_| prev_ok) else {
            return Err(Error::Unsupported(format!(
                "batch norm `{}` must follow a dense layer without activation",
                spec.name
            )));
        };
        let eps = T::of(BN_EPSILON);
        let scale: Vec<T> = gamma.data().iter().zip(var.data()).map(|(&g, &v)| g / (v + eps).sqrt()).collect();
        let units = scale.len();
        for (i, w) in weight.data_mut().iter_mut().enumerate() {
            *w *= scale[i % units];
        }
        for (j, b) in bias.data_mut().iter_mut().enumerate() {
            *b = (*b - mean.data()[j]) * scale[j] + beta.data()[j];
        }
        if spec.embedding_tap {
            layers.last_mut().expect("dense precedes").embedding_tap = true;
        }
    }
    let arch = ModelArch { layers, ..model.arch.clone() };
    Model::new(arch, ModelWeights { layers: params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::preset;

    #[test]
    fn init_matches_arch_and_counts_params() {
        let m = Model::<f32>::init(preset("M20k").unwrap(), 1).unwrap();
        assert_eq!(m.param_count(), 30_606);
        m.weights.check(&m.arch).unwrap();
    }

    #[test]
    fn check_rejects_wrong_shape() {
        let mut m = Model::<f32>::init(preset("toy_student").unwrap(), 1).unwrap();
        m.weights.layers[0] =
            LayerParams::Conv { kernel: Tensor::zeros(vec![3, 3, 1, 5]), bias: Tensor::zeros(vec![5]) };
        assert!(matches!(m.weights.check(&m.arch), Err(Error::Shape(_))));
    }

    #[test]
    fn identity_bn_fold_is_near_noop() {
        let m = Model::<f64>::init(preset("toy_student").unwrap(), 2).unwrap();
        let folded = fold_batchnorm(&m).unwrap();
        assert_eq!(folded.arch.layers.len(), m.arch.layers.len() - 1);
        assert!(!folded.arch.layers.iter().any(|l| l.kind == LayerKind::BatchNorm));
        let fc = m.arch.layer_index("fc1").unwrap();
        let (LayerParams::Dense { weight: a, .. }, LayerParams::Dense { weight: b, .. }) =
            (&m.weights.layers[fc], &folded.weights.layers[fc])
        else {
            panic!("fc1 is dense");
        };
        assert!(a.max_abs_diff(b) < 1e-5);
    }

    #[test]
    fn fold_without_bn_is_unchanged() {
        let mut m = Model::<f64>::init(preset("toy_student").unwrap(), 3).unwrap();
        let bn = m.arch.layer_index("bn").unwrap();
        m.arch.layers.remove(bn);
        m.weights.layers.remove(bn);
        assert_eq!(fold_batchnorm(&m).unwrap(), m);
    }

    #[test]
    fn fold_rejects_bn_after_relu() {
        let mut m = Model::<f64>::init(preset("toy_teacher").unwrap(), 3).unwrap();
        let fc = m.arch.layer_index("fc2").unwrap();
        m.arch.layers[fc].kind = LayerKind::Dense { units: 32, activation: Activation::Relu };
        assert!(matches!(fold_batchnorm(&m), Err(Error::Unsupported(_))));
    }
}

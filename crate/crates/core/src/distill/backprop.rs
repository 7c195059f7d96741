//! Reverse-mode gradients for the feedforward layer family.

use super::loss::{logit_grad, LossTerms, LossWeights, Target};
use crate::error::{Error, Result};
use crate::exec::{apply_layer, softmax};
use crate::model::{Activation, LayerKind, LayerParams, Model, Padding, BN_EPSILON, KERNEL};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Gradients laid out like the model's parameters. Batch-norm running
/// statistics are frozen and always hold zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T> {
    pub layers: Vec<LayerParams<T>>,
}

impl<T: Real> Grads<T> {
    pub fn zeros_like(model: &Model<T>) -> Self {
        Self { layers: model.weights.layers.iter().map(|p| p.map(|t| Tensor::zeros(t.shape().to_vec()))).collect() }
    }

    pub fn add(&mut self, other: &Grads<T>) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for ((_, x), (_, y)) in a.tensors_mut().into_iter().zip(b.tensors()) {
                for (u, &v) in x.data_mut().iter_mut().zip(y.data()) {
                    *u += v;
                }
            }
        }
    }

    /// All gradient values in parameter order (for norms and checks).
    pub fn flatten(&self) -> Vec<T> {
        self.layers.iter().flat_map(|p| p.tensors().into_iter().flat_map(|(_, t)| t.data().to_vec())).collect()
    }
}

/// Suffixes of parameters that gradient descent updates.
pub fn is_trainable(suffix: &str) -> bool {
    !matches!(suffix, "mean" | "var")
}

/// Checks that every layer belongs to the trainable family.
pub fn check_trainable(model: &Model<impl Real>) -> Result<()> {
    if let Some(l) = model.arch.layers.iter().find(|l| matches!(l.kind, LayerKind::Recurrent { .. })) {
        return Err(Error::Unsupported(format!("recurrent layer `{}` cannot be trained", l.name)));
    }
    Ok(())
}

/// Input and every layer output of one forward pass: `outs[0]` is the
/// input, `outs[i + 1]` the output of layer `i`.
pub(crate) fn forward_cached<T: Real>(model: &Model<T>, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    if x.shape() != model.arch.input_shape {
        return Err(Error::Shape(format!("input shape {:?}, model expects {:?}", x.shape(), model.arch.input_shape)));
    }
    let mut outs = Vec::with_capacity(model.arch.layers.len() + 1);
    outs.push(x.clone());
    for (l, p) in model.arch.layers.iter().zip(&model.weights.layers) {
        let y = apply_layer(&l.kind, p, outs.last().expect("nonempty"))?;
        outs.push(y);
    }
    Ok(outs)
}

fn mask_relu<T: Real>(dy: &mut [T], y: &[T], act: Activation) {
    if act == Activation::Relu {
        for (d, &v) in dy.iter_mut().zip(y) {
            if v <= T::zero() {
                *d = T::zero();
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    padding: Padding,
    dy: &[T],
    gk: &mut [T],
    gb: &mut [T],
    need_dx: bool,
) -> Option<Vec<T>> {
    let [h, w, c] = *x.shape() else { unreachable!("checked by forward") };
    let f = kernel.shape()[3];
    let pad = if padding == Padding::Same { 1 } else { 0 };
    let (oh, ow) = (h + 2 * pad + 1 - KERNEL, w + 2 * pad + 1 - KERNEL);
    let (xd, kd) = (x.data(), kernel.data());
    let mut dx = if need_dx { vec![T::zero(); xd.len()] } else { Vec::new() };
    for oy in 0..oh {
        for ox in 0..ow {
            let g = &dy[(oy * ow + ox) * f..(oy * ow + ox + 1) * f];
            if g.iter().all(|v| *v == T::zero()) {
                continue;
            }
            for (b, &v) in gb.iter_mut().zip(g) {
                *b += v;
            }
            for ky in 0..KERNEL {
                let iy = oy + ky;
                if iy < pad || iy - pad >= h {
                    continue;
                }
                let iy = iy - pad;
                for kx in 0..KERNEL {
                    let ix = ox + kx;
                    if ix < pad || ix - pad >= w {
                        continue;
                    }
                    let ix = ix - pad;
                    let xi = (iy * w + ix) * c;
                    let kbase = (ky * KERNEL + kx) * c * f;
                    for ci in 0..c {
                        let xv = xd[xi + ci];
                        let kr = kbase + ci * f;
                        let gk_row = &mut gk[kr..kr + f];
                        for (a, &v) in gk_row.iter_mut().zip(g) {
                            *a += xv * v;
                        }
                        if need_dx {
                            let k_row = &kd[kr..kr + f];
                            let mut s = T::zero();
                            for (&k, &v) in k_row.iter().zip(g) {
                                s += k * v;
                            }
                            dx[xi + ci] += s;
                        }
                    }
                }
            }
        }
    }
    need_dx.then_some(dx)
}

fn pool_backward<T: Real>(x: &Tensor<T>, y: &Tensor<T>, dy: &[T]) -> Vec<T> {
    let [h, w, c] = *x.shape() else { unreachable!("checked by forward") };
    let ow = w.div_ceil(2);
    let (xd, yd) = (x.data(), y.data());
    let mut dx = vec![T::zero(); xd.len()];
    let mut routed = vec![false; yd.len()];
    for yy in 0..h {
        for xx in 0..w {
            let o = ((yy / 2) * ow + xx / 2) * c;
            let i = (yy * w + xx) * c;
            for ch in 0..c {
                if !routed[o + ch] && xd[i + ch] == yd[o + ch] {
                    routed[o + ch] = true;
                    dx[i + ch] = dy[o + ch];
                }
            }
        }
    }
    dx
}

/// Compound loss and its gradient, summed over the batch.
pub fn backprop_grads<T: Real>(
    model: &Model<T>,
    inputs: &[&Tensor<T>],
    targets: &[&Target],
    w: LossWeights,
) -> Result<(LossTerms, Grads<T>)> {
    let trainable = vec![true; model.arch.layers.len()];
    backprop_masked(model, inputs, targets, w, &trainable)
}

/// As [`backprop_grads`], leaving gradients of frozen layers at zero and
/// stopping the backward pass below the lowest trainable layer.
pub(crate) fn backprop_masked<T: Real>(
    model: &Model<T>,
    inputs: &[&Tensor<T>],
    targets: &[&Target],
    w: LossWeights,
    trainable: &[bool],
) -> Result<(LossTerms, Grads<T>)> {
    check_trainable(model)?;
    w.validate()?;
    if inputs.len() != targets.len() {
        return Err(Error::Shape(format!("{} inputs for {} targets", inputs.len(), targets.len())));
    }
    let layers = &model.arch.layers;
    let params = &model.weights.layers;
    let sm = layers.len() - 1;
    let tap = model.arch.embedding_index();
    if w.alpha_e > 0.0 && tap.is_none() {
        return Err(Error::InvalidArgument(format!("`{}` has no embedding tap", model.arch.name)));
    }
    let lowest = trainable.iter().position(|&t| t).unwrap_or(layers.len());
    let mut grads = Grads::zeros_like(model);
    let mut terms = LossTerms::default();
    for (x, target) in inputs.iter().zip(targets) {
        let outs = forward_cached(model, x)?;
        let logits = &outs[sm];
        let probs: Vec<f64> = softmax(logits.data()).iter().map(|v| v.as_f64()).collect();
        let emb: Option<Vec<f64>> = tap.map(|t| outs[t + 1].data().iter().map(|v| v.as_f64()).collect());
        let t = target.terms(&probs, emb.as_deref(), w)?;
        terms.hard += t.hard;
        terms.soft += t.soft;
        terms.embedding += t.embedding;
        let mut dy: Vec<T> = logit_grad(&probs, target, w)?.into_iter().map(T::of).collect();
        for i in (0..sm).rev() {
            if i < lowest {
                break;
            }
            if tap == Some(i) && w.alpha_e > 0.0 {
                let v_t = target.embedding.as_deref().expect("checked by terms");
                let v_s = emb.as_deref().expect("tap present");
                for ((d, &s), &t) in dy.iter_mut().zip(v_s).zip(v_t) {
                    *d += T::of(2.0 * w.alpha_e * (s - t));
                }
            }
            let (x, y) = (&outs[i], &outs[i + 1]);
            let need_dx = i > lowest;
            let train = trainable[i];
            let g = &mut grads.layers[i];
            dy = match (&layers[i].kind, &params[i], g) {
                (
                    LayerKind::Conv2d { padding, activation, .. },
                    LayerParams::Conv { kernel, .. },
                    LayerParams::Conv { kernel: gk, bias: gb },
                ) => {
                    mask_relu(&mut dy, y.data(), *activation);
                    if train {
                        conv_backward(x, kernel, *padding, &dy, gk.data_mut(), gb.data_mut(), need_dx)
                    } else {
                        let mut sk = vec![T::zero(); kernel.len()];
                        let mut sb = vec![T::zero(); kernel.shape()[3]];
                        conv_backward(x, kernel, *padding, &dy, &mut sk, &mut sb, need_dx)
                    }
                    .unwrap_or_default()
                }
                (LayerKind::MaxPool2, _, _) => pool_backward(x, y, &dy),
                (LayerKind::Flatten, _, _) => dy,
                (
                    LayerKind::Dense { activation, .. },
                    LayerParams::Dense { weight, .. },
                    LayerParams::Dense { weight: gw, bias: gb },
                ) => {
                    mask_relu(&mut dy, y.data(), *activation);
                    let n_out = dy.len();
                    let (xd, wd) = (x.data(), weight.data());
                    if train {
                        let gwd = gw.data_mut();
                        for (ii, &xv) in xd.iter().enumerate() {
                            if xv != T::zero() {
                                for (a, &d) in gwd[ii * n_out..(ii + 1) * n_out].iter_mut().zip(&dy) {
                                    *a += xv * d;
                                }
                            }
                        }
                        for (b, &d) in gb.data_mut().iter_mut().zip(&dy) {
                            *b += d;
                        }
                    }
                    if need_dx {
                        (0..xd.len())
                            .map(|ii| {
                                let mut s = T::zero();
                                for (&wv, &d) in wd[ii * n_out..(ii + 1) * n_out].iter().zip(&dy) {
                                    s += wv * d;
                                }
                                s
                            })
                            .collect()
                    } else {
                        Vec::new()
                    }
                }
                (
                    LayerKind::BatchNorm,
                    LayerParams::BatchNorm { gamma, mean, var, .. },
                    LayerParams::BatchNorm { gamma: gg, beta: gbeta, .. },
                ) => {
                    let c = gamma.len();
                    let eps = T::of(BN_EPSILON);
                    let inv: Vec<T> = var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                    if train {
                        let (ggd, gbd) = (gg.data_mut(), gbeta.data_mut());
                        for (k, (&d, &xv)) in dy.iter().zip(x.data()).enumerate() {
                            let ch = k % c;
                            ggd[ch] += d * (xv - mean.data()[ch]) * inv[ch];
                            gbd[ch] += d;
                        }
                    }
                    dy.iter().enumerate().map(|(k, &d)| d * gamma.data()[k % c] * inv[k % c]).collect()
                }
                (kind, _, _) => {
                    return Err(Error::Unsupported(format!("no gradient for {kind:?} in layer `{}`", layers[i].name)))
                }
            };
        }
    }
    Ok((terms, grads))
}

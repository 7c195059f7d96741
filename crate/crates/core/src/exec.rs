//! Float-precision reference forward pass.

use crate::error::{Error, Result};
use crate::model::{Activation, LayerKind, LayerParams, Model, Padding, RecurrentMode, KERNEL};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[inline]
fn activate<T: Real>(v: T, act: Activation) -> T {
    match act {
        Activation::None => v,
        Activation::Relu => v.max(T::zero()),
    }
}

#[inline]
pub fn sigmoid<T: Real>(v: T) -> T {
    let x = v.as_f64();
    T::of(1.0 / (1.0 + (-x).exp()))
}

#[inline]
pub fn tanh<T: Real>(v: T) -> T {
    T::of(v.as_f64().tanh())
}

fn spatial(x: &Tensor<impl Copy>, what: &str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(Error::Shape(format!("{what} expects an HxWxC tensor, got {s:?}"))),
    }
}

/// 3x3 stride-1 cross-correlation. `kernel` is `[3, 3, C, F]`.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    padding: Padding,
    activation: Activation,
) -> Result<Tensor<T>> {
    let (h, w, c) = spatial(x, "conv2d")?;
    let [kh, kw, kc, f] = *kernel.shape() else {
        return Err(Error::Shape(format!("conv kernel must be rank 4, got {:?}", kernel.shape())));
    };
    if kh != KERNEL || kw != KERNEL || kc != c || bias.shape() != [f] {
        return Err(Error::Shape(format!(
            "conv kernel {:?} / bias {:?} do not fit a {h}x{w}x{c} input",
            kernel.shape(),
            bias.shape()
        )));
    }
    let pad = match padding {
        Padding::Valid => 0,
        Padding::Same => 1,
    };
    if h + 2 * pad < KERNEL || w + 2 * pad < KERNEL {
        return Err(Error::InvalidDimension(format!("{h}x{w} input is smaller than the kernel")));
    }
    let (oh, ow) = (h + 2 * pad + 1 - KERNEL, w + 2 * pad + 1 - KERNEL);
    let xd = x.data();
    let kd = kernel.data();
    let mut out = vec![T::zero(); oh * ow * f];
    for oy in 0..oh {
        for ox in 0..ow {
            let acc = &mut out[(oy * ow + ox) * f..(oy * ow + ox + 1) * f];
            acc.copy_from_slice(bias.data());
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
                    let xrow = &xd[(iy * w + ix) * c..(iy * w + ix + 1) * c];
                    let kbase = (ky * KERNEL + kx) * c * f;
                    for (ci, &xv) in xrow.iter().enumerate() {
                        let krow = &kd[kbase + ci * f..kbase + (ci + 1) * f];
                        for (a, &k) in acc.iter_mut().zip(krow) {
                            *a += xv * k;
                        }
                    }
                }
            }
            for a in acc.iter_mut() {
                *a = activate(*a, activation);
            }
        }
    }
    Tensor::new(vec![oh, ow, f], out)
}

/// 2x2 stride-2 max pooling; a trailing odd row/column is pooled over the
/// partial window.
pub fn maxpool2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = spatial(x, "maxpool2")?;
    if h == 0 || w == 0 {
        return Err(Error::InvalidDimension("empty pooling input".into()));
    }
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let xd = x.data();
    let mut out = vec![T::neg_infinity(); oh * ow * c];
    for y in 0..h {
        for xx in 0..w {
            let o = ((y / 2) * ow + xx / 2) * c;
            let i = (y * w + xx) * c;
            for ch in 0..c {
                out[o + ch] = out[o + ch].max(xd[i + ch]);
            }
        }
    }
    Tensor::new(vec![oh, ow, c], out)
}

/// `act(x W + b)` with `W` laid out `[in, out]`.
pub fn dense<T: Real>(x: &[T], weight: &Tensor<T>, bias: &Tensor<T>, activation: Activation) -> Result<Vec<T>> {
    let [n_in, n_out] = *weight.shape() else {
        return Err(Error::Shape(format!("dense weight must be rank 2, got {:?}", weight.shape())));
    };
    if n_in != x.len() || bias.shape() != [n_out] {
        return Err(Error::Shape(format!(
            "dense weight {:?} / bias {:?} do not fit input of length {}",
            weight.shape(),
            bias.shape(),
            x.len()
        )));
    }
    let mut out = bias.data().to_vec();
    matvec_acc(x, weight.data(), n_out, &mut out);
    for v in out.iter_mut() {
        *v = activate(*v, activation);
    }
    Ok(out)
}

/// `out += x W` for a row-major `[x.len(), n_out]` matrix.
#[inline]
pub(crate) fn matvec_acc<T: Real>(x: &[T], w: &[T], n_out: usize, out: &mut [T]) {
    for (i, &xv) in x.iter().enumerate() {
        if xv == T::zero() {
            continue;
        }
        let row = &w[i * n_out..(i + 1) * n_out];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += xv * wv;
        }
    }
}

fn check_recurrent<T: Real>(
    x: &[T],
    h: &[T],
    input: &Tensor<T>,
    recurrent: &Tensor<T>,
    bias: &Tensor<T>,
    gates: usize,
) -> Result<()> {
    let g = gates * h.len();
    if input.shape() != [x.len(), g] || recurrent.shape() != [h.len(), g] || bias.shape() != [g] {
        return Err(Error::Shape(format!(
            "recurrent params {:?}/{:?}/{:?} do not fit input {} and state {}",
            input.shape(),
            recurrent.shape(),
            bias.shape(),
            x.len(),
            h.len()
        )));
    }
    Ok(())
}

/// `h' = tanh(x W + h U + b)`.
pub fn vanilla_cell<T: Real>(
    x: &[T],
    h: &[T],
    input: &Tensor<T>,
    recurrent: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Vec<T>> {
    check_recurrent(x, h, input, recurrent, bias, 1)?;
    let mut pre = bias.data().to_vec();
    matvec_acc(x, input.data(), h.len(), &mut pre);
    matvec_acc(h, recurrent.data(), h.len(), &mut pre);
    Ok(pre.into_iter().map(tanh).collect())
}

/// GRU with gate blocks (update z, reset r, candidate):
/// `h' = (1 - z) * tanh(x Wh + (r * h) Uh + bh) + z * h`.
pub fn gru_cell<T: Real>(
    x: &[T],
    h: &[T],
    input: &Tensor<T>,
    recurrent: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Vec<T>> {
    check_recurrent(x, h, input, recurrent, bias, 3)?;
    let n = h.len();
    let g = 3 * n;
    let mut xw = bias.data().to_vec();
    matvec_acc(x, input.data(), g, &mut xw);
    let u = recurrent.data();
    let mut hu = vec![T::zero(); 2 * n];
    for (i, &hv) in h.iter().enumerate() {
        for j in 0..2 * n {
            hu[j] += hv * u[i * g + j];
        }
    }
    let z: Vec<T> = (0..n).map(|j| sigmoid(xw[j] + hu[j])).collect();
    let r: Vec<T> = (0..n).map(|j| sigmoid(xw[n + j] + hu[n + j])).collect();
    let mut cand: Vec<T> = xw[2 * n..].to_vec();
    for (i, (&hv, &rv)) in h.iter().zip(&r).enumerate() {
        let rh = rv * hv;
        for j in 0..n {
            cand[j] += rh * u[i * g + 2 * n + j];
        }
    }
    Ok((0..n)
        .map(|j| {
            let c = tanh(cand[j]);
            (T::one() - z[j]) * c + z[j] * h[j]
        })
        .collect())
}

pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).as_f64().exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| T::of(e / sum)).collect()
}

pub fn batchnorm<T: Real>(x: &Tensor<T>, gamma: &[T], beta: &[T], mean: &[T], var: &[T]) -> Result<Tensor<T>> {
    let c = gamma.len();
    if x.shape().last() != Some(&c) {
        return Err(Error::Shape(format!("batch norm over {c} channels, input {:?}", x.shape())));
    }
    let eps = T::of(crate::model::BN_EPSILON);
    let scale: Vec<T> = gamma.iter().zip(var).map(|(&g, &v)| g / (v + eps).sqrt()).collect();
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let ch = i % c;
        *v = (*v - mean[ch]) * scale[ch] + beta[ch];
    }
    Ok(out)
}

/// Applies one non-recurrent layer.
pub fn apply_layer<T: Real>(kind: &LayerKind, params: &LayerParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    match (kind, params) {
        (LayerKind::Conv2d { padding, activation, .. }, LayerParams::Conv { kernel, bias }) => {
            conv2d(x, kernel, bias, *padding, *activation)
        }
        (LayerKind::MaxPool2, _) => maxpool2(x),
        (LayerKind::Flatten, _) => x.clone().reshape(vec![x.len()]),
        (LayerKind::Dense { activation, .. }, LayerParams::Dense { weight, bias }) => {
            let y = dense(x.data(), weight, bias, *activation)?;
            Tensor::new(vec![y.len()], y)
        }
        (LayerKind::BatchNorm, LayerParams::BatchNorm { gamma, beta, mean, var }) => {
            batchnorm(x, gamma.data(), beta.data(), mean.data(), var.data())
        }
        (LayerKind::Softmax, _) => {
            let p = softmax(x.data());
            Tensor::new(vec![p.len()], p)
        }
        (kind, _) => Err(Error::Unsupported(format!("cannot apply {kind:?} with the given parameters"))),
    }
}

/// Everything observed during one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace<T> {
    pub logits: Vec<T>,
    pub class_probs: Vec<T>,
    /// Per layer: one activation per patch before the recurrent layer, one
    /// per time step at the recurrent layer, one afterwards.
    pub activations: Vec<Vec<Tensor<T>>>,
    /// Embedding-tap output, one vector per patch.
    pub embeddings: Vec<Vec<T>>,
}

impl<T: Real> ForwardTrace<T> {
    pub fn predicted(&self) -> usize {
        argmax(&self.class_probs)
    }

    /// Embedding of the first patch (single-patch models).
    pub fn embedding(&self) -> Option<&[T]> {
        self.embeddings.first().map(Vec::as_slice)
    }
}

pub fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Runs `model` on the patches of one clip.
///
/// Models without a recurrent layer take exactly one patch. Recurrent
/// models run the layers before the recurrent layer on every patch, feed
/// the resulting vectors to the cell in order (zero initial state) and
/// classify from the final state.
pub fn forward<T: Real>(model: &Model<T>, patches: &[Tensor<T>]) -> Result<ForwardTrace<T>> {
    let arch = &model.arch;
    let layers = &arch.layers;
    let params = &model.weights.layers;
    if params.len() != layers.len() {
        return Err(Error::Shape("weights do not match the architecture".into()));
    }
    let rec = arch.recurrent_index();
    let max_patches = if rec.is_some() { usize::MAX } else { 1 };
    if patches.is_empty() || patches.len() > max_patches {
        return Err(Error::InvalidArgument(format!(
            "`{}` takes {} patch(es), got {}",
            arch.name,
            if rec.is_some() { "one or more" } else { "exactly one" },
            patches.len()
        )));
    }
    let tap = arch.embedding_index();
    let split = rec.unwrap_or(layers.len());
    let mut activations: Vec<Vec<Tensor<T>>> = vec![Vec::new(); layers.len()];
    let mut embeddings = Vec::new();
    let mut per_patch = Vec::with_capacity(patches.len());
    for patch in patches {
        if patch.shape() != arch.input_shape {
            return Err(Error::Shape(format!("patch shape {:?}, model expects {:?}", patch.shape(), arch.input_shape)));
        }
        let mut cur = patch.clone();
        for i in 0..split {
            cur = apply_layer(&layers[i].kind, &params[i], &cur)?;
            activations[i].push(cur.clone());
            if tap == Some(i) {
                embeddings.push(cur.data().to_vec());
            }
        }
        per_patch.push(cur);
    }
    let mut cur = match rec {
        Some(r) => {
            let (LayerKind::Recurrent { mode, hidden }, LayerParams::Recurrent { input, recurrent, bias }) =
                (&layers[r].kind, &params[r])
            else {
                return Err(Error::Shape(format!("layer `{}` lacks recurrent parameters", layers[r].name)));
            };
            let mut h = vec![T::zero(); *hidden];
            for x in &per_patch {
                h = match mode {
                    RecurrentMode::VanillaTanh => vanilla_cell(x.data(), &h, input, recurrent, bias)?,
                    RecurrentMode::Gru => gru_cell(x.data(), &h, input, recurrent, bias)?,
                };
                activations[r].push(Tensor::new(vec![h.len()], h.clone())?);
            }
            let mut cur = Tensor::new(vec![h.len()], h)?;
            for i in r + 1..layers.len() {
                cur = apply_layer(&layers[i].kind, &params[i], &cur)?;
                activations[i].push(cur.clone());
            }
            cur
        }
        None => per_patch.pop().expect("one patch"),
    };
    let last = layers.len() - 1;
    let logits = if layers[last].kind == LayerKind::Softmax && last > 0 {
        activations[last - 1].last().expect("layer ran").data().to_vec()
    } else {
        cur.data().to_vec()
    };
    if layers[last].kind != LayerKind::Softmax {
        cur = Tensor::new(vec![logits.len()], softmax(&logits))?;
    }
    Ok(ForwardTrace { logits, class_probs: cur.into_data(), activations, embeddings })
}

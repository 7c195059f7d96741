//! Int8 fixed-point inference over two ping-pong activation buffers and an
//! im2col scratch lane.

use serde::{Deserialize, Serialize};

use crate::cost::{estimate, BufferId};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::exec::{argmax, forward};
use crate::fxp::{
    dequantize_slice, quantize_slice, requantize, requantize_wide, round_shift, saturate_i8, QFormat, ShiftSpec,
};
use crate::model::{shape_trace, Activation, LayerKind, Model, Padding, Shape, KERNEL, POOL};
use crate::quant::{QLayer, QuantizedModel};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Working memory of one inference stream. Buffers are sized once from the
/// model's buffer plan; the high-water marks record how much of each was
/// actually written.
#[derive(Clone, Debug)]
pub struct InferenceContext {
    a: Vec<i8>,
    b: Vec<i8>,
    scratch: Vec<i16>,
    state: Vec<i8>,
    high_a: usize,
    high_b: usize,
    high_scratch: usize,
}

impl InferenceContext {
    pub fn new(qm: &QuantizedModel) -> Self {
        let p = &qm.buffer_plan;
        let state = qm
            .arch
            .layers
            .iter()
            .find_map(|l| match l.kind {
                LayerKind::Recurrent { hidden, .. } => Some(hidden),
                _ => None,
            })
            .unwrap_or(0);
        Self::with_sizes(p.buffer_a, p.buffer_b, p.scratch, state)
    }

    /// Sizes in bytes; the scratch lane holds 16-bit values.
    pub fn with_sizes(a: usize, b: usize, scratch_bytes: usize, state: usize) -> Self {
        Self {
            a: vec![0; a],
            b: vec![0; b],
            scratch: vec![0; scratch_bytes / 2],
            state: vec![0; state],
            high_a: 0,
            high_b: 0,
            high_scratch: 0,
        }
    }

    /// Bytes of A, B and scratch touched so far.
    pub fn peak_bytes(&self) -> usize {
        self.high_a + self.high_b + 2 * self.high_scratch
    }

    pub fn high_water(&self) -> (usize, usize, usize) {
        (self.high_a, self.high_b, 2 * self.high_scratch)
    }

    pub fn state_bytes(&self) -> usize {
        self.state.len()
    }

    pub fn reset_peak(&mut self) {
        self.high_a = 0;
        self.high_b = 0;
        self.high_scratch = 0;
    }

    fn touch(&mut self, id: BufferId, len: usize) {
        match id {
            BufferId::A => self.high_a = self.high_a.max(len),
            BufferId::B => self.high_b = self.high_b.max(len),
        }
    }

    fn buffer(&self, id: BufferId) -> &[i8] {
        match id {
            BufferId::A => &self.a,
            BufferId::B => &self.b,
        }
    }

    fn buffer_mut(&mut self, id: BufferId) -> &mut [i8] {
        match id {
            BufferId::A => &mut self.a,
            BufferId::B => &mut self.b,
        }
    }

    /// Source, destination and scratch for a layer that changes buffers.
    fn split(&mut self, src: BufferId) -> (&[i8], &mut [i8], &mut [i16], &mut [i8]) {
        match src {
            BufferId::A => (&self.a, &mut self.b, &mut self.scratch, &mut self.state),
            BufferId::B => (&self.b, &mut self.a, &mut self.scratch, &mut self.state),
        }
    }
}

fn check_len(what: &str, have: usize, need: usize) -> Result<()> {
    if have < need {
        return Err(Error::InvalidArgument(format!("context size mismatch: {what} holds {have}, layer needs {need}")));
    }
    Ok(())
}

#[inline]
fn relu_code(v: i8, act: Activation) -> i8 {
    match act {
        Activation::Relu => v.max(0),
        Activation::None => v,
    }
}

/// 3x3 stride-1 convolution on codes. `kernel` is `[F, 3, 3, C]`; two
/// im2col columns of widened inputs live in `scratch`. Returns the number of
/// scratch values used.
#[allow(clippy::too_many_arguments)]
pub fn qconv2d(
    x: &[i8],
    (h, w, c): (usize, usize, usize),
    kernel: &Tensor<i8>,
    bias: &Tensor<i8>,
    padding: Padding,
    activation: Activation,
    shift: ShiftSpec,
    scratch: &mut [i16],
    out: &mut [i8],
) -> Result<usize> {
    let [f, kh, kw, kc] = *kernel.shape() else {
        return Err(Error::Shape(format!("int8 conv kernel must be rank 4, got {:?}", kernel.shape())));
    };
    if kh != KERNEL || kw != KERNEL || kc != c || bias.shape() != [f] || x.len() < h * w * c {
        return Err(Error::Shape(format!("int8 conv kernel {:?} does not fit a {h}x{w}x{c} input", kernel.shape())));
    }
    let pad = if padding == Padding::Same { 1 } else { 0 };
    if h + 2 * pad < KERNEL || w + 2 * pad < KERNEL {
        return Err(Error::InvalidDimension(format!("{h}x{w} input is smaller than the kernel")));
    }
    let (oh, ow) = (h + 2 * pad + 1 - KERNEL, w + 2 * pad + 1 - KERNEL);
    let col = KERNEL * KERNEL * c;
    check_len("scratch", scratch.len(), 2 * col)?;
    check_len("output buffer", out.len(), oh * ow * f)?;
    let (col0, rest) = scratch.split_at_mut(col);
    let col1 = &mut rest[..col];
    let fill = |dst: &mut [i16], p: usize| {
        let (oy, ox) = (p / ow, p % ow);
        let mut k = 0;
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let (iy, ix) = ((oy + ky) as isize - pad as isize, (ox + kx) as isize - pad as isize);
                let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                let base = if inside { (iy as usize * w + ix as usize) * c } else { 0 };
                for ch in 0..c {
                    dst[k] = if inside { x[base + ch] as i16 } else { 0 };
                    k += 1;
                }
            }
        }
    };
    let kd = kernel.data();
    let bd = bias.data();
    let pixels = oh * ow;
    let mut p = 0;
    while p < pixels {
        let pair = p + 1 < pixels;
        fill(col0, p);
        if pair {
            fill(col1, p + 1);
        }
        for fi in 0..f {
            let row = &kd[fi * col..(fi + 1) * col];
            let mut acc0 = 0i32;
            let mut acc1 = 0i32;
            for k in 0..col {
                let wv = row[k] as i32;
                acc0 += col0[k] as i32 * wv;
                if pair {
                    acc1 += col1[k] as i32 * wv;
                }
            }
            out[p * f + fi] = relu_code(requantize(acc0, bd[fi] as i32, shift), activation);
            if pair {
                out[(p + 1) * f + fi] = relu_code(requantize(acc1, bd[fi] as i32, shift), activation);
            }
        }
        p += 2;
    }
    Ok(2 * col)
}

/// 2x2 stride-2 ceil-mode max pooling over codes, in place. Returns the
/// output height and width.
pub fn qmaxpool2(buf: &mut [i8], (h, w, c): (usize, usize, usize)) -> Result<(usize, usize)> {
    check_len("pool buffer", buf.len(), h * w * c)?;
    let (oh, ow) = (h.div_ceil(POOL), w.div_ceil(POOL));
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let o = (oy * ow + ox) * c + ch;
                let mut m = i8::MIN;
                for dy in 0..POOL {
                    for dx in 0..POOL {
                        let (y, x) = (oy * POOL + dy, ox * POOL + dx);
                        if y < h && x < w {
                            let r = (y * w + x) * c + ch;
                            debug_assert!(r >= o, "in-place pool would read overwritten index {r} < {o}");
                            m = m.max(buf[r]);
                        }
                    }
                }
                buf[o] = m;
            }
        }
    }
    Ok((oh, ow))
}

/// Fully connected layer on codes; `weight` is `[out, in]`.
pub fn qdense(
    x: &[i8],
    weight: &Tensor<i8>,
    bias: &Tensor<i8>,
    activation: Activation,
    shift: ShiftSpec,
    out: &mut [i8],
) -> Result<()> {
    let [n_out, n_in] = *weight.shape() else {
        return Err(Error::Shape(format!("int8 dense weight must be rank 2, got {:?}", weight.shape())));
    };
    if x.len() != n_in || bias.shape() != [n_out] {
        return Err(Error::Shape(format!("int8 dense weight {:?} does not fit input {}", weight.shape(), x.len())));
    }
    check_len("output buffer", out.len(), n_out)?;
    let wd = weight.data();
    for (o, slot) in out[..n_out].iter_mut().enumerate() {
        let acc: i32 = x.iter().zip(&wd[o * n_in..(o + 1) * n_in]).map(|(&a, &b)| a as i32 * b as i32).sum();
        *slot = relu_code(requantize(acc, bias.data()[o] as i32, shift), activation);
    }
    Ok(())
}

/// One vanilla recurrent step on codes. The state product is aligned to the
/// input product's decimals by `state_align` (positive shifts left), the sum
/// is requantized to the pre-activation format and mapped through `lut`.
#[allow(clippy::too_many_arguments)]
pub fn qrecurrent_cell(
    x: &[i8],
    state: &[i8],
    input: &Tensor<i8>,
    recurrent: &Tensor<i8>,
    bias: &Tensor<i8>,
    shift: ShiftSpec,
    state_align: i32,
    lut: &[i8],
    out: &mut [i8],
) -> Result<()> {
    let hsz = state.len();
    if input.shape() != [hsz, x.len()] || recurrent.shape() != [hsz, hsz] || bias.shape() != [hsz] || lut.len() != 256 {
        return Err(Error::Shape(format!(
            "int8 recurrent params {:?}/{:?} do not fit input {} and state {hsz}",
            input.shape(),
            recurrent.shape(),
            x.len()
        )));
    }
    check_len("output buffer", out.len(), hsz)?;
    let (wx, wh) = (input.data(), recurrent.data());
    for k in 0..hsz {
        let ax: i64 = x.iter().zip(&wx[k * x.len()..(k + 1) * x.len()]).map(|(&a, &b)| a as i64 * b as i64).sum();
        let ah: i64 = state.iter().zip(&wh[k * hsz..(k + 1) * hsz]).map(|(&a, &b)| a as i64 * b as i64).sum();
        let aligned = if state_align >= 0 { ah << state_align } else { round_shift(ah, (-state_align) as u32) };
        let pre = saturate_i8(requantize_wide(ax + aligned, bias.data()[k] as i32, shift));
        out[k] = lut[(pre as i16 + 128) as usize];
    }
    Ok(())
}

fn dims3(s: Shape) -> (usize, usize, usize) {
    match s {
        Shape::Spatial { h, w, c } => (h, w, c),
        Shape::Vector(n) => (1, 1, n),
    }
}

/// Result of an int8 forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QOutput {
    pub logits: Vec<i8>,
    pub logit_format: QFormat,
    pub predicted: usize,
}

impl QOutput {
    pub fn dequantized_logits(&self) -> Vec<f64> {
        dequantize_slice(&self.logits, self.logit_format)
    }
}

/// Quantizes float patches with the model's input format.
pub fn quantize_patches<T: Real>(qm: &QuantizedModel, patches: &[Tensor<T>]) -> Vec<Tensor<i8>> {
    patches
        .iter()
        .map(|p| Tensor::new(p.shape().to_vec(), quantize_slice(p.data(), qm.plan.input)).expect("same shape"))
        .collect()
}

/// Runs the int8 network over one clip. Layers before the recurrent layer
/// run per patch; the recurrent state starts at zero and is carried across
/// patches; the head runs once on the final state. Prediction is the argmax
/// of the logit codes.
pub fn qforward(qm: &QuantizedModel, ctx: &mut InferenceContext, patches: &[Tensor<i8>]) -> Result<QOutput> {
    let arch = &qm.arch;
    let trace = shape_trace(arch)?;
    let slots = &qm.buffer_plan.slots;
    if slots.len() != arch.layers.len() + 1 {
        return Err(Error::InvalidPlan("buffer plan does not match the architecture".into()));
    }
    let rec = arch.recurrent_index();
    if patches.is_empty() || (rec.is_none() && patches.len() != 1) {
        return Err(Error::InvalidArgument(format!(
            "`{}` takes {}, got {} patches",
            arch.name,
            if rec.is_some() { "one or more patches" } else { "exactly one patch" },
            patches.len()
        )));
    }
    if let Some(r) = rec {
        let need = trace[r].output_elements();
        check_len("recurrent state", ctx.state.len(), need)?;
        ctx.state[..need].fill(0);
    }
    let split = rec.unwrap_or(arch.layers.len());
    for patch in patches {
        if patch.shape() != arch.input_shape {
            return Err(Error::Shape(format!("patch shape {:?}, model expects {:?}", patch.shape(), arch.input_shape)));
        }
        let n = patch.len();
        check_len("buffer A", ctx.a.len(), n)?;
        ctx.buffer_mut(slots[0].buffer)[..n].copy_from_slice(patch.data());
        ctx.touch(slots[0].buffer, n);
        for i in 0..split {
            run_layer(qm, ctx, &trace, i)?;
        }
        if let Some(r) = rec {
            run_layer(qm, ctx, &trace, r)?;
        }
    }
    if let Some(r) = rec {
        for i in r + 1..arch.layers.len() {
            run_layer(qm, ctx, &trace, i)?;
        }
    }
    let last = arch.layers.len() - 1;
    let n = trace[last].output_elements();
    let logits = ctx.buffer(slots[last + 1].buffer)[..n].to_vec();
    let predicted = argmax(&logits);
    Ok(QOutput { logits, logit_format: qm.plan.output(), predicted })
}

fn run_layer(
    qm: &QuantizedModel,
    ctx: &mut InferenceContext,
    trace: &[crate::model::LayerTrace],
    i: usize,
) -> Result<()> {
    let spec = &qm.arch.layers[i];
    let lp = &qm.plan.layers[i];
    let (src, dst) = (qm.buffer_plan.slots[i].buffer, qm.buffer_plan.slots[i + 1].buffer);
    let t = &trace[i];
    let n_in = t.input.elements();
    let n_out = t.output_elements();
    let shift = || lp.shift.ok_or_else(|| Error::InvalidPlan(format!("layer `{}` lacks a shift", spec.name)));
    match (&spec.kind, &qm.layers[i]) {
        (LayerKind::Conv2d { padding, activation, .. }, QLayer::Conv { kernel, bias }) => {
            let s = shift()?;
            let (x, out, scratch, _) = ctx.split(src);
            check_len("input buffer", x.len(), n_in)?;
            let used = qconv2d(&x[..n_in], dims3(t.input), kernel, bias, *padding, *activation, s, scratch, out)?;
            ctx.high_scratch = ctx.high_scratch.max(used);
        }
        (LayerKind::Dense { activation, .. }, QLayer::Dense { weight, bias }) => {
            let s = shift()?;
            let (x, out, _, _) = ctx.split(src);
            check_len("input buffer", x.len(), n_in)?;
            qdense(&x[..n_in], weight, bias, *activation, s, out)?;
        }
        (LayerKind::Recurrent { .. }, QLayer::Recurrent { input, recurrent, bias, lut }) => {
            let s = shift()?;
            let align = lp
                .recurrent
                .as_ref()
                .ok_or_else(|| Error::InvalidPlan(format!("layer `{}` lacks recurrent formats", spec.name)))?
                .state_align;
            let (x, out, _, state) = ctx.split(src);
            check_len("input buffer", x.len(), n_in)?;
            qrecurrent_cell(&x[..n_in], &state[..n_out], input, recurrent, bias, s, align, lut, out)?;
            state[..n_out].copy_from_slice(&out[..n_out]);
        }
        (LayerKind::MaxPool2, QLayer::None) => {
            debug_assert_eq!(src, dst);
            qmaxpool2(ctx.buffer_mut(src), dims3(t.input))?;
        }
        (LayerKind::Flatten | LayerKind::Softmax, QLayer::None) => {}
        (LayerKind::BatchNorm, _) => {
            return Err(Error::Unsupported(format!("batch norm `{}` must be folded", spec.name)))
        }
        _ => return Err(Error::Shape(format!("layer `{}` has parameters of the wrong kind", spec.name))),
    }
    if src != dst {
        ctx.touch(dst, n_out);
    }
    Ok(())
}

/// Convenience: quantize float patches and run `qforward` in a fresh context.
pub fn infer_int8<T: Real>(qm: &QuantizedModel, patches: &[Tensor<T>]) -> Result<QOutput> {
    let mut ctx = InferenceContext::new(qm);
    qforward(qm, &mut ctx, &quantize_patches(qm, patches))
}

/// One row of the per-layer execution log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecRow {
    pub layer: String,
    pub output_elements: usize,
    pub channels: usize,
    pub buffer: BufferId,
    pub ops: u64,
}

pub fn execution_log(qm: &QuantizedModel) -> Result<Vec<ExecRow>> {
    let report = estimate(&qm.arch)?;
    Ok(report
        .layers
        .iter()
        .zip(&qm.buffer_plan.slots[1..])
        .map(|(l, s)| ExecRow {
            layer: l.name.clone(),
            output_elements: l.output.elements(),
            channels: l.channels,
            buffer: s.buffer,
            ops: l.ops,
        })
        .collect())
}

/// Float versus int8 evaluation on a labeled set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub samples: usize,
    pub accuracy_float: f64,
    pub accuracy_int8: f64,
    /// `accuracy_float - accuracy_int8`.
    pub gap: f64,
    /// Fraction of examples where both paths predict the same class.
    pub agreement: f64,
    pub f1_float: Vec<f64>,
    pub f1_int8: Vec<f64>,
}

/// Per-class F1 from predictions; classes never predicted nor present score 0.
pub fn per_class_f1(pred: &[usize], labels: &[usize], classes: usize) -> Vec<f64> {
    (0..classes)
        .map(|c| {
            let tp = pred.iter().zip(labels).filter(|&(&p, &l)| p == c && l == c).count() as f64;
            let fp = pred.iter().zip(labels).filter(|&(&p, &l)| p == c && l != c).count() as f64;
            let fn_ = pred.iter().zip(labels).filter(|&(&p, &l)| p != c && l == c).count() as f64;
            let d = 2.0 * tp + fp + fn_;
            if d == 0.0 {
                0.0
            } else {
                2.0 * tp / d
            }
        })
        .collect()
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

pub fn compare_models<T: Real>(model: &Model<T>, qm: &QuantizedModel, examples: &[Example]) -> Result<CompareReport> {
    if examples.is_empty() {
        return Err(Error::Empty("comparison set".into()));
    }
    let classes = model.arch.num_classes()?;
    if qm.arch.num_classes()? != classes {
        return Err(Error::Shape("float and int8 models predict different class counts".into()));
    }
    if let Some(bad) = examples.iter().find(|e| e.label >= classes) {
        return Err(Error::InvalidArgument(format!("label {} out of range for {classes} classes", bad.label)));
    }
    let mut ctx = InferenceContext::new(qm);
    let (mut pf, mut pq, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for e in examples {
        let patches: Vec<Tensor<T>> = e.patches.iter().map(|p| p.cast()).collect();
        pf.push(forward(model, &patches)?.predicted());
        pq.push(qforward(qm, &mut ctx, &quantize_patches(qm, &e.patches))?.predicted);
        labels.push(e.label);
    }
    let (af, aq) = (accuracy(&pf, &labels), accuracy(&pq, &labels));
    Ok(CompareReport {
        samples: examples.len(),
        accuracy_float: af,
        accuracy_int8: aq,
        gap: af - aq,
        agreement: accuracy(&pf, &pq),
        f1_float: per_class_f1(&pf, &labels, classes),
        f1_int8: per_class_f1(&pq, &labels, classes),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::conv2d;
    use crate::fxp::dequantize;
    use crate::model::{fold_batchnorm, preset, LayerSpec, ModelArch};
    use crate::quant::{build_plan, collect_stats, quant_keys, quantize_model, quantize_with_plan, Scheme, INPUT_KEY};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    #[test]
    fn pool_constant_codes() {
        let mut buf = vec![9i8; 5 * 3 * 2];
        let (oh, ow) = qmaxpool2(&mut buf, (5, 3, 2)).unwrap();
        assert_eq!((oh, ow), (3, 2));
        assert!(buf[..oh * ow * 2].iter().all(|&v| v == 9));
    }

    #[test]
    fn pool_matches_float_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (h, w, c) = (7, 6, 3);
        let codes: Vec<i8> = (0..h * w * c).map(|_| rng.gen()).collect();
        let mut buf = codes.clone();
        qmaxpool2(&mut buf, (h, w, c)).unwrap();
        let f = crate::exec::maxpool2(&Tensor::new(vec![h, w, c], codes.iter().map(|&v| v as f64).collect()).unwrap())
            .unwrap();
        let want: Vec<i8> = f.data().iter().map(|&v| v as i8).collect();
        assert_eq!(&buf[..want.len()], want.as_slice());
    }

    #[test]
    fn dense_exact_identity() {
        let n = 6;
        let mut w = vec![0i8; n * n];
        let perm = [3, 0, 5, 1, 4, 2];
        for (o, &i) in perm.iter().enumerate() {
            w[o * n + i] = 1;
        }
        let weight = Tensor::new(vec![n, n], w).unwrap();
        let bias = Tensor::new(vec![n], vec![0; n]).unwrap();
        let x: Vec<i8> = vec![-128, -5, 0, 7, 99, 127];
        let mut out = vec![0i8; n];
        qdense(&x, &weight, &bias, Activation::None, ShiftSpec::new(0, 0), &mut out).unwrap();
        let want: Vec<i8> = perm.iter().map(|&i| x[i]).collect();
        assert_eq!(out, want);
    }

    #[test]
    fn conv_tracks_float_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let qi = QFormat::new(1, 6).unwrap();
        let qw = QFormat::new(0, 7).unwrap();
        let qb = QFormat::new(1, 6).unwrap();
        let qo = QFormat::new(2, 5).unwrap();
        let shift = crate::quant::derive_shifts(qi, qw, qb, qo).unwrap();
        let (h, w, c, f) = (5, 4, 2, 4);
        for _ in 0..1000 {
            let xc: Vec<i8> = (0..h * w * c).map(|_| rng.gen_range(-40..40)).collect();
            let kc: Vec<i8> = (0..9 * c * f).map(|_| rng.gen_range(-40..40)).collect();
            let bc: Vec<i8> = (0..f).map(|_| rng.gen_range(-30..30)).collect();
            let padding = if rng.gen() { Padding::Valid } else { Padding::Same };
            // float reference on the dequantized codes, kernel in HWCF
            let xf = Tensor::new(vec![h, w, c], dequantize_slice::<f64>(&xc, qi)).unwrap();
            let mut hwcf = vec![0.0; 9 * c * f];
            for fi in 0..f {
                for k in 0..9 * c {
                    hwcf[k * f + fi] = dequantize::<f64>(kc[fi * 9 * c + k], qw);
                }
            }
            let kf = Tensor::new(vec![3, 3, c, f], hwcf).unwrap();
            let bf = Tensor::new(vec![f], dequantize_slice::<f64>(&bc, qb)).unwrap();
            let yf = conv2d(&xf, &kf, &bf, padding, Activation::Relu).unwrap();
            let mut scratch = vec![0i16; 2 * 9 * c];
            let mut out = vec![0i8; yf.len()];
            let kernel = Tensor::new(vec![f, 3, 3, c], kc).unwrap();
            let bias = Tensor::new(vec![f], bc).unwrap();
            qconv2d(&xc, (h, w, c), &kernel, &bias, padding, Activation::Relu, shift, &mut scratch, &mut out).unwrap();
            for (&q, &v) in out.iter().zip(yf.data()) {
                if v.abs() < qo.max_value() {
                    let back: f64 = dequantize(q, qo);
                    assert!((back - v).abs() <= 2.0 * qo.step(), "{back} vs {v}");
                }
            }
        }
    }

    #[test]
    fn recurrent_cell_tracks_float() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n, hsz) = (5, 4);
        let qx = QFormat::new(1, 6).unwrap();
        let qw = QFormat::new(0, 7).unwrap();
        let qu = QFormat::new(0, 7).unwrap();
        let qh = QFormat::new(0, 7).unwrap();
        let qpre = QFormat::new(2, 5).unwrap();
        let shift = crate::quant::derive_shifts(qx, qw, qw, qpre).unwrap();
        let align = (6 + 7) - (7 + 7);
        let lut = crate::quant::tanh_table(qpre, qh);
        for _ in 0..200 {
            let x: Vec<i8> = (0..n).map(|_| rng.gen_range(-30..30)).collect();
            let h: Vec<i8> = (0..hsz).map(|_| rng.gen_range(-60..60)).collect();
            let wx: Vec<i8> = (0..n * hsz).map(|_| rng.gen_range(-50..50)).collect();
            let wh: Vec<i8> = (0..hsz * hsz).map(|_| rng.gen_range(-50..50)).collect();
            let b: Vec<i8> = (0..hsz).map(|_| rng.gen_range(-20..20)).collect();
            let mut out = vec![0i8; hsz];
            qrecurrent_cell(
                &x,
                &h,
                &Tensor::new(vec![hsz, n], wx.clone()).unwrap(),
                &Tensor::new(vec![hsz, hsz], wh.clone()).unwrap(),
                &Tensor::new(vec![hsz], b.clone()).unwrap(),
                shift,
                align,
                &lut,
                &mut out,
            )
            .unwrap();
            for k in 0..hsz {
                let mut pre = dequantize::<f64>(b[k], qw);
                for j in 0..n {
                    pre += dequantize::<f64>(x[j], qx) * dequantize::<f64>(wx[k * n + j], qw);
                }
                for j in 0..hsz {
                    pre += dequantize::<f64>(h[j], qh) * dequantize::<f64>(wh[k * hsz + j], qu);
                }
                let want = pre.tanh();
                let got: f64 = dequantize(out[k], qh);
                // pre-activation step 1/32 bounds the tanh error through the table
                assert!((got - want).abs() <= qpre.step() + qh.step(), "{got} vs {want}");
            }
        }
    }

    fn calibrated_toy(seed: u64) -> (Model<f32>, QuantizedModel, Vec<Vec<Tensor<f32>>>) {
        let m = fold_batchnorm(&Model::<f32>::init(preset("toy_student").unwrap(), seed).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clips: Vec<Vec<Tensor<f32>>> =
            (0..64).map(|_| vec![Tensor::from_fn(vec![24, 16, 1], |_| rng.gen_range(-1.0f32..1.0))]).collect();
        let s = collect_stats(&m, &clips, seed).unwrap();
        let qm = quantize_model(&m, &s, Scheme::Sqnr).unwrap();
        (m, qm, clips)
    }

    #[test]
    fn deterministic_and_peak_matches_plan() {
        let (_, qm, clips) = calibrated_toy(1);
        let mut ctx = InferenceContext::new(&qm);
        let x = quantize_patches(&qm, &clips[0]);
        let a = qforward(&qm, &mut ctx, &x).unwrap();
        let b = qforward(&qm, &mut ctx, &x).unwrap();
        assert_eq!(a, b);
        assert_eq!(ctx.peak_bytes(), qm.buffer_plan.total);
    }

    #[test]
    fn m20k_int8_peak_memory() {
        let m = fold_batchnorm(&Model::<f32>::init(preset("M20k_int8").unwrap(), 0).unwrap()).unwrap();
        let mut f = BTreeMap::new();
        for k in quant_keys(&m.arch).unwrap() {
            f.insert(k, QFormat::new(2, 5).unwrap());
        }
        f.insert(INPUT_KEY.to_string(), QFormat::new(3, 4).unwrap());
        let qm = quantize_with_plan(&m, build_plan(&m.arch, &f, Scheme::Sqnr).unwrap()).unwrap();
        let mut ctx = InferenceContext::new(&qm);
        let clip: Vec<Tensor<i8>> =
            (0..4).map(|k| Tensor::from_fn(vec![96, 64, 1], |i| ((i * 7 + k) % 50) as i8)).collect();
        let out = qforward(&qm, &mut ctx, &clip).unwrap();
        assert_eq!(out.logits.len(), 10);
        assert_eq!(ctx.high_water(), (10_440, 23_312, 576));
        assert_eq!(ctx.peak_bytes(), 34_328);
        assert_eq!(ctx.state_bytes(), 60);
    }

    #[test]
    fn undersized_context_rejected() {
        let (_, qm, clips) = calibrated_toy(2);
        let mut ctx = InferenceContext::with_sizes(100, 100, 0, 0);
        assert!(qforward(&qm, &mut ctx, &quantize_patches(&qm, &clips[0])).is_err());
    }

    #[test]
    fn exact_codes_give_zero_gap() {
        // weights on code points and a wide input format: int8 equals float
        let arch = ModelArch {
            name: "tiny".into(),
            input_shape: [2, 2, 1],
            layers: vec![
                LayerSpec::new("flatten", LayerKind::Flatten),
                LayerSpec::new("fc", LayerKind::Dense { units: 3, activation: Activation::None }),
                LayerSpec::new("softmax", LayerKind::Softmax),
            ],
        };
        let mut m = Model::<f32>::init(arch, 0).unwrap();
        if let crate::model::LayerParams::Dense { weight, .. } = &mut m.weights.layers[1] {
            for (i, w) in weight.data_mut().iter_mut().enumerate() {
                *w = [1.0, -1.0, 0.0, 2.0, 1.0, -2.0, 0.0, 1.0, 1.0, -1.0, 2.0, 0.0][i];
            }
        }
        let mut f = BTreeMap::new();
        for k in quant_keys(&m.arch).unwrap() {
            f.insert(k, QFormat::new(7, 0).unwrap());
        }
        let qm = quantize_with_plan(&m, build_plan(&m.arch, &f, Scheme::Sqnr).unwrap()).unwrap();
        let examples: Vec<Example> = (0..30)
            .map(|i| Example {
                patches: vec![Tensor::from_fn(vec![2, 2, 1], |j| ((i * 3 + j * 5) % 7) as f32 - 3.0)],
                label: i % 3,
            })
            .collect();
        let r = compare_models(&m, &qm, &examples).unwrap();
        assert_eq!(r.gap, 0.0);
        assert_eq!(r.agreement, 1.0);
    }

    #[test]
    fn toy_agreement_with_float() {
        let (m, qm, _) = calibrated_toy(5);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut ctx = InferenceContext::new(&qm);
        let mut agree = 0;
        for _ in 0..1000 {
            let p = vec![Tensor::from_fn(vec![24, 16, 1], |_| rng.gen_range(-1.0f32..1.0))];
            let f = forward(&m, &p).unwrap().predicted();
            let q = qforward(&qm, &mut ctx, &quantize_patches(&qm, &p)).unwrap().predicted;
            agree += (f == q) as usize;
        }
        assert!(agree >= 950, "agreement {agree}/1000");
    }

    #[test]
    fn f1_and_accuracy() {
        let pred = [0, 1, 1, 2];
        let labels = [0, 1, 2, 2];
        assert_eq!(accuracy(&pred, &labels), 0.75);
        let f1 = per_class_f1(&pred, &labels, 4);
        assert_eq!(f1[0], 1.0);
        assert!((f1[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!((f1[2] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(f1[3], 0.0);
    }

    #[test]
    fn execution_log_rows() {
        let m = fold_batchnorm(&Model::<f32>::init(preset("M20k_int8").unwrap(), 0).unwrap()).unwrap();
        let mut f = BTreeMap::new();
        for k in quant_keys(&m.arch).unwrap() {
            f.insert(k, QFormat::new(2, 5).unwrap());
        }
        let qm = quantize_with_plan(&m, build_plan(&m.arch, &f, Scheme::Sqnr).unwrap()).unwrap();
        let log = execution_log(&qm).unwrap();
        assert_eq!(log[0].layer, "conv1");
        assert_eq!(log[0].ops, 419_616);
        assert_eq!(log[0].output_elements, 23_312);
    }
}

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::plan::{plan_from_stats, QuantPlan, Scheme};
use super::CalibrationStats;
use crate::cost::{plan_buffers, BufferPlan};
use crate::error::{Error, Result};
use crate::fxp::{dequantize, quantize, quantize_slice, QFormat};
use crate::model::{arch_path, LayerKind, LayerParams, Model, ModelArch};
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::tensorfile::{self, find_i8, NamedTensor};

/// Int8 parameters of one layer, in kernel-friendly layouts: conv kernels
/// `[F, 3, 3, C]` (filter-major) and dense/recurrent matrices `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub enum QLayer {
    None,
    Conv { kernel: Tensor<i8>, bias: Tensor<i8> },
    Dense { weight: Tensor<i8>, bias: Tensor<i8> },
    Recurrent { input: Tensor<i8>, recurrent: Tensor<i8>, bias: Tensor<i8>, lut: Vec<i8> },
}

impl QLayer {
    fn tensors(&self) -> Vec<(&'static str, &Tensor<i8>)> {
        match self {
            QLayer::None => vec![],
            QLayer::Conv { kernel, bias } => vec![("kernel", kernel), ("bias", bias)],
            QLayer::Dense { weight, bias } => vec![("weight", weight), ("bias", bias)],
            QLayer::Recurrent { input, recurrent, bias, .. } => {
                vec![("input_kernel", input), ("recurrent_kernel", recurrent), ("bias", bias)]
            }
        }
    }
}

/// Export-ready int8 network: architecture, plan, codes and buffer plan.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedModel {
    pub arch: ModelArch,
    pub plan: QuantPlan,
    pub layers: Vec<QLayer>,
    pub buffer_plan: BufferPlan,
}

impl QuantizedModel {
    pub fn param_bytes(&self) -> usize {
        self.layers.iter().flat_map(|l| l.tensors()).map(|(_, t)| t.len()).sum()
    }
}

/// `tanh` evaluated at every pre-activation code, indexed by `code + 128`.
pub fn tanh_table(pre: QFormat, out: QFormat) -> Vec<i8> {
    (-128i32..=127).map(|c| quantize((dequantize::<f64>(c as i8, pre)).tanh(), out)).collect()
}

/// `[rows, cols]` to `[cols, rows]`.
fn transpose(data: &[i8], rows: usize, cols: usize) -> Vec<i8> {
    let mut out = vec![0i8; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

fn check_arch(arch: &ModelArch) -> Result<()> {
    for l in &arch.layers {
        if let LayerKind::Conv2d { out_channels, .. } = l.kind {
            if out_channels % 4 != 0 {
                return Err(Error::Unsupported(format!(
                    "conv `{}` has {out_channels} output channels; int8 kernels need a multiple of 4",
                    l.name
                )));
            }
        }
    }
    Ok(())
}

/// Quantizes the weights of a batch-norm-folded model under a given plan.
pub fn quantize_with_plan<T: Real>(model: &Model<T>, plan: QuantPlan) -> Result<QuantizedModel> {
    let arch = &model.arch;
    check_arch(arch)?;
    plan.validate(arch)?;
    let mut layers = Vec::with_capacity(arch.layers.len());
    for ((spec, params), lp) in arch.layers.iter().zip(&model.weights.layers).zip(&plan.layers) {
        let q = |t: &Tensor<T>, f: Option<QFormat>| -> Result<Vec<i8>> {
            let f = f.ok_or_else(|| Error::InvalidPlan(format!("layer `{}` lacks a format", spec.name)))?;
            Ok(quantize_slice(t.data(), f))
        };
        let ql = match (params, &spec.kind) {
            (LayerParams::Conv { kernel, bias }, _) => {
                let [kh, kw, c, f] = *kernel.shape() else { unreachable!("checked by Model::new") };
                let codes = q(kernel, lp.weight)?;
                let packed = transpose(&codes, kh * kw * c, f);
                QLayer::Conv {
                    kernel: Tensor::new(vec![f, kh, kw, c], packed)?,
                    bias: Tensor::new(vec![f], q(bias, lp.bias)?)?,
                }
            }
            (LayerParams::Dense { weight, bias }, _) => {
                let [n_in, n_out] = *weight.shape() else { unreachable!("checked by Model::new") };
                QLayer::Dense {
                    weight: Tensor::new(vec![n_out, n_in], transpose(&q(weight, lp.weight)?, n_in, n_out))?,
                    bias: Tensor::new(vec![n_out], q(bias, lp.bias)?)?,
                }
            }
            (LayerParams::Recurrent { input, recurrent, bias }, LayerKind::Recurrent { .. }) => {
                let r = lp
                    .recurrent
                    .as_ref()
                    .ok_or_else(|| Error::InvalidPlan(format!("layer `{}` lacks recurrent formats", spec.name)))?;
                let [n_in, h] = *input.shape() else { unreachable!("checked by Model::new") };
                QLayer::Recurrent {
                    input: Tensor::new(vec![h, n_in], transpose(&q(input, lp.weight)?, n_in, h))?,
                    recurrent: Tensor::new(vec![h, h], transpose(&q(recurrent, Some(r.recurrent_weight))?, h, h))?,
                    bias: Tensor::new(vec![h], q(bias, lp.bias)?)?,
                    lut: tanh_table(r.pre_activation, lp.output),
                }
            }
            (LayerParams::BatchNorm { .. }, _) => {
                return Err(Error::Unsupported(format!("batch norm `{}` must be folded", spec.name)))
            }
            (LayerParams::None, _) => QLayer::None,
            (LayerParams::Recurrent { .. }, _) => unreachable!("checked by Model::new"),
        };
        layers.push(ql);
    }
    Ok(QuantizedModel { arch: arch.clone(), buffer_plan: plan_buffers(arch)?, plan, layers })
}

/// Calibrated formats plus weight quantization in one step.
pub fn quantize_model<T: Real>(model: &Model<T>, stats: &CalibrationStats, scheme: Scheme) -> Result<QuantizedModel> {
    check_arch(&model.arch)?;
    let plan = plan_from_stats(&model.arch, stats, scheme)?;
    for w in &plan.warnings {
        log::warn!("{w}");
    }
    quantize_with_plan(model, plan)
}

#[derive(Serialize, Deserialize)]
struct Descriptor {
    arch: ModelArch,
    plan: QuantPlan,
}

/// Writes int8 codes to `path` and `{arch, plan}` JSON next to it.
pub fn save_quantized(qm: &QuantizedModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let desc = Descriptor { arch: qm.arch.clone(), plan: qm.plan.clone() };
    fs::write(arch_path(path), serde_json::to_string_pretty(&desc)?)?;
    let tensors: Vec<NamedTensor> = qm
        .arch
        .layers
        .iter()
        .zip(&qm.layers)
        .flat_map(|(l, ql)| {
            ql.tensors().into_iter().map(move |(s, t)| NamedTensor::i8(format!("{}/{s}", l.name), t.clone()))
        })
        .collect();
    tensorfile::save_tensors(path, &tensors)
}

pub fn load_quantized(path: impl AsRef<Path>) -> Result<QuantizedModel> {
    let path = path.as_ref();
    let desc: Descriptor = serde_json::from_str(&fs::read_to_string(arch_path(path))?)?;
    let (arch, plan) = (desc.arch, desc.plan);
    arch.validate()?;
    check_arch(&arch)?;
    plan.validate(&arch)?;
    let tensors = tensorfile::load_tensors(path)?;
    let trace = crate::model::shape_trace(&arch)?;
    let mut layers = Vec::with_capacity(arch.layers.len());
    let mut used = 0;
    for ((l, lp), t) in arch.layers.iter().zip(&plan.layers).zip(&trace) {
        let get = |s: &str, shape: Vec<usize>| -> Result<Tensor<i8>> {
            let name = format!("{}/{s}", l.name);
            let x = find_i8(&tensors, &name)?;
            if x.shape() != shape.as_slice() {
                return Err(Error::Shape(format!("tensor `{name}` has shape {:?}, expected {shape:?}", x.shape())));
            }
            Ok(x.clone())
        };
        let (n_in, c_in) = (t.input.elements(), t.input.channels());
        let ql = match l.kind {
            LayerKind::Conv2d { out_channels: f, .. } => {
                used += 2;
                QLayer::Conv { kernel: get("kernel", vec![f, 3, 3, c_in])?, bias: get("bias", vec![f])? }
            }
            LayerKind::Dense { units, .. } => {
                used += 2;
                QLayer::Dense { weight: get("weight", vec![units, n_in])?, bias: get("bias", vec![units])? }
            }
            LayerKind::Recurrent { hidden: h, .. } => {
                used += 3;
                let r = lp.recurrent.as_ref().ok_or_else(|| Error::InvalidPlan("missing recurrent formats".into()))?;
                QLayer::Recurrent {
                    input: get("input_kernel", vec![h, n_in])?,
                    recurrent: get("recurrent_kernel", vec![h, h])?,
                    bias: get("bias", vec![h])?,
                    lut: tanh_table(r.pre_activation, lp.output),
                }
            }
            _ => QLayer::None,
        };
        layers.push(ql);
    }
    if used != tensors.len() {
        return Err(Error::Malformed(format!("file holds {} tensors, model needs {used}", tensors.len())));
    }
    let buffer_plan = plan_buffers(&arch)?;
    Ok(QuantizedModel { arch, plan, layers, buffer_plan })
}

fn c_ident(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}

fn c_array(out: &mut String, name: &str, data: &[i8]) {
    let _ = writeln!(out, "static const int8_t {name}[{}] = {{", data.len());
    for chunk in data.chunks(16) {
        let row: Vec<String> = chunk.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "    {},", row.join(", "));
    }
    let _ = writeln!(out, "}};");
}

/// C header with int8 weight arrays, shift macros and buffer sizes.
pub fn export_c_header(qm: &QuantizedModel) -> String {
    let model = c_ident(&qm.arch.name);
    let guard = format!("{}_WEIGHTS_H", model.to_uppercase());
    let mut out = String::new();
    let _ = writeln!(out, "/* {} int8 weights, scheme {} */", qm.arch.name, qm.plan.scheme);
    let _ = writeln!(out, "/* conv kernels [F][3][3][C], dense and recurrent matrices [out][in] */");
    let _ = writeln!(out, "#ifndef {guard}\n#define {guard}\n\n#include <stdint.h>\n");
    let bp = &qm.buffer_plan;
    let _ = writeln!(out, "#define BUFFER_A_SIZE {}", bp.buffer_a);
    let _ = writeln!(out, "#define BUFFER_B_SIZE {}", bp.buffer_b);
    let _ = writeln!(out, "#define SCRATCH_SIZE {}", bp.scratch);
    let _ = writeln!(out, "#define INPUT_DEC {}\n", qm.plan.input.decimal_bits());
    for ((l, ql), lp) in qm.arch.layers.iter().zip(&qm.layers).zip(&qm.plan.layers) {
        if matches!(ql, QLayer::None) {
            continue;
        }
        let id = c_ident(&l.name);
        let up = id.to_uppercase();
        let _ = writeln!(out, "/* {}: input {}, output {} */", l.name, lp.input, lp.output);
        if let Some(s) = lp.shift {
            let _ = writeln!(out, "#define {up}_BIAS_LSHIFT {}", s.left_shift);
            let _ = writeln!(out, "#define {up}_OUT_RSHIFT {}", s.right_shift);
        }
        let _ = writeln!(out, "#define {up}_OUT_DEC {}", lp.output.decimal_bits());
        if let Some(r) = &lp.recurrent {
            let _ = writeln!(out, "#define {up}_STATE_ALIGN {}", r.state_align);
            let _ = writeln!(out, "#define {up}_PRE_DEC {}", r.pre_activation.decimal_bits());
        }
        for (suffix, t) in ql.tensors() {
            c_array(&mut out, &format!("{id}_{suffix}"), t.data());
        }
        if let QLayer::Recurrent { lut, .. } = ql {
            c_array(&mut out, &format!("{id}_tanh_lut"), lut);
        }
        out.push('\n');
    }
    let _ = writeln!(out, "#endif /* {guard} */");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{fold_batchnorm, preset};
    use crate::quant::{collect_stats, tensor_key};

    fn toy() -> (Model<f32>, CalibrationStats) {
        let m = fold_batchnorm(&Model::<f32>::init(preset("toy_student").unwrap(), 4).unwrap()).unwrap();
        let clips: Vec<Vec<Tensor<f32>>> = (0..8)
            .map(|k| vec![Tensor::from_fn(vec![24, 16, 1], |i| (((i * 13 + k * 5) % 23) as f32 / 23.0) * 2.0 - 1.0)])
            .collect();
        let s = collect_stats(&m, &clips, 1).unwrap();
        (m, s)
    }

    #[test]
    fn small_weights_get_q07_under_sqnr() {
        let (m, s) = toy();
        let qm = quantize_model(&m, &s, Scheme::Sqnr).unwrap();
        for (l, lp) in m.arch.layers.iter().zip(&qm.plan.layers) {
            if let Some(w) = lp.weight {
                let key =
                    tensor_key(&l.name, if matches!(l.kind, LayerKind::Conv2d { .. }) { "kernel" } else { "weight" });
                let st = s.get(&key).unwrap();
                if st.max_abs() < 1.0 {
                    assert_eq!(w, QFormat::new(0, 7).unwrap(), "{}", l.name);
                }
            }
        }
    }

    #[test]
    fn weight_roundtrip_within_half_step() {
        let (m, s) = toy();
        let qm = quantize_model(&m, &s, Scheme::Sqnr).unwrap();
        let LayerParams::Dense { weight, .. } = &m.weights.layers[m.arch.layer_index("fc1").unwrap()] else { panic!() };
        let QLayer::Dense { weight: qw, .. } = &qm.layers[m.arch.layer_index("fc1").unwrap()] else { panic!() };
        let f = qm.plan.layer("fc1").unwrap().weight.unwrap();
        let [n_in, n_out] = *weight.shape() else { panic!() };
        for i in 0..n_in {
            for o in 0..n_out {
                let w = weight.data()[i * n_out + o] as f64;
                if w.abs() < f.max_value() {
                    let back: f64 = dequantize(qw.data()[o * n_in + i], f);
                    assert!((back - w).abs() <= f.step() / 2.0 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let (m, s) = toy();
        let qm = quantize_model(&m, &s, Scheme::Overload { p_threshold: 1e-4 }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.tsed");
        save_quantized(&qm, &path).unwrap();
        assert_eq!(load_quantized(&path).unwrap(), qm);
    }

    #[test]
    fn header_mentions_every_array() {
        let (m, s) = toy();
        let qm = quantize_model(&m, &s, Scheme::Sqnr).unwrap();
        let h = export_c_header(&qm);
        for name in ["conv1_kernel", "conv2_bias", "fc2_weight", "CONV1_BIAS_LSHIFT", "FC1_OUT_RSHIFT", "BUFFER_A_SIZE"]
        {
            assert!(h.contains(name), "{name}");
        }
        assert!(h.trim_end().ends_with("#endif /* TOY_STUDENT_WEIGHTS_H */"));
    }

    #[test]
    fn odd_channel_count_rejected() {
        let mut arch = preset("toy_student").unwrap();
        if let LayerKind::Conv2d { out_channels, .. } = &mut arch.layers[0].kind {
            *out_channels = 3;
        }
        let m = fold_batchnorm(&Model::<f32>::init(arch, 0).unwrap()).unwrap();
        let clips = vec![vec![Tensor::zeros(vec![24, 16, 1])]];
        let s = collect_stats(&m, &clips, 0).unwrap();
        assert!(matches!(quantize_model(&m, &s, Scheme::Sqnr), Err(Error::Unsupported(_))));
    }

    #[test]
    fn tanh_table_is_monotone_and_odd_ish() {
        let lut = tanh_table(QFormat::new(2, 5).unwrap(), QFormat::new(0, 7).unwrap());
        assert_eq!(lut.len(), 256);
        assert!(lut.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(lut[128], 0);
        assert_eq!(lut[255], 127);
    }
}

//! Post-training calibration: activation and weight statistics, per-tensor
//! Q-format selection (SQNR or overload-probability rule), shift derivation
//! and int8 model export.

mod plan;
mod qmodel;
mod stats;

use std::collections::BTreeMap;

pub use plan::{
    build_plan, calibrate, derive_shifts, overall_sqnr, overload_fraction, plan_from_stats, qformat_overload,
    qformat_sqnr, quant_keys, select_formats, sqnr_by_format, tensor_key, CalibrationReport, LayerPlan, QuantPlan,
    RecurrentPlan, Scheme, TensorReport, DEFAULT_P_THRESHOLD, INPUT_KEY,
};
pub use qmodel::{
    export_c_header, load_quantized, quantize_model, quantize_with_plan, save_quantized, tanh_table, QLayer,
    QuantizedModel,
};
pub use stats::{TensorStats, HIST_BINS, HIST_MAX_EXP, HIST_MIN_EXP, RESERVOIR_CAP};

use crate::error::{Error, Result};
use crate::exec::{forward, matvec_acc};
use crate::model::{LayerKind, LayerParams, Model, RecurrentMode};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Statistics for every calibrated tensor, keyed `input`, `<layer>/<param>`,
/// `<layer>/out` and, for recurrent layers, `<layer>/pre`.
#[derive(Clone, Debug, Default)]
pub struct CalibrationStats {
    pub tensors: BTreeMap<String, TensorStats>,
}

impl CalibrationStats {
    pub fn get(&self, key: &str) -> Result<&TensorStats> {
        self.tensors.get(key).ok_or_else(|| Error::InvalidPlan(format!("no statistics for tensor `{key}`")))
    }

    /// Merges another collection key by key.
    pub fn merge(&mut self, other: &CalibrationStats) {
        for (k, s) in &other.tensors {
            match self.tensors.get_mut(k) {
                Some(mine) => mine.merge(s),
                None => {
                    self.tensors.insert(k.clone(), s.clone());
                }
            }
        }
    }
}

fn key_seed(seed: u64, key: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ seed
}

/// Runs the float model over the calibration clips and records statistics
/// for the input, every parameter tensor, every layer output and the
/// recurrent pre-activations. Outputs are taken after the activation.
pub fn collect_stats<T: Real>(model: &Model<T>, clips: &[Vec<Tensor<T>>], seed: u64) -> Result<CalibrationStats> {
    if clips.is_empty() || clips.iter().any(|c| c.is_empty()) {
        return Err(Error::Empty("calibration set".into()));
    }
    let arch = &model.arch;
    if let Some(bn) = arch.layers.iter().find(|l| l.kind == LayerKind::BatchNorm) {
        return Err(Error::Unsupported(format!("batch norm `{}` must be folded before calibration", bn.name)));
    }
    let mut stats: BTreeMap<String, TensorStats> = BTreeMap::new();
    let mut feed = |key: String, values: &[T]| {
        let s = key_seed(seed, &key);
        let st = stats.entry(key).or_insert_with(|| TensorStats::new(s));
        st.extend(values.iter().map(|v| v.as_f64()));
    };
    for (layer, params) in arch.layers.iter().zip(&model.weights.layers) {
        for (suffix, t) in params.tensors() {
            feed(plan::tensor_key(&layer.name, suffix), t.data());
        }
    }
    let rec = arch.recurrent_index();
    for clip in clips {
        for p in clip {
            feed(INPUT_KEY.into(), p.data());
        }
        let trace = forward(model, clip)?;
        for (i, layer) in arch.layers.iter().enumerate() {
            if !matches!(layer.kind, LayerKind::Conv2d { .. } | LayerKind::Dense { .. } | LayerKind::Recurrent { .. }) {
                continue;
            }
            for act in &trace.activations[i] {
                feed(plan::tensor_key(&layer.name, "out"), act.data());
            }
        }
        if let Some(r) = rec {
            let (
                LayerKind::Recurrent { mode: RecurrentMode::VanillaTanh, hidden },
                LayerParams::Recurrent { input, recurrent, bias },
            ) = (&arch.layers[r].kind, &model.weights.layers[r])
            else {
                continue;
            };
            let mut h = vec![T::zero(); *hidden];
            for (t, state) in trace.activations[r].iter().enumerate() {
                let x = if r == 0 { clip[t].data() } else { trace.activations[r - 1][t].data() };
                let mut pre = bias.data().to_vec();
                matvec_acc(x, input.data(), *hidden, &mut pre);
                matvec_acc(&h, recurrent.data(), *hidden, &mut pre);
                feed(plan::tensor_key(&arch.layers[r].name, "pre"), &pre);
                h.copy_from_slice(state.data());
            }
        }
    }
    Ok(CalibrationStats { tensors: stats })
}

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::stats::TensorStats;
use super::CalibrationStats;
use crate::error::{Error, Result};
use crate::fxp::{measure_sqnr, QFormat, ShiftSpec, MAGNITUDE_BITS};
use crate::model::{LayerKind, ModelArch, RecurrentMode};

pub const DEFAULT_P_THRESHOLD: f64 = 1e-4;

/// Format-selection rule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum Scheme {
    /// Maximize SQNR on the reservoir sample.
    #[default]
    Sqnr,
    /// Fewest integer bits whose overload probability is below the threshold.
    Overload { p_threshold: f64 },
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::Sqnr => write!(f, "sqnr"),
            Scheme::Overload { p_threshold } => write!(f, "overload(p_th={p_threshold:e})"),
        }
    }
}

/// Reservoir SQNR of every format; `None` when the sample has no energy.
pub fn sqnr_by_format(stats: &TensorStats) -> Result<Option<Vec<(QFormat, f64)>>> {
    if stats.is_empty() {
        return Err(Error::Empty("tensor statistics hold no samples".into()));
    }
    let mut out = Vec::with_capacity(8);
    for q in QFormat::all() {
        match measure_sqnr(stats.reservoir(), q) {
            Ok(r) => out.push((q, r.sqnr)),
            Err(Error::UndefinedSignal) => return Ok(None),
            Err(e) => return Err(e),
        }
    }
    Ok(Some(out))
}

/// Format with the highest reservoir SQNR; ties go to fewer integer bits.
/// An all-zero tensor gets the default `Q{0,7}`.
pub fn qformat_sqnr(stats: &TensorStats) -> Result<QFormat> {
    let Some(scores) = sqnr_by_format(stats)? else {
        return Ok(QFormat::default());
    };
    let mut best = scores[0];
    for &(q, s) in &scores[1..] {
        if s > best.1 {
            best = (q, s);
        }
    }
    Ok(best.0)
}

/// Empirical `P(|x| >= 2^integer_bits)`.
pub fn overload_fraction(stats: &TensorStats, integer_bits: u8) -> f64 {
    if stats.is_empty() {
        return 0.0;
    }
    stats.count_at_least(integer_bits as i32) as f64 / stats.count() as f64
}

fn overload_choice(stats: &TensorStats, p_th: f64) -> Result<(QFormat, Option<String>)> {
    if stats.is_empty() {
        return Err(Error::Empty("tensor statistics hold no samples".into()));
    }
    if p_th.is_nan() || p_th < 0.0 {
        return Err(Error::InvalidArgument(format!("overload threshold must be >= 0, got {p_th}")));
    }
    for i in 0..=MAGNITUDE_BITS {
        let over = stats.count_at_least(i as i32);
        let frac = over as f64 / stats.count() as f64;
        if frac < p_th || over == 0 {
            return Ok((QFormat::with_integer_bits(i)?, None));
        }
    }
    let q = QFormat::with_integer_bits(MAGNITUDE_BITS)?;
    let frac = overload_fraction(stats, MAGNITUDE_BITS);
    Ok((q, Some(format!("overload fraction {frac:.2e} at {q} still exceeds {p_th:e}; saturating"))))
}

/// Smallest integer-bit count `i` with `P(|x| >= 2^i) < p_th`. A zero
/// threshold means no overload at all.
pub fn qformat_overload(stats: &TensorStats, p_th: f64) -> Result<QFormat> {
    let (q, warning) = overload_choice(stats, p_th)?;
    if let Some(w) = warning {
        log::warn!("{w}");
    }
    Ok(q)
}

fn select(stats: &TensorStats, scheme: Scheme) -> Result<(QFormat, Option<String>)> {
    match scheme {
        Scheme::Sqnr => Ok((qformat_sqnr(stats)?, None)),
        Scheme::Overload { p_threshold } => overload_choice(stats, p_threshold),
    }
}

/// `left = (n_i + n_w) - n_b`, `right = (n_i + n_w) - n_o` on decimal bits.
pub fn derive_shifts(q_in: QFormat, q_w: QFormat, q_b: QFormat, q_out: QFormat) -> Result<ShiftSpec> {
    let prod = q_in.decimal_bits() as i32 + q_w.decimal_bits() as i32;
    let left = prod - q_b.decimal_bits() as i32;
    let right = prod - q_out.decimal_bits() as i32;
    if left < 0 || right < 0 {
        return Err(Error::InvalidPlan(format!(
            "negative shift (left {left}, right {right}) for input {q_in}, weight {q_w}, bias {q_b}, output {q_out}"
        )));
    }
    Ok(ShiftSpec::new(left as u32, right as u32))
}

/// Combined SQNR of cascaded quantization steps: `1 / sum(1 / g)`.
/// Infinite stages contribute nothing.
pub fn overall_sqnr(stages: &[f64]) -> Result<f64> {
    if stages.is_empty() {
        return Err(Error::Empty("no SQNR stages".into()));
    }
    let mut inv = 0.0;
    for &g in stages {
        if g.is_nan() || g <= 0.0 {
            return Err(Error::InvalidArgument(format!("stage SQNR must be positive, got {g}")));
        }
        inv += 1.0 / g;
    }
    Ok(if inv == 0.0 { f64::INFINITY } else { 1.0 / inv })
}

/// Extra formats of a vanilla recurrent layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecurrentPlan {
    pub recurrent_weight: QFormat,
    /// Format of the pre-activation codes that index the tanh table.
    pub pre_activation: QFormat,
    /// Shift that brings the state product to the input product's decimals;
    /// positive is a left shift.
    pub state_align: i32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub name: String,
    pub input: QFormat,
    pub output: QFormat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<QFormat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<QFormat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift: Option<ShiftSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recurrent: Option<RecurrentPlan>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantPlan {
    pub scheme: Scheme,
    pub input: QFormat,
    pub layers: Vec<LayerPlan>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl QuantPlan {
    pub fn layer(&self, name: &str) -> Option<&LayerPlan> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Format of the logits (the last layer before any softmax).
    pub fn output(&self) -> QFormat {
        self.layers.last().map_or(self.input, |l| l.output)
    }

    /// Checks the chain of formats and every shift against its formats.
    pub fn validate(&self, arch: &ModelArch) -> Result<()> {
        if self.layers.len() != arch.layers.len() {
            return Err(Error::InvalidPlan(format!(
                "plan has {} layers, architecture `{}` has {}",
                self.layers.len(),
                arch.name,
                arch.layers.len()
            )));
        }
        let mut cur = self.input;
        for (lp, spec) in self.layers.iter().zip(&arch.layers) {
            let bad = |what: &str| Error::InvalidPlan(format!("layer `{}`: {what}", lp.name));
            if lp.name != spec.name {
                return Err(bad(&format!("name does not match architecture layer `{}`", spec.name)));
            }
            if lp.input != cur {
                return Err(bad(&format!("input format {} but previous output is {cur}", lp.input)));
            }
            match spec.kind {
                LayerKind::Conv2d { .. } | LayerKind::Dense { .. } | LayerKind::Recurrent { .. } => {
                    let (Some(w), Some(b), Some(s)) = (lp.weight, lp.bias, lp.shift) else {
                        return Err(bad("missing weight, bias or shift"));
                    };
                    let target = match (&spec.kind, &lp.recurrent) {
                        (LayerKind::Recurrent { .. }, Some(r)) => {
                            let want = lp.input.decimal_bits() as i32 + w.decimal_bits() as i32
                                - lp.output.decimal_bits() as i32
                                - r.recurrent_weight.decimal_bits() as i32;
                            if r.state_align != want {
                                return Err(bad(&format!("state alignment {} should be {want}", r.state_align)));
                            }
                            r.pre_activation
                        }
                        (LayerKind::Recurrent { .. }, None) => return Err(bad("missing recurrent formats")),
                        _ => lp.output,
                    };
                    if derive_shifts(lp.input, w, b, target)? != s {
                        return Err(bad("shift does not match its formats"));
                    }
                }
                _ => {
                    if lp.output != lp.input {
                        return Err(bad("parameter-free layer changes format"));
                    }
                }
            }
            cur = lp.output;
        }
        Ok(())
    }
}

pub const INPUT_KEY: &str = "input";

pub fn tensor_key(layer: &str, suffix: &str) -> String {
    format!("{layer}/{suffix}")
}

/// Names of every tensor that needs a format, in execution order.
pub fn quant_keys(arch: &ModelArch) -> Result<Vec<String>> {
    let mut keys = vec![INPUT_KEY.to_string()];
    for l in &arch.layers {
        let suffixes: &[&str] = match l.kind {
            LayerKind::Conv2d { .. } => &["kernel", "bias", "out"],
            LayerKind::Dense { .. } => &["weight", "bias", "out"],
            LayerKind::Recurrent { mode: RecurrentMode::VanillaTanh, .. } => {
                &["input_kernel", "recurrent_kernel", "bias", "pre", "out"]
            }
            LayerKind::Recurrent { mode: RecurrentMode::Gru, .. } => {
                return Err(Error::Unsupported(format!("no int8 kernel for GRU layer `{}`", l.name)))
            }
            LayerKind::BatchNorm => {
                return Err(Error::Unsupported(format!("batch norm `{}` must be folded before quantization", l.name)))
            }
            LayerKind::MaxPool2 | LayerKind::Flatten | LayerKind::Softmax => &[],
        };
        keys.extend(suffixes.iter().map(|s| tensor_key(&l.name, s)));
    }
    Ok(keys)
}

fn reduce_decimals(q: QFormat, max_decimals: i32) -> QFormat {
    if (q.decimal_bits() as i32) <= max_decimals {
        q
    } else {
        QFormat::with_decimal_bits(max_decimals.clamp(0, MAGNITUDE_BITS as i32) as u8).expect("in range")
    }
}

/// Builds a plan from per-tensor formats. Where a bias or output format
/// would need a negative shift, its decimal bits are reduced and a warning
/// is recorded.
pub fn build_plan(arch: &ModelArch, formats: &BTreeMap<String, QFormat>, scheme: Scheme) -> Result<QuantPlan> {
    let keys = quant_keys(arch)?;
    let get =
        |k: &str| formats.get(k).copied().ok_or_else(|| Error::InvalidPlan(format!("no format for tensor `{k}`")));
    for k in &keys {
        get(k)?;
    }
    let input = get(INPUT_KEY)?;
    let mut warnings = Vec::new();
    let mut repair = |name: &str, what: &str, q: QFormat, limit: i32| {
        let r = reduce_decimals(q, limit);
        if r != q {
            warnings.push(format!("layer `{name}`: {what} format {q} reduced to {r} to keep shifts nonnegative"));
        }
        r
    };
    let mut cur = input;
    let mut layers = Vec::with_capacity(arch.layers.len());
    for l in &arch.layers {
        let name = l.name.as_str();
        let key = |s: &str| tensor_key(name, s);
        let lp = match l.kind {
            LayerKind::Conv2d { .. } | LayerKind::Dense { .. } => {
                let wkey = if matches!(l.kind, LayerKind::Conv2d { .. }) { "kernel" } else { "weight" };
                let w = get(&key(wkey))?;
                let prod = cur.decimal_bits() as i32 + w.decimal_bits() as i32;
                let b = repair(name, "bias", get(&key("bias"))?, prod);
                let o = repair(name, "output", get(&key("out"))?, prod);
                LayerPlan {
                    name: name.into(),
                    input: cur,
                    output: o,
                    weight: Some(w),
                    bias: Some(b),
                    shift: Some(derive_shifts(cur, w, b, o)?),
                    recurrent: None,
                }
            }
            LayerKind::Recurrent { .. } => {
                let w = get(&key("input_kernel"))?;
                let u = get(&key("recurrent_kernel"))?;
                let prod = cur.decimal_bits() as i32 + w.decimal_bits() as i32;
                let b = repair(name, "bias", get(&key("bias"))?, prod);
                let pre = repair(name, "pre-activation", get(&key("pre"))?, prod);
                let o = get(&key("out"))?;
                let state_align = prod - o.decimal_bits() as i32 - u.decimal_bits() as i32;
                LayerPlan {
                    name: name.into(),
                    input: cur,
                    output: o,
                    weight: Some(w),
                    bias: Some(b),
                    shift: Some(derive_shifts(cur, w, b, pre)?),
                    recurrent: Some(RecurrentPlan { recurrent_weight: u, pre_activation: pre, state_align }),
                }
            }
            _ => LayerPlan {
                name: name.into(),
                input: cur,
                output: cur,
                weight: None,
                bias: None,
                shift: None,
                recurrent: None,
            },
        };
        cur = lp.output;
        layers.push(lp);
    }
    let plan = QuantPlan { scheme, input, layers, warnings };
    plan.validate(arch)?;
    Ok(plan)
}

/// One row of the calibration report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorReport {
    pub name: String,
    pub format: QFormat,
    /// Reservoir SQNR in dB under the chosen format; `None` for all-zero tensors.
    pub sqnr_db: Option<f64>,
    pub overload_fraction: f64,
    pub max_abs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub plan: QuantPlan,
    pub tensors: Vec<TensorReport>,
    /// Harmonic combination of the finite per-tensor SQNRs, in dB.
    pub overall_sqnr_db: Option<f64>,
}

/// Chooses a format for every tensor of `arch` from its statistics.
pub fn select_formats(
    arch: &ModelArch,
    stats: &CalibrationStats,
    scheme: Scheme,
) -> Result<(BTreeMap<String, QFormat>, Vec<String>)> {
    let mut formats = BTreeMap::new();
    let mut warnings = Vec::new();
    for key in quant_keys(arch)? {
        let (q, w) = select(stats.get(&key)?, scheme)?;
        if let Some(w) = w {
            warnings.push(format!("`{key}`: {w}"));
        }
        formats.insert(key, q);
    }
    Ok((formats, warnings))
}

pub fn plan_from_stats(arch: &ModelArch, stats: &CalibrationStats, scheme: Scheme) -> Result<QuantPlan> {
    let (formats, warnings) = select_formats(arch, stats, scheme)?;
    let mut plan = build_plan(arch, &formats, scheme)?;
    plan.warnings.splice(0..0, warnings);
    Ok(plan)
}

/// Calibrates a plan and reports per-tensor SQNR and overload under the
/// final (possibly repaired) formats.
pub fn calibrate(arch: &ModelArch, stats: &CalibrationStats, scheme: Scheme) -> Result<CalibrationReport> {
    let plan = plan_from_stats(arch, stats, scheme)?;
    let mut tensors = Vec::new();
    let mut finite = Vec::new();
    let push = |name: String, q: QFormat, tensors: &mut Vec<TensorReport>, finite: &mut Vec<f64>| -> Result<()> {
        let s = stats.get(&name)?;
        let sqnr = match measure_sqnr(s.reservoir(), q) {
            Ok(r) => Some(r.sqnr),
            Err(Error::UndefinedSignal) => None,
            Err(e) => return Err(e),
        };
        if let Some(g) = sqnr.filter(|g| g.is_finite()) {
            finite.push(g);
        }
        tensors.push(TensorReport {
            name,
            format: q,
            sqnr_db: sqnr.map(|g| 10.0 * g.log10()),
            overload_fraction: overload_fraction(s, q.integer_bits()),
            max_abs: s.max_abs(),
        });
        Ok(())
    };
    push(INPUT_KEY.into(), plan.input, &mut tensors, &mut finite)?;
    for lp in &plan.layers {
        let k = |s: &str| tensor_key(&lp.name, s);
        let (Some(w), Some(b)) = (lp.weight, lp.bias) else { continue };
        match &lp.recurrent {
            Some(r) => {
                push(k("input_kernel"), w, &mut tensors, &mut finite)?;
                push(k("recurrent_kernel"), r.recurrent_weight, &mut tensors, &mut finite)?;
                push(k("bias"), b, &mut tensors, &mut finite)?;
                push(k("pre"), r.pre_activation, &mut tensors, &mut finite)?;
            }
            None => {
                let wk = if stats.tensors.contains_key(&k("kernel")) { "kernel" } else { "weight" };
                push(k(wk), w, &mut tensors, &mut finite)?;
                push(k("bias"), b, &mut tensors, &mut finite)?;
            }
        }
        push(k("out"), lp.output, &mut tensors, &mut finite)?;
    }
    let overall_sqnr_db = if finite.is_empty() { None } else { Some(10.0 * overall_sqnr(&finite)?.log10()) };
    Ok(CalibrationReport { plan, tensors, overall_sqnr_db })
}

//! Analytical parameter, operation and buffer accounting, plus MCU
//! feasibility checks.
//!
//! Operation counts include both multiplies and adds, per input patch:
//!
//! | layer      | ops                                   |
//! |------------|---------------------------------------|
//! | conv 3x3   | `2 * c * k^2 * out_h * out_w * out_c`  |
//! | max pool   | `k^2 * out_elements`                  |
//! | dense      | `2 * in * out`                        |
//! | vanilla RNN| `2 * (in + h) * h`                    |
//! | GRU        | `3 * 2 * (in + h) * h + 3 * h`        |
//! | batch norm | `2 * elements` (scale and shift)      |

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{shape_trace, LayerKind, ModelArch, RecurrentMode, Shape, KERNEL, POOL};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub index: usize,
    pub name: String,
    pub output: Shape,
    /// Output channels (spatial) or units (vector).
    pub channels: usize,
    pub params: u64,
    pub ops: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BufferId {
    A,
    B,
}

impl BufferId {
    fn other(self) -> Self {
        match self {
            BufferId::A => BufferId::B,
            BufferId::B => BufferId::A,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferSlot {
    /// `None` for the network input.
    pub layer: Option<String>,
    pub buffer: BufferId,
    pub elements: usize,
    /// Written over its own input (pooling and element-wise layers).
    pub in_place: bool,
}

/// Ping-pong activation buffers plus the convolution scratch lane, in bytes
/// (one byte per int8 element).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferPlan {
    pub buffer_a: usize,
    pub buffer_b: usize,
    pub scratch: usize,
    pub total: usize,
    pub slots: Vec<BufferSlot>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub model: String,
    pub input: Shape,
    pub layers: Vec<LayerCost>,
    pub total_params: u64,
    pub total_ops: u64,
    pub buffer_plan: BufferPlan,
}

impl CostReport {
    /// Flash needed for int8 parameters.
    pub fn params_bytes(&self) -> u64 {
        self.total_params
    }

    pub fn layer(&self, name: &str) -> Option<&LayerCost> {
        self.layers.iter().find(|l| l.name == name)
    }
}

fn layer_params(kind: &LayerKind, input: Shape) -> u64 {
    let k2 = (KERNEL * KERNEL) as u64;
    match *kind {
        LayerKind::Conv2d { out_channels, .. } => {
            let oc = out_channels as u64;
            oc * input.channels() as u64 * k2 + oc
        }
        LayerKind::Dense { units, .. } => {
            let u = units as u64;
            input.elements() as u64 * u + u
        }
        LayerKind::BatchNorm => 4 * input.channels() as u64,
        LayerKind::Recurrent { mode, hidden } => {
            let (i, h) = (input.elements() as u64, hidden as u64);
            mode.gates() as u64 * ((i + h) * h + h)
        }
        LayerKind::MaxPool2 | LayerKind::Flatten | LayerKind::Softmax => 0,
    }
}

fn layer_ops(kind: &LayerKind, input: Shape, output: Shape) -> u64 {
    let k2 = (KERNEL * KERNEL) as u64;
    match *kind {
        LayerKind::Conv2d { .. } => 2 * input.channels() as u64 * k2 * output.elements() as u64,
        LayerKind::MaxPool2 => (POOL * POOL) as u64 * output.elements() as u64,
        LayerKind::Dense { units, .. } => 2 * input.elements() as u64 * units as u64,
        LayerKind::BatchNorm => 2 * output.elements() as u64,
        LayerKind::Recurrent { mode, hidden } => {
            let (i, h) = (input.elements() as u64, hidden as u64);
            match mode {
                RecurrentMode::VanillaTanh => 2 * (i + h) * h,
                RecurrentMode::Gru => 3 * 2 * (i + h) * h + 3 * h,
            }
        }
        LayerKind::Flatten | LayerKind::Softmax => 0,
    }
}

/// Per-layer parameter counts and their total.
pub fn count_params(arch: &ModelArch) -> Result<(Vec<u64>, u64)> {
    let trace = shape_trace(arch)?;
    let per: Vec<u64> = arch.layers.iter().zip(&trace).map(|(l, t)| layer_params(&l.kind, t.input)).collect();
    let total = per.iter().sum();
    Ok((per, total))
}

/// Per-layer operation counts (per patch) and their total.
pub fn count_ops(arch: &ModelArch) -> Result<(Vec<u64>, u64)> {
    let trace = shape_trace(arch)?;
    let per: Vec<u64> = arch.layers.iter().zip(&trace).map(|(l, t)| layer_ops(&l.kind, t.input, t.output)).collect();
    let total = per.iter().sum();
    Ok((per, total))
}

/// Assigns layer outputs to two alternating buffers. Conv, dense and
/// recurrent layers write to the buffer their input is not in; pooling and
/// element-wise layers run in place.
pub fn plan_buffers(arch: &ModelArch) -> Result<BufferPlan> {
    let trace = shape_trace(arch)?;
    let mut slots =
        vec![BufferSlot { layer: None, buffer: BufferId::A, elements: arch.input().elements(), in_place: false }];
    let mut current = BufferId::A;
    let mut scratch = 0usize;
    for (layer, t) in arch.layers.iter().zip(&trace) {
        let moves =
            matches!(layer.kind, LayerKind::Conv2d { .. } | LayerKind::Dense { .. } | LayerKind::Recurrent { .. });
        if moves {
            current = current.other();
        }
        if let LayerKind::Conv2d { .. } = layer.kind {
            // two im2col columns of 16-bit values
            scratch = scratch.max(2 * t.input.channels() * KERNEL * KERNEL * 2);
        }
        slots.push(BufferSlot {
            layer: Some(layer.name.clone()),
            buffer: current,
            elements: t.output_elements(),
            in_place: !moves,
        });
    }
    let max_of = |id: BufferId| slots.iter().filter(|s| s.buffer == id).map(|s| s.elements).max().unwrap_or(0);
    let (buffer_a, buffer_b) = (max_of(BufferId::A), max_of(BufferId::B));
    Ok(BufferPlan { buffer_a, buffer_b, scratch, total: buffer_a + buffer_b + scratch, slots })
}

pub fn estimate(arch: &ModelArch) -> Result<CostReport> {
    let trace = shape_trace(arch)?;
    let (params, total_params) = count_params(arch)?;
    let (ops, total_ops) = count_ops(arch)?;
    let layers = trace
        .iter()
        .zip(params.into_iter().zip(ops))
        .map(|(t, (params, ops))| LayerCost {
            index: t.index,
            name: t.name.clone(),
            output: t.output,
            channels: t.output.channels(),
            params,
            ops,
        })
        .collect();
    Ok(CostReport {
        model: arch.name.clone(),
        input: arch.input(),
        layers,
        total_params,
        total_ops,
        buffer_plan: plan_buffers(arch)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceClass {
    Microcontroller,
    SingleBoardComputer,
}

/// One row of the platform capability table. Memory sizes are in KiB.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlatformSpec {
    pub name: String,
    /// `None` for external storage, treated as unbounded.
    pub flash_kb: Option<f64>,
    pub ram_kb: f64,
    pub power_mw: f64,
    pub mips: f64,
    pub class: DeviceClass,
}

pub const BYTES_PER_KB: f64 = 1024.0;

impl PlatformSpec {
    fn row(name: &str, flash_kb: Option<f64>, ram_kb: f64, power_mw: f64, mips: f64, class: DeviceClass) -> Self {
        Self { name: name.into(), flash_kb, ram_kb, power_mw, mips, class }
    }

    pub fn ram_bytes(&self) -> f64 {
        self.ram_kb * BYTES_PER_KB
    }

    pub fn flash_bytes(&self) -> Option<f64> {
        self.flash_kb.map(|kb| kb * BYTES_PER_KB)
    }
}

pub fn platforms() -> Vec<PlatformSpec> {
    use DeviceClass::*;
    vec![
        PlatformSpec::row("Arduino", Some(32.0), 2.0, 60.0, 20.0, Microcontroller),
        PlatformSpec::row("ChipKit uc32", Some(512.0), 32.0, 181.0, 124.8, Microcontroller),
        PlatformSpec::row("STM32L476RG", Some(1024.0), 128.0, 26.0, 80.0, Microcontroller),
        PlatformSpec::row("TI MSP432P4111", Some(2048.0), 256.0, 23.0, 58.56, Microcontroller),
        PlatformSpec::row("BeagleBone Black", None, 524_288.0, 2300.0, 1607.0, SingleBoardComputer),
        PlatformSpec::row("Raspberry Pi 3 B+", None, 1_048_576.0, 5500.0, 2800.0, SingleBoardComputer),
    ]
}

/// Finds a platform by case-insensitive name, ignoring spaces and dashes.
pub fn platform(name: &str) -> Result<PlatformSpec> {
    let norm = |s: &str| s.chars().filter(|c| c.is_alphanumeric()).collect::<String>().to_lowercase();
    let key = norm(name);
    platforms()
        .into_iter()
        .find(|p| norm(&p.name) == key || norm(&p.name).contains(&key) && key.len() >= 4)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown platform `{name}`")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", rename_all = "snake_case")]
pub enum Shortfall {
    Flash { needed_bytes: f64, available_bytes: f64 },
    Ram { needed_bytes: f64, available_bytes: f64 },
    Throughput { needed_ops: f64, available_ips: f64 },
    Power { platform_mw: f64, budget_mw: f64 },
}

impl fmt::Display for Shortfall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shortfall::Flash { needed_bytes, available_bytes } => {
                write!(f, "flash: needs {needed_bytes:.0} B, has {available_bytes:.0} B")
            }
            Shortfall::Ram { needed_bytes, available_bytes } => write!(
                f,
                "RAM: needs {needed_bytes:.0} B, has {available_bytes:.0} B (short {:.0} B)",
                needed_bytes - available_bytes
            ),
            Shortfall::Throughput { needed_ops, available_ips } => {
                write!(f, "MIPS: needs {:.2} M ops/s, has {:.2}", needed_ops / 1e6, available_ips / 1e6)
            }
            Shortfall::Power { platform_mw, budget_mw } => {
                write!(f, "power: draws {platform_mw} mW, budget {budget_mw} mW")
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub model: String,
    pub platform: String,
    pub passes: bool,
    pub reasons: Vec<Shortfall>,
}

/// A model fits when its int8 parameters fit in flash, its buffer plan fits
/// in RAM, one patch takes at most one second at one op per instruction,
/// and, if a budget is given, the platform's power draw is within it.
pub fn feasibility(report: &CostReport, platform: &PlatformSpec, power_budget_mw: Option<f64>) -> Verdict {
    let mut reasons = Vec::new();
    let params = report.params_bytes() as f64;
    if let Some(flash) = platform.flash_bytes() {
        if params > flash {
            reasons.push(Shortfall::Flash { needed_bytes: params, available_bytes: flash });
        }
    }
    let ram = report.buffer_plan.total as f64;
    if ram > platform.ram_bytes() {
        reasons.push(Shortfall::Ram { needed_bytes: ram, available_bytes: platform.ram_bytes() });
    }
    let ips = platform.mips * 1e6;
    if report.total_ops as f64 > ips {
        reasons.push(Shortfall::Throughput { needed_ops: report.total_ops as f64, available_ips: ips });
    }
    if let Some(budget) = power_budget_mw {
        if platform.power_mw > budget {
            reasons.push(Shortfall::Power { platform_mw: platform.power_mw, budget_mw: budget });
        }
    }
    Verdict { model: report.model.clone(), platform: platform.name.clone(), passes: reasons.is_empty(), reasons }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{preset, Activation, LayerSpec};

    #[test]
    fn m20k_params_hand_sum() {
        let (per, total) = count_params(&preset("M20k").unwrap()).unwrap();
        let nonzero: Vec<u64> = per.into_iter().filter(|&p| p > 0).collect();
        assert_eq!(nonzero, vec![40, 296, 1168, 2320, 4640, 4160, 8320, 512, 8940, 210]);
        assert_eq!(total, 30_606);
    }

    #[test]
    fn empty_arch_counts_zero() {
        let arch = ModelArch { name: "empty".into(), input_shape: [4, 4, 1], layers: vec![] };
        assert_eq!(count_params(&arch).unwrap().1, 0);
        assert_eq!(count_ops(&arch).unwrap().1, 0);
    }

    #[test]
    fn m20k_int8_rows() {
        let r = estimate(&preset("M20k_int8").unwrap()).unwrap();
        assert_eq!(r.layer("conv1").unwrap().ops, 419_616);
        assert_eq!(r.layer("conv2").unwrap().ops, 751_680);
        assert_eq!(r.layer("fc3").unwrap().ops, 1_200);
        assert_eq!(r.layer("pool1").unwrap().ops, 23_312);
    }

    #[test]
    fn m20k_int8_buffers() {
        let p = plan_buffers(&preset("M20k_int8").unwrap()).unwrap();
        assert_eq!((p.buffer_a, p.buffer_b, p.scratch, p.total), (10_440, 23_312, 576, 34_328));
    }

    fn single_dense() -> ModelArch {
        ModelArch {
            name: "one".into(),
            input_shape: [2, 3, 1],
            layers: vec![
                LayerSpec::new("flatten", LayerKind::Flatten),
                LayerSpec::new("fc", LayerKind::Dense { units: 4, activation: Activation::None }),
            ],
        }
    }

    #[test]
    fn single_layer_plan() {
        let p = plan_buffers(&single_dense()).unwrap();
        assert_eq!((p.buffer_a, p.buffer_b, p.scratch), (6, 4, 0));
    }

    #[test]
    fn swapping_equal_middle_layers_keeps_totals() {
        let mut arch = preset("M20k_int8").unwrap();
        let before = plan_buffers(&arch).unwrap().total;
        // conv4 and conv5 have equal channel counts in the reversed position
        let a = arch.layer_index("conv3").unwrap();
        let b = arch.layer_index("conv4").unwrap();
        arch.layers.swap(a, b);
        arch.layers[a].name = "conv3".into();
        arch.layers[b].name = "conv4".into();
        assert_eq!(plan_buffers(&arch).unwrap().total, before);
    }

    #[test]
    fn total_is_sum_of_parts() {
        for id in ["VGGish", "M20M", "M2M", "M200k", "M20k", "toy_student"] {
            let p = plan_buffers(&preset(id).unwrap()).unwrap();
            assert_eq!(p.total, p.buffer_a + p.buffer_b + p.scratch);
        }
    }

    #[test]
    fn feasibility_examples() {
        let m20k = estimate(&preset("M20k_int8").unwrap()).unwrap();
        let arduino = feasibility(&m20k, &platform("Arduino").unwrap(), None);
        assert!(!arduino.passes);
        assert!(arduino.reasons.iter().any(|r| matches!(r, Shortfall::Ram { .. })));
        let uc32 = feasibility(&m20k, &platform("uc32").unwrap(), None);
        assert_eq!(uc32.reasons.len(), 1);
        let Shortfall::Ram { needed_bytes, available_bytes } = uc32.reasons[0] else { panic!() };
        let short = needed_bytes - available_bytes;
        assert!((1024.0..3072.0).contains(&short), "{short}");
        for board in ["STM32L476RG", "MSP432P4111"] {
            assert!(feasibility(&m20k, &platform(board).unwrap(), None).passes);
            let m200k = estimate(&preset("M200k").unwrap()).unwrap();
            assert!(feasibility(&m200k, &platform(board).unwrap(), None).passes);
        }
    }

    #[test]
    fn power_budget_adds_reason() {
        let m20k = estimate(&preset("M20k_int8").unwrap()).unwrap();
        let v = feasibility(&m20k, &platform("Raspberry Pi 3 B+").unwrap(), Some(100.0));
        assert!(!v.passes);
        assert!(matches!(v.reasons[..], [Shortfall::Power { .. }]));
    }

    #[test]
    fn unknown_platform() {
        assert!(platform("Cray-1").is_err());
    }
}

//! Architecture descriptors, presets and shape tracing.
//!
//! Models are linear chains. Layers before the (optional) recurrent layer
//! run once per input patch; the recurrent layer consumes the per-patch
//! vectors in order and the layers after it run once on the final state.

mod io;
mod weights;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{arch_path, load_model, save_model, ARCH_EXTENSION, WEIGHTS_EXTENSION};
pub use weights::{fold_batchnorm, LayerParams, Model, ModelWeights, BN_EPSILON};

pub const KERNEL: usize = 3;
pub const POOL: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Valid,
    Same,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    None,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecurrentMode {
    VanillaTanh,
    Gru,
}

impl RecurrentMode {
    /// Number of stacked gate blocks in the weight matrices.
    pub fn gates(self) -> usize {
        match self {
            RecurrentMode::VanillaTanh => 1,
            RecurrentMode::Gru => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    /// 3x3, stride 1.
    Conv2d {
        out_channels: usize,
        padding: Padding,
        activation: Activation,
    },
    /// 2x2, stride 2, ceil-mode.
    MaxPool2,
    Flatten,
    Dense {
        units: usize,
        activation: Activation,
    },
    /// Per-channel affine normalization with frozen statistics.
    BatchNorm,
    Recurrent {
        mode: RecurrentMode,
        hidden: usize,
    },
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub embedding_tap: bool,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self { name: name.into(), kind, embedding_tap: false }
    }

    pub fn tap(mut self) -> Self {
        self.embedding_tap = true;
        self
    }

    /// Layers with trainable or stored parameters.
    pub fn has_params(&self) -> bool {
        matches!(
            self.kind,
            LayerKind::Conv2d { .. } | LayerKind::Dense { .. } | LayerKind::BatchNorm | LayerKind::Recurrent { .. }
        )
    }
}

/// Activation shape of one patch at a layer boundary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    /// Height (time) x width (frequency) x channels, row-major HWC.
    Spatial {
        h: usize,
        w: usize,
        c: usize,
    },
    Vector(usize),
}

impl Shape {
    pub fn elements(&self) -> usize {
        match *self {
            Shape::Spatial { h, w, c } => h * w * c,
            Shape::Vector(n) => n,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            Shape::Spatial { h, w, c } => vec![h, w, c],
            Shape::Vector(n) => vec![n],
        }
    }

    /// Channel count of a spatial shape, or the length of a vector.
    pub fn channels(&self) -> usize {
        match *self {
            Shape::Spatial { c, .. } => c,
            Shape::Vector(n) => n,
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Spatial { h, w, c } => write!(f, "{h}x{w}x{c}"),
            Shape::Vector(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub index: usize,
    pub name: String,
    pub input: Shape,
    pub output: Shape,
}

impl LayerTrace {
    pub fn output_elements(&self) -> usize {
        self.output.elements()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelArch {
    pub name: String,
    /// (H, W, C) of one input patch.
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl ModelArch {
    pub fn input(&self) -> Shape {
        let [h, w, c] = self.input_shape;
        Shape::Spatial { h, w, c }
    }

    pub fn recurrent_index(&self) -> Option<usize> {
        self.layers.iter().position(|l| matches!(l.kind, LayerKind::Recurrent { .. }))
    }

    pub fn embedding_index(&self) -> Option<usize> {
        self.layers.iter().position(|l| l.embedding_tap)
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Number of output classes (width of the layer feeding the softmax).
    pub fn num_classes(&self) -> Result<usize> {
        let trace = shape_trace(self)?;
        match trace.last() {
            Some(t) => Ok(t.output.elements()),
            None => Err(Error::InvalidArgument(format!("`{}` has no layers", self.name))),
        }
    }

    /// Structural checks beyond shape consistency.
    pub fn validate(&self) -> Result<()> {
        let softmaxes: Vec<usize> =
            self.layers.iter().enumerate().filter(|(_, l)| l.kind == LayerKind::Softmax).map(|(i, _)| i).collect();
        if softmaxes.len() != 1 || softmaxes[0] + 1 != self.layers.len() {
            return Err(Error::InvalidArgument(format!("`{}` must end with exactly one softmax", self.name)));
        }
        if self.layers.iter().filter(|l| l.embedding_tap).count() > 1 {
            return Err(Error::InvalidArgument("more than one embedding tap".into()));
        }
        let recurrent = self.layers.iter().filter(|l| matches!(l.kind, LayerKind::Recurrent { .. })).count();
        if recurrent > 1 {
            return Err(Error::Unsupported("more than one recurrent layer".into()));
        }
        if let (Some(r), Some(e)) = (self.recurrent_index(), self.embedding_index()) {
            if e > r {
                return Err(Error::InvalidArgument("embedding tap must precede the recurrent layer".into()));
            }
        }
        shape_trace(self).map(|_| ())
    }
}

/// Output shape of every layer for one patch.
pub fn shape_trace(arch: &ModelArch) -> Result<Vec<LayerTrace>> {
    let [h, w, c] = arch.input_shape;
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::InvalidDimension(format!("input shape {:?}", arch.input_shape)));
    }
    let mut cur = arch.input();
    let mut out = Vec::with_capacity(arch.layers.len());
    for (index, layer) in arch.layers.iter().enumerate() {
        let bad = |msg: String| Error::InvalidDimension(format!("layer `{}`: {msg}", layer.name));
        let next = match (&layer.kind, cur) {
            (LayerKind::Conv2d { out_channels, padding, .. }, Shape::Spatial { h, w, .. }) => {
                if *out_channels == 0 {
                    return Err(bad("zero output channels".into()));
                }
                let (oh, ow) = match padding {
                    Padding::Same => (h, w),
                    Padding::Valid => {
                        if h < KERNEL || w < KERNEL {
                            return Err(bad(format!("{h}x{w} input is smaller than the kernel")));
                        }
                        (h + 1 - KERNEL, w + 1 - KERNEL)
                    }
                };
                Shape::Spatial { h: oh, w: ow, c: *out_channels }
            }
            (LayerKind::MaxPool2, Shape::Spatial { h, w, c }) => {
                Shape::Spatial { h: h.div_ceil(POOL), w: w.div_ceil(POOL), c }
            }
            (LayerKind::Flatten, s) => Shape::Vector(s.elements()),
            (LayerKind::Dense { units, .. }, Shape::Vector(_)) => {
                if *units == 0 {
                    return Err(bad("zero units".into()));
                }
                Shape::Vector(*units)
            }
            (LayerKind::BatchNorm, s) => s,
            (LayerKind::Recurrent { hidden, .. }, Shape::Vector(_)) => {
                if *hidden == 0 {
                    return Err(bad("zero hidden units".into()));
                }
                Shape::Vector(*hidden)
            }
            (LayerKind::Softmax, Shape::Vector(n)) => Shape::Vector(n),
            (kind, s) => {
                return Err(Error::Shape(format!("layer `{}` ({kind:?}) cannot consume a {s} activation", layer.name)))
            }
        };
        out.push(LayerTrace { index, name: layer.name.clone(), input: cur, output: next });
        cur = next;
    }
    Ok(out)
}

/// Named architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Preset {
    VGGish,
    M20M,
    M2M,
    M200k,
    M20k,
    M20kInt8,
    ToyTeacher,
    ToyStudent,
}

impl Preset {
    pub const ALL: [Preset; 8] = [
        Preset::VGGish,
        Preset::M20M,
        Preset::M2M,
        Preset::M200k,
        Preset::M20k,
        Preset::M20kInt8,
        Preset::ToyTeacher,
        Preset::ToyStudent,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Preset::VGGish => "VGGish",
            Preset::M20M => "M20M",
            Preset::M2M => "M2M",
            Preset::M200k => "M200k",
            Preset::M20k => "M20k",
            Preset::M20kInt8 => "M20k_int8",
            Preset::ToyTeacher => "toy_teacher",
            Preset::ToyStudent => "toy_student",
        }
    }

    pub fn parse(id: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.id().eq_ignore_ascii_case(id))
            .ok_or_else(|| Error::UnknownPreset(id.to_string()))
    }

    pub fn arch(self) -> ModelArch {
        use Preset::*;
        match self {
            VGGish => m_family(self, &[&[64], &[128], &[256, 256], &[512, 512]], &[4096, 4096], Padding::Same, gru()),
            M20M => m_family(self, &[&[64], &[128], &[256], &[256]], &[2048, 2048], Padding::Same, gru()),
            M2M => m_family(self, &[&[32], &[64], &[128], &[128]], &[512], Padding::Same, gru()),
            M200k => m_family(self, &[&[8], &[16], &[32], &[64], &[64]], &[256], Padding::Same, gru()),
            M20k => m_family(self, &[&[4], &[8], &[16], &[16], &[32]], &[64], Padding::Valid, gru()),
            M20kInt8 => m_family(
                self,
                &[&[4], &[8], &[16], &[16], &[32]],
                &[64],
                Padding::Valid,
                LayerKind::Recurrent { mode: RecurrentMode::VanillaTanh, hidden: 60 },
            ),
            ToyTeacher => toy(self, &[16, 32], Padding::Same, &[64], TOY_EMBEDDING),
            ToyStudent => toy(self, &[4, 8], Padding::Valid, &[], TOY_EMBEDDING),
        }
    }
}

pub fn preset(id: &str) -> Result<ModelArch> {
    Preset::parse(id).map(Preset::arch)
}

pub const M_INPUT: [usize; 3] = [96, 64, 1];
pub const M_CLASSES: usize = 10;
pub const M_EMBEDDING: usize = 128;
pub const TOY_INPUT: [usize; 3] = [24, 16, 1];
pub const TOY_CLASSES: usize = 10;
pub const TOY_EMBEDDING: usize = 32;

fn gru() -> LayerKind {
    LayerKind::Recurrent { mode: RecurrentMode::Gru, hidden: 20 }
}

/// Builder used by the presets: conv blocks (each followed by a pool),
/// hidden dense layers, a linear embedding tap, batch norm, then the head.
struct ChainBuilder {
    layers: Vec<LayerSpec>,
    convs: usize,
    pools: usize,
    dense: usize,
}

impl ChainBuilder {
    fn new() -> Self {
        Self { layers: Vec::new(), convs: 0, pools: 0, dense: 0 }
    }

    fn conv(&mut self, out_channels: usize, padding: Padding) {
        self.convs += 1;
        self.layers.push(LayerSpec::new(
            format!("conv{}", self.convs),
            LayerKind::Conv2d { out_channels, padding, activation: Activation::Relu },
        ));
    }

    fn pool(&mut self) {
        self.pools += 1;
        self.layers.push(LayerSpec::new(format!("pool{}", self.pools), LayerKind::MaxPool2));
    }

    fn dense(&mut self, units: usize, activation: Activation) -> &mut LayerSpec {
        self.dense += 1;
        self.layers.push(LayerSpec::new(format!("fc{}", self.dense), LayerKind::Dense { units, activation }));
        self.layers.last_mut().expect("just pushed")
    }

    fn push(&mut self, name: &str, kind: LayerKind) {
        self.layers.push(LayerSpec::new(name, kind));
    }
}

fn m_family(
    preset: Preset,
    blocks: &[&[usize]],
    hidden: &[usize],
    padding: Padding,
    recurrent: LayerKind,
) -> ModelArch {
    let mut b = ChainBuilder::new();
    for block in blocks {
        for &ch in *block {
            b.conv(ch, padding);
        }
        b.pool();
    }
    b.push("flatten", LayerKind::Flatten);
    for &units in hidden {
        b.dense(units, Activation::Relu);
    }
    b.dense(M_EMBEDDING, Activation::None).embedding_tap = true;
    b.push("bn", LayerKind::BatchNorm);
    let rec_name = match recurrent {
        LayerKind::Recurrent { mode: RecurrentMode::Gru, .. } => "gru",
        _ => "rnn",
    };
    b.push(rec_name, recurrent);
    b.dense(M_CLASSES, Activation::None);
    b.push("softmax", LayerKind::Softmax);
    ModelArch { name: preset.id().to_string(), input_shape: M_INPUT, layers: b.layers }
}

fn toy(preset: Preset, convs: &[usize], padding: Padding, hidden: &[usize], embedding: usize) -> ModelArch {
    let mut b = ChainBuilder::new();
    for &ch in convs {
        b.conv(ch, padding);
        b.pool();
    }
    b.push("flatten", LayerKind::Flatten);
    for &units in hidden {
        b.dense(units, Activation::Relu);
    }
    b.dense(embedding, Activation::None).embedding_tap = true;
    b.push("bn", LayerKind::BatchNorm);
    b.dense(TOY_CLASSES, Activation::None);
    b.push("softmax", LayerKind::Softmax);
    ModelArch { name: preset.id().to_string(), input_shape: TOY_INPUT, layers: b.layers }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn channels(arch: &ModelArch, pick: impl Fn(&LayerKind) -> Option<usize>) -> Vec<usize> {
        arch.layers.iter().filter_map(|l| pick(&l.kind)).collect()
    }

    fn conv_channels(arch: &ModelArch) -> Vec<usize> {
        channels(arch, |k| match k {
            LayerKind::Conv2d { out_channels, .. } => Some(*out_channels),
            _ => None,
        })
    }

    fn dense_units(arch: &ModelArch) -> Vec<usize> {
        channels(arch, |k| match k {
            LayerKind::Dense { units, .. } => Some(*units),
            _ => None,
        })
    }

    #[test]
    fn m20k_layers() {
        let arch = preset("M20k").unwrap();
        assert_eq!(conv_channels(&arch), vec![4, 8, 16, 16, 32]);
        assert_eq!(dense_units(&arch), vec![64, 128, 10]);
        let rec = &arch.layers[arch.recurrent_index().unwrap()].kind;
        assert_eq!(rec, &LayerKind::Recurrent { mode: RecurrentMode::Gru, hidden: 20 });
    }

    #[test]
    fn vggish_layers() {
        let arch = preset("VGGish").unwrap();
        assert_eq!(conv_channels(&arch), vec![64, 128, 256, 256, 512, 512]);
        assert_eq!(dense_units(&arch), vec![4096, 4096, 128, 10]);
    }

    #[test]
    fn m20k_int8_uses_vanilla_rnn() {
        let arch = preset("m20k_int8").unwrap();
        let rec = &arch.layers[arch.recurrent_index().unwrap()].kind;
        assert_eq!(rec, &LayerKind::Recurrent { mode: RecurrentMode::VanillaTanh, hidden: 60 });
    }

    #[test]
    fn unknown_preset() {
        assert!(matches!(preset("M1G"), Err(Error::UnknownPreset(_))));
    }

    #[test]
    fn every_preset_validates_and_ends_in_classes() {
        for p in Preset::ALL {
            let arch = p.arch();
            arch.validate().unwrap();
            let expected = if matches!(p, Preset::ToyTeacher | Preset::ToyStudent) { TOY_CLASSES } else { M_CLASSES };
            assert_eq!(arch.num_classes().unwrap(), expected, "{}", p.id());
            let tap = arch.embedding_index().unwrap();
            let trace = shape_trace(&arch).unwrap();
            let emb = if p == Preset::ToyTeacher || p == Preset::ToyStudent { TOY_EMBEDDING } else { M_EMBEDDING };
            assert_eq!(trace[tap].output, Shape::Vector(emb));
        }
    }

    #[test]
    fn quantizable_presets_have_channel_multiples_of_four() {
        for p in Preset::ALL {
            for ch in conv_channels(&p.arch()) {
                assert_eq!(ch % 4, 0, "{}", p.id());
            }
        }
    }

    #[test]
    fn m20k_int8_trace_matches_buffer_table() {
        let arch = preset("M20k_int8").unwrap();
        let trace = shape_trace(&arch).unwrap();
        let convs: Vec<usize> = trace
            .iter()
            .filter(|t| matches!(arch.layers[t.index].kind, LayerKind::Conv2d { .. }))
            .map(|t| t.output_elements())
            .collect();
        assert_eq!(convs, vec![23312, 10440, 4368, 720, 96]);
        assert_eq!(arch.input().elements(), 6144);
    }

    #[test]
    fn ceil_mode_pool() {
        let arch = preset("M20k").unwrap();
        let trace = shape_trace(&arch).unwrap();
        let pool2 = trace.iter().find(|t| t.name == "pool2").unwrap();
        assert_eq!(pool2.input, Shape::Spatial { h: 45, w: 29, c: 8 });
        assert_eq!(pool2.output, Shape::Spatial { h: 23, w: 15, c: 8 });
    }

    #[test]
    fn vggish_flatten_size() {
        let arch = preset("VGGish").unwrap();
        let trace = shape_trace(&arch).unwrap();
        let flat = trace.iter().find(|t| t.name == "flatten").unwrap();
        assert_eq!(flat.output, Shape::Vector(6 * 4 * 512));
    }

    #[test]
    fn trace_rejects_collapsing_dims() {
        let mut arch = preset("M20k").unwrap();
        arch.input_shape = [8, 8, 1];
        assert!(matches!(shape_trace(&arch), Err(Error::InvalidDimension(_))));
    }

    #[test]
    fn arch_json_roundtrip() {
        let arch = preset("M20k_int8").unwrap();
        let text = serde_json::to_string_pretty(&arch).unwrap();
        let back: ModelArch = serde_json::from_str(&text).unwrap();
        assert_eq!(arch, back);
    }

    #[test]
    fn validate_requires_trailing_softmax() {
        let mut arch = preset("toy_student").unwrap();
        arch.layers.pop();
        assert!(arch.validate().is_err());
    }
}

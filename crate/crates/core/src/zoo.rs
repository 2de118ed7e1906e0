//! Whole-model builders and the parameter/buffer footprint auditor.
//!
//! Six architectures share a stem / four-stage / head layout:
//!
//! | model               | stem                         | blocks          | head                    |
//! |---------------------|------------------------------|-----------------|-------------------------|
//! | `custom_cnn`        | 3×(3×3 conv) + 3×3 max-pool  | ds residual     | GAP, FC 128, FC classes |
//! | `variant_a`         | as custom_cnn                | standard        | as custom_cnn           |
//! | `variant_b`         | 7×7/64 s2 + 3×3 max-pool     | standard        | as custom_cnn           |
//! | `evolved_baseline`  | as variant_b                 | standard        | GAP, FC classes         |
//! | `enhanced_baseline` | as variant_b                 | bottleneck      | GAP, FC classes         |
//! | `mini_yolo`         | four 3×3 convs with LeakyReLU, no batch norm   || adaptive pool, FC C+4   |
//!
//! plus the transfer head (GAP, dropout, FC, softmax) for frozen backbones.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::blocks::{build_block, BlockFamily, BlockSpec};
use crate::error::{Error, Result};
use crate::layers::{ArchGraph, EntryKind, GraphBuilder, InputSpec, OutputSpec, ValueId};
use crate::tensor::Scalar;

/// Negative slope of MiniYOLO's LeakyReLU activations.
pub const LEAKY_SLOPE: f64 = 0.1;
/// Dropout rate of the transfer head.
pub const TRANSFER_DROPOUT: f64 = 0.2;
const BYTES_PER_VALUE: f64 = 4.0;
const MIB: f64 = 1_048_576.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    CustomCnn,
    VariantA,
    VariantB,
    EvolvedBaseline,
    EnhancedBaseline,
    MiniYolo,
    TransferHead,
}

impl ModelKind {
    pub const ALL: [ModelKind; 7] = [
        ModelKind::CustomCnn,
        ModelKind::VariantA,
        ModelKind::VariantB,
        ModelKind::EvolvedBaseline,
        ModelKind::EnhancedBaseline,
        ModelKind::MiniYolo,
        ModelKind::TransferHead,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::CustomCnn => "custom_cnn",
            ModelKind::VariantA => "variant_a",
            ModelKind::VariantB => "variant_b",
            ModelKind::EvolvedBaseline => "evolved_baseline",
            ModelKind::EnhancedBaseline => "enhanced_baseline",
            ModelKind::MiniYolo => "mini_yolo",
            ModelKind::TransferHead => "transfer_head",
        }
    }

    pub fn is_detector(&self) -> bool {
        *self == ModelKind::MiniYolo
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            let names: Vec<&str> = ModelKind::ALL.iter().map(|m| m.as_str()).collect();
            Error::config(format!("unknown model `{s}`; expected one of {}", names.join(", ")))
        })
    }
}

/// Everything needed to instantiate a model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub classes: usize,
    /// Uniform channel multiplier in `(0, 1]`.
    pub width: f64,
    pub input: InputSpec,
    /// Channel count of the feature map the transfer head consumes.
    pub feature_dim: usize,
    pub dropout: f64,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, classes: usize) -> Self {
        let input = match kind {
            ModelKind::TransferHead => InputSpec::new(1280, 7, 7),
            _ => InputSpec::new(3, 224, 224),
        };
        ModelSpec { kind, classes, width: 1.0, input, feature_dim: 1280, dropout: TRANSFER_DROPOUT }
    }

    pub fn with_width(mut self, width: f64) -> Self {
        self.width = width;
        self
    }

    pub fn with_resolution(mut self, hw: usize) -> Self {
        self.input.height = hw;
        self.input.width = hw;
        self
    }

    pub fn with_feature_dim(mut self, dim: usize) -> Self {
        self.feature_dim = dim;
        self.input.channels = dim;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if !(self.width > 0.0 && self.width <= 1.0) {
            return Err(Error::config(format!("width multiplier must be in (0, 1], got {}", self.width)));
        }
        if self.kind == ModelKind::TransferHead && self.feature_dim == 0 {
            return Err(Error::config("feature dimension must be positive"));
        }
        if self.kind == ModelKind::MiniYolo && (self.input.height < 8 || self.input.width < 8) {
            return Err(Error::config("mini_yolo needs an input of at least 8x8"));
        }
        Ok(())
    }

    /// `max(1, round(width * c))`.
    pub fn scale(&self, channels: usize) -> usize {
        ((self.width * channels as f64).round() as usize).max(1)
    }

    /// Bottleneck output widths keep a multiple of four: the middle width is
    /// scaled and the output is four times that.
    fn scale_bottleneck(&self, out_dim: usize) -> usize {
        4 * self.scale(out_dim / 4)
    }
}

/// Builds the model described by `spec`, initializing weights from `seed`.
pub fn build(spec: &ModelSpec, seed: u64) -> Result<ArchGraph> {
    spec.validate()?;
    let input = match spec.kind {
        ModelKind::TransferHead => InputSpec { channels: spec.feature_dim, ..spec.input },
        _ => spec.input,
    };
    let mut b = GraphBuilder::new(spec.kind.as_str(), input, seed);
    let x = b.input();
    match spec.kind {
        ModelKind::CustomCnn => {
            let h = three_conv_stem(&mut b, spec, x)?;
            let h = stages(&mut b, spec, h, BlockFamily::DsResidual)?;
            dense_head(&mut b, spec, h, true)?;
        }
        ModelKind::VariantA => {
            let h = three_conv_stem(&mut b, spec, x)?;
            let h = stages(&mut b, spec, h, BlockFamily::StandardResidual)?;
            dense_head(&mut b, spec, h, true)?;
        }
        ModelKind::VariantB => {
            let h = wide_stem(&mut b, spec, x)?;
            let h = stages(&mut b, spec, h, BlockFamily::StandardResidual)?;
            dense_head(&mut b, spec, h, true)?;
        }
        ModelKind::EvolvedBaseline => {
            let h = wide_stem(&mut b, spec, x)?;
            let h = stages(&mut b, spec, h, BlockFamily::StandardResidual)?;
            dense_head(&mut b, spec, h, false)?;
        }
        ModelKind::EnhancedBaseline => {
            let h = wide_stem(&mut b, spec, x)?;
            let h = bottleneck_stages(&mut b, spec, h)?;
            dense_head(&mut b, spec, h, false)?;
        }
        ModelKind::MiniYolo => {
            mini_yolo_body(&mut b, spec, x)?;
            return b.finish(OutputSpec::Detection { classes: spec.classes });
        }
        ModelKind::TransferHead => {
            transfer_head(&mut b, spec.classes, spec.dropout, x)?;
        }
    }
    b.finish(OutputSpec::Classes { classes: spec.classes })
}

pub fn build_custom_cnn(classes: usize) -> Result<ArchGraph> {
    build(&ModelSpec::new(ModelKind::CustomCnn, classes), 0)
}

pub fn build_variant_a(classes: usize) -> Result<ArchGraph> {
    build(&ModelSpec::new(ModelKind::VariantA, classes), 0)
}

pub fn build_variant_b(classes: usize) -> Result<ArchGraph> {
    build(&ModelSpec::new(ModelKind::VariantB, classes), 0)
}

pub fn build_evolved_baseline(classes: usize) -> Result<ArchGraph> {
    build(&ModelSpec::new(ModelKind::EvolvedBaseline, classes), 0)
}

pub fn build_enhanced_baseline(classes: usize) -> Result<ArchGraph> {
    build(&ModelSpec::new(ModelKind::EnhancedBaseline, classes), 0)
}

pub fn build_mini_yolo(classes: usize) -> Result<ArchGraph> {
    build(&ModelSpec::new(ModelKind::MiniYolo, classes), 0)
}

/// Stand-alone transfer head over a `feature_dim × 7 × 7` feature map.
pub fn build_transfer_head(feature_dim: usize, classes: usize, dropout: f64) -> Result<ArchGraph> {
    let mut spec = ModelSpec::new(ModelKind::TransferHead, classes).with_feature_dim(feature_dim);
    spec.dropout = dropout;
    build(&spec, 0)
}

/// Conv 3×3/32 s2, conv 3×3/32, conv 3×3/64 (each BN + ReLU), max-pool 3×3 s2.
fn three_conv_stem(b: &mut GraphBuilder, spec: &ModelSpec, x: ValueId) -> Result<ValueId> {
    let mut h = x;
    for (i, (filters, stride)) in [(32, 2), (32, 1), (64, 1)].into_iter().enumerate() {
        let i = i + 1;
        h = b.conv(&format!("stem.conv{i}"), h, spec.scale(filters), 3, stride, 1, false)?;
        h = b.batch_norm(&format!("stem.bn{i}"), h)?;
        h = b.relu(&format!("stem.relu{i}"), h)?;
    }
    b.max_pool("stem.pool", h, 3, 2, 1)
}

/// Conv 7×7/64 s2 + BN + ReLU, max-pool 3×3 s2.
fn wide_stem(b: &mut GraphBuilder, spec: &ModelSpec, x: ValueId) -> Result<ValueId> {
    let h = b.conv("stem.conv1", x, spec.scale(64), 7, 2, 3, false)?;
    let h = b.batch_norm("stem.bn1", h)?;
    let h = b.relu("stem.relu1", h)?;
    b.max_pool("stem.pool", h, 3, 2, 1)
}

/// Two blocks per stage at 64/128/256/512 filters; stages 2-4 open with stride 2.
fn stages(b: &mut GraphBuilder, spec: &ModelSpec, x: ValueId, family: BlockFamily) -> Result<ValueId> {
    let mut h = x;
    for (s, filters) in [64, 128, 256, 512].into_iter().enumerate() {
        for blk in 0..2 {
            let stride = if s > 0 && blk == 0 { 2 } else { 1 };
            let block = BlockSpec::new(family, spec.scale(filters), stride);
            h = build_block(b, &format!("stage{}.block{}", s + 1, blk + 1), h, block)?;
        }
    }
    Ok(h)
}

/// 3×256, 4×512, 6×1024, 3×2048 bottleneck blocks; the very first block
/// always projects its shortcut.
fn bottleneck_stages(b: &mut GraphBuilder, spec: &ModelSpec, x: ValueId) -> Result<ValueId> {
    let mut h = x;
    for (s, (out_dim, count)) in [(256, 3), (512, 4), (1024, 6), (2048, 3)].into_iter().enumerate() {
        for blk in 0..count {
            let stride = if s > 0 && blk == 0 { 2 } else { 1 };
            let block = BlockSpec {
                family: BlockFamily::Bottleneck,
                filters: spec.scale_bottleneck(out_dim),
                stride,
                force_projection: s == 0 && blk == 0,
            };
            h = build_block(b, &format!("stage{}.block{}", s + 1, blk + 1), h, block)?;
        }
    }
    Ok(h)
}

fn dense_head(b: &mut GraphBuilder, spec: &ModelSpec, x: ValueId, hidden: bool) -> Result<ValueId> {
    let mut h = b.global_avg_pool("head.gap", x)?;
    if hidden {
        h = b.fully_connected("head.fc1", h, spec.scale(128), true)?;
        h = b.relu("head.relu1", h)?;
        h = b.fully_connected("head.fc2", h, spec.classes, true)?;
    } else {
        h = b.fully_connected("head.fc", h, spec.classes, true)?;
    }
    b.softmax("head.softmax", h)
}

fn mini_yolo_body(b: &mut GraphBuilder, spec: &ModelSpec, x: ValueId) -> Result<ValueId> {
    let mut h = x;
    for (i, filters) in [16, 32, 64, 128].into_iter().enumerate() {
        let i = i + 1;
        h = b.conv(&format!("backbone.conv{i}"), h, spec.scale(filters), 3, 1, 1, true)?;
        h = b.leaky_relu(&format!("backbone.act{i}"), h, LEAKY_SLOPE)?;
        if i < 4 {
            h = b.max_pool(&format!("backbone.pool{i}"), h, 2, 2, 0)?;
        }
    }
    let h = b.adaptive_avg_pool("backbone.adaptive_pool", h, 1, 1)?;
    b.fully_connected("head.fc", h, spec.classes + 4, true)
}

fn transfer_head(b: &mut GraphBuilder, classes: usize, dropout: f64, x: ValueId) -> Result<ValueId> {
    let h = b.global_avg_pool("head.gap", x)?;
    let h = b.dropout("head.dropout", h, dropout)?;
    let h = b.fully_connected("head.fc", h, classes, true)?;
    b.softmax("head.softmax", h)
}

/// Prefixes that cover every backbone layer of a built model (everything
/// except `head.`).
pub fn backbone_prefixes<T: Scalar>(graph: &ArchGraph<T>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for name in graph.params().names() {
        let prefix = match name.find('.') {
            Some(i) => &name[..=i],
            None => name,
        };
        if prefix != "head." && !out.iter().any(|p| p == prefix) {
            out.push(prefix.to_string());
        }
    }
    out
}

/// Freezes every backbone entry, leaving only `head.` trainable.
pub fn freeze_backbone<T: Scalar>(graph: &mut ArchGraph<T>) -> Result<()> {
    for p in backbone_prefixes(graph) {
        graph.set_trainable(&p, false)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditRow {
    pub layer: String,
    pub kind: &'static str,
    pub out_shape: [usize; 4],
    pub params_trainable: usize,
    pub params_frozen: usize,
    pub buffers: usize,
    pub mib_trainable: f64,
    pub mib_frozen: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AuditTotals {
    pub params_trainable: usize,
    pub params_frozen: usize,
    pub buffers: usize,
    pub params_total: usize,
    pub mib_trainable: f64,
    pub mib_frozen: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditReport {
    pub model: String,
    pub input: [usize; 3],
    pub layers: Vec<AuditRow>,
    pub totals: AuditTotals,
}

/// Bytes of `count` 32-bit values, in MiB.
pub fn mib(count: usize) -> f64 {
    count as f64 * BYTES_PER_VALUE / MIB
}

/// Per-layer parameter and buffer counts derived from each layer's
/// hyperparameters; the trainable/frozen split follows the store's flags.
/// The frozen footprint counts frozen parameters and buffers together.
pub fn audit<T: Scalar>(graph: &ArchGraph<T>) -> Result<AuditReport> {
    let shapes = graph.infer_shapes(1)?;
    let mut layers = Vec::with_capacity(graph.nodes().len());
    let mut totals = AuditTotals::default();
    for (k, node) in graph.nodes().iter().enumerate() {
        let (mut trainable, mut frozen, mut buffers) = (0, 0, 0);
        for (slot, name) in node.kind.param_slots().iter().zip(&node.params) {
            let count = slot.shape.len();
            match slot.kind {
                EntryKind::Buffer => buffers += count,
                EntryKind::Parameter if graph.params().is_trainable(name) => trainable += count,
                EntryKind::Parameter => frozen += count,
            }
        }
        totals.params_trainable += trainable;
        totals.params_frozen += frozen;
        totals.buffers += buffers;
        layers.push(AuditRow {
            layer: node.name.clone(),
            kind: node.kind.tag(),
            out_shape: shapes[k + 1].dims(),
            params_trainable: trainable,
            params_frozen: frozen,
            buffers,
            mib_trainable: mib(trainable),
            mib_frozen: mib(frozen + buffers),
        });
    }
    totals.params_total = totals.params_trainable + totals.params_frozen;
    totals.mib_trainable = mib(totals.params_trainable);
    totals.mib_frozen = mib(totals.params_frozen + totals.buffers);
    let input = graph.input_spec();
    Ok(AuditReport {
        model: graph.name().to_string(),
        input: [input.channels, input.height, input.width],
        layers,
        totals,
    })
}

impl AuditReport {
    /// Fixed-width per-layer table for terminals.
    pub fn to_table(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<32} {:<18} {:<22} {:>12} {:>10} {:>9}",
            "layer", "kind", "out_shape", "trainable", "frozen", "buffers"
        );
        for r in &self.layers {
            let shape = format!("{:?}", r.out_shape);
            let _ = writeln!(
                out,
                "{:<32} {:<18} {:<22} {:>12} {:>10} {:>9}",
                r.layer, r.kind, shape, r.params_trainable, r.params_frozen, r.buffers
            );
        }
        let t = &self.totals;
        let _ = writeln!(
            out,
            "total: {} trainable ({:.2} MiB), {} frozen + {} buffers ({:.2} MiB)",
            t.params_trainable, t.mib_trainable, t.params_frozen, t.buffers, t.mib_frozen
        );
        out
    }
}

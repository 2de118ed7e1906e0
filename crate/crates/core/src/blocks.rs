//! Residual block families.
//!
//! Each builder appends one block to a [`GraphBuilder`] under a name prefix
//! (`"stage2.block1"` produces layers such as `"stage2.block1.dw"`) and
//! returns the block output. All convolutions here are followed by batch
//! norm and carry no bias.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::layers::{GraphBuilder, ValueId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockFamily {
    DsResidual,
    StandardResidual,
    Bottleneck,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct BlockSpec {
    pub family: BlockFamily,
    pub filters: usize,
    pub stride: usize,
    pub force_projection: bool,
}

impl BlockSpec {
    pub fn new(family: BlockFamily, filters: usize, stride: usize) -> Self {
        BlockSpec { family, filters, stride, force_projection: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.filters == 0 {
            return Err(Error::config("block filters must be positive"));
        }
        if self.stride != 1 && self.stride != 2 {
            return Err(Error::config(format!("block stride must be 1 or 2, got {}", self.stride)));
        }
        if self.family == BlockFamily::Bottleneck && !self.filters.is_multiple_of(4) {
            return Err(Error::config(format!("bottleneck output width {} is not divisible by 4", self.filters)));
        }
        Ok(())
    }
}

pub fn build_block(b: &mut GraphBuilder, prefix: &str, x: ValueId, spec: BlockSpec) -> Result<ValueId> {
    spec.validate()?;
    match spec.family {
        BlockFamily::DsResidual => build_ds_residual(b, prefix, x, spec.filters, spec.stride),
        BlockFamily::StandardResidual => build_standard_residual(b, prefix, x, spec.filters, spec.stride),
        BlockFamily::Bottleneck => build_bottleneck(b, prefix, x, spec.filters, spec.stride, spec.force_projection),
    }
}

/// Identity, or a strided 1×1 projection followed by batch norm.
fn shortcut(
    b: &mut GraphBuilder,
    prefix: &str,
    x: ValueId,
    filters: usize,
    stride: usize,
    force: bool,
) -> Result<ValueId> {
    if !force && b.channels(x) == filters && stride == 1 {
        return Ok(x);
    }
    let p = b.conv(&format!("{prefix}.proj"), x, filters, 1, stride, 0, false)?;
    b.batch_norm(&format!("{prefix}.proj_bn"), p)
}

fn merge(b: &mut GraphBuilder, prefix: &str, main: ValueId, skip: ValueId) -> Result<ValueId> {
    let sum = b.add(&format!("{prefix}.add"), main, skip)?;
    b.relu(&format!("{prefix}.out_relu"), sum)
}

/// Depthwise 3×3 → BN → pointwise 1×1 → BN → ReLU → 3×3 → BN, plus shortcut.
pub fn build_ds_residual(
    b: &mut GraphBuilder,
    prefix: &str,
    x: ValueId,
    filters: usize,
    stride: usize,
) -> Result<ValueId> {
    BlockSpec::new(BlockFamily::DsResidual, filters, stride).validate()?;
    let n = |s: &str| format!("{prefix}.{s}");
    let h = b.depthwise(&n("dw"), x, 3, stride, 1)?;
    let h = b.batch_norm(&n("dw_bn"), h)?;
    let h = b.conv(&n("pw"), h, filters, 1, 1, 0, false)?;
    let h = b.batch_norm(&n("pw_bn"), h)?;
    let h = b.relu(&n("pw_relu"), h)?;
    let h = b.conv(&n("conv"), h, filters, 3, 1, 1, false)?;
    let h = b.batch_norm(&n("conv_bn"), h)?;
    let s = shortcut(b, prefix, x, filters, stride, false)?;
    merge(b, prefix, h, s)
}

/// 3×3 (stride s) → BN → ReLU → 3×3 → BN, plus shortcut.
pub fn build_standard_residual(
    b: &mut GraphBuilder,
    prefix: &str,
    x: ValueId,
    filters: usize,
    stride: usize,
) -> Result<ValueId> {
    BlockSpec::new(BlockFamily::StandardResidual, filters, stride).validate()?;
    let n = |s: &str| format!("{prefix}.{s}");
    let h = b.conv(&n("conv1"), x, filters, 3, stride, 1, false)?;
    let h = b.batch_norm(&n("bn1"), h)?;
    let h = b.relu(&n("relu1"), h)?;
    let h = b.conv(&n("conv2"), h, filters, 3, 1, 1, false)?;
    let h = b.batch_norm(&n("bn2"), h)?;
    let s = shortcut(b, prefix, x, filters, stride, false)?;
    merge(b, prefix, h, s)
}

/// 1×1 reduce to `out_dim / 4` → 3×3 (stride s) → 1×1 expand, each with BN,
/// plus shortcut. `force_projection` keeps the projection even when shapes
/// already match.
pub fn build_bottleneck(
    b: &mut GraphBuilder,
    prefix: &str,
    x: ValueId,
    out_dim: usize,
    stride: usize,
    force_projection: bool,
) -> Result<ValueId> {
    BlockSpec { family: BlockFamily::Bottleneck, filters: out_dim, stride, force_projection }.validate()?;
    let mid = out_dim / 4;
    let n = |s: &str| format!("{prefix}.{s}");
    let h = b.conv(&n("reduce"), x, mid, 1, 1, 0, false)?;
    let h = b.batch_norm(&n("reduce_bn"), h)?;
    let h = b.relu(&n("reduce_relu"), h)?;
    let h = b.conv(&n("conv"), h, mid, 3, stride, 1, false)?;
    let h = b.batch_norm(&n("conv_bn"), h)?;
    let h = b.relu(&n("conv_relu"), h)?;
    let h = b.conv(&n("expand"), h, out_dim, 1, 1, 0, false)?;
    let h = b.batch_norm(&n("expand_bn"), h)?;
    let s = shortcut(b, prefix, x, out_dim, stride, force_projection)?;
    merge(b, prefix, h, s)
}

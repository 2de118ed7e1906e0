//! Model checkpoints on top of CNT1.
//!
//! Every store entry is written in store order, followed by one metadata
//! entry holding a flag per entry: 0 = buffer, 1 = trainable parameter,
//! 2 = frozen parameter.

use std::path::Path;

use super::cnt::{self, TensorRecord};
use crate::error::{Error, Result};
use crate::layers::{ArchGraph, EntryKind, ParamStore};

pub const FLAGS_ENTRY: &str = "__meta__.flags";

fn flag_of(kind: EntryKind, trainable: bool) -> f32 {
    match (kind, trainable) {
        (EntryKind::Buffer, _) => 0.0,
        (EntryKind::Parameter, true) => 1.0,
        (EntryKind::Parameter, false) => 2.0,
    }
}

pub fn to_records(params: &ParamStore<f32>) -> Vec<TensorRecord> {
    let mut records: Vec<TensorRecord> =
        params.iter().map(|(name, e)| TensorRecord::from_tensor(name, &e.tensor)).collect();
    let flags: Vec<f32> = params.iter().map(|(_, e)| flag_of(e.kind(), e.trainable())).collect();
    records.push(TensorRecord { name: FLAGS_ENTRY.to_string(), dims: vec![flags.len()], data: flags });
    records
}

pub fn encode_checkpoint(graph: &ArchGraph) -> Result<Vec<u8>> {
    cnt::encode(&to_records(graph.params()))
}

pub fn save_checkpoint(graph: &ArchGraph, path: &Path) -> Result<()> {
    cnt::write_tensor_file(path, &to_records(graph.params()))
}

/// Copies tensors and trainable flags from `records` into `graph`.
///
/// The checkpoint must hold exactly the graph's entries with matching
/// shapes; otherwise nothing is modified and the error names the first
/// mismatched tensor.
pub fn apply_records(graph: &mut ArchGraph, records: &[TensorRecord]) -> Result<()> {
    let mismatch =
        |name: &str, detail: String| Error::data(format!("checkpoint mismatch at tensor `{name}`: {detail}"));
    let mut flags = None;
    let mut tensors = Vec::with_capacity(records.len());
    for r in records {
        if r.name == FLAGS_ENTRY {
            flags = Some(&r.data);
        } else {
            tensors.push(r);
        }
    }
    let store = graph.params();
    for (i, (name, entry)) in store.iter().enumerate() {
        let Some(r) = tensors.iter().find(|r| r.name == name) else {
            return Err(mismatch(name, "missing from checkpoint".into()));
        };
        let want = TensorRecord::from_tensor(name, &entry.tensor).dims;
        if r.dims != want {
            return Err(mismatch(name, format!("checkpoint has extents {:?}, model expects {:?}", r.dims, want)));
        }
        if let Some(f) = flags {
            let Some(&flag) = f.get(i) else {
                return Err(mismatch(FLAGS_ENTRY, format!("no flag for entry {i}")));
            };
            let ok = match entry.kind() {
                EntryKind::Buffer => flag == 0.0,
                EntryKind::Parameter => flag == 1.0 || flag == 2.0,
            };
            if !ok {
                return Err(mismatch(name, format!("flag {flag} does not fit a {:?}", entry.kind())));
            }
        }
    }
    if let Some(extra) = tensors.iter().find(|r| !store.contains(&r.name)) {
        return Err(mismatch(&extra.name, "not part of the model".into()));
    }
    if let Some(f) = flags {
        if f.len() != store.len() {
            return Err(mismatch(FLAGS_ENTRY, format!("{} flags for {} entries", f.len(), store.len())));
        }
    }

    let names: Vec<String> = store.names().map(str::to_string).collect();
    for (i, name) in names.iter().enumerate() {
        let r = tensors.iter().find(|r| &r.name == name).expect("validated");
        let dst = graph.params_mut().get_mut(name).expect("validated");
        dst.data_mut().copy_from_slice(&r.data);
        if let Some(f) = flags {
            if f[i] != 0.0 {
                graph.params_mut().set_entry_trainable(name, f[i] == 1.0)?;
            }
        }
    }
    Ok(())
}

pub fn load_checkpoint(graph: &mut ArchGraph, path: &Path) -> Result<()> {
    let records = cnt::read_tensor_file(path)?;
    apply_records(graph, &records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::{build, ModelKind, ModelSpec};

    fn tiny(kind: ModelKind, seed: u64) -> ArchGraph {
        build(&ModelSpec::new(kind, 3).with_width(1.0 / 16.0).with_resolution(32), seed).unwrap()
    }

    #[test]
    fn round_trip_preserves_values_and_flags() {
        let mut a = tiny(ModelKind::VariantA, 1);
        a.set_trainable("stage1.", false).unwrap();
        let bytes = encode_checkpoint(&a).unwrap();
        let mut b = tiny(ModelKind::VariantA, 2);
        apply_records(&mut b, &cnt::decode(&bytes).unwrap()).unwrap();
        assert_eq!(encode_checkpoint(&b).unwrap(), bytes);
        assert!(!b.params().is_trainable("stage1.block1.conv1.weight"));
        assert!(b.params().is_trainable("stage2.block1.conv1.weight"));
    }

    #[test]
    fn mismatch_names_first_tensor() {
        let a = tiny(ModelKind::VariantA, 1);
        let mut b = tiny(ModelKind::VariantB, 1);
        let records = cnt::decode(&encode_checkpoint(&a).unwrap()).unwrap();
        let before = encode_checkpoint(&b).unwrap();
        let err = apply_records(&mut b, &records).unwrap_err().to_string();
        assert!(err.contains("`stem.conv1.weight`"), "{err}");
        assert_eq!(encode_checkpoint(&b).unwrap(), before);
    }
}

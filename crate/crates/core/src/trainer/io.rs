//! Model checkpoints: every parameter by name, then each batch-norm layer's
//! running mean and variance as `bn.<layer>.running_mean` / `.running_var`
//! of shape (C, 1, 1, 1). The header meta carries the model config and the
//! per-layer initialized flags.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::{checkpoint, Element, Tensor};
use crate::error::{Error, Result};
use crate::model::{build_model, Model, ModelConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    bn_initialized: Vec<bool>,
}

fn entries<T: Element>(model: &Model<T>) -> Vec<(String, Tensor<T>)> {
    let mut out: Vec<(String, Tensor<T>)> = model
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect();
    for bn in model.bn_states() {
        let c = bn.running_mean.len();
        out.push((
            format!("bn.{}.running_mean", bn.name),
            Tensor::new([c, 1, 1, 1], bn.running_mean.clone()).expect("length matches"),
        ));
        out.push((
            format!("bn.{}.running_var", bn.name),
            Tensor::new([c, 1, 1, 1], bn.running_var.clone()).expect("length matches"),
        ));
    }
    out
}

pub fn encode_checkpoint<T: Element>(model: &Model<T>) -> Vec<u8> {
    let meta = Meta {
        model: model.config().clone(),
        bn_initialized: model.bn_states().iter().map(|b| b.initialized).collect(),
    };
    let meta = serde_json::to_value(meta).expect("meta serializes");
    let owned = entries(model);
    let refs: Vec<(&str, &Tensor<T>)> = owned.iter().map(|(n, t)| (n.as_str(), t)).collect();
    checkpoint::encode(&meta, &refs)
}

pub fn save_checkpoint<T: Element>(model: &Model<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

fn fill<T: Element>(
    model: &mut Model<T>,
    ck: checkpoint::Checkpoint<T>,
    path: &Path,
) -> Result<()> {
    let expected = entries(model);
    let mismatch = |message: String| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    let bad: Vec<String> = expected
        .iter()
        .zip(&ck.entries)
        .filter(|((en, et), (gn, gt))| en != gn || et.shape() != gt.shape())
        .map(|((en, et), (gn, gt))| {
            format!(
                "expected {en} {:?}, found {gn} {:?}",
                et.shape(),
                gt.shape()
            )
        })
        .collect();
    if !bad.is_empty() || expected.len() != ck.entries.len() {
        let mut message = format!(
            "{} entries in file, model expects {}",
            ck.entries.len(),
            expected.len()
        );
        if !bad.is_empty() {
            message = format!(
                "first mismatch: {}; {} mismatched entries: {}",
                bad[0],
                bad.len(),
                bad.join(", ")
            );
        }
        return Err(mismatch(message));
    }
    let meta: Meta =
        serde_json::from_value(ck.meta).map_err(|e| mismatch(format!("bad meta: {e}")))?;
    if meta.bn_initialized.len() != model.bn_states().len() {
        return Err(mismatch("batch-norm flag count differs".into()));
    }
    let mut it = ck.entries.into_iter();
    for p in model.params_mut() {
        p.value = it.next().unwrap().1;
    }
    for (bn, init) in model.bn_states_mut().iter_mut().zip(meta.bn_initialized) {
        bn.running_mean = it.next().unwrap().1.into_data();
        bn.running_var = it.next().unwrap().1.into_data();
        bn.initialized = init;
    }
    Ok(())
}

/// Load into an existing model; names and shapes must match exactly.
pub fn load_into<T: Element>(model: &mut Model<T>, path: &Path) -> Result<()> {
    let ck = checkpoint::read::<T>(path)?;
    fill(model, ck, path)
}

/// Rebuild the model described by the checkpoint's own config.
pub fn load_checkpoint<T: Element>(path: &Path) -> Result<Model<T>> {
    let ck = checkpoint::read::<T>(path)?;
    let meta: Meta = serde_json::from_value(ck.meta.clone()).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        message: format!("bad meta: {e}"),
    })?;
    let mut model = build_model::<T>(&meta.model, 0)?;
    fill(&mut model, ck, path)?;
    Ok(model)
}

//! Teacher checkpoints in the shared container format (magic "KVZL").

use std::path::Path;

use crate::container::{Container, MAGIC_MODEL};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Weights};

pub fn save_checkpoint(weights: &Weights<f32>, path: &Path) -> Result<()> {
    let meta = serde_json::to_string(&weights.config)?;
    let mut c = Container::new(MAGIC_MODEL, meta);
    let names = Weights::<f32>::tensor_names(&weights.config);
    for (name, t) in names.iter().zip(weights.tensors()) {
        c.push(name, t.clone());
    }
    c.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Weights<f32>> {
    let c = Container::load(path, MAGIC_MODEL)?;
    let config: ModelConfig = serde_json::from_str(&c.meta_json)
        .map_err(|e| Error::Format(format!("bad checkpoint config: {e}")))?;
    config.validate()?;
    let names = Weights::<f32>::tensor_names(&config);
    if c.tensors.len() != names.len() {
        return Err(Error::Validation(format!(
            "checkpoint holds {} tensors, config implies {}",
            c.tensors.len(),
            names.len()
        )));
    }
    let mut weights = Weights::<f32>::zeros_like(&config);
    {
        let expected = weights.tensors().iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>();
        for (i, (slot, name)) in weights.tensors_mut().into_iter().zip(&names).enumerate() {
            let (found_name, tensor) = &c.tensors[i];
            if found_name != name {
                return Err(Error::Validation(format!(
                    "tensor {i} named '{found_name}', expected '{name}'"
                )));
            }
            if tensor.shape() != expected[i].as_slice() {
                return Err(Error::Validation(format!(
                    "tensor '{name}' has shape {:?}, config implies {:?}",
                    tensor.shape(),
                    expected[i]
                )));
            }
            *slot = tensor.clone();
        }
    }
    weights.check_finite()?;
    Ok(weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_weights;

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::toy(17);
        let w = init_weights::<f32>(&cfg).unwrap();
        let p1 = dir.path().join("w1.kvzl");
        let p2 = dir.path().join("w2.kvzl");
        save_checkpoint(&w, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(loaded.config, cfg);
    }

    #[test]
    fn corrupted_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::tiny(1);
        let w = init_weights::<f32>(&cfg).unwrap();
        let p = dir.path().join("w.kvzl");
        save_checkpoint(&w, &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[1] ^= 0xff;
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Format(_))));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::tiny(1);
        let w = init_weights::<f32>(&cfg).unwrap();
        let meta = serde_json::to_string(&cfg).unwrap();
        let mut c = Container::new(MAGIC_MODEL, meta);
        let names = Weights::<f32>::tensor_names(&cfg);
        for (name, t) in names.iter().zip(w.tensors()) {
            // truncate one tensor so header and payload disagree with config
            if name == "lm_head" {
                c.push(name, crate::numerics::Tensor::zeros(vec![2, 2]));
            } else {
                c.push(name, t.clone());
            }
        }
        let p = dir.path().join("w.kvzl");
        c.save(&p).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Validation(_))));
    }
}

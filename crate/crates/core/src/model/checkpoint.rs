//! Binary checkpoint container.
//!
//! Layout:
//!
//! ```text
//! b"ECHOATT\0" | header_len: u64 LE | header JSON (header_len bytes) | payload
//! ```
//!
//! The header carries the config, the sharing plan, and a tensor directory
//! of `{name, shape, offset}` entries; `offset` is the byte offset of the
//! tensor inside the payload. The payload is raw little-endian f64. Optional
//! AdamW state is stored as extra tensors `optim.m.<param>` / `optim.v.<param>`.

use super::{LayerWeights, ModelConfig, SharingPlan, TransformerModel};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig, Moments};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"ECHOATT\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    plan: SharingPlan,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerHeader>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    step: u64,
    config: AdamWConfig,
}

/// Serialises a model (and optionally its optimizer state) to bytes.
pub fn to_bytes(model: &TransformerModel, optim: Option<&AdamW>) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut push = |name: String, shape: &[usize], data: &[f64]| {
        entries.push(TensorEntry {
            name,
            shape: shape.to_vec(),
            offset: payload.len() as u64,
        });
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (name, t) in model.named_params() {
        push(name, t.shape(), t.data());
    }
    if let Some(opt) = optim {
        for (name, m) in opt.moments() {
            push(format!("optim.m.{name}"), &[m.m.len()], &m.m);
            push(format!("optim.v.{name}"), &[m.v.len()], &m.v);
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        plan: model.plan().clone(),
        tensors: entries,
        optimizer: optim.map(|o| OptimizerHeader {
            step: o.step_count(),
            config: o.config.clone(),
        }),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(TransformerModel, Option<AdamW>)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format("missing checkpoint magic".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let json = bytes
        .get(16..16 + len)
        .ok_or_else(|| Error::Format("truncated header".into()))?;
    let header: Header = serde_json::from_slice(json)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    let payload = &bytes[16 + len..];
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let raw = payload
            .get(start..start + 8 * n)
            .ok_or_else(|| Error::Format(format!("payload too short for `{}`", e.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
    }
    fn take_from(tensors: &mut BTreeMap<String, Tensor>, name: &str) -> Result<Tensor> {
        tensors
            .remove(name)
            .map(|t| t.with_requires_grad(true))
            .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))
    }
    let mut take = |name: &str| take_from(&mut tensors, name);
    let cfg = header.config;
    let plan = header.plan;
    let tok_embedding = take("tok_embedding")?;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for j in 0..cfg.n_layers {
        let p = |n: &str| format!("layers.{j}.{n}");
        let root = plan.n_layers() > j && plan.is_root(j);
        layers.push(LayerWeights {
            attn_norm: take(&p("attn_norm"))?,
            wq: if root { Some(take(&p("wq"))?) } else { None },
            wk: if root { Some(take(&p("wk"))?) } else { None },
            wv: take(&p("wv"))?,
            wo: take(&p("wo"))?,
            mlp_norm: take(&p("mlp_norm"))?,
            w_gate: take(&p("w_gate"))?,
            w_up: take(&p("w_up"))?,
            w_down: take(&p("w_down"))?,
        });
    }
    let final_norm = take("final_norm")?;
    let lm_head = take("lm_head")?;
    let model = TransformerModel::from_parts(cfg, plan, tok_embedding, layers, final_norm, lm_head)?;

    let optim = match header.optimizer {
        None => None,
        Some(oh) => {
            let mut moments = BTreeMap::new();
            let names: Vec<String> = tensors
                .keys()
                .filter_map(|k| k.strip_prefix("optim.m.").map(str::to_string))
                .collect();
            for name in names {
                let m = take_from(&mut tensors, &format!("optim.m.{name}"))?.into_data();
                let v = take_from(&mut tensors, &format!("optim.v.{name}"))?.into_data();
                moments.insert(name, Moments { m, v });
            }
            Some(AdamW::restore(oh.config, oh.step, moments))
        }
    };
    Ok((model, optim))
}

pub fn save(path: impl AsRef<Path>, model: &TransformerModel, optim: Option<&AdamW>) -> Result<()> {
    let bytes = to_bytes(model, optim)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(TransformerModel, Option<AdamW>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig::toy(3);
        let plan = SharingPlan::from_shared_indices(3, &[2]).unwrap();
        let model = TransformerModel::new(cfg, plan, 11).unwrap();
        let bytes = to_bytes(&model, None).unwrap();
        let (back, opt) = from_bytes(&bytes).unwrap();
        assert!(opt.is_none());
        assert_eq!(back, model);
        assert_eq!(to_bytes(&back, None).unwrap(), bytes);
    }

    #[test]
    fn optimizer_state_survives() {
        let cfg = ModelConfig::toy(1);
        let mut model = TransformerModel::new(cfg, SharingPlan::identity(1), 3).unwrap();
        for (_, t) in model.named_params_mut() {
            let g = vec![0.5; t.numel()];
            t.accumulate_grad(&g);
        }
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(model.named_params_mut(), 1e-3).unwrap();
        let bytes = to_bytes(&model, Some(&opt)).unwrap();
        let (_, back) = from_bytes(&bytes).unwrap();
        assert_eq!(back.unwrap(), opt);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(from_bytes(b"not a checkpoint"), Err(Error::Format(_))));
        let model = TransformerModel::new(ModelConfig::toy(1), SharingPlan::identity(1), 0).unwrap();
        let mut bytes = to_bytes(&model, None).unwrap();
        bytes.truncate(bytes.len() - 8);
        assert!(from_bytes(&bytes).is_err());
    }
}

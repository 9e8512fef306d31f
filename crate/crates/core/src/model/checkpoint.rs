//! Binary checkpoint format.
//!
//! Layout (little-endian): magic `XATN`, `u16` version, `u32` record count,
//! then per tensor: `u32` name length, UTF-8 name, `u32` rank, `rank × u32`
//! dims, `f32` payload. Scalars (hyperparameters, flags) are rank-0 records
//! with a single `f64` payload.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::data::write_atomic;
use crate::data::ByteReader;
use crate::error::{Error, Result};
use crate::grad::{AdamState, Tensor};

use super::params::{ModelConfig, ModelParams, RunningStats};

pub const MAGIC: &[u8; 4] = b"XATN";
pub const VERSION: u16 = 1;

struct Record {
    dims: Vec<u32>,
    data: Vec<f64>,
}

fn push_tensor(buf: &mut Vec<u8>, name: &str, dims: &[usize], values: impl Iterator<Item = f64>) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    if dims.is_empty() {
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    } else {
        for v in values {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
}

fn encode(params: &ModelParams, adam: Option<&AdamState>) -> Vec<u8> {
    let mut records: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    let mut tensor = |name: String, t: &Tensor| {
        records.push((
            name,
            vec![t.nrows(), t.ncols()],
            t.iter().copied().collect(),
        ));
    };
    for (name, t) in params.weights.named() {
        tensor(name, t);
    }
    for (i, r) in params.running.iter().enumerate() {
        tensor(format!("running.{i}.mean"), &r.mean);
        tensor(format!("running.{i}.var"), &r.var);
    }
    if let Some(st) = adam {
        let names = params.weights.named();
        for ((name, _), (m, v)) in names
            .iter()
            .zip(st.first_moment.iter().zip(&st.second_moment))
        {
            tensor(format!("adam.m.{name}"), m);
            tensor(format!("adam.v.{name}"), v);
        }
    }
    let c = &params.config;
    let mut scalar = |name: &str, v: f64| records.push((name.to_string(), Vec::new(), vec![v]));
    scalar("hyper.lambda_a", c.lambda_a);
    scalar("hyper.lambda_b", c.lambda_b);
    scalar("hyper.margin", c.margin);
    scalar("hyper.leaky_slope", c.leaky_slope);
    scalar("hyper.ln_eps", c.ln_eps);
    scalar("hyper.bn_eps", c.bn_eps);
    scalar("hyper.bn_momentum", c.bn_momentum);
    scalar(
        "state.stats_initialized",
        params.stats_initialized as u8 as f64,
    );
    if let Some(st) = adam {
        scalar("adam.step", st.step as f64);
        scalar("adam.lr", st.config.lr);
        scalar("adam.weight_decay", st.config.weight_decay);
    }

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, dims, values) in records {
        push_tensor(&mut buf, &name, &dims, values.into_iter());
    }
    buf
}

fn decode(bytes: &[u8]) -> Result<HashMap<String, Record>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic { expected: "XATN" });
    }
    let mut r = ByteReader::new(bytes, 4);
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::VersionUnsupported {
            found: version,
            supported: VERSION,
        });
    }
    let count = r.u32()?;
    let mut out = HashMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| Error::Parse {
            line: 0,
            msg: format!("tensor name: {e}"),
        })?;
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().map(|&d| d as usize).product();
        let data = if rank == 0 {
            vec![r.f64()?]
        } else {
            r.f32s(n)?.into_iter().map(f64::from).collect()
        };
        out.insert(name, Record { dims, data });
    }
    if !r.is_done() {
        return Err(Error::Parse {
            line: 0,
            msg: format!("{} trailing bytes in checkpoint", bytes.len() - r.pos),
        });
    }
    Ok(out)
}

fn missing(name: &str) -> Error {
    Error::Parse {
        line: 0,
        msg: format!("checkpoint lacks `{name}`"),
    }
}

fn get_tensor(records: &HashMap<String, Record>, name: &str) -> Result<Tensor> {
    let r = records.get(name).ok_or_else(|| missing(name))?;
    if r.dims.len() != 2 {
        return Err(Error::Parse {
            line: 0,
            msg: format!("`{name}` has rank {}, expected 2", r.dims.len()),
        });
    }
    let shape = (r.dims[0] as usize, r.dims[1] as usize);
    Ok(Tensor::from_shape_vec(shape, r.data.clone()).expect("record length matches dims"))
}

fn get_scalar(records: &HashMap<String, Record>, name: &str) -> Result<f64> {
    let r = records.get(name).ok_or_else(|| missing(name))?;
    r.data.first().copied().ok_or_else(|| missing(name))
}

fn count_layers(records: &HashMap<String, Record>, prefix: &str) -> usize {
    (0..)
        .take_while(|i| records.contains_key(&format!("{prefix}.{i}.weight")))
        .count()
}

fn config_from(records: &HashMap<String, Record>) -> Result<ModelConfig> {
    let dims = |name: &str| -> Result<(usize, usize)> { Ok(get_tensor(records, name)?.dim()) };
    let (roi_dim, joint_dim) = dims("roi_proj.weight")?;
    let geom_dim = dims("geom_proj.weight")?.1;
    let score_dim = dims("score_proj.weight")?.1;
    let n_alpha = count_layers(records, "alpha_mlp");
    let n_cls = count_layers(records, "classifier");
    if n_alpha == 0 || n_cls == 0 {
        return Err(missing("alpha_mlp / classifier layers"));
    }
    let alpha_hidden = (0..n_alpha - 1)
        .map(|i| dims(&format!("alpha_mlp.{i}.weight")).map(|d| d.1))
        .collect::<Result<_>>()?;
    let classifier_hidden = (0..n_cls - 1)
        .map(|i| dims(&format!("classifier.{i}.weight")).map(|d| d.1))
        .collect::<Result<_>>()?;
    let num_attributes = dims(&format!("classifier.{}.weight", n_cls - 1))?.1;
    Ok(ModelConfig {
        roi_dim,
        joint_dim,
        geom_dim,
        score_dim,
        alpha_hidden,
        classifier_hidden,
        num_attributes,
        leaky_slope: get_scalar(records, "hyper.leaky_slope")?,
        ln_eps: get_scalar(records, "hyper.ln_eps")?,
        bn_eps: get_scalar(records, "hyper.bn_eps")?,
        bn_momentum: get_scalar(records, "hyper.bn_momentum")?,
        lambda_a: get_scalar(records, "hyper.lambda_a")?,
        lambda_b: get_scalar(records, "hyper.lambda_b")?,
        margin: get_scalar(records, "hyper.margin")?,
    })
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    write_atomic(path, &encode(params, None))
}

/// Save parameters together with optimizer moments.
pub fn save_checkpoint_with_optimizer(
    params: &ModelParams,
    adam: &AdamState,
    path: &Path,
) -> Result<()> {
    write_atomic(path, &encode(params, Some(adam)))
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    let records = decode(bytes)?;
    let config = config_from(&records)?;
    let mut params = ModelParams::init(config, 0)?;
    let names: Vec<String> = params.weights.named().into_iter().map(|(n, _)| n).collect();
    for (name, slot) in names.iter().zip(params.weights.tensors_mut()) {
        let t = get_tensor(&records, name)?;
        if t.dim() != slot.dim() {
            return Err(Error::shape("load_checkpoint", slot.dim(), t.dim()));
        }
        *slot = t;
    }
    for (i, stats) in params.running.iter_mut().enumerate() {
        *stats = RunningStats {
            mean: get_tensor(&records, &format!("running.{i}.mean"))?,
            var: get_tensor(&records, &format!("running.{i}.var"))?,
        };
    }
    params.stats_initialized = get_scalar(&records, "state.stats_initialized")? != 0.0;
    Ok(params)
}

/// Read a checkpoint. The whole file is parsed before a model is returned,
/// so a truncated or corrupt file never yields partial parameters.
pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path)?;
    checkpoint_from_bytes(&bytes)
}

//! The `OVMRFLOW` checkpoint.
//!
//! ```text
//! magic        8 bytes "OVMRFLOW"
//! version      u32     1
//! flow         dim u32, layers u32, hidden u32, scale_cap f64, tensors
//! calibration  b_id, b_ood, alpha, delta, h_id, max_loglik (f64)
//! cross-modal  eta f64, tensors
//! head         hidden u32, tensors
//! provenance   seed u64, config hash 32 bytes, json length u32, json bytes
//! tensors      count u32, then per tensor rows u32, cols u32, rows*cols f64
//! ```
//!
//! All integers and reals are little-endian.

use std::path::Path;

use crate::crossmodal::CrossmodalParams;
use crate::data::Cursor;
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowModel};
use crate::model::Model;
use crate::numerics::{Mat, ParamSet};
use crate::ood_boundary::BoundaryCalibration;
use crate::retrieval::ProposalHead;

pub const MAGIC: &[u8; 8] = b"OVMRFLOW";
pub const VERSION: u32 = 1;
const MAX_DIM: u32 = 1 << 16;
const MAX_LAYERS: u32 = 1 << 10;

/// Where a checkpoint came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: [u8; 32],
    /// Run configuration and training metadata as JSON.
    pub json: String,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::contract(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_params(out: &mut Vec<u8>, set: &ParamSet) -> Result<()> {
    put_u32(out, set.len())?;
    for p in set.iter() {
        put_u32(out, p.value.rows())?;
        put_u32(out, p.value.cols())?;
        for &x in p.value.data() {
            put_f64(out, x);
        }
    }
    Ok(())
}

fn read_params(c: &mut Cursor, what: &str) -> Result<ParamSet> {
    let at = c.pos;
    let n = c.u32(what)? as usize;
    // every tensor takes at least 16 bytes
    if n > c.remaining() / 16 {
        return Err(Error::format(at, format!("{n} {what} tensors cannot fit")));
    }
    let mut set = ParamSet::new();
    for i in 0..n {
        let at = c.pos;
        let rows = c.u32("tensor rows")? as usize;
        let cols = c.u32("tensor cols")? as usize;
        if rows == 0 || cols == 0 {
            return Err(Error::format(at, format!("{what} tensor {i} is empty")));
        }
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::format(at, "tensor size overflows"))?;
        let data = c.f64s(len, what)?;
        set.push(format!("{what}.{i}"), Mat::from_vec(rows, cols, data)?);
    }
    Ok(set)
}

fn read_dim(c: &mut Cursor, what: &str, max: u32) -> Result<usize> {
    let at = c.pos;
    let n = c.u32(what)?;
    if n == 0 || n > max {
        return Err(Error::format(at, format!("{what} = {n} out of range")));
    }
    Ok(n as usize)
}

fn expect_scalars(at: usize, what: &str, set: &ParamSet, expected: Option<usize>) -> Result<()> {
    if expected != Some(set.num_scalars()) {
        return Err(Error::format(
            at,
            format!(
                "{what}: {} stored values, architecture needs {:?}",
                set.num_scalars(),
                expected
            ),
        ));
    }
    Ok(())
}

pub fn encode_checkpoint(model: &Model, prov: &Provenance) -> Result<Vec<u8>> {
    model.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let fc = model.flow.config();
    put_u32(&mut out, fc.dim)?;
    put_u32(&mut out, fc.layers)?;
    put_u32(&mut out, fc.hidden)?;
    put_f64(&mut out, fc.scale_cap);
    put_params(&mut out, &model.flow.params)?;
    let c = &model.calibration;
    for v in [c.b_id, c.b_ood, c.alpha, c.delta, c.h_id, c.max_loglik] {
        put_f64(&mut out, v);
    }
    put_f64(&mut out, model.crossmodal.eta);
    put_params(&mut out, &model.crossmodal.params)?;
    put_u32(&mut out, model.head.hidden())?;
    put_params(&mut out, &model.head.params)?;
    out.extend_from_slice(&prov.seed.to_le_bytes());
    out.extend_from_slice(&prov.config_hash);
    put_u32(&mut out, prov.json.len())?;
    out.extend_from_slice(prov.json.as_bytes());
    Ok(out)
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<(Model, Provenance)> {
    let mut c = Cursor::new(buf);
    c.magic(MAGIC)?;
    let at = c.pos;
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::format(
            at,
            format!("unsupported version {version}, expected {VERSION}"),
        ));
    }
    let at = c.pos;
    let config = FlowConfig {
        dim: read_dim(&mut c, "flow dim", MAX_DIM)?,
        layers: read_dim(&mut c, "flow layers", MAX_LAYERS)?,
        hidden: read_dim(&mut c, "flow hidden", MAX_DIM)?,
        scale_cap: c.f64("scale cap")?,
    };
    config
        .validate()
        .map_err(|e| Error::format(at, e.to_string()))?;
    let at = c.pos;
    let flow_params = read_params(&mut c, "flow")?;
    expect_scalars(at, "flow", &flow_params, config.param_count())?;
    let flow =
        FlowModel::from_parts(config, flow_params).map_err(|e| Error::format(at, e.to_string()))?;

    let at = c.pos;
    let vals = c.f64s(6, "calibration")?;
    let calibration = BoundaryCalibration {
        b_id: vals[0],
        b_ood: vals[1],
        alpha: vals[2],
        delta: vals[3],
        h_id: vals[4],
        max_loglik: vals[5],
    };
    calibration
        .validate()
        .map_err(|e| Error::format(at, e.to_string()))?;

    let d = config.dim;
    let eta = c.f64("eta")?;
    let at = c.pos;
    let xm_params = read_params(&mut c, "crossmodal")?;
    let xm_count = d
        .checked_mul(d)
        .and_then(|dd| dd.checked_mul(3)?.checked_add(4 * d));
    expect_scalars(at, "crossmodal", &xm_params, xm_count)?;
    let crossmodal = CrossmodalParams::from_parts(d, eta, xm_params)
        .map_err(|e| Error::format(at, e.to_string()))?;

    let head_hidden = read_dim(&mut c, "head hidden", MAX_DIM)?;
    let at = c.pos;
    let head_params = read_params(&mut c, "head")?;
    let f = ProposalHead::feature_dim(d);
    let head_count = f
        .checked_mul(head_hidden)
        .and_then(|n| n.checked_add(2 * head_hidden + 1 + 2 * f + 4));
    expect_scalars(at, "head", &head_params, head_count)?;
    let head = ProposalHead::from_parts(d, head_hidden, head_params)
        .map_err(|e| Error::format(at, e.to_string()))?;

    let seed = c.u64("seed")?;
    let config_hash: [u8; 32] = c.take(32, "config hash")?.try_into().unwrap();
    let len = c.u32("provenance length")? as usize;
    let at = c.pos;
    let json = std::str::from_utf8(c.take(len, "provenance")?)
        .map_err(|_| Error::format(at, "provenance is not UTF-8"))?
        .to_string();
    c.finish()?;
    let model = Model {
        flow,
        calibration,
        crossmodal,
        head,
    };
    Ok((
        model,
        Provenance {
            seed,
            config_hash,
            json,
        },
    ))
}

pub fn write_checkpoint(path: &Path, model: &Model, prov: &Provenance) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model, prov)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(Model, Provenance)> {
    decode_checkpoint(&std::fs::read(path)?)
}

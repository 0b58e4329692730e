//! Parameter checkpoints: one PNLT file per named tensor plus `manifest.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PnlError, Result};
use crate::fcomb::{CombMode, FcombParams};
use crate::nonlocal::{NonLocalParams, PairwiseKind};
use crate::pnl::{PnlConfig, PnlModule, PoolMode};
use crate::tensor::io::{read_raw, write_raw, RawTensor};
use crate::tensor::{DType, Matrix};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NlManifest {
    pub kind: PairwiseKind,
    #[serde(rename = "C_in")]
    pub c_in: usize,
    #[serde(rename = "C_emb")]
    pub c_emb: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PnlManifest {
    pub n_scales: usize,
    pub pairwise: PairwiseKind,
    pub comb: CombMode,
    pub pool: PoolMode,
    #[serde(rename = "C")]
    pub c: usize,
    pub seed: u64,
}

fn write_tensors(dir: &Path, named: Vec<(&'static str, Vec<usize>, &[f64])>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| PnlError::io(dir, e))?;
    for (name, dims, data) in named {
        let t = RawTensor::new(DType::F64, dims, data.to_vec())?;
        write_raw(&dir.join(format!("{name}.pnlt")), &t)?;
    }
    Ok(())
}

fn write_manifest<T: Serialize>(dir: &Path, manifest: &T) -> Result<()> {
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| PnlError::io(path, e))
}

fn read_manifest<T: for<'de> Deserialize<'de>>(dir: &Path) -> Result<T> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| PnlError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| PnlError::Parse {
        path: path.display().to_string(),
        offset: e.column() as u64,
        msg: e.to_string(),
    })
}

fn read_matrix(dir: &Path, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
    let t = read_raw(&dir.join(format!("{name}.pnlt")))?;
    if t.dims != [rows, cols] {
        return Err(PnlError::shape(format!("{name} has dims {:?}, expected [{rows}, {cols}]", t.dims)));
    }
    Matrix::new(rows, cols, t.data)
}

fn read_nl_params(dir: &Path, kind: PairwiseKind, c_in: usize) -> Result<NonLocalParams> {
    let ce = c_in / 2;
    let (theta, phi) = if kind.uses_embeddings() {
        (Some(read_matrix(dir, "w_theta", c_in, ce)?), Some(read_matrix(dir, "w_phi", c_in, ce)?))
    } else {
        (None, None)
    };
    let w_f = if kind == PairwiseKind::Concatenation {
        let t = read_raw(&dir.join("w_f.pnlt"))?;
        if t.dims != [2 * ce] {
            return Err(PnlError::shape(format!("w_f has dims {:?}, expected [{}]", t.dims, 2 * ce)));
        }
        Some(t.data)
    } else {
        None
    };
    NonLocalParams::new(
        kind,
        theta,
        phi,
        read_matrix(dir, "w_g", c_in, ce)?,
        read_matrix(dir, "w_z", ce, c_in)?,
        w_f,
    )
}

pub fn save_nl(dir: &Path, p: &NonLocalParams, seed: u64) -> Result<()> {
    write_tensors(dir, p.named())?;
    write_manifest(
        dir,
        &NlManifest {
            kind: p.kind(),
            c_in: p.c_in(),
            c_emb: p.c_emb(),
            seed,
        },
    )
}

pub fn load_nl(dir: &Path) -> Result<(NonLocalParams, NlManifest)> {
    let m: NlManifest = read_manifest(dir)?;
    if m.c_emb * 2 != m.c_in {
        return Err(PnlError::config(format!("manifest C_emb {} is not C_in/2", m.c_emb)));
    }
    Ok((read_nl_params(dir, m.kind, m.c_in)?, m))
}

pub fn save_pnl(dir: &Path, module: &PnlModule, seed: u64) -> Result<()> {
    write_tensors(dir, module.named())?;
    write_manifest(
        dir,
        &PnlManifest {
            n_scales: module.cfg.n_scales(),
            pairwise: module.cfg.pairwise,
            comb: module.cfg.comb,
            pool: module.cfg.pool,
            c: module.c(),
            seed,
        },
    )
}

pub fn load_pnl(dir: &Path) -> Result<(PnlModule, PnlManifest)> {
    let m: PnlManifest = read_manifest(dir)?;
    let cfg = PnlConfig::new(m.n_scales, m.pairwise, m.comb, m.pool, DType::F64)?;
    cfg.check_channels(m.c)?;
    let cp = cfg.c_prime(m.c);
    let shared = read_nl_params(dir, m.pairwise, cp)?;
    let comb = match m.comb {
        CombMode::VanillaConcat => FcombParams::new(CombMode::VanillaConcat, cp),
        CombMode::ScaledDotAttention => {
            FcombParams::attention(read_matrix(dir, "w_q", cp, cp)?, read_matrix(dir, "w_k", cp, cp)?)?
        }
    };
    Ok((PnlModule { cfg, shared, comb }, m))
}

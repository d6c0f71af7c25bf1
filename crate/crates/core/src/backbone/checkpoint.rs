//! Binary checkpoints.
//!
//! Layout (little-endian): `"DIVM"`, `u32` version, `u32` length plus UTF-8
//! `key=value` config lines, then a parameter table. An optional `"MADB"`
//! section carries a second table with the auxiliary branches. A table is a
//! `u32` count followed by entries of `u16` name length, name, `u8` rank,
//! `u64` extents and `f64` values.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::mad::BranchParams;
use crate::tensor::{Params, Tensor};

use super::config::BackboneConfig;
use super::model::Denoiser;

pub const MODEL_MAGIC: &[u8; 4] = b"DIVM";
pub const BRANCH_MAGIC: &[u8; 4] = b"MADB";
pub const VERSION: u32 = 1;

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn io(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        ck("truncated checkpoint")
    } else {
        ck(e.to_string())
    }
}

fn write_table(w: &mut impl Write, params: &dyn Params) -> Result<()> {
    let mut entries = Vec::new();
    params.visit(&mut |p| entries.push((p.name.clone(), p.value.clone())));
    w.write_all(&(entries.len() as u32).to_le_bytes()).map_err(io)?;
    for (name, value) in entries {
        w.write_all(&(name.len() as u16).to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_all(&[value.rank() as u8]).map_err(io)?;
        for &e in value.shape() {
            w.write_all(&(e as u64).to_le_bytes()).map_err(io)?;
        }
        for &x in value.data() {
            w.write_all(&x.to_le_bytes()).map_err(io)?;
        }
    }
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(io)?;
    Ok(buf)
}

fn read_table(r: &mut impl Read) -> Result<HashMap<String, Tensor>> {
    let count = u32::from_le_bytes(read_exact(r)?) as usize;
    let mut out = HashMap::with_capacity(count);
    for _ in 0..count {
        let len = u16::from_le_bytes(read_exact(r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|_| ck("parameter name is not UTF-8"))?;
        let rank = read_exact::<1>(r)?[0] as usize;
        let shape = (0..rank)
            .map(|_| Ok(u64::from_le_bytes(read_exact(r)?) as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| Ok(f64::from_le_bytes(read_exact(r)?))).collect::<Result<Vec<_>>>()?;
        out.insert(name, Tensor::new(shape, data)?);
    }
    Ok(out)
}

fn assign(params: &mut dyn Params, mut table: HashMap<String, Tensor>, section: &str) -> Result<()> {
    let mut err = None;
    params.visit_mut(&mut |p| {
        if err.is_some() {
            return;
        }
        match table.remove(&p.name) {
            Some(v) if v.shape() == p.value.shape() => p.value = v,
            Some(v) => err = Some(ck(format!("{section}: {} has shape {:?}, expected {:?}", p.name, v.shape(), p.value.shape()))),
            None => err = Some(ck(format!("{section}: missing parameter {}", p.name))),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(extra) = table.keys().next() {
        return Err(ck(format!("{section}: unexpected parameter {extra}")));
    }
    Ok(())
}

pub fn write_checkpoint(w: &mut impl Write, model: &Denoiser, branches: Option<&BranchParams>) -> Result<()> {
    w.write_all(MODEL_MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    let cfg: String = model.cfg.to_kv().iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    w.write_all(&(cfg.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(cfg.as_bytes()).map_err(io)?;
    write_table(w, model)?;
    if let Some(b) = branches {
        w.write_all(BRANCH_MAGIC).map_err(io)?;
        write_table(w, b)?;
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<(Denoiser, Option<BranchParams>)> {
    if &read_exact::<4>(r)? != MODEL_MAGIC {
        return Err(ck("bad magic"));
    }
    let version = u32::from_le_bytes(read_exact(r)?);
    if version != VERSION {
        return Err(ck(format!("unsupported version {version}")));
    }
    let len = u32::from_le_bytes(read_exact(r)?) as usize;
    let mut text = vec![0u8; len];
    r.read_exact(&mut text).map_err(io)?;
    let text = String::from_utf8(text).map_err(|_| ck("config block is not UTF-8"))?;
    let pairs = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split_once('=').ok_or_else(|| ck(format!("malformed config line {l:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let cfg = BackboneConfig::from_kv(pairs)?;
    let mut model = Denoiser::seeded(cfg.clone(), 0)?;
    assign(&mut model, read_table(r)?, "model")?;

    let mut tag = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match r.read(&mut tag[filled..]).map_err(io)? {
            0 => break,
            n => filled += n,
        }
    }
    let branches = match filled {
        0 => None,
        4 if &tag == BRANCH_MAGIC => {
            let mut b = BranchParams::new(&cfg, &mut crate::rng::substream(0, 0, "branch-init"))?;
            assign(&mut b, read_table(r)?, "branches")?;
            Some(b)
        }
        4 => return Err(ck("unknown section after model table")),
        _ => return Err(ck("truncated checkpoint")),
    };
    Ok((model, branches))
}

pub fn save(path: &Path, model: &Denoiser, branches: Option<&BranchParams>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    write_checkpoint(&mut w, model, branches)?;
    w.flush().map_err(io)
}

pub fn load(path: &Path) -> Result<(Denoiser, Option<BranchParams>)> {
    read_checkpoint(&mut BufReader::new(File::open(path).map_err(io)?))
}

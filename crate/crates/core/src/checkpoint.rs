//! Versioned checkpoint bundles: config fingerprint, step counter, RNG
//! provenance, every parameter as a keyed tensor record, and optimizer
//! moment state.
//!
//! Layout (little-endian): magic "TVLB", u32 version, fingerprint
//! (u32 length + utf8), u64 master seed, u64 step, u32 parameter count,
//! then `name + TNSR` records, u32 group count, then per group its name,
//! step counter, and `name + m + v` member records.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::optim::AdamW;
use crate::tensor::{ByteReader, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TVLB";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct GroupState {
    pub name: String,
    pub step: u64,
    pub m: HashMap<String, Vec<f64>>,
    pub v: HashMap<String, Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct CheckpointBundle {
    pub fingerprint: String,
    pub seed: u64,
    pub step: u64,
    pub params: HashMap<String, Tensor>,
    pub groups: Vec<GroupState>,
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: std::io::Read>(r: &mut ByteReader<R>) -> Result<String> {
    let len = r.read_u32()? as usize;
    if len > 4096 {
        return Err(r.parse_error(format!("implausible string length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| r.parse_error(format!("invalid utf8: {e}")))
}

fn vec_as_tensor(v: &[f64]) -> Tensor {
    Tensor::new(vec![v.len()], v.to_vec()).expect("flat vector")
}

/// Serialize model parameters plus optimizer state.
pub fn save_checkpoint(
    path: &Path,
    model: &impl ParamSet,
    optim: Option<&AdamW>,
    fingerprint: &str,
    seed: u64,
    step: u64,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    write_str(&mut w, fingerprint)?;
    w.write_all(&seed.to_le_bytes())?;
    w.write_all(&step.to_le_bytes())?;

    let mut records: Vec<(String, Tensor)> = Vec::new();
    model.for_each("", &mut |name, t| records.push((name.to_string(), t.clone())));
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for (name, tensor) in &records {
        write_str(&mut w, name)?;
        tensor.write_to(&mut w)?;
    }

    let groups = optim.map(|o| o.groups.as_slice()).unwrap_or(&[]);
    w.write_all(&(groups.len() as u32).to_le_bytes())?;
    for g in groups {
        write_str(&mut w, &g.name)?;
        let (step, m, v) = g.state();
        w.write_all(&step.to_le_bytes())?;
        let mut names: Vec<&String> = m.keys().collect();
        names.sort();
        w.write_all(&(names.len() as u32).to_le_bytes())?;
        for name in names {
            write_str(&mut w, name)?;
            vec_as_tensor(&m[name]).write_to(&mut w)?;
            vec_as_tensor(&v[name]).write_to(&mut w)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Parse and validate a bundle. The whole file is read before anything is
/// returned, so a truncated or corrupt checkpoint never applies partially.
/// A fingerprint mismatch reports both fingerprints.
pub fn load_checkpoint(path: &Path, expected_fingerprint: &str) -> Result<CheckpointBundle> {
    let mut r = ByteReader::new(BufReader::new(File::open(path)?));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(r.parse_error(format!("bad checkpoint magic {magic:?}")));
    }
    let version = r.read_u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let fingerprint = read_str(&mut r)?;
    if fingerprint != expected_fingerprint {
        return Err(Error::FingerprintMismatch {
            found: fingerprint,
            expected: expected_fingerprint.to_string(),
        });
    }
    let seed = r.read_u64()?;
    let step = r.read_u64()?;

    let n_params = r.read_u32()? as usize;
    let mut params = HashMap::with_capacity(n_params);
    for _ in 0..n_params {
        let name = read_str(&mut r)?;
        let tensor = Tensor::read_from(&mut r)?;
        if params.insert(name.clone(), tensor).is_some() {
            return Err(r.parse_error(format!("duplicate parameter record '{name}'")));
        }
    }

    let n_groups = r.read_u32()? as usize;
    let mut groups = Vec::with_capacity(n_groups);
    for _ in 0..n_groups {
        let name = read_str(&mut r)?;
        let gstep = r.read_u64()?;
        let n_members = r.read_u32()? as usize;
        let mut m = HashMap::with_capacity(n_members);
        let mut v = HashMap::with_capacity(n_members);
        for _ in 0..n_members {
            let member = read_str(&mut r)?;
            let mt = Tensor::read_from(&mut r)?;
            let vt = Tensor::read_from(&mut r)?;
            m.insert(member.clone(), mt.data().to_vec());
            v.insert(member, vt.data().to_vec());
        }
        groups.push(GroupState {
            name,
            step: gstep,
            m,
            v,
        });
    }
    Ok(CheckpointBundle {
        fingerprint,
        seed,
        step,
        params,
        groups,
    })
}

/// Push saved moment state back into a freshly built optimizer; group names
/// must line up.
pub fn restore_optimizer(opt: &mut AdamW, bundle: &CheckpointBundle) -> Result<()> {
    for state in &bundle.groups {
        let group = opt
            .groups
            .iter_mut()
            .find(|g| g.name == state.name)
            .ok_or_else(|| {
                Error::contract(format!("checkpoint has unknown optimizer group '{}'", state.name))
            })?;
        group.restore_state(state.step, state.m.clone(), state.v.clone());
    }
    Ok(())
}

//! Named tensors concatenated in the binary tensor format, with a JSON
//! manifest next to the data file mapping each name to its byte range.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::optim::AdamW;
use crate::params::Parameters;
use crate::tensor::{io, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub offset: u64,
    pub bytes: u64,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: Vec<Entry>,
    /// Optimizer step count; absent for parameter-only files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<u64>,
}

/// `model.ckpt` -> `model.ckpt.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = OsString::from(path.as_os_str());
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_tensors(path: &Path, tensors: &[(String, &Tensor)], step: Option<u64>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        io::write_tensor(&mut out, t)?;
        let bytes = io::encoded_len(t) as u64;
        entries.push(Entry {
            name: name.clone(),
            offset,
            bytes,
            shape: t.shape().to_vec(),
        });
        offset += bytes;
    }
    out.flush()?;
    let manifest = Manifest {
        tensors: entries,
        step,
    };
    fs::write(
        manifest_path(path),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<(Vec<(String, Tensor)>, Manifest)> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path(path))?)?;
    let bytes = fs::read(path)?;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let end = e
            .offset
            .checked_add(e.bytes)
            .filter(|&end| end <= bytes.len() as u64);
        let Some(end) = end else {
            return Err(Error::Data(format!(
                "checkpoint entry `{}` lies outside the data file",
                e.name
            )));
        };
        let t = io::from_bytes(&bytes[e.offset as usize..end as usize])?;
        if t.shape() != e.shape.as_slice() {
            return Err(Error::Data(format!(
                "checkpoint entry `{}` shape disagrees with manifest",
                e.name
            )));
        }
        out.push((e.name.clone(), t));
    }
    Ok((out, manifest))
}

/// Writes the parameters of every module under its prefix.
pub fn save_params(path: &Path, modules: &[(&str, &dyn Parameters)]) -> Result<()> {
    let mut named = Vec::new();
    for (prefix, m) in modules {
        m.visit(prefix, &mut |n, t| named.push((n, t)));
    }
    save_tensors(path, &named, None)
}

/// Overwrites every parameter of every module from `path`. Names and
/// shapes must match exactly; loaded tensors are trainable.
pub fn load_params(path: &Path, modules: &mut [(&str, &mut dyn Parameters)]) -> Result<()> {
    let (tensors, _) = load_tensors(path)?;
    let mut by_name: BTreeMap<String, Tensor> = tensors.into_iter().collect();
    let mut status = Ok(());
    for (prefix, m) in modules.iter_mut() {
        m.visit_mut(prefix, &mut |name, t| {
            if status.is_err() {
                return;
            }
            match by_name.remove(&name) {
                Some(loaded) if loaded.shape() == t.shape() => *t = loaded.with_grad(),
                Some(loaded) => {
                    status = Err(Error::config(
                        "checkpoint",
                        format!(
                            "`{name}` has shape {:?}, model expects {:?}",
                            loaded.shape(),
                            t.shape()
                        ),
                    ))
                }
                None => {
                    status = Err(Error::config(
                        "checkpoint",
                        format!("missing parameter `{name}`"),
                    ))
                }
            }
        });
    }
    status?;
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::config(
            "checkpoint",
            format!("unexpected parameter `{extra}`"),
        ));
    }
    Ok(())
}

pub fn save_optimizer(path: &Path, opt: &AdamW) -> Result<()> {
    let mut owned = Vec::new();
    for (g, i, m, v) in opt.moments() {
        owned.push((format!("g{g}.p{i}.m"), Tensor::new([m.len()], m.to_vec())?));
        owned.push((format!("g{g}.p{i}.v"), Tensor::new([v.len()], v.to_vec())?));
    }
    let named: Vec<(String, &Tensor)> = owned.iter().map(|(n, t)| (n.clone(), t)).collect();
    save_tensors(path, &named, Some(opt.step_count()))
}

pub fn load_optimizer(path: &Path, opt: &mut AdamW) -> Result<()> {
    let (tensors, manifest) = load_tensors(path)?;
    let step = manifest
        .step
        .ok_or_else(|| Error::config("checkpoint", "optimizer file lacks a step count"))?;
    let mut groups: Vec<Vec<(Vec<f64>, Vec<f64>)>> = vec![Vec::new(); opt.groups.len()];
    let mut iter = tensors.into_iter();
    while let Some((m_name, m)) = iter.next() {
        let (v_name, v) = iter
            .next()
            .ok_or_else(|| Error::Data(format!("`{m_name}` has no second moment")))?;
        let parse = |s: &str| -> Option<(usize, usize)> {
            let rest = s.strip_prefix('g')?;
            let (g, rest) = rest.split_once(".p")?;
            let (i, _) = rest.split_once('.')?;
            Some((g.parse().ok()?, i.parse().ok()?))
        };
        let (g, i) =
            parse(&m_name).ok_or_else(|| Error::Data(format!("bad moment name `{m_name}`")))?;
        if parse(&v_name) != Some((g, i)) || g >= groups.len() || groups[g].len() != i {
            return Err(Error::Data(format!(
                "moments `{m_name}`/`{v_name}` out of order"
            )));
        }
        groups[g].push((m.into_data(), v.into_data()));
    }
    opt.restore(step, groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::init_proxies;
    use crate::optim::OptimConfig;

    #[test]
    fn params_round_trip_with_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let bank = init_proxies(3, 4, 1).unwrap();
        let other = init_proxies(2, 5, 2).unwrap();
        save_params(&path, &[("a", &bank), ("b", &other)]).unwrap();
        let (loaded, manifest) = load_tensors(&path).unwrap();
        assert_eq!(manifest.tensors[0].offset, 0);
        assert_eq!(manifest.tensors[1].offset, manifest.tensors[0].bytes);
        assert_eq!(loaded[0].0, "a.proxies");

        let mut fresh = init_proxies(3, 4, 9).unwrap();
        let mut fresh2 = init_proxies(2, 5, 9).unwrap();
        load_params(&path, &mut [("a", &mut fresh), ("b", &mut fresh2)]).unwrap();
        assert_eq!(fresh.proxies.data(), bank.proxies.data());
        assert!(fresh.proxies.requires_grad());

        let mut wrong = init_proxies(4, 4, 0).unwrap();
        assert!(load_params(&path, &mut [("a", &mut wrong), ("b", &mut fresh2)]).is_err());
        assert!(load_params(&path, &mut [("a", &mut fresh)]).is_err());
    }

    #[test]
    fn optimizer_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("o.ckpt");
        let mut opt = AdamW::from_config(&OptimConfig::default());
        let mut a = Tensor::zeros([2]).with_grad();
        let mut b = Tensor::zeros([3]).with_grad();
        a.accumulate_grad(&[1.0, -1.0]).unwrap();
        b.accumulate_grad(&[0.5, 0.0, 2.0]).unwrap();
        opt.step(&mut [vec![&mut a], vec![&mut b]]).unwrap();
        save_optimizer(&path, &opt).unwrap();
        let mut back = AdamW::from_config(&OptimConfig::default());
        load_optimizer(&path, &mut back).unwrap();
        assert_eq!(back, opt);
    }
}

//! Binary checkpoints.
//!
//! Layout: the magic `CBRLCKPT`, a little-endian `u32` format version, a
//! `u32` header length, a UTF-8 header of `key=value` lines, the sections as
//! little-endian `f32`, and a SHA-256 digest of everything before it.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{PolicyConfig, PolicyParams};
use crate::error::{CbrlError, Result};

pub const MAGIC: &[u8; 8] = b"CBRLCKPT";
pub const FORMAT_VERSION: u32 = 1;
pub const POLICY_SECTION: &str = "policy";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: PolicyConfig,
    pub meta: BTreeMap<String, String>,
    pub sections: Vec<(String, Vec<f32>)>,
}

fn corrupt(path: &str, reason: impl Into<String>) -> CbrlError {
    CbrlError::CorruptCheckpoint {
        path: path.into(),
        reason: reason.into(),
    }
}

impl Checkpoint {
    pub fn from_policy(p: &PolicyParams<f32>) -> Self {
        Self {
            config: p.config,
            meta: BTreeMap::new(),
            sections: vec![(POLICY_SECTION.to_string(), p.data.clone())],
        }
    }

    pub fn section(&self, name: &str) -> Option<&[f32]> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn add_section(&mut self, name: &str, data: Vec<f32>) {
        self.sections.push((name.to_string(), data));
    }

    pub fn params(&self, name: &str) -> Result<PolicyParams<f32>> {
        let mut p = PolicyParams::zeros(self.config)?;
        let data = self
            .section(name)
            .ok_or_else(|| corrupt("<memory>", format!("missing section {name}")))?;
        if data.len() != p.len() {
            return Err(corrupt(
                "<memory>",
                format!("section {name} has {} values, expected {}", data.len(), p.len()),
            ));
        }
        p.data.copy_from_slice(data);
        Ok(p)
    }

    pub fn policy(&self) -> Result<PolicyParams<f32>> {
        self.params(POLICY_SECTION)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = self.config;
        let mut header = format!(
            "d_model={}\nlayers={}\nheads={}\ncontext={}\nvocab={}\n",
            c.d_model,
            c.layers,
            c.heads,
            c.context,
            c.vocab()
        );
        let names: Vec<&str> = self.sections.iter().map(|(n, _)| n.as_str()).collect();
        header.push_str(&format!("sections={}\n", names.join(",")));
        for (n, v) in &self.sections {
            header.push_str(&format!("len.{n}={}\n", v.len()));
        }
        for (k, v) in &self.meta {
            header.push_str(&format!("meta.{k}={v}\n"));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for (_, v) in &self.sections {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self> {
        if bytes.len() < 16 + 32 {
            return Err(corrupt(path, "file too short"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt(path, "checksum mismatch"));
        }
        if &body[..8] != MAGIC {
            return Err(corrupt(path, "bad magic"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(corrupt(path, format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(body[12..16].try_into().unwrap()) as usize;
        let header = body
            .get(16..16 + hlen)
            .ok_or_else(|| corrupt(path, "truncated header"))?;
        let header = std::str::from_utf8(header).map_err(|_| corrupt(path, "header is not UTF-8"))?;
        let mut kv = BTreeMap::new();
        for line in header.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| corrupt(path, format!("bad header line {line:?}")))?;
            kv.insert(k.to_string(), v.to_string());
        }
        let num = |k: &str| -> Result<usize> {
            kv.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| corrupt(path, format!("missing or bad {k}")))
        };
        let config = PolicyConfig {
            d_model: num("d_model")?,
            layers: num("layers")?,
            heads: num("heads")?,
            context: num("context")?,
        };
        if num("vocab")? != config.vocab() {
            return Err(corrupt(path, "vocabulary size differs from this build"));
        }
        config.validate()?;
        let mut payload = &body[16 + hlen..];
        let mut sections = Vec::new();
        let names = kv.get("sections").cloned().unwrap_or_default();
        for name in names.split(',').filter(|n| !n.is_empty()) {
            let n = num(&format!("len.{name}"))?;
            if payload.len() < 4 * n {
                return Err(corrupt(path, "truncated payload"));
            }
            let (chunk, rest) = payload.split_at(4 * n);
            let data = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            sections.push((name.to_string(), data));
            payload = rest;
        }
        if !payload.is_empty() {
            return Err(corrupt(path, "trailing bytes after payload"));
        }
        let meta = kv
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("meta.").map(|k| (k.to_string(), v.clone())))
            .collect();
        Ok(Self {
            config,
            meta,
            sections,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

pub fn save_policy(p: &PolicyParams<f32>, path: &Path) -> Result<()> {
    Checkpoint::from_policy(p).save(path)
}

pub fn load_policy(path: &Path) -> Result<PolicyParams<f32>> {
    Checkpoint::load(path)?.policy()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::init_policy;

    #[test]
    fn round_trip_and_tamper_detection() {
        let cfg = PolicyConfig {
            d_model: 8,
            layers: 1,
            heads: 2,
            context: 16,
        };
        let p = init_policy::<f32>(9, cfg).unwrap();
        let mut ck = Checkpoint::from_policy(&p);
        ck.meta.insert("step".into(), "12".into());
        ck.add_section("adam_m", vec![0.5; 3]);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, "x").unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.policy().unwrap(), p);

        let mut bad = bytes.clone();
        bad[40] ^= 1;
        assert!(matches!(
            Checkpoint::from_bytes(&bad, "x"),
            Err(CbrlError::CorruptCheckpoint { .. })
        ));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], "x").is_err());
    }
}

//! On-disk matrix cache.
//!
//! File layout: the 5 bytes `FDCK1`, then `n` (u64), `s`, `L`, `h` (f64), all
//! little-endian 8-byte values, then the row-major little-endian f64 entries
//! of one square matrix. Files are named by a SHA-256 content key.

use crate::domain::{DomainSpec, FracOrder};
use crate::error::{Error, Result};
use crate::kernel::{Assembler, Parts, StiffnessSet};
use nalgebra::DMatrix;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

pub const MAGIC: &[u8; 5] = b"FDCK1";
pub const CACHE_ENV: &str = "FDCK_CACHE_DIR";
const HEADER: usize = 5 + 4 * 8;
/// Bump when the assembly changes numerically.
const ASSEMBLY_VERSION: &str = "p1-weighted-v1";

#[derive(Debug, Clone)]
pub struct MatrixCache {
    pub root: PathBuf,
}

/// What happened for one matrix lookup.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub enum CacheEvent {
    Hit,
    Miss,
    /// File present but unreadable or inconsistent; rebuilt.
    Rebuilt,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct CacheRecord {
    pub kind: String,
    pub key: String,
    pub event: CacheEvent,
}

impl MatrixCache {
    /// Root from the environment variable, else `.fdck-cache` in the working directory.
    pub fn from_env() -> Self {
        let root = std::env::var_os(CACHE_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(".fdck-cache"));
        Self { root }
    }

    pub fn at(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn key(spec: &DomainSpec, fo: FracOrder, kind: &str) -> String {
        let mut h = Sha256::new();
        h.update(MAGIC);
        h.update(ASSEMBLY_VERSION.as_bytes());
        h.update(kind.as_bytes());
        h.update(spec.fingerprint().as_bytes());
        h.update(fo.s().to_le_bytes());
        hex::encode(h.finalize())
    }

    pub fn path(&self, key: &str) -> PathBuf {
        self.root.join(format!("{key}.fdck"))
    }

    pub fn write(&self, key: &str, spec: &DomainSpec, fo: FracOrder, m: &DMatrix<f64>) -> Result<()> {
        std::fs::create_dir_all(&self.root)?;
        let n = m.nrows();
        let mut buf = Vec::with_capacity(HEADER + n * n * 8);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(n as u64).to_le_bytes());
        for v in [fo.s(), spec.l, spec.h] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for i in 0..n {
            for j in 0..n {
                buf.extend_from_slice(&m[(i, j)].to_le_bytes());
            }
        }
        // write then rename so a crash never leaves a half file under the key
        static SEQ: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);
        let seq = SEQ.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        let tmp = self.root.join(format!("{key}.{}.{seq}.tmp", std::process::id()));
        std::fs::write(&tmp, &buf)?;
        std::fs::rename(&tmp, self.path(key))?;
        Ok(())
    }

    /// Reads a matrix; any header or length mismatch is an error.
    pub fn read(&self, key: &str, spec: &DomainSpec, fo: FracOrder) -> Result<DMatrix<f64>> {
        let buf = std::fs::read(self.path(key))?;
        let bad = |m: &str| Error::Cache(format!("{key}: {m}"));
        if buf.len() < HEADER || &buf[..5] != MAGIC {
            return Err(bad("bad header"));
        }
        let word = |i: usize| <[u8; 8]>::try_from(&buf[5 + 8 * i..13 + 8 * i]).unwrap();
        let n = u64::from_le_bytes(word(0)) as usize;
        let (s, l, h) = (f64::from_le_bytes(word(1)), f64::from_le_bytes(word(2)), f64::from_le_bytes(word(3)));
        if n != spec.n_dof() || s != fo.s() || l != spec.l || h != spec.h {
            return Err(bad("header does not match the grid"));
        }
        if buf.len() != HEADER + n * n * 8 {
            return Err(bad("truncated"));
        }
        let body = &buf[HEADER..];
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let o = 8 * (i * n + j);
                m[(i, j)] = f64::from_le_bytes(body[o..o + 8].try_into().unwrap());
            }
        }
        Ok(m)
    }

    /// Loads the stiffness set or assembles and stores it.
    pub fn get_or_assemble(&self, spec: &DomainSpec, fo: FracOrder) -> Result<(StiffnessSet, Vec<CacheRecord>)> {
        let asm = Assembler::new(spec, fo)?;
        let kinds = ["a-masked", "a-ext-ext", "mass"];
        let keys: Vec<String> = kinds.iter().map(|k| Self::key(spec, fo, k)).collect();
        let mut found = Vec::new();
        let mut events = Vec::new();
        for key in &keys {
            let p = self.path(key);
            if !p.exists() {
                events.push(CacheEvent::Miss);
                found.push(None);
                continue;
            }
            match self.read(key, spec, fo) {
                Ok(m) => {
                    events.push(CacheEvent::Hit);
                    found.push(Some(m));
                }
                Err(_) => {
                    events.push(CacheEvent::Rebuilt);
                    found.push(None);
                }
            }
        }
        let (masked, ext_ext) = match (found[0].take(), found[1].take()) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                let a = asm.frac_stiffness();
                self.write(&keys[0], spec, fo, &a.masked)?;
                self.write(&keys[1], spec, fo, &a.ext_ext)?;
                for e in events.iter_mut().take(2) {
                    if *e == CacheEvent::Hit {
                        *e = CacheEvent::Rebuilt;
                    }
                }
                (a.masked, a.ext_ext)
            }
        };
        let m = match found[2].take() {
            Some(m) => m,
            None => {
                let m = asm.mass();
                self.write(&keys[2], spec, fo, &m)?;
                m
            }
        };
        let a = Parts { masked, ext_ext };
        let st = StiffnessSet { a_full: a.full(), a, m, zeta: asm.tail_zeta(), kc: asm.kc };
        let records = kinds
            .iter()
            .zip(keys)
            .zip(events)
            .map(|((k, key), event)| CacheRecord { kind: k.to_string(), key, event })
            .collect();
        Ok((st, records))
    }

    /// Removes every cache file; returns how many were deleted.
    pub fn clean(&self) -> Result<usize> {
        let mut n = 0;
        if !self.root.exists() {
            return Ok(0);
        }
        for e in std::fs::read_dir(&self.root)? {
            let p = e?.path();
            if is_cache_file(&p) {
                std::fs::remove_file(p)?;
                n += 1;
            }
        }
        Ok(n)
    }
}

fn is_cache_file(p: &Path) -> bool {
    matches!(p.extension().and_then(|e| e.to_str()), Some("fdck") | Some("tmp"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{build_domain, DomainConfig};

    fn spec(h: f64) -> DomainSpec {
        build_domain(&DomainConfig { box_halfwidth: 2.0, h, omega: (-1.0, 1.0), exterior: vec![], disjoint_pairs: vec![] }).unwrap()
    }

    #[test]
    fn roundtrip_hit_miss_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let cache = MatrixCache::at(dir.path());
        let sp = spec(0.1);
        let fo = FracOrder::new(1, 0.5).unwrap();
        let (a, ev) = cache.get_or_assemble(&sp, fo).unwrap();
        assert!(ev.iter().all(|r| r.event == CacheEvent::Miss));
        let (b, ev) = cache.get_or_assemble(&sp, fo).unwrap();
        assert!(ev.iter().all(|r| r.event == CacheEvent::Hit));
        assert_eq!(a.a_full, b.a_full);
        assert_eq!(a.m, b.m);
        // header of the file
        let bytes = std::fs::read(cache.path(&ev[0].key)).unwrap();
        assert_eq!(&bytes[..5], b"FDCK1");
        assert_eq!(u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize, sp.n_dof());
        assert_eq!(f64::from_le_bytes(bytes[13..21].try_into().unwrap()), 0.5);
        assert_eq!(bytes.len(), HEADER + sp.n_dof() * sp.n_dof() * 8);
        // truncation is detected and repaired
        std::fs::write(cache.path(&ev[2].key), &bytes[..bytes.len() / 2]).unwrap();
        let (c, ev2) = cache.get_or_assemble(&sp, fo).unwrap();
        assert_eq!(ev2[2].event, CacheEvent::Rebuilt);
        assert_eq!(c.m, a.m);
        assert_eq!(cache.get_or_assemble(&sp, fo).unwrap().1[2].event, CacheEvent::Hit);
        // a different h is a different key
        assert_ne!(MatrixCache::key(&spec(0.05), fo, "mass"), ev[2].key);
        assert_eq!(cache.clean().unwrap(), 3);
    }
}

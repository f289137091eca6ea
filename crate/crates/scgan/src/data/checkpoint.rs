//! Named-tensor checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "SCGN"
//! version u32
//! count   u32
//! then per tensor:
//!   name_len u32, name UTF-8, rank u32, extents u64 x rank,
//!   payload f32 x product(extents), row-major
//! ```
//!
//! Values are stored at 32-bit precision; a load reproduces the stored
//! bits exactly. An empty table is exactly 12 bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::tensor::MAX_RANK;
use crate::{Error, Result, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SCGN";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialize named tensors in the given order.
pub fn save_checkpoint(path: &Path, entries: &[(String, &Tensor)]) -> Result<()> {
    {
        let mut seen = std::collections::BTreeSet::new();
        for (name, _) in entries {
            if !seen.insert(name) {
                return Err(Error::format(format!("duplicate tensor name {name:?}")));
            }
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let count =
        u32::try_from(entries.len()).map_err(|_| Error::format("too many tensors"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        let name_len =
            u32::try_from(name_bytes.len()).map_err(|_| Error::format("name too long"))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &e in tensor.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(format!("truncated file while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Load a checkpoint into name → tensor, validating the whole layout.
pub fn load_checkpoint(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_checkpoint(&bytes).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

fn parse_checkpoint(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format("bad magic (not an SCGN checkpoint)"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!(
            "unsupported version {version} (want {CHECKPOINT_VERSION})"
        )));
    }
    let count = r.u32("tensor count")?;
    let mut table = BTreeMap::new();
    for i in 0..count {
        let name_len = r.u32(&format!("name length of tensor {i}"))? as usize;
        let name = std::str::from_utf8(r.take(name_len, &format!("name of tensor {i}"))?)
            .map_err(|_| Error::format(format!("tensor {i}: name is not UTF-8")))?
            .to_owned();
        let rank = r.u32(&format!("rank of {name}"))? as usize;
        if rank > MAX_RANK {
            return Err(Error::format(format!("{name}: rank {rank} exceeds {MAX_RANK}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for d in 0..rank {
            let e = r.u64(&format!("extent {d} of {name}"))?;
            let e = usize::try_from(e)
                .ok()
                .filter(|&e| e > 0)
                .ok_or_else(|| Error::format(format!("{name}: invalid extent {e}")))?;
            numel = numel
                .checked_mul(e)
                .ok_or_else(|| Error::format(format!("{name}: element count overflows")))?;
            shape.push(e);
        }
        let payload = r.take(numel * 4, &format!("payload of {name}"))?;
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::format(format!("{name}: {e}")))?;
        if table.insert(name.clone(), tensor).is_some() {
            return Err(Error::format(format!("duplicate tensor name {name:?}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::format(format!(
            "trailing data: {} bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(table)
}

/// Round every element to `f32` precision in place. Applied to live state
/// right after saving so that a resumed run and a continued run see
/// bit-identical parameters.
pub fn round_tensor_to_f32(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = *v as f32 as f64;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_entries() -> Vec<(String, Tensor)> {
        vec![
            ("alpha.weight".into(), Tensor::new(vec![2, 3], vec![0.5, -1.25, 3.0, 0.1, -0.75, 2.5]).unwrap()),
            ("alpha.bias".into(), Tensor::new(vec![3], vec![0.0, 1.0, -1.0]).unwrap()),
            ("meta.step".into(), Tensor::scalar(42.0).unwrap()),
        ]
    }

    #[test]
    fn empty_table_is_twelve_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.scgn");
        save_checkpoint(&path, &[]).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 12);
        assert!(load_checkpoint(&path).unwrap().is_empty());
    }

    #[test]
    fn round_trip_preserves_f32_precision_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.scgn");
        let entries = sample_entries();
        let refs: Vec<(String, &Tensor)> =
            entries.iter().map(|(n, t)| (n.clone(), t)).collect();
        save_checkpoint(&path, &refs).unwrap();
        let table = load_checkpoint(&path).unwrap();
        assert_eq!(table.len(), 3);
        for (name, orig) in &entries {
            let got = &table[name];
            assert_eq!(got.shape(), orig.shape());
            for (a, b) in got.data().iter().zip(orig.data()) {
                assert_eq!(*a, *b as f32 as f64, "{name}");
            }
        }
        // A second save of the loaded table is byte-identical (stable at
        // stored precision).
        let path2 = dir.path().join("ck2.scgn");
        let refs2: Vec<(String, &Tensor)> = entries
            .iter()
            .map(|(n, _)| (n.clone(), &table[n]))
            .collect();
        save_checkpoint(&path2, &refs2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn fault_injection_names_the_broken_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.scgn");
        let entries = sample_entries();
        let refs: Vec<(String, &Tensor)> =
            entries.iter().map(|(n, t)| (n.clone(), t)).collect();
        save_checkpoint(&path, &refs).unwrap();
        let good = std::fs::read(&path).unwrap();

        let check = |bytes: Vec<u8>, needle: &str, what: &str| {
            let p = dir.path().join(format!("{what}.scgn"));
            std::fs::write(&p, bytes).unwrap();
            let err = load_checkpoint(&p).unwrap_err().to_string();
            assert!(err.contains(needle), "{what}: error {err:?} lacks {needle:?}");
        };

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        check(bad_magic, "magic", "magic");

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        check(bad_version, "version", "version");

        // First tensor is alpha.weight: name_len at offset 12, name at 16,
        // rank u32 follows, then two u64 extents. Corrupt the low byte of
        // the first extent so the payload length no longer matches.
        let name_len = 12; // "alpha.weight"
        let extent_off = 12 + 4 + name_len + 4;
        let mut bad_extent = good.clone();
        bad_extent[extent_off] = 200;
        check(bad_extent, "alpha.weight", "extent");

        let truncated = good[..good.len() - 2].to_vec();
        check(truncated, "meta.step", "truncated");

        let mut trailing = good.clone();
        trailing.extend_from_slice(&[0, 0, 0]);
        check(trailing, "trailing", "trailing");

        // Duplicate names are rejected at save time.
        let t = Tensor::scalar(1.0).unwrap();
        let dup = vec![("x".to_string(), &t), ("x".to_string(), &t)];
        assert!(save_checkpoint(&dir.path().join("dup.scgn"), &dup).is_err());
    }

    #[test]
    fn rank_zero_and_rank_four_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ranks.scgn");
        let s = Tensor::scalar(-7.5).unwrap();
        let four = Tensor::new(vec![2, 1, 2, 2], (0..8).map(|i| i as f64 * 0.25).collect()).unwrap();
        let entries = vec![("s".to_string(), &s), ("four".to_string(), &four)];
        save_checkpoint(&path, &entries).unwrap();
        let table = load_checkpoint(&path).unwrap();
        assert_eq!(table["s"].shape(), &[] as &[usize]);
        assert_eq!(table["s"].data(), &[-7.5]);
        assert_eq!(table["four"].shape(), &[2, 1, 2, 2]);
        assert_eq!(table["four"].data(), four.data());
    }

    #[test]
    fn f32_rounding_matches_stored_precision() {
        let mut t = Tensor::new(vec![2], vec![std::f64::consts::PI, 1.0 / 3.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pi.scgn");
        save_checkpoint(&path, &[("t".into(), &t)]).unwrap();
        round_tensor_to_f32(&mut t);
        let table = load_checkpoint(&path).unwrap();
        assert_eq!(table["t"].data(), t.data());
    }
}

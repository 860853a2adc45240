//! Binary checkpoint layout, all integers little-endian:
//!
//! ```text
//! "VGOPT1"  u8 optimizer  u64 step  u32 section count
//! per section: u32 name length, name bytes, u32 rank, u64 extents, f64 payload
//! ```

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::OptimizerKind;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"VGOPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: OptimizerKind,
    pub step: u64,
    pub sections: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(self.kind.code());
        out.write_u64::<LE>(self.step).unwrap();
        out.write_u32::<LE>(self.sections.len() as u32).unwrap();
        for (name, t) in &self.sections {
            out.write_u32::<LE>(name.len() as u32).unwrap();
            out.write_all(name.as_bytes()).unwrap();
            out.write_u32::<LE>(t.dims().len() as u32).unwrap();
            for &d in t.dims() {
                out.write_u64::<LE>(d as u64).unwrap();
            }
            for &v in t.data() {
                out.write_f64::<LE>(f64::from(v)).unwrap();
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let fail = |cur: &Cursor<&[u8]>, detail: &str| Error::Format { path: path.to_string(), offset: cur.position(), detail: detail.to_string() };
        let mut magic = [0u8; 6];
        cur.read_exact(&mut magic).map_err(|_| fail(&cur, "truncated header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format { path: path.to_string(), offset: 0, detail: "bad magic".into() });
        }
        let code = cur.read_u8().map_err(|_| fail(&cur, "truncated header"))?;
        let kind = OptimizerKind::from_code(code).ok_or_else(|| fail(&cur, "unknown optimizer code"))?;
        let step = cur.read_u64::<LE>().map_err(|_| fail(&cur, "truncated header"))?;
        let count = cur.read_u32::<LE>().map_err(|_| fail(&cur, "truncated header"))?;
        let mut sections = Vec::new();
        for _ in 0..count {
            let len = cur.read_u32::<LE>().map_err(|_| fail(&cur, "truncated section"))? as usize;
            let remaining = bytes.len() as u64 - cur.position();
            if len as u64 > remaining {
                return Err(fail(&cur, "section name runs past end of file"));
            }
            let mut name = vec![0u8; len];
            cur.read_exact(&mut name).map_err(|_| fail(&cur, "truncated section"))?;
            let name = String::from_utf8(name).map_err(|_| fail(&cur, "section name is not UTF-8"))?;
            let rank = cur.read_u32::<LE>().map_err(|_| fail(&cur, "truncated section"))?;
            if rank > 16 {
                return Err(fail(&cur, "implausible rank"));
            }
            let dims = (0..rank)
                .map(|_| cur.read_u64::<LE>().map(|d| d as usize).map_err(|_| fail(&cur, "truncated extents")))
                .collect::<Result<Vec<_>>>()?;
            let numel = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|n| n.checked_mul(8).is_some_and(|b| b as u64 <= bytes.len() as u64 - cur.position()))
                .ok_or_else(|| fail(&cur, "payload runs past end of file"))?;
            let data = (0..numel)
                .map(|_| cur.read_f64::<LE>().map(|v| v as Real).map_err(|_| fail(&cur, "truncated payload")))
                .collect::<Result<Vec<_>>>()?;
            sections.push((name, Tensor::new(dims, data)?));
        }
        if cur.position() != bytes.len() as u64 {
            return Err(fail(&cur, "trailing bytes"));
        }
        Ok(Checkpoint { kind, step, sections })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    Checkpoint::from_bytes(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            kind: OptimizerKind::Adam,
            step: 42,
            sections: vec![
                ("param/w".into(), Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 3.25]).unwrap()),
                ("s/w".into(), Tensor::scalar(7.0)),
            ],
        }
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..6], b"VGOPT1");
        assert_eq!(bytes[6], OptimizerKind::Adam.code());
        assert_eq!(u64::from_le_bytes(bytes[7..15].try_into().unwrap()), 42);
        assert_eq!(Checkpoint::from_bytes(&bytes, "x").unwrap(), c);
    }

    #[test]
    fn corruption_is_reported() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad, "x"), Err(Error::Format { offset: 0, .. })));
        for cut in [3, 10, 20, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut], "x").is_err(), "cut {cut}");
        }
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long, "x").is_err());
    }
}

//! Model files.
//!
//! Binary layout (all integers and floats little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "EITM"
//! 4       2     format version (1)
//! 6       1     kind: 1 = category, 2 = instance
//! 7       1     reserved, 0
//! 8       8     feature dimension d (u64)
//! category:
//! 16      8     mass (u64)
//! 24      8(d+1) mean coordinates (f64), bias last
//! instance:
//! 16      8     instance id (u64)
//! 24      8     steps_total (u64)
//! 32      8     samples_seen (u64)
//! 40      8(d+1) current iterate (f64)
//! ..      8(d+1) Polyak average (f64)
//! ```
//!
//! The text export carries the same header as `key value` lines followed by
//! one coordinate per line; floats are written in shortest round-trip form.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ParamVector;
use crate::mtl::{CategoryModel, InstanceModel};

pub const MAGIC: &[u8; 4] = b"EITM";
pub const FORMAT_VERSION: u16 = 1;
const TEXT_TAG: &str = "eit-model";

const KIND_CATEGORY: u8 = 1;
const KIND_INSTANCE: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum ModelFile {
    Category(CategoryModel),
    Instance(InstanceModel),
}

impl ModelFile {
    pub fn feature_dim(&self) -> usize {
        match self {
            ModelFile::Category(c) => c.mean().feature_dim(),
            ModelFile::Instance(m) => m.current().feature_dim(),
        }
    }

    /// The vector used for detection: `w̄` or the instance Polyak average.
    pub fn detector(&self) -> &ParamVector {
        match self {
            ModelFile::Category(c) => c.mean(),
            ModelFile::Instance(m) => m.polyak(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let kind = match self {
            ModelFile::Category(_) => KIND_CATEGORY,
            ModelFile::Instance(_) => KIND_INSTANCE,
        };
        out.push(kind);
        out.push(0);
        out.extend_from_slice(&(self.feature_dim() as u64).to_le_bytes());
        let put_vec = |out: &mut Vec<u8>, v: &ParamVector| {
            for x in v.as_slice() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        };
        match self {
            ModelFile::Category(c) => {
                out.extend_from_slice(&c.mass().to_le_bytes());
                put_vec(&mut out, c.mean());
            }
            ModelFile::Instance(m) => {
                out.extend_from_slice(&m.instance_id().to_le_bytes());
                out.extend_from_slice(&m.steps_total().to_le_bytes());
                out.extend_from_slice(&m.samples_seen().to_le_bytes());
                put_vec(&mut out, m.current());
                put_vec(&mut out, m.polyak());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let kind = r.take(1)?[0];
        r.take(1)?;
        let d = r.u64()? as usize;
        let model = match kind {
            KIND_CATEGORY => {
                let mass = r.u64()?;
                let mean = r.vector(d)?;
                ModelFile::Category(CategoryModel::from_parts(mean, mass))
            }
            KIND_INSTANCE => {
                let id = r.u64()?;
                let steps = r.u64()?;
                let seen = r.u64()?;
                let current = r.vector(d)?;
                let polyak = r.vector(d)?;
                ModelFile::Instance(InstanceModel::from_parts(id, current, polyak, steps, seen)?)
            }
            k => return Err(Error::Format(format!("unknown model kind {k}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(model)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{TEXT_TAG} {FORMAT_VERSION}").unwrap();
        let put_vec = |s: &mut String, name: &str, v: &ParamVector| {
            writeln!(s, "{name}").unwrap();
            for x in v.as_slice() {
                writeln!(s, "{x:?}").unwrap();
            }
        };
        match self {
            ModelFile::Category(c) => {
                writeln!(s, "kind category").unwrap();
                writeln!(s, "dim {}", self.feature_dim()).unwrap();
                writeln!(s, "mass {}", c.mass()).unwrap();
                put_vec(&mut s, "mean", c.mean());
            }
            ModelFile::Instance(m) => {
                writeln!(s, "kind instance").unwrap();
                writeln!(s, "dim {}", self.feature_dim()).unwrap();
                writeln!(s, "instance_id {}", m.instance_id()).unwrap();
                writeln!(s, "steps_total {}", m.steps_total()).unwrap();
                writeln!(s, "samples_seen {}", m.samples_seen()).unwrap();
                put_vec(&mut s, "current", m.current());
                put_vec(&mut s, "polyak", m.polyak());
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut r = TextReader { lines: text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) };
        let version = r.keyed(TEXT_TAG)?;
        if version != FORMAT_VERSION.to_string() {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let kind = r.keyed("kind")?;
        let d = r.int("dim")? as usize;
        let model = match kind.as_str() {
            "category" => {
                let mass = r.int("mass")?;
                ModelFile::Category(CategoryModel::from_parts(r.vector("mean", d)?, mass))
            }
            "instance" => {
                let id = r.int("instance_id")?;
                let steps = r.int("steps_total")?;
                let seen = r.int("samples_seen")?;
                let current = r.vector("current", d)?;
                let polyak = r.vector("polyak", d)?;
                ModelFile::Instance(InstanceModel::from_parts(id, current, polyak, steps, seen)?)
            }
            other => return Err(Error::Format(format!("unknown model kind {other}"))),
        };
        if let Ok((line, _)) = r.next("end of file") {
            return Err(Error::Format(format!("line {line}: trailing content")));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn save_text(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Loads either encoding, recognized by its leading bytes.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        if bytes.starts_with(MAGIC) {
            Self::from_bytes(&bytes)
        } else if bytes.starts_with(TEXT_TAG.as_bytes()) {
            let text = String::from_utf8(bytes).map_err(|_| Error::Format("text model is not UTF-8".into()))?;
            Self::from_text(&text)
        } else {
            Err(Error::Format(format!("{} is not a model file", path.display())))
        }
    }
}

struct TextReader<I> {
    lines: I,
}

impl<'a, I: Iterator<Item = (usize, &'a str)>> TextReader<I> {
    fn next(&mut self, expect: &str) -> Result<(usize, &'a str)> {
        self.lines
            .next()
            .map(|(i, l)| (i + 1, l.trim()))
            .ok_or_else(|| Error::Format(format!("unexpected end of file, expected {expect}")))
    }

    fn keyed(&mut self, key: &str) -> Result<String> {
        let (line, l) = self.next(key)?;
        match l.split_once(' ') {
            Some((k, v)) if k == key => Ok(v.trim().to_string()),
            _ => Err(Error::Format(format!("line {line}: expected `{key} <value>`"))),
        }
    }

    fn int(&mut self, key: &str) -> Result<u64> {
        let v = self.keyed(key)?;
        v.parse().map_err(|_| Error::Format(format!("bad integer for {key}: {v}")))
    }

    fn vector(&mut self, name: &str, d: usize) -> Result<ParamVector> {
        let (line, l) = self.next(name)?;
        if l != name {
            return Err(Error::Format(format!("line {line}: expected `{name}`")));
        }
        let mut coords = Vec::with_capacity(d + 1);
        for _ in 0..=d {
            let (line, l) = self.next("coordinate")?;
            coords.push(l.parse::<f64>().map_err(|_| Error::Format(format!("line {line}: bad coordinate {l}")))?);
        }
        ParamVector::from_raw(coords).map_err(|e| Error::Format(e.to_string()))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format(format!("truncated at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn vector(&mut self, d: usize) -> Result<ParamVector> {
        let n = d.checked_add(1).ok_or_else(|| Error::Format("dimension overflow".into()))?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("dimension overflow".into()))?)?;
        let coords = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        ParamVector::from_raw(coords).map_err(|e| Error::Format(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn category() -> ModelFile {
        let mean = ParamVector::from_raw(vec![0.1, -2.5e-300, 1.0 / 3.0]).unwrap();
        ModelFile::Category(CategoryModel::from_parts(mean, 17))
    }

    #[test]
    fn header_layout() {
        let b = category().to_bytes();
        assert_eq!(&b[..4], b"EITM");
        assert_eq!(u16::from_le_bytes([b[4], b[5]]), 1);
        assert_eq!(b[6], KIND_CATEGORY);
        assert_eq!(u64::from_le_bytes(b[8..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[16..24].try_into().unwrap()), 17);
        assert_eq!(f64::from_le_bytes(b[24..32].try_into().unwrap()), 0.1);
        assert_eq!(b.len(), 24 + 3 * 8);
    }

    #[test]
    fn text_is_one_coordinate_per_line() {
        let t = category().to_text();
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[..5], ["eit-model 1", "kind category", "dim 2", "mass 17", "mean"]);
        assert_eq!(lines.len(), 8);
        assert_eq!(ModelFile::from_text(&t).unwrap(), category());
    }

    #[test]
    fn rejects_corrupt_input() {
        let mut b = category().to_bytes();
        assert!(ModelFile::from_bytes(&b[..b.len() - 1]).is_err());
        b.push(0);
        assert!(ModelFile::from_bytes(&b).is_err());
        let mut v = category().to_bytes();
        v[4] = 9;
        assert!(matches!(ModelFile::from_bytes(&v), Err(Error::Format(_))));
        assert!(ModelFile::from_text("eit-model 1\nkind category\ndim 1\nmass 0\nmean\n0.5\n").is_err());
    }
}

//! Binary dataset files and CSV export.
//!
//! Layout (little-endian):
//!
//! ```text
//! "CRWD" | version u32
//! num_identities clothes samples cameras embedding_dim identity_dim clothing_dim train_identities : u32 x 8
//! split u8 | 3 pad bytes
//! identity_scale clothing_scale noise_scale : f64 x 3
//! seed u64 | record_count u64
//! record_count x { identity u32 | clothing u32 | camera u32 | flags u8 | role u8 | 2 pad | D x f64 }
//! ```
//!
//! `flags` bit 0 marks synthetic samples.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::numerics::Vector;
use crate::world::{Dataset, Role, Sample, SplitSetting, WorldConfig};

pub const DATASET_MAGIC: &[u8; 4] = b"CRWD";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetIoError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("format error{}: {message}", record.map(|r| format!(" at record {r}")).unwrap_or_default())]
    Format { record: Option<usize>, message: String },
}

fn header_err(message: impl Into<String>) -> DatasetIoError {
    DatasetIoError::Format { record: None, message: message.into() }
}

fn record_width(dim: usize) -> usize {
    16 + 8 * dim
}

pub fn write_dataset(path: impl AsRef<Path>, dataset: &Dataset) -> Result<(), DatasetIoError> {
    let mut w = BufWriter::new(File::create(path)?);
    encode_dataset(&mut w, dataset)?;
    w.flush()?;
    Ok(())
}

pub fn encode_dataset<W: Write>(w: &mut W, dataset: &Dataset) -> Result<(), DatasetIoError> {
    let c = &dataset.config;
    let dim = c.embedding_dim as usize;
    if dataset.samples.len() != dataset.roles.len() {
        return Err(header_err("samples and roles differ in length"));
    }
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    for v in [
        c.num_identities,
        c.clothes_per_identity,
        c.samples_per_identity_clothing,
        c.num_cameras,
        c.embedding_dim,
        c.identity_dim,
        c.clothing_dim,
        c.train_identities,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&[c.split.code(), 0, 0, 0])?;
    for v in [c.identity_scale, c.clothing_scale, c.noise_scale] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&c.seed.to_le_bytes())?;
    w.write_all(&(dataset.samples.len() as u64).to_le_bytes())?;

    let mut buf = Vec::with_capacity(record_width(dim));
    for (i, (s, role)) in dataset.samples.iter().zip(&dataset.roles).enumerate() {
        if s.raw.dim() != dim {
            return Err(DatasetIoError::Format {
                record: Some(i),
                message: format!("sample has dimension {}, header says {dim}", s.raw.dim()),
            });
        }
        buf.clear();
        buf.extend_from_slice(&s.identity_id.to_le_bytes());
        buf.extend_from_slice(&s.clothing_id.to_le_bytes());
        buf.extend_from_slice(&s.camera_id.to_le_bytes());
        buf.extend_from_slice(&[u8::from(s.is_synthetic), role.code(), 0, 0]);
        for v in s.raw.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset, DatasetIoError> {
    decode_dataset(&mut BufReader::new(File::open(path)?))
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], record: Option<usize>) -> Result<(), DatasetIoError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => DatasetIoError::Format { record, message: "truncated file".into() },
        _ => DatasetIoError::Io(e),
    })
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(b[off..off + 4].try_into().expect("4 bytes"))
}

fn u64_at(b: &[u8], off: usize) -> u64 {
    u64::from_le_bytes(b[off..off + 8].try_into().expect("8 bytes"))
}

fn f64_at(b: &[u8], off: usize) -> f64 {
    f64::from_le_bytes(b[off..off + 8].try_into().expect("8 bytes"))
}

pub fn decode_dataset<R: Read>(r: &mut R) -> Result<Dataset, DatasetIoError> {
    // magic + version + 8 counts + split/pad + 3 scales + seed + count
    let mut head = [0u8; 4 + 4 + 32 + 4 + 24 + 8 + 8];
    read_exact_or(r, &mut head, None)?;
    if &head[0..4] != DATASET_MAGIC {
        return Err(header_err("bad magic"));
    }
    let version = u32_at(&head, 4);
    if version != DATASET_VERSION {
        return Err(header_err(format!("unsupported version {version}")));
    }
    let counts: Vec<u32> = (0..8).map(|i| u32_at(&head, 8 + 4 * i)).collect();
    let split = SplitSetting::from_code(head[40]).ok_or_else(|| header_err("bad split code"))?;
    let config = WorldConfig {
        num_identities: counts[0],
        clothes_per_identity: counts[1],
        samples_per_identity_clothing: counts[2],
        num_cameras: counts[3],
        embedding_dim: counts[4],
        identity_dim: counts[5],
        clothing_dim: counts[6],
        train_identities: counts[7],
        split,
        identity_scale: f64_at(&head, 44),
        clothing_scale: f64_at(&head, 52),
        noise_scale: f64_at(&head, 60),
        seed: u64_at(&head, 68),
    };
    let count = u64_at(&head, 76) as usize;
    let dim = config.embedding_dim as usize;

    let mut samples = Vec::with_capacity(count.min(1 << 20));
    let mut roles = Vec::with_capacity(count.min(1 << 20));
    let mut rec = vec![0u8; record_width(dim)];
    for i in 0..count {
        read_exact_or(r, &mut rec, Some(i))?;
        let fmt = |message: String| DatasetIoError::Format { record: Some(i), message };
        let flags = rec[12];
        if flags > 1 {
            return Err(fmt(format!("bad flags {flags}")));
        }
        let role = Role::from_code(rec[13]).ok_or_else(|| fmt(format!("bad role {}", rec[13])))?;
        let raw: Vec<f64> = (0..dim).map(|j| f64_at(&rec, 16 + 8 * j)).collect();
        let raw = Vector::new(raw).map_err(|_| fmt("non-finite value".into()))?;
        samples.push(Sample {
            raw,
            identity_id: u32_at(&rec, 0),
            clothing_id: u32_at(&rec, 4),
            camera_id: u32_at(&rec, 8),
            is_synthetic: flags == 1,
        });
        roles.push(role);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(header_err("trailing bytes after last record"));
    }
    Ok(Dataset { config, samples, roles })
}

/// Columns: `identity_id,clothing_id,camera_id,is_synthetic,v0..v{D-1}`.
pub fn write_csv<W: Write>(w: &mut W, samples: &[Sample]) -> io::Result<()> {
    let dim = samples.first().map_or(0, |s| s.raw.dim());
    write!(w, "identity_id,clothing_id,camera_id,is_synthetic")?;
    for j in 0..dim {
        write!(w, ",v{j}")?;
    }
    writeln!(w)?;
    for s in samples {
        write!(w, "{},{},{},{}", s.identity_id, s.clothing_id, s.camera_id, u8::from(s.is_synthetic))?;
        for v in s.raw.as_slice() {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::generate_world;

    fn tiny() -> Dataset {
        let cfg = WorldConfig {
            num_identities: 3,
            clothes_per_identity: 2,
            samples_per_identity_clothing: 2,
            embedding_dim: 5,
            identity_dim: 2,
            clothing_dim: 2,
            train_identities: 2,
            seed: 4,
            ..WorldConfig::default()
        };
        generate_world(&cfg).unwrap().1
    }

    #[test]
    fn round_trip_is_exact() {
        let ds = tiny();
        let mut bytes = Vec::new();
        encode_dataset(&mut bytes, &ds).unwrap();
        let back = decode_dataset(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(bytes.len(), 84 + ds.samples.len() * record_width(5));
    }

    #[test]
    fn truncated_file_reports_record() {
        let ds = tiny();
        let mut bytes = Vec::new();
        encode_dataset(&mut bytes, &ds).unwrap();
        bytes.truncate(bytes.len() - 3);
        match decode_dataset(&mut bytes.as_slice()) {
            Err(DatasetIoError::Format { record: Some(r), .. }) => assert_eq!(r, ds.samples.len() - 1),
            other => panic!("expected format error, got {other:?}"),
        }
        bytes.truncate(10);
        assert!(matches!(decode_dataset(&mut bytes.as_slice()), Err(DatasetIoError::Format { record: None, .. })));
    }

    #[test]
    fn empty_dataset_is_valid() {
        let mut ds = tiny();
        ds.samples.clear();
        ds.roles.clear();
        let mut bytes = Vec::new();
        encode_dataset(&mut bytes, &ds).unwrap();
        assert_eq!(decode_dataset(&mut bytes.as_slice()).unwrap(), ds);
    }

    #[test]
    fn bad_magic_rejected() {
        let ds = tiny();
        let mut bytes = Vec::new();
        encode_dataset(&mut bytes, &ds).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_dataset(&mut bytes.as_slice()), Err(DatasetIoError::Format { .. })));
    }

    #[test]
    fn csv_has_expected_columns() {
        let ds = tiny();
        let mut out = Vec::new();
        write_csv(&mut out, &ds.samples[..2]).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "identity_id,clothing_id,camera_id,is_synthetic,v0,v1,v2,v3,v4");
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(first.len(), 9);
        assert_eq!(first[0..4], ["0", "0", "0", "0"]);
        let v0: f64 = first[4].parse().unwrap();
        assert_eq!(v0, ds.samples[0].raw.as_slice()[0]);
    }
}

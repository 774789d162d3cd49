//! Single-file dataset container.
//!
//! Layout: magic `DDC1`, a little-endian u32 header length, a UTF-8
//! structured-text manifest (`key: value` lines), then the raw payload.
//! Images are stored as one 8-bit value per pixel, row-major; actions and
//! states as little-endian 64-bit reals. The manifest carries the record
//! count, kind, image size, format version, and the payload's SHA-256, and
//! loading re-verifies all of them with distinct errors.

use std::io::Read;
use std::path::Path;

use ddc_core::data::{PairedRecord, TripleRecord};
use ddc_core::env::{ActionInput, Image, PlanarState};
use sha2::{Digest, Sha256};

pub const MAGIC: &[u8; 4] = b"DDC1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a dataset container (bad magic)")]
    BadMagic,
    #[error("unsupported container version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("payload checksum mismatch")]
    ChecksumMismatch,
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("manifest count {manifest} does not match payload capacity {payload}")]
    CountMismatch { manifest: usize, payload: usize },
    #[error("malformed manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    XTriples,
    YPairs,
}

impl DatasetKind {
    fn name(&self) -> &'static str {
        match self {
            DatasetKind::XTriples => "x_triples",
            DatasetKind::YPairs => "y_pairs",
        }
    }

    fn parse(s: &str) -> Result<Self, ContainerError> {
        match s {
            "x_triples" => Ok(DatasetKind::XTriples),
            "y_pairs" => Ok(DatasetKind::YPairs),
            other => Err(ContainerError::Manifest(format!(
                "unknown dataset kind `{}`",
                other
            ))),
        }
    }
}

/// Everything the header records about a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub kind: DatasetKind,
    pub count: usize,
    pub image_size: usize,
    pub seed: u64,
    pub payload_sha256: String,
}

/// In-memory dataset plus its manifest.
#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    XTriples(Vec<TripleRecord>),
    YPairs(Vec<PairedRecord>),
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::XTriples(v) => v.len(),
            Dataset::YPairs(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn kind(&self) -> DatasetKind {
        match self {
            Dataset::XTriples(_) => DatasetKind::XTriples,
            Dataset::YPairs(_) => DatasetKind::YPairs,
        }
    }

    fn image_size(&self) -> usize {
        match self {
            Dataset::XTriples(v) => v.first().map(|r| r.x_t.width).unwrap_or(0),
            Dataset::YPairs(v) => v.first().map(|r| r.y_t.width).unwrap_or(0),
        }
    }
}

fn push_image(buf: &mut Vec<u8>, img: &Image) {
    for &p in &img.pixels {
        buf.push((p * 255.0).round() as u8);
    }
}

fn push_f64s(buf: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        if self.pos + n > self.data.len() {
            return Err(ContainerError::Truncated {
                expected: self.pos + n,
                found: self.data.len(),
            });
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn image(&mut self, size: usize) -> Result<Image, ContainerError> {
        let bytes = self.take(size * size)?;
        Ok(Image {
            width: size,
            height: size,
            pixels: bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        })
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, ContainerError> {
        let bytes = self.take(8 * n)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn record_bytes(kind: DatasetKind, image_size: usize) -> usize {
    let px = image_size * image_size;
    match kind {
        // x_t, x_next, u, state_t, state_next
        DatasetKind::XTriples => 2 * px + 8 * (2 + 2 + 2),
        // y_t, x_t, state_t
        DatasetKind::YPairs => 2 * px + 8 * 2,
    }
}

fn encode_payload(dataset: &Dataset) -> Vec<u8> {
    let mut buf = Vec::new();
    match dataset {
        Dataset::XTriples(records) => {
            for r in records {
                push_image(&mut buf, &r.x_t);
                push_image(&mut buf, &r.x_next);
                push_f64s(&mut buf, &r.u_t.u);
                push_f64s(&mut buf, &r.ground_truth_t().position);
                push_f64s(&mut buf, &r.ground_truth_next().position);
            }
        }
        Dataset::YPairs(records) => {
            for r in records {
                push_image(&mut buf, &r.y_t);
                push_image(&mut buf, &r.x_t);
                push_f64s(&mut buf, &r.ground_truth_t().position);
            }
        }
    }
    buf
}

fn sha256_hex(data: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(data);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{:02x}", b));
    }
    out
}

/// Serialize a dataset with its manifest.
pub fn encode(dataset: &Dataset, seed: u64) -> Vec<u8> {
    let payload = encode_payload(dataset);
    let manifest = format!(
        "format_version: {}\nkind: {}\ncount: {}\nimage_size: {}\nseed: {}\npayload_sha256: {}\n",
        FORMAT_VERSION,
        dataset.kind().name(),
        dataset.len(),
        dataset.image_size(),
        seed,
        sha256_hex(&payload),
    );
    let mut out = Vec::with_capacity(4 + 4 + manifest.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&payload);
    out
}

pub fn save(dataset: &Dataset, seed: u64, path: &Path) -> Result<(), ContainerError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, encode(dataset, seed))?;
    Ok(())
}

fn manifest_field<'a>(fields: &'a [(String, String)], key: &str) -> Result<&'a str, ContainerError> {
    fields
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| ContainerError::Manifest(format!("missing field `{}`", key)))
}

fn parse_manifest(text: &str) -> Result<DatasetManifest, ContainerError> {
    let mut fields = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once(':')
            .ok_or_else(|| ContainerError::Manifest(format!("bad line `{}`", line)))?;
        fields.push((k.trim().to_string(), v.trim().to_string()));
    }
    let version: u32 = manifest_field(&fields, "format_version")?
        .parse()
        .map_err(|_| ContainerError::Manifest("bad format_version".into()))?;
    if version != FORMAT_VERSION {
        return Err(ContainerError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let kind = DatasetKind::parse(manifest_field(&fields, "kind")?)?;
    let count: usize = manifest_field(&fields, "count")?
        .parse()
        .map_err(|_| ContainerError::Manifest("bad count".into()))?;
    let image_size: usize = manifest_field(&fields, "image_size")?
        .parse()
        .map_err(|_| ContainerError::Manifest("bad image_size".into()))?;
    let seed: u64 = manifest_field(&fields, "seed")?
        .parse()
        .map_err(|_| ContainerError::Manifest("bad seed".into()))?;
    let payload_sha256 = manifest_field(&fields, "payload_sha256")?.to_string();
    Ok(DatasetManifest {
        kind,
        count,
        image_size,
        seed,
        payload_sha256,
    })
}

/// Decode a container image, verifying magic, version, structure, and
/// checksum.
pub fn decode(bytes: &[u8]) -> Result<(DatasetManifest, Dataset), ContainerError> {
    if bytes.len() < 8 || &bytes[0..4] != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + header_len {
        return Err(ContainerError::Truncated {
            expected: 8 + header_len,
            found: bytes.len(),
        });
    }
    let manifest_text = std::str::from_utf8(&bytes[8..8 + header_len])
        .map_err(|_| ContainerError::Manifest("header is not UTF-8".into()))?;
    let manifest = parse_manifest(manifest_text)?;
    let payload = &bytes[8 + header_len..];
    let per_record = record_bytes(manifest.kind, manifest.image_size);
    let expected = manifest.count * per_record;
    if payload.len() < expected {
        return Err(ContainerError::Truncated {
            expected: 8 + header_len + expected,
            found: bytes.len(),
        });
    }
    if payload.len() != expected {
        // Extra bytes mean the count and payload disagree structurally.
        return Err(ContainerError::CountMismatch {
            manifest: manifest.count,
            payload: payload.len() / per_record,
        });
    }
    if sha256_hex(payload) != manifest.payload_sha256 {
        return Err(ContainerError::ChecksumMismatch);
    }
    let mut r = Reader {
        data: payload,
        pos: 0,
    };
    let dataset = match manifest.kind {
        DatasetKind::XTriples => {
            let mut records = Vec::with_capacity(manifest.count);
            for _ in 0..manifest.count {
                let x_t = r.image(manifest.image_size)?;
                let x_next = r.image(manifest.image_size)?;
                let u = r.f64s(2)?;
                let st = r.f64s(2)?;
                let sn = r.f64s(2)?;
                records.push(TripleRecord::with_ground_truth(
                    x_t,
                    ActionInput::new(u[0], u[1]),
                    x_next,
                    PlanarState::new(st[0], st[1]),
                    PlanarState::new(sn[0], sn[1]),
                ));
            }
            Dataset::XTriples(records)
        }
        DatasetKind::YPairs => {
            let mut records = Vec::with_capacity(manifest.count);
            for _ in 0..manifest.count {
                let y_t = r.image(manifest.image_size)?;
                let x_t = r.image(manifest.image_size)?;
                let st = r.f64s(2)?;
                records.push(PairedRecord::with_ground_truth(
                    y_t,
                    x_t,
                    PlanarState::new(st[0], st[1]),
                ));
            }
            Dataset::YPairs(records)
        }
    };
    Ok((manifest, dataset))
}

pub fn load(path: &Path) -> Result<(DatasetManifest, Dataset), ContainerError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

/// Convenience accessors with kind checking.
pub fn load_triples(path: &Path) -> Result<Vec<TripleRecord>, ContainerError> {
    match load(path)? {
        (_, Dataset::XTriples(v)) => Ok(v),
        _ => Err(ContainerError::Manifest(format!(
            "{} does not hold action-labeled triples",
            path.display()
        ))),
    }
}

pub fn load_pairs(path: &Path) -> Result<Vec<PairedRecord>, ContainerError> {
    match load(path)? {
        (_, Dataset::YPairs(v)) => Ok(v),
        _ => Err(ContainerError::Manifest(format!(
            "{} does not hold paired observations",
            path.display()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ddc_core::data;
    use ddc_core::env::EnvConfig;
    use ddc_core::rng::derive;

    fn sample_sets() -> (Vec<TripleRecord>, Vec<PairedRecord>) {
        let cfg = EnvConfig::default();
        let mut r = derive(5, &[80]);
        (
            data::generate_x(&cfg, 10, &mut r).unwrap(),
            data::generate_y(&cfg, 10, &mut r).unwrap(),
        )
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (xs, ys) = sample_sets();
        for ds in [Dataset::XTriples(xs), Dataset::YPairs(ys)] {
            let bytes = encode(&ds, 7);
            let (manifest, back) = decode(&bytes).unwrap();
            assert_eq!(back, ds);
            assert_eq!(manifest.count, 10);
            assert_eq!(manifest.seed, 7);
            // identical bytes on re-encode
            assert_eq!(encode(&back, 7), bytes);
        }
    }

    #[test]
    fn corrupting_a_payload_byte_fails_the_checksum() {
        let (xs, _) = sample_sets();
        let mut bytes = encode(&Dataset::XTriples(xs), 7);
        let n = bytes.len();
        bytes[n - 10] ^= 0x01;
        assert!(matches!(
            decode(&bytes),
            Err(ContainerError::ChecksumMismatch)
        ));
    }

    #[test]
    fn count_mismatch_is_structural() {
        let (xs, _) = sample_sets();
        let bytes = encode(&Dataset::XTriples(xs), 7);
        // Claim one record fewer than the payload holds.
        let text_start = 8;
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let manifest = std::str::from_utf8(&bytes[text_start..text_start + header_len]).unwrap();
        let patched = manifest.replace("count: 10", "count: 9");
        let mut out = bytes[0..4].to_vec();
        out.extend_from_slice(&(patched.len() as u32).to_le_bytes());
        out.extend_from_slice(patched.as_bytes());
        out.extend_from_slice(&bytes[text_start + header_len..]);
        assert!(matches!(
            decode(&out),
            Err(ContainerError::CountMismatch {
                manifest: 9,
                payload: 10
            })
        ));
    }

    #[test]
    fn truncation_version_and_magic_are_distinct_errors() {
        let (xs, _) = sample_sets();
        let bytes = encode(&Dataset::XTriples(xs), 7);
        let cut = &bytes[..bytes.len() - 5];
        assert!(matches!(decode(cut), Err(ContainerError::Truncated { .. })));
        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(matches!(
            decode(&wrong_magic),
            Err(ContainerError::BadMagic)
        ));
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let manifest = std::str::from_utf8(&bytes[8..8 + header_len]).unwrap();
        let patched = manifest.replace("format_version: 1", "format_version: 9");
        let mut out = bytes[0..4].to_vec();
        out.extend_from_slice(&(patched.len() as u32).to_le_bytes());
        out.extend_from_slice(patched.as_bytes());
        out.extend_from_slice(&bytes[8 + header_len..]);
        assert!(matches!(
            decode(&out),
            Err(ContainerError::VersionMismatch { found: 9, .. })
        ));
    }

    #[test]
    fn file_round_trip_and_kind_guards() {
        let (xs, ys) = sample_sets();
        let dir = tempfile::tempdir().unwrap();
        let px = dir.path().join("x.ddc");
        let py = dir.path().join("y.ddc");
        save(&Dataset::XTriples(xs.clone()), 1, &px).unwrap();
        save(&Dataset::YPairs(ys.clone()), 2, &py).unwrap();
        assert_eq!(load_triples(&px).unwrap(), xs);
        assert_eq!(load_pairs(&py).unwrap(), ys);
        assert!(load_triples(&py).is_err());
        assert!(load_pairs(&px).is_err());
    }
}

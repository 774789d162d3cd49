//! Versioned checkpoint container.
//!
//! Magic `DDCK`, little-endian u32 header length, UTF-8 manifest, payload.
//! The manifest carries the hyperparameters, the training step/epoch
//! counters, and the ordered block table (name and length); the payload is
//! the parameter blocks followed by the Adam first/second moment blocks in
//! the same order, all little-endian f64, protected by a SHA-256. Loading
//! rebuilds the model through `ModelParams::from_named_blocks`, which
//! reports every shape mismatch by block name.

use std::io::Read;
use std::path::Path;

use ddc_core::model::{HyperConfig, ModelError, ModelParams};
use ddc_core::train::{AdamState, TrainState};
use sha2::{Digest, Sha256};

pub const MAGIC: &[u8; 4] = b"DDCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint payload checksum mismatch")]
    ChecksumMismatch,
    #[error("truncated checkpoint: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("malformed checkpoint manifest: {0}")]
    Manifest(String),
    #[error("parameter shape mismatch: {0}")]
    Shape(#[from] ModelError),
}

fn sha256_hex(data: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(data);
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{:02x}", b))
        .collect()
}

fn shapes_line(shapes: &[usize]) -> String {
    shapes
        .iter()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn hyper_manifest(h: &HyperConfig) -> String {
    format!(
        "hyper.latent_dim: {}\nhyper.content_dim: {}\nhyper.image_size: {}\n\
         hyper.conv_channels: {}\nhyper.enc_hidden: {}\nhyper.dec_hidden: {}\n\
         hyper.trans_hidden: {}\nhyper.sigma_floor: {}\nhyper.trans_rank: {}\n\
         hyper.det_floor: {}\nhyper.beta_y: {}\nhyper.tie_y_encoder: {}\n\
         hyper.symmetric_prior_flow: {}\n",
        h.latent_dim,
        h.content_dim,
        h.image_size,
        shapes_line(&h.conv_channels),
        h.enc_hidden,
        h.dec_hidden,
        h.trans_hidden,
        h.sigma_floor,
        h.trans_rank,
        h.det_floor,
        h.beta_y,
        h.tie_y_encoder,
        h.symmetric_prior_flow,
    )
}

fn push_f64s(buf: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(state: &TrainState) -> Vec<u8> {
    let params = &state.params;
    let mut payload = Vec::new();
    for (_, block) in params.named_blocks() {
        push_f64s(&mut payload, block);
    }
    for m in &state.opt.m {
        push_f64s(&mut payload, m);
    }
    for v in &state.opt.v {
        push_f64s(&mut payload, v);
    }
    payload.extend_from_slice(&state.opt.t.to_le_bytes());
    let block_table: Vec<String> = params
        .named_blocks()
        .map(|(n, b)| format!("{}:{}", n, b.len()))
        .collect();
    let manifest = format!(
        "format_version: {}\nstep: {}\nepoch: {}\n{}blocks: {}\npayload_sha256: {}\n",
        FORMAT_VERSION,
        state.step,
        state.epoch,
        hyper_manifest(&params.hyper),
        block_table.join(";"),
        sha256_hex(&payload),
    );
    let mut out = Vec::with_capacity(8 + manifest.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&payload);
    out
}

pub fn save(state: &TrainState, path: &Path) -> Result<(), CheckpointError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, encode(state))?;
    Ok(())
}

struct Fields(Vec<(String, String)>);

impl Fields {
    fn get(&self, key: &str) -> Result<&str, CheckpointError> {
        self.0
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| CheckpointError::Manifest(format!("missing field `{}`", key)))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, CheckpointError> {
        self.get(key)?
            .parse()
            .map_err(|_| CheckpointError::Manifest(format!("bad value for `{}`", key)))
    }
}

fn parse_hyper(fields: &Fields) -> Result<HyperConfig, CheckpointError> {
    let conv_channels = fields
        .get("hyper.conv_channels")?
        .split(',')
        .map(|c| {
            c.trim()
                .parse::<usize>()
                .map_err(|_| CheckpointError::Manifest("bad conv_channels".into()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(HyperConfig {
        latent_dim: fields.parse("hyper.latent_dim")?,
        content_dim: fields.parse("hyper.content_dim")?,
        image_size: fields.parse("hyper.image_size")?,
        conv_channels,
        enc_hidden: fields.parse("hyper.enc_hidden")?,
        dec_hidden: fields.parse("hyper.dec_hidden")?,
        trans_hidden: fields.parse("hyper.trans_hidden")?,
        sigma_floor: fields.parse("hyper.sigma_floor")?,
        trans_rank: fields.parse("hyper.trans_rank")?,
        det_floor: fields.parse("hyper.det_floor")?,
        beta_y: fields.parse("hyper.beta_y")?,
        tie_y_encoder: fields.parse("hyper.tie_y_encoder")?,
        symmetric_prior_flow: fields.parse("hyper.symmetric_prior_flow")?,
    })
}

pub fn decode(bytes: &[u8]) -> Result<TrainState, CheckpointError> {
    if bytes.len() < 8 || &bytes[0..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + header_len {
        return Err(CheckpointError::Truncated {
            expected: 8 + header_len,
            found: bytes.len(),
        });
    }
    let text = std::str::from_utf8(&bytes[8..8 + header_len])
        .map_err(|_| CheckpointError::Manifest("header is not UTF-8".into()))?;
    let mut fields = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once(':')
            .ok_or_else(|| CheckpointError::Manifest(format!("bad line `{}`", line)))?;
        fields.push((k.trim().to_string(), v.trim().to_string()));
    }
    let fields = Fields(fields);
    let version: u32 = fields.parse("format_version")?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let step: u64 = fields.parse("step")?;
    let epoch: usize = fields.parse("epoch")?;
    let hyper = parse_hyper(&fields)?;
    let blocks_line = fields.get("blocks")?;
    let mut table: Vec<(String, usize)> = Vec::new();
    for entry in blocks_line.split(';') {
        let (name, len) = entry
            .split_once(':')
            .ok_or_else(|| CheckpointError::Manifest(format!("bad block entry `{}`", entry)))?;
        table.push((
            name.trim().to_string(),
            len.trim()
                .parse()
                .map_err(|_| CheckpointError::Manifest("bad block length".into()))?,
        ));
    }
    let payload = &bytes[8 + header_len..];
    let total: usize = table.iter().map(|(_, l)| l).sum();
    let expected = 8 * (3 * total) + 8;
    if payload.len() < expected {
        return Err(CheckpointError::Truncated {
            expected: 8 + header_len + expected,
            found: bytes.len(),
        });
    }
    if sha256_hex(payload) != fields.get("payload_sha256")? {
        return Err(CheckpointError::ChecksumMismatch);
    }
    let mut pos = 0;
    let mut take_block = |len: usize| -> Vec<f64> {
        let out = payload[pos..pos + 8 * len]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        pos += 8 * len;
        out
    };
    let named: Vec<(String, Vec<f64>)> = table
        .iter()
        .map(|(n, l)| (n.clone(), take_block(*l)))
        .collect();
    let m: Vec<Vec<f64>> = table.iter().map(|(_, l)| take_block(*l)).collect();
    let v: Vec<Vec<f64>> = table.iter().map(|(_, l)| take_block(*l)).collect();
    let t = u64::from_le_bytes(payload[pos..pos + 8].try_into().unwrap());
    let params = ModelParams::from_named_blocks(hyper, &named)?;
    Ok(TrainState {
        params,
        opt: AdamState { m, v, t },
        step,
        epoch,
    })
}

pub fn load(path: &Path) -> Result<TrainState, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ddc_core::rng;

    fn sample_state() -> TrainState {
        let hyper = HyperConfig::tiny();
        let params = ModelParams::init(hyper, 3).unwrap();
        let mut opt = AdamState::zeros_like(&params);
        let mut r = rng::derive(4, &[90]);
        for buf in opt.m.iter_mut().chain(opt.v.iter_mut()) {
            for v in buf.iter_mut() {
                *v = rng::normal(&mut r);
            }
        }
        opt.t = 17;
        TrainState {
            params,
            opt,
            step: 17,
            epoch: 2,
        }
    }

    #[test]
    fn round_trip_preserves_everything() {
        let state = sample_state();
        let back = decode(&encode(&state)).unwrap();
        assert_eq!(back, state);
    }

    #[test]
    fn corrupted_payload_is_rejected() {
        let state = sample_state();
        let mut bytes = encode(&state);
        let n = bytes.len();
        bytes[n - 3] ^= 0xff;
        assert!(matches!(
            decode(&bytes),
            Err(CheckpointError::ChecksumMismatch)
        ));
    }

    #[test]
    fn shape_mismatch_reports_block_names() {
        // Claim a larger latent dimension than the stored blocks support.
        let state = sample_state();
        let bytes = encode(&state);
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let text = std::str::from_utf8(&bytes[8..8 + header_len]).unwrap();
        let patched = text.replace("hyper.latent_dim: 2", "hyper.latent_dim: 4");
        let mut out = bytes[0..4].to_vec();
        out.extend_from_slice(&(patched.len() as u32).to_le_bytes());
        out.extend_from_slice(patched.as_bytes());
        out.extend_from_slice(&bytes[8 + header_len..]);
        match decode(&out) {
            Err(CheckpointError::Shape(ModelError::ShapeMismatch(msg))) => {
                assert!(msg.contains("enc_dyn.head.w"), "diff must name blocks: {}", msg);
            }
            other => panic!("expected shape mismatch, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck").join("state.ddck");
        let state = sample_state();
        save(&state, &path).unwrap();
        assert_eq!(load(&path).unwrap(), state);
    }
}

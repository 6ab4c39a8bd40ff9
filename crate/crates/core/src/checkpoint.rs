//! Binary checkpoint container.
//!
//! Layout: `"DPCK"`, u32 LE version, u64 LE header length, UTF-8 JSON
//! header, f32 LE payload, u64 LE CRC-64 of the payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::text::{TextConfig, TextEncoder, Vocabulary};
use crate::unet::DenoiserConfig;

pub const MAGIC: &[u8; 4] = b"DPCK";
pub const VERSION: u32 = 1;
pub const SCHEMA: &str = "dreampaint.checkpoint.v1";

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    BaseInpaint,
    FinetunedInpaint,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::BaseInpaint => "base-inpaint",
            ModelKind::FinetunedInpaint => "finetuned-inpaint",
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_noun: Option<String>,
    #[serde(default)]
    pub prior_preservation: bool,
    #[serde(default)]
    pub finetune_text_encoder: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderMetadata {
    training: TrainingMeta,
    denoiser: DenoiserConfig,
    text_encoder: TextConfig,
    schedule: ScheduleConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub byte_len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema: String,
    model_kind: ModelKind,
    tensors: Vec<TensorEntry>,
    vocabulary: Vocabulary,
    metadata: HeaderMetadata,
}

/// Denoiser and text-encoder weights with everything needed to sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub denoiser_config: DenoiserConfig,
    pub text_config: TextConfig,
    pub schedule: ScheduleConfig,
    pub vocab: Vocabulary,
    pub unet: ParamStore,
    pub text: ParamStore,
    pub meta: TrainingMeta,
}

fn check_layout(store: &ParamStore, layout: &[(String, Vec<usize>)], what: &str) -> Result<()> {
    if store.len() != layout.len() {
        return Err(Error::Format(format!(
            "{what} has {} tensors, layout expects {}",
            store.len(),
            layout.len()
        )));
    }
    for (name, shape) in layout {
        let t = store
            .get(name)
            .map_err(|_| Error::Format(format!("{what} is missing `{name}`")))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::ParamShapeMismatch {
                name: name.clone(),
                expected: shape.clone(),
                found: t.shape().to_vec(),
            });
        }
    }
    Ok(())
}

impl Checkpoint {
    /// A base checkpoint with seeded initial weights and no training.
    pub fn untrained_base(
        denoiser_config: DenoiserConfig,
        text_config: TextConfig,
        schedule: ScheduleConfig,
        vocab: Vocabulary,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ckpt = Self {
            kind: ModelKind::BaseInpaint,
            denoiser_config,
            text_config,
            schedule,
            unet: denoiser_config.init_params(&mut rng)?,
            text: text_config.init_params(vocab.len(), &mut rng),
            vocab,
            meta: TrainingMeta {
                seed,
                ..TrainingMeta::default()
            },
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// Checks the tensor sets against the configs and the token/kind rule.
    pub fn validate(&self) -> Result<()> {
        check_layout(&self.unet, &self.denoiser_config.layout(), "denoiser")?;
        check_layout(
            &self.text,
            &self.text_config.layout(self.vocab.len()),
            "text encoder",
        )?;
        let finetuned = self.kind == ModelKind::FinetunedInpaint;
        if finetuned != self.meta.token.is_some() {
            return Err(Error::Format(format!(
                "{} checkpoint {} a concept token",
                self.kind,
                if finetuned { "lacks" } else { "carries" }
            )));
        }
        if let Some(tok) = &self.meta.token {
            if !self.vocab.contains(tok) {
                return Err(Error::UnregisteredToken(tok.clone()));
            }
        }
        Ok(())
    }

    pub fn text_encoder(&self) -> TextEncoder {
        TextEncoder {
            config: self.text_config,
            vocab: self.vocab.clone(),
            params: self.text.clone(),
        }
    }

    fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        // "text." sorts before "unet.", so this is globally name-ordered.
        self.text.iter().chain(self.unet.iter())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut entries = Vec::new();
        let mut offset = 0u64;
        for (name, t) in self.tensors() {
            let byte_len = (t.numel() * 4) as u64;
            entries.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
                byte_len,
            });
            offset += byte_len;
        }
        let header = Header {
            schema: SCHEMA.to_string(),
            model_kind: self.kind,
            tensors: entries,
            vocabulary: self.vocab.clone(),
            metadata: HeaderMetadata {
                training: self.meta.clone(),
                denoiser: self.denoiser_config,
                text_encoder: self.text_config,
                schedule: self.schedule,
            },
        };
        let header = serde_json::to_vec(&header)?;
        let mut payload = Vec::with_capacity(offset as usize);
        for (_, t) in self.tensors() {
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload.len() + 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&CRC64.checksum(&payload).to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREAMBLE {
            return Err(Error::Format(format!(
                "truncated: {} bytes is shorter than the preamble",
                bytes.len()
            )));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format(format!("bad magic {:02x?}", &bytes[..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let header_end = (PREAMBLE as u64)
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| Error::Format("truncated header".into()))? as usize;
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])
            .map_err(|e| Error::Format(format!("header: {e}")))?;
        if header.schema != SCHEMA {
            return Err(Error::Format(format!("unknown schema `{}`", header.schema)));
        }
        let payload_len: u64 = header.tensors.iter().map(|e| e.byte_len).sum();
        let expected_total = header_end as u64 + payload_len + 8;
        if (bytes.len() as u64) < expected_total {
            return Err(Error::Format(format!(
                "truncated payload: file has {} bytes, header implies {expected_total}",
                bytes.len()
            )));
        }
        if (bytes.len() as u64) > expected_total {
            return Err(Error::Format(format!(
                "{} trailing bytes after checksum",
                bytes.len() as u64 - expected_total
            )));
        }
        let payload = &bytes[header_end..header_end + payload_len as usize];
        let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
        let computed = CRC64.checksum(payload);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }

        let mut unet = ParamStore::new();
        let mut text = ParamStore::new();
        let mut expected_offset = 0u64;
        for e in &header.tensors {
            let numel: usize = e.shape.iter().product();
            if e.offset != expected_offset || e.byte_len != numel as u64 * 4 {
                return Err(Error::Format(format!("tensor `{}` has inconsistent extent", e.name)));
            }
            expected_offset += e.byte_len;
            let raw = &payload[e.offset as usize..(e.offset + e.byte_len) as usize];
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(&e.shape, data)?;
            let store = if e.name.starts_with("unet.") {
                &mut unet
            } else if e.name.starts_with("text.") {
                &mut text
            } else {
                return Err(Error::Format(format!("unexpected tensor `{}`", e.name)));
            };
            if store.insert(e.name.clone(), t).is_some() {
                return Err(Error::Format(format!("duplicate tensor `{}`", e.name)));
            }
        }
        let ckpt = Checkpoint {
            kind: header.model_kind,
            denoiser_config: header.metadata.denoiser,
            text_config: header.metadata.text_encoder,
            schedule: header.metadata.schedule,
            vocab: header.vocabulary,
            unet,
            text,
            meta: header.metadata.training,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// Writes via a temporary sibling and rename, so readers never see a
    /// partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("dpck.tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized form.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}

/// Parses only the header of a serialized checkpoint, for listings.
pub fn read_header_summary(bytes: &[u8]) -> Result<(ModelKind, TrainingMeta, Vec<TensorEntry>)> {
    if bytes.len() < PREAMBLE || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let end = PREAMBLE
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..end])
        .map_err(|e| Error::Format(format!("header: {e}")))?;
    Ok((header.model_kind, header.metadata.training, header.tensors))
}

#[cfg(test)]
mod tests {
    use super::*;

    use crate::diffusion::ForwardMode;

    fn tiny() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let denoiser_config = DenoiserConfig {
            width: 8,
            depth: 1,
            ..DenoiserConfig::default()
        };
        let text_config = TextConfig {
            embed_dim: 8,
            hidden_dim: 8,
        };
        let vocab = Vocabulary::new(["a", "red", "couch"]);
        let denoiser_config = DenoiserConfig {
            cond_dim: text_config.cond_dim(),
            ..denoiser_config
        };
        Checkpoint {
            kind: ModelKind::BaseInpaint,
            denoiser_config,
            text_config,
            schedule: ScheduleConfig::linear(100, ForwardMode::VariancePreserving),
            unet: denoiser_config.init_params(&mut rng).unwrap(),
            text: text_config.init_params(vocab.len(), &mut rng),
            vocab,
            meta: TrainingMeta {
                steps: 3,
                learning_rate: 1e-3,
                seed: 5,
                ..TrainingMeta::default()
            },
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.dpck");
        let p2 = dir.path().join("b.dpck");
        let c = tiny();
        c.save(&p1).unwrap();
        let back = Checkpoint::load(&p1).unwrap();
        assert_eq!(back, c);
        back.save(&p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn manifest_sums_match_payload() {
        let c = tiny();
        let bytes = c.to_bytes().unwrap();
        let (_, _, entries) = read_header_summary(&bytes).unwrap();
        let expected_count = c.unet.len() + c.text.len();
        assert_eq!(entries.len(), expected_count);
        let numel = c.unet.total_elements() + c.text.total_elements();
        let declared: u64 = entries.iter().map(|e| e.byte_len).sum();
        assert_eq!(declared, numel as u64 * 4);
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), PREAMBLE + header_len + declared as usize + 8);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = tiny().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(m)) if m.contains("magic")));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(m)) if m.contains("version")));
        let truncated = &bytes[..bytes.len() - 20];
        assert!(matches!(Checkpoint::from_bytes(truncated), Err(Error::Format(m)) if m.contains("truncated")));
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 30] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checksum { .. })));
    }

    #[test]
    fn token_presence_must_match_kind() {
        let mut c = tiny();
        c.kind = ModelKind::FinetunedInpaint;
        assert!(c.validate().is_err());
        c.meta.token = Some("zqxv".into());
        assert!(matches!(c.validate(), Err(Error::UnregisteredToken(_))));
    }
}

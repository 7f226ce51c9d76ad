//! Bit-exact binary checkpoint format.
//!
//! Layout: magic `WFCK`, format version (u32 LE), entry count (u32 LE),
//! then per entry: name length (u32 LE) + UTF-8 name, dtype tag (u8),
//! rank (u32 LE), dims (u32 LE each), raw little-endian payload. A CRC-32
//! of everything after the magic trails the file.
//!
//! Dtype tags: 0 = f32, 1 = f64, 2 = i8 with a leading f32 scale
//! (symmetric, zero point 0), 3 = UTF-8 text (rank 1, dims = [len]).
//! The run configuration is embedded as the text entry `__config__`, so
//! evaluation never needs a sidecar file. Unknown versions are refused.

use crate::model::Model;
use crate::quant::QuantizedTensor;
use crate::runconfig::RunConfig;
use crate::tensor::Tensor;
use std::path::Path;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"WFCK";
pub const VERSION: u32 = 1;
/// Name of the embedded configuration entry.
pub const CONFIG_ENTRY: &str = "__config__";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("crc mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint is missing tensor {0}")]
    MissingEntry(String),
    #[error("shape mismatch for tensor {name}: checkpoint {found:?}, model wants {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("bad embedded config: {0}")]
    Config(#[from] crate::runconfig::ConfigError),
}

/// One named payload.
#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    I8(QuantizedTensor),
    Text(String),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Entry)>,
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.data.len() {
            return Err(CheckpointError::Malformed(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, entry: Entry) {
        self.entries.push((name.into(), entry));
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = Vec::new();
        push_u32(&mut body, VERSION);
        push_u32(&mut body, self.entries.len() as u32);
        for (name, entry) in &self.entries {
            push_u32(&mut body, name.len() as u32);
            body.extend_from_slice(name.as_bytes());
            match entry {
                Entry::F32(t) => {
                    body.push(0);
                    push_u32(&mut body, t.rank() as u32);
                    for &d in t.shape() {
                        push_u32(&mut body, d as u32);
                    }
                    for v in t.data() {
                        body.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Entry::F64(t) => {
                    body.push(1);
                    push_u32(&mut body, t.rank() as u32);
                    for &d in t.shape() {
                        push_u32(&mut body, d as u32);
                    }
                    for v in t.data() {
                        body.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Entry::I8(q) => {
                    body.push(2);
                    push_u32(&mut body, q.shape.len() as u32);
                    for &d in &q.shape {
                        push_u32(&mut body, d as u32);
                    }
                    body.extend_from_slice(&q.scale.to_le_bytes());
                    body.extend(q.data.iter().map(|&v| v as u8));
                }
                Entry::Text(s) => {
                    body.push(3);
                    push_u32(&mut body, 1);
                    push_u32(&mut body, s.len() as u32);
                    body.extend_from_slice(s.as_bytes());
                }
            }
        }
        let crc = crc32fast::hash(&body);
        let mut out = Vec::with_capacity(4 + body.len() + 4);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&body);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 12 || bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let body = &bytes[4..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::CrcMismatch { stored, computed });
        }

        let mut r = Reader { data: body, pos: 0 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| CheckpointError::Malformed("entry name is not UTF-8".into()))?
                .to_string();
            let dtype = r.u8()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let entry = match dtype {
                0 => {
                    let raw = r.take(numel * 4)?;
                    let data = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Entry::F32(Tensor::new(shape, data).map_err(|e| {
                        CheckpointError::Malformed(format!("{name}: {e}"))
                    })?)
                }
                1 => {
                    let raw = r.take(numel * 8)?;
                    let data = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Entry::F64(Tensor::new(shape, data).map_err(|e| {
                        CheckpointError::Malformed(format!("{name}: {e}"))
                    })?)
                }
                2 => {
                    let scale = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
                    let data = r.take(numel)?.iter().map(|&b| b as i8).collect();
                    Entry::I8(QuantizedTensor { data, scale, zero_point: 0, shape })
                }
                3 => {
                    let text = std::str::from_utf8(r.take(numel)?)
                        .map_err(|_| {
                            CheckpointError::Malformed(format!("{name}: text is not UTF-8"))
                        })?
                        .to_string();
                    Entry::Text(text)
                }
                other => {
                    return Err(CheckpointError::Malformed(format!(
                        "{name}: unknown dtype tag {other}"
                    )))
                }
            };
            entries.push((name, entry));
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes after the last entry",
                body.len() - r.pos
            )));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Serialize a trained model: the embedded config first, then every
/// registered parameter in registry order as f32.
pub fn model_to_checkpoint(model: &Model<f32>, run: &RunConfig) -> Checkpoint {
    let mut ckpt = Checkpoint::default();
    ckpt.push(CONFIG_ENTRY, Entry::Text(run.to_text()));
    model.visit_params(&mut |name, t| ckpt.push(name, Entry::F32(t.clone())));
    ckpt
}

/// Rebuild `(model, run config)` from a checkpoint: parse the embedded
/// config, construct the architecture, then overwrite every parameter,
/// validating shapes by name.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(Model<f32>, RunConfig), CheckpointError> {
    let Some(Entry::Text(cfg_text)) = ckpt.get(CONFIG_ENTRY) else {
        return Err(CheckpointError::MissingEntry(CONFIG_ENTRY.into()));
    };
    let run = RunConfig::from_text(cfg_text)?;
    let (mut model, _) = Model::<f32>::init(run.model.clone(), run.train.seed)
        .map_err(|e| CheckpointError::Malformed(format!("embedded config invalid: {e}")))?;

    let mut error: Option<CheckpointError> = None;
    model.visit_params_mut(&mut |name, t| {
        if error.is_some() {
            return;
        }
        match ckpt.get(&name) {
            Some(Entry::F32(stored)) => {
                if stored.shape() != t.shape() {
                    error = Some(CheckpointError::ShapeMismatch {
                        name,
                        expected: t.shape().to_vec(),
                        found: stored.shape().to_vec(),
                    });
                } else {
                    *t = stored.clone();
                }
            }
            Some(_) => {
                error = Some(CheckpointError::Malformed(format!("{name} has the wrong dtype")))
            }
            None => error = Some(CheckpointError::MissingEntry(name)),
        }
    });
    match error {
        Some(e) => Err(e),
        None => Ok((model, run)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::SplitMix64;

    fn sample_checkpoint() -> Checkpoint {
        let mut rng = SplitMix64::new(5);
        let mut ckpt = Checkpoint::default();
        ckpt.push("cfg", Entry::Text("layers = 2\n".into()));
        ckpt.push("a", Entry::F32(Tensor::from_fn(vec![2, 3], |_| rng.next_normal() as f32)));
        ckpt.push("b", Entry::F64(Tensor::from_fn(vec![4], |_| rng.next_normal())));
        ckpt.push(
            "q",
            Entry::I8(QuantizedTensor {
                data: vec![-127, 0, 64, 127, -1, 3],
                scale: 0.017,
                zero_point: 0,
                shape: vec![3, 2],
            }),
        );
        ckpt
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let ckpt = sample_checkpoint();
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        // Byte-level idempotence: serialize(load(x)) == x.
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn crc_detects_corruption() {
        let mut bytes = sample_checkpoint().to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::CrcMismatch { .. })
        ));
    }

    #[test]
    fn bad_magic_and_unknown_version_are_refused() {
        let mut bytes = sample_checkpoint().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::BadMagic)));

        let mut bytes = sample_checkpoint().to_bytes();
        // Bump the version field and fix up the CRC so only the version is
        // wrong; the loader must refuse rather than best-effort parse.
        bytes[4] = 99;
        let body_end = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[4..body_end]);
        bytes[body_end..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::UnsupportedVersion(99))
        ));
    }

    fn tiny_model() -> (Model<f32>, RunConfig) {
        let mut run = RunConfig::default();
        run.apply_text(
            "channels = 2\nwindow = 40\npatch_width = 20\nembed_dim = 8\nlevels = 1\n\
             layers = 1\nheads = 2\nffn_dim = 16\nnum_classes = 2\nseed = 11\n",
        )
        .unwrap();
        let (model, _) = Model::<f32>::init(run.model.clone(), run.train.seed).unwrap();
        (model, run)
    }

    #[test]
    fn model_roundtrip_restores_everything() {
        let (mut model, run) = tiny_model();
        // Perturb away from init so the test is not vacuous.
        let mut rng = SplitMix64::new(7);
        model.visit_params_mut(&mut |_, t| {
            for v in t.data_mut() {
                *v += rng.next_normal() as f32 * 0.1;
            }
        });
        let ckpt = model_to_checkpoint(&model, &run);
        let (back, run_back) = model_from_checkpoint(&ckpt).unwrap();
        assert_eq!(run_back, run);
        let bits = |m: &Model<f32>| {
            let mut v = Vec::new();
            m.visit_params(&mut |_, t| v.extend(t.data().iter().map(|x| x.to_bits())));
            v
        };
        assert_eq!(bits(&model), bits(&back));

        // File-level roundtrip too.
        let tmp = tempfile::NamedTempFile::new().unwrap();
        ckpt.save(tmp.path()).unwrap();
        let loaded = Checkpoint::load(tmp.path()).unwrap();
        assert_eq!(loaded.to_bytes(), ckpt.to_bytes());
    }

    #[test]
    fn shape_mismatch_names_the_tensor() {
        let (model, run) = tiny_model();
        let mut ckpt = model_to_checkpoint(&model, &run);
        // Corrupt one entry's shape.
        for (name, entry) in ckpt.entries.iter_mut() {
            if name == "patch.proj" {
                *entry = Entry::F32(Tensor::zeros(vec![3, 3]));
            }
        }
        match model_from_checkpoint(&ckpt) {
            Err(CheckpointError::ShapeMismatch { name, .. }) => assert_eq!(name, "patch.proj"),
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn missing_parameter_is_reported() {
        let (model, run) = tiny_model();
        let mut ckpt = model_to_checkpoint(&model, &run);
        ckpt.entries.retain(|(name, _)| name != "head.bias");
        assert!(matches!(
            model_from_checkpoint(&ckpt),
            Err(CheckpointError::MissingEntry(name)) if name == "head.bias"
        ));
    }

    #[test]
    fn ablated_checkpoint_restores_ablation_flags() {
        let mut run = RunConfig::default();
        run.apply_text(
            "channels = 2\nwindow = 40\npatch_width = 20\nembed_dim = 8\nlevels = 1\n\
             layers = 1\nheads = 2\nffn_dim = 16\nnum_classes = 2\nuse_rope = false\n\
             use_waveletconv = false\n",
        )
        .unwrap();
        let (model, _) = Model::<f32>::init(run.model.clone(), 1).unwrap();
        assert!(model.wavelet.is_none());
        let ckpt = model_to_checkpoint(&model, &run);
        let (back, run_back) = model_from_checkpoint(&ckpt).unwrap();
        assert!(!run_back.model.use_rope);
        assert!(back.wavelet.is_none());
        let _ = ModelConfig::default();
    }
}

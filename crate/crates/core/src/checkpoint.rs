//! `SDCK` checkpoint files.
//!
//! Layout: magic `SDCK`, version byte, `u32` length + key-value config
//! block, stage tag byte, then one record per tensor in canonical order:
//! `u32` name length, name bytes, `u8` rank, `u32` extents, little-endian
//! `f32` data. Records run to end of file.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::binio::{Reader, Writer};
use crate::kv::KvMap;
use crate::model::{ModelConfig, Parameters};
use crate::tensor::Tensor;
use crate::{Error, FormatError, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SDCK";
pub const CHECKPOINT_VERSION: u8 = 1;
const STEP_KEY: &str = "checkpoint.step";

/// Which pipeline stage produced a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Pretrained,
    TeacherCp,
    StudentSd,
    Finetuned,
    BaselineCp,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Pretrained,
        Stage::TeacherCp,
        Stage::StudentSd,
        Stage::Finetuned,
        Stage::BaselineCp,
    ];

    pub fn tag(self) -> u8 {
        match self {
            Stage::Pretrained => 0,
            Stage::TeacherCp => 1,
            Stage::StudentSd => 2,
            Stage::Finetuned => 3,
            Stage::BaselineCp => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.tag() == tag)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrained => "pretrained",
            Stage::TeacherCp => "teacher_cp",
            Stage::StudentSd => "student_sd",
            Stage::Finetuned => "finetuned",
            Stage::BaselineCp => "baseline_cp",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub step: u64,
    pub params: Parameters,
    /// Extra provenance (run config digest, seeds) carried in the config block.
    pub meta: KvMap,
}

impl Checkpoint {
    pub fn new(stage: Stage, step: u64, params: Parameters) -> Self {
        Self {
            stage,
            step,
            params,
            meta: KvMap::new(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        self.params.config()
    }

    /// Errors unless the stage is one of `allowed`.
    pub fn require_stage(&self, allowed: &[Stage]) -> Result<()> {
        if allowed.contains(&self.stage) {
            return Ok(());
        }
        Err(Error::Provenance {
            expected: allowed.iter().map(|s| s.as_str()).collect::<Vec<_>>().join("|"),
            found: self.stage.to_string(),
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut block = self.params.config().to_kv();
        block.merge(&self.meta);
        block.set(STEP_KEY, self.step);
        let text = block.to_text();

        let mut w = Writer::new();
        w.bytes(&CHECKPOINT_MAGIC);
        w.u8(CHECKPOINT_VERSION);
        w.u32(text.len() as u32);
        w.bytes(text.as_bytes());
        w.u8(self.stage.tag());
        for (name, t) in self.params.tensors() {
            w.u32(name.len() as u32);
            w.bytes(name.as_bytes());
            w.u8(t.rank() as u8);
            for &e in t.shape() {
                w.u32(e as u32);
            }
            for &x in t.data() {
                w.f32(x);
            }
        }
        w.into_inner()
    }

    pub fn decode(buf: &[u8]) -> std::result::Result<Self, FormatError> {
        let mut r = Reader::new(buf);
        let magic = r.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(FormatError::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic.to_vec(),
            });
        }
        let version = r.u8("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let len = r.u32("config length")? as usize;
        let text = std::str::from_utf8(r.take(len, "config block")?)
            .map_err(|_| FormatError::Malformed("config block is not UTF-8".into()))?;
        let block = KvMap::parse(text).map_err(|e| FormatError::Malformed(e.to_string()))?;
        let config = ModelConfig::from_kv(&block).map_err(|e| FormatError::Malformed(e.to_string()))?;
        let step = block
            .require::<u64>(STEP_KEY)
            .map_err(|e| FormatError::Malformed(e.to_string()))?;
        let mut meta = KvMap::new();
        for (k, v) in block.iter() {
            if !k.starts_with("model.") && k != STEP_KEY {
                meta.set(k, v);
            }
        }
        let tag = r.u8("stage tag")?;
        let stage = Stage::from_tag(tag).ok_or_else(|| FormatError::Malformed(format!("unknown stage tag {tag}")))?;

        let mut tensors = Vec::new();
        while !r.is_empty() {
            let n = r.u32("tensor name length")? as usize;
            let name = String::from_utf8(r.take(n, "tensor name")?.to_vec())
                .map_err(|_| FormatError::Malformed("tensor name is not UTF-8".into()))?;
            let rank = r.u8("tensor rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u32("tensor extent").map(|e| e as usize))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4, "tensor data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| FormatError::Malformed(e.to_string()))?;
            tensors.push((name, t));
        }
        let params =
            Parameters::from_tensors(config, tensors).map_err(|e| FormatError::Malformed(e.to_string()))?;
        Ok(Self {
            stage,
            step,
            params,
            meta,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let io = |source| {
        Error::Format(FormatError::Io {
            path: path.to_path_buf(),
            source,
        })
    };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(&ckpt.encode()).map_err(io)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|source| {
            Error::Format(FormatError::Io {
                path: path.to_path_buf(),
                source,
            })
        })?;
    Ok(Checkpoint::decode(&buf)?)
}

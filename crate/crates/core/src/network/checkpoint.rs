//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic          8 bytes  "DFGANCKP"
//! version        u32
//! header_len     u64
//! header         header_len bytes of JSON (CheckpointHeader)
//! payload        f32 values, blocks in header order
//! ```
//!
//! The header records the stage count, the model configuration, an echo of
//! the run configuration, the shape and offset of every parameter block and
//! a checksum per stage.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ProgressiveGenerator};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DFGANCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub stage: usize,
    pub index: usize,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub stage_count: usize,
    pub model: ModelConfig,
    pub config_echo: serde_json::Value,
    pub blocks: Vec<BlockInfo>,
    pub stage_checksums: Vec<String>,
}

/// Store stages `1..=stages` of `gen`. The file is written next to `path`
/// and renamed into place so an interrupted write never clobbers the
/// previous checkpoint.
pub fn save_checkpoint(
    path: &Path,
    gen: &ProgressiveGenerator,
    stages: usize,
    config_echo: serde_json::Value,
) -> Result<CheckpointHeader> {
    if stages == 0 || stages > gen.stage_count() {
        return Err(Error::invalid(format!("cannot store {stages} stages")));
    }
    let mut blocks = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0;
    let mut checksums = Vec::new();
    for k in 1..=stages {
        let stage = gen.stage(k)?;
        checksums.push(stage.checksum());
        for (index, p) in stage.params().into_iter().enumerate() {
            blocks.push(BlockInfo {
                stage: k,
                index,
                shape: p.shape.clone(),
                offset,
            });
            offset += p.len();
            for v in &p.value {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        stage_count: stages,
        model: ModelConfig {
            stages,
            ..gen.config().clone()
        },
        config_echo,
        blocks,
        stage_checksums: checksums,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("ckpt.partial");
    {
        let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
        f.write_all(MAGIC)?;
        f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        f.write_all(&header_bytes)?;
        f.write_all(&payload)?;
        f.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(header)
}

fn read_raw(path: &Path) -> Result<(CheckpointHeader, Vec<f32>)> {
    let bytes = fs::read(path)?;
    let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    if header.format_version != version {
        return Err(bad("header version disagrees with preamble"));
    }
    let payload = &bytes[20 + hlen..];
    if payload.len() % 4 != 0 {
        return Err(bad("payload is not a whole number of f32 values"));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((header, values))
}

fn fill_stages(gen: &mut ProgressiveGenerator, header: &CheckpointHeader, values: &[f32]) -> Result<()> {
    let mismatch = |msg: String| Error::Checkpoint(format!("architecture mismatch: {msg}"));
    for k in 1..=header.stage_count {
        let blocks: Vec<&BlockInfo> = header.blocks.iter().filter(|b| b.stage == k).collect();
        let stage = gen.stage_for_load(k)?;
        let mut params = stage.params_mut();
        if params.len() != blocks.len() {
            return Err(mismatch(format!(
                "stage {k} has {} parameter blocks, checkpoint has {}",
                params.len(),
                blocks.len()
            )));
        }
        for (p, b) in params.iter_mut().zip(&blocks) {
            if p.shape != b.shape {
                return Err(mismatch(format!(
                    "stage {k} block {} shape {:?} vs {:?}",
                    b.index, p.shape, b.shape
                )));
            }
            let src = values
                .get(b.offset..b.offset + p.len())
                .ok_or_else(|| Error::Checkpoint("payload shorter than header claims".into()))?;
            p.value.copy_from_slice(src);
            p.zero_grad();
        }
        let sum = stage.checksum();
        if header.stage_checksums.get(k - 1) != Some(&sum) {
            return Err(Error::Checkpoint(format!("stage {k} checksum mismatch")));
        }
    }
    Ok(())
}

/// Load a checkpoint as a generator with exactly the stored stages.
pub fn load_checkpoint(path: &Path) -> Result<(ProgressiveGenerator, CheckpointHeader)> {
    let (header, values) = read_raw(path)?;
    if header.model.stages != header.stage_count {
        return Err(Error::Checkpoint("stage count disagrees with model config".into()));
    }
    let mut gen = ProgressiveGenerator::new(header.model.clone(), 0)?;
    fill_stages(&mut gen, &header, &values)?;
    Ok((gen, header))
}

/// Copy the stored stages into the leading stages of an existing generator
/// whose architecture must match.
pub fn load_stages_into(gen: &mut ProgressiveGenerator, path: &Path) -> Result<CheckpointHeader> {
    let (header, values) = read_raw(path)?;
    let cfg = gen.config();
    if header.model.base_width != cfg.base_width || header.model.levels != cfg.levels {
        return Err(Error::Checkpoint(format!(
            "architecture mismatch: checkpoint width/levels {}/{} vs model {}/{}",
            header.model.base_width, header.model.levels, cfg.base_width, cfg.levels
        )));
    }
    if header.stage_count > gen.stage_count() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} stages but the model has {}",
            header.stage_count,
            gen.stage_count()
        )));
    }
    fill_stages(gen, &header, &values)?;
    Ok(header)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            stages: 2,
            base_width: 2,
            levels: 2,
            dropout: 0.1,
            disc_width: 2,
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let gen = ProgressiveGenerator::new(cfg(), 3).unwrap();
        save_checkpoint(&path, &gen, 2, serde_json::json!({"note": "x"})).unwrap();
        let (back, header) = load_checkpoint(&path).unwrap();
        assert_eq!(header.stage_count, 2);
        assert_eq!(back.checksum(), gen.checksum());
        assert_eq!(header.config_echo["note"], "x");
    }

    #[test]
    fn partial_checkpoint_loads_into_larger_model() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s1.ckpt");
        let gen = ProgressiveGenerator::new(cfg(), 3).unwrap();
        save_checkpoint(&path, &gen, 1, serde_json::Value::Null).unwrap();
        let (one, _) = load_checkpoint(&path).unwrap();
        assert_eq!(one.stage_count(), 1);
        let mut other = ProgressiveGenerator::new(cfg(), 99).unwrap();
        load_stages_into(&mut other, &path).unwrap();
        assert_eq!(other.stage_checksum(1).unwrap(), gen.stage_checksum(1).unwrap());
        assert_ne!(other.stage_checksum(2).unwrap(), gen.stage_checksum(2).unwrap());
    }

    #[test]
    fn rejects_unknown_version_and_mismatched_architecture() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let gen = ProgressiveGenerator::new(cfg(), 3).unwrap();
        save_checkpoint(&path, &gen, 2, serde_json::Value::Null).unwrap();

        let mut wider = ProgressiveGenerator::new(ModelConfig { base_width: 3, ..cfg() }, 0).unwrap();
        assert!(matches!(load_stages_into(&mut wider, &path), Err(Error::Checkpoint(_))));

        let mut bytes = fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        let bumped = dir.path().join("v7.ckpt");
        fs::write(&bumped, &bytes).unwrap();
        let err = load_checkpoint(&bumped).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");

        fs::write(dir.path().join("junk.ckpt"), b"nope").unwrap();
        assert!(load_checkpoint(&dir.path().join("junk.ckpt")).is_err());
    }
}

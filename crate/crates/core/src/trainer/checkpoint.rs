use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::networks::{Discriminator, Generator, NetworkRecord};
use crate::nn::{Adam, AdamState};
use crate::scalar::Scalar;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

/// Position of the sampling stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// `u128` word position, as decimal text.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Self { seed, stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |what: &str| Error::CorruptCheckpoint(format!("rng {what}"));
        if self.seed.len() != 64 {
            return Err(bad("seed"));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad("seed"))?;
        }
        let pos: u128 = self.word_pos.parse().map_err(|_| bad("word position"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Complete training state of one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// `stage1` or `stage2`.
    pub stage: String,
    pub step: u64,
    pub dtype: String,
    pub networks: BTreeMap<String, NetworkRecord>,
    pub optimizers: BTreeMap<String, AdamState>,
    pub config: TrainConfig,
    pub rng: RngState,
}

impl Checkpoint {
    fn record(&self, name: &str) -> Result<&NetworkRecord> {
        self.networks
            .get(name)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("{} checkpoint has no `{name}` network", self.stage)))
    }

    pub fn generator<T: Scalar>(&self, name: &str) -> Result<Generator<T>> {
        self.check_dtype::<T>()?;
        self.record(name)?.to_generator()
    }

    pub fn discriminator<T: Scalar>(&self, name: &str) -> Result<Discriminator<T>> {
        self.check_dtype::<T>()?;
        self.record(name)?.to_discriminator()
    }

    pub(crate) fn optimizer<T: Scalar>(&self, name: &str, params: &crate::nn::ParamSet<T>) -> Result<Adam<T>> {
        let state = self
            .optimizers
            .get(name)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("no optimizer state for `{name}`")))?;
        Adam::restore(params, state)
    }

    pub fn check_dtype<T: Scalar>(&self) -> Result<()> {
        if self.dtype != T::NAME {
            return Err(Error::CorruptCheckpoint(format!("checkpoint holds {} parameters, expected {}", self.dtype, T::NAME)));
        }
        Ok(())
    }

    pub fn check_stage(&self, tag: &str) -> Result<()> {
        if self.stage != tag {
            return Err(Error::CorruptCheckpoint(format!("expected a {tag} checkpoint, found {}", self.stage)));
        }
        Ok(())
    }
}

/// Writes `<stage_dir>/step_<n>/checkpoint.json` and returns its path.
pub fn save_checkpoint(ckpt: &Checkpoint, stage_dir: &Path) -> Result<PathBuf> {
    let dir = stage_dir.join(format!("step_{}", ckpt.step));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join(CHECKPOINT_FILE);
    let text = serde_json::to_string(ckpt)?;
    let tmp = dir.join(format!("{CHECKPOINT_FILE}.tmp"));
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Reads a checkpoint file, or `checkpoint.json` inside a directory.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = if path.is_dir() { path.join(CHECKPOINT_FILE) } else { path.to_path_buf() };
    let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::CorruptCheckpoint(format!("{}: {e}", file.display())))?;
    let found = value
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::CorruptCheckpoint(format!("{}: missing version", file.display())))?;
    if found != CHECKPOINT_VERSION as u64 {
        let found = u32::try_from(found).unwrap_or(u32::MAX);
        return Err(Error::CheckpointVersion { found, expected: CHECKPOINT_VERSION });
    }
    serde_json::from_value(value).map_err(|e| Error::CorruptCheckpoint(format!("{}: {e}", file.display())))
}

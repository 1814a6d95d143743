//! Binary checkpoints.
//!
//! Layout, integers little-endian:
//!
//! ```text
//! b"GTI1" | version: u32 | manifest_len: u64 | manifest (UTF-8 JSON) | payload
//! ```
//!
//! The payload is `f32` values: every parameter in manifest order, then the
//! first moments and then the second moments of the parameters listed under
//! the optimizer entry.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{OptimizerState, TrainConfig, Trainer};
use crate::data::{Featurizer, TaskLayout};
use crate::error::{CheckpointError, GtiError, Result};
use crate::model::{GtiConfig, GtiModel};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GTI1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// `u128` word position, decimal.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| CheckpointError::Manifest(format!("bad rng word position `{}`", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimizerEntry {
    t: u64,
    /// Parameters whose moments follow in the payload.
    params: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: GtiConfig,
    featurizer: Option<Featurizer>,
    layout: Option<TaskLayout>,
    train_config: Option<TrainConfig>,
    params: Vec<ParamEntry>,
    optimizer: Option<OptimizerEntry>,
    rng: Option<RngState>,
    epoch: usize,
}

/// A named moment pair for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub name: String,
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: GtiConfig,
    pub featurizer: Option<Featurizer>,
    pub layout: Option<TaskLayout>,
    pub train_config: Option<TrainConfig>,
    pub params: Vec<(String, Tensor)>,
    pub optimizer_t: u64,
    pub moments: Vec<Moments>,
    pub rng: Option<RngState>,
    pub epoch: usize,
}

impl Checkpoint {
    pub fn capture(
        model: &GtiModel,
        trainer: Option<&Trainer>,
        featurizer: Option<&Featurizer>,
        layout: Option<&TaskLayout>,
    ) -> Self {
        let params = model
            .params
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect();
        let mut moments = Vec::new();
        if let Some(tr) = trainer {
            for (id, p) in model.params.iter() {
                if let (Some(m), Some(v)) = (&tr.optimizer.m[id.index()], &tr.optimizer.v[id.index()]) {
                    moments.push(Moments {
                        name: p.name.clone(),
                        m: m.clone(),
                        v: v.clone(),
                    });
                }
            }
        }
        Checkpoint {
            config: model.config.clone(),
            featurizer: featurizer.cloned(),
            layout: layout.cloned(),
            train_config: trainer.map(|t| t.config.clone()),
            params,
            optimizer_t: trainer.map_or(0, |t| t.optimizer.t),
            moments,
            rng: trainer.map(|t| RngState::capture(&t.rng)),
            epoch: trainer.map_or(0, |t| t.epoch),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            featurizer: self.featurizer.clone(),
            layout: self.layout.clone(),
            train_config: self.train_config.clone(),
            params: self
                .params
                .iter()
                .map(|(n, t)| ParamEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            optimizer: self.train_config.as_ref().map(|_| OptimizerEntry {
                t: self.optimizer_t,
                params: self.moments.iter().map(|m| m.name.clone()).collect(),
            }),
            rng: self.rng.clone(),
            epoch: self.epoch,
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let tensors = self
            .params
            .iter()
            .map(|(_, t)| t)
            .chain(self.moments.iter().map(|m| &m.m))
            .chain(self.moments.iter().map(|m| &m.v));
        for t in tensors {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        let version = u32::from_le_bytes(cur.take(4, "version")?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                expected: CHECKPOINT_VERSION,
                found: version,
            }
            .into());
        }
        let len = u64::from_le_bytes(cur.take(8, "manifest length")?.try_into().expect("8 bytes"));
        let len = usize::try_from(len).map_err(|_| CheckpointError::Truncated("manifest"))?;
        let manifest: Manifest =
            serde_json::from_slice(cur.take(len, "manifest")?).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        if manifest.version != version {
            return Err(CheckpointError::Manifest(format!(
                "header version {version} but manifest version {}",
                manifest.version
            ))
            .into());
        }

        let moment_names = manifest
            .optimizer
            .as_ref()
            .map(|o| o.params.clone())
            .unwrap_or_default();
        let shape_of = |name: &str| -> Result<&[usize]> {
            manifest
                .params
                .iter()
                .find(|p| p.name == name)
                .map(|p| p.shape.as_slice())
                .ok_or_else(|| CheckpointError::Manifest(format!("moments for unknown parameter `{name}`")).into())
        };
        let mut shapes: Vec<Vec<usize>> = manifest.params.iter().map(|p| p.shape.clone()).collect();
        for _ in 0..2 {
            for n in &moment_names {
                shapes.push(shape_of(n)?.to_vec());
            }
        }
        let expected: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        let payload = cur.rest();
        if payload.len() != expected * 4 {
            return Err(CheckpointError::ShapeMismatch(format!(
                "manifest declares {expected} values, payload holds {} bytes",
                payload.len()
            ))
            .into());
        }
        let mut floats = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
        let mut tensors = shapes.into_iter().map(|shape| {
            let n = shape.iter().product();
            Tensor::new(shape, floats.by_ref().take(n).collect()).expect("length checked above")
        });
        let params = manifest
            .params
            .iter()
            .map(|p| (p.name.clone(), tensors.next().expect("counted")))
            .collect();
        let ms: Vec<Tensor> = tensors.by_ref().take(moment_names.len()).collect();
        let vs: Vec<Tensor> = tensors.collect();
        let moments = moment_names
            .into_iter()
            .zip(ms.into_iter().zip(vs))
            .map(|(name, (m, v))| Moments { name, m, v })
            .collect();
        Ok(Checkpoint {
            config: manifest.config,
            featurizer: manifest.featurizer,
            layout: manifest.layout,
            train_config: manifest.train_config,
            params,
            optimizer_t: manifest.optimizer.map_or(0, |o| o.t),
            moments,
            rng: manifest.rng,
            epoch: manifest.epoch,
        })
    }

    /// Rebuilds the model; every registered parameter must be present with
    /// its registered shape.
    pub fn build_model(&self) -> Result<GtiModel> {
        let word = self
            .params
            .iter()
            .find(|(n, _)| n == "embed.word")
            .map(|(_, t)| t.clone());
        let mut model = GtiModel::new(self.config.clone(), 0, word)?;
        if model.params.len() != self.params.len() {
            return Err(GtiError::ConfigMismatch(format!(
                "checkpoint has {} parameters, configuration registers {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for (name, value) in &self.params {
            let id = model
                .params
                .id(name)
                .ok_or_else(|| GtiError::ConfigMismatch(format!("unknown parameter `{name}`")))?;
            let slot = model.params.value_mut(id);
            if slot.shape() != value.shape() {
                return Err(CheckpointError::ShapeMismatch(format!(
                    "`{name}` stored as {:?}, model expects {:?}",
                    value.shape(),
                    slot.shape()
                ))
                .into());
            }
            *slot = value.clone();
        }
        Ok(model)
    }

    /// Rebuilds the trainer for `model`, which must come from [`Self::build_model`].
    pub fn build_trainer(&self, model: &GtiModel) -> Result<Trainer> {
        let config = self
            .train_config
            .clone()
            .ok_or_else(|| GtiError::ConfigMismatch("checkpoint carries no training state".into()))?;
        let mut trainer = Trainer::new(config, model)?;
        let mut optimizer = OptimizerState::new(&model.params);
        optimizer.t = self.optimizer_t;
        for mo in &self.moments {
            let id = model
                .params
                .id(&mo.name)
                .ok_or_else(|| GtiError::ConfigMismatch(format!("moments for unknown parameter `{}`", mo.name)))?;
            optimizer.m[id.index()] = Some(mo.m.clone());
            optimizer.v[id.index()] = Some(mo.v.clone());
        }
        trainer.optimizer = optimizer;
        if let Some(r) = &self.rng {
            trainer.rng = r.restore()?;
        }
        trainer.epoch = self.epoch;
        Ok(trainer)
    }
}

struct Cursor<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Cursor<'b> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn rest(&self) -> &'b [u8] {
        &self.bytes[self.pos..]
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let bytes = checkpoint.to_bytes()?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sentence;
    use crate::model::Variant;
    use crate::synthetic::ToyTask;

    fn trained() -> (ToyTask, GtiModel, Trainer) {
        let task = ToyTask::new(10, 4, "ner", &["chunk", "pos"]).unwrap();
        let mut m = GtiModel::new(task.config(Variant::Gti, 6), 2, None).unwrap();
        let cfg = TrainConfig {
            batch_size: 5,
            ..TrainConfig::default()
        };
        let mut tr = Trainer::new(cfg, &m).unwrap();
        tr.train_epoch(&mut m, &task.sentences).unwrap();
        (task, m, tr)
    }

    #[test]
    fn round_trip_preserves_predictions() {
        let (task, m, tr) = trained();
        let ck = Checkpoint::capture(&m, Some(&tr), Some(&task.featurizer), Some(&task.layout));
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.featurizer.as_ref(), Some(&task.featurizer));
        assert_eq!(back.layout.as_ref(), Some(&task.layout));
        let m2 = back.build_model().unwrap();
        for s in &task.sentences {
            assert_eq!(m.predict(s).unwrap(), m2.predict(s).unwrap());
        }
        // stored precision is a fixed point
        assert_eq!(
            Checkpoint::capture(
                &m2,
                Some(&back.build_trainer(&m2).unwrap()),
                Some(&task.featurizer),
                Some(&task.layout)
            )
            .to_bytes()
            .unwrap(),
            bytes
        );
    }

    #[test]
    fn resumed_run_tracks_uninterrupted_run() {
        let (task, mut m, mut tr) = trained();
        let bytes = Checkpoint::capture(&m, Some(&tr), None, None).to_bytes().unwrap();
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        let mut m2 = ck.build_model().unwrap();
        let mut tr2 = ck.build_trainer(&m2).unwrap();
        assert_eq!(tr2.epoch, tr.epoch);
        let batch: Vec<&Sentence> = task.sentences.iter().take(5).collect();
        for step in 0..5 {
            let a = tr.step(&mut m, &batch, 1e-3).unwrap();
            let b = tr2.step(&mut m2, &batch, 1e-3).unwrap();
            assert!(((a - b) / a).abs() < 1e-5, "step {step}: {a} vs {b}");
        }
    }

    #[test]
    fn load_errors_are_distinct() {
        let (_, m, tr) = trained();
        let bytes = Checkpoint::capture(&m, Some(&tr), None, None).to_bytes().unwrap();

        let cut = &bytes[..bytes.len() - 4];
        assert!(matches!(
            Checkpoint::from_bytes(cut),
            Err(GtiError::Checkpoint(CheckpointError::ShapeMismatch(_)))
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..10]),
            Err(GtiError::Checkpoint(CheckpointError::Truncated(_)))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(GtiError::Checkpoint(CheckpointError::BadMagic))
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(GtiError::Checkpoint(CheckpointError::Version { expected: 1, found: 9 }))
        ));
    }

    #[test]
    fn shape_disagreement_on_rebuild() {
        let (_, m, _) = trained();
        let mut ck = Checkpoint::capture(&m, None, None, None);
        let (_, t) = ck.params.iter_mut().find(|(n, _)| n == "main.w_m").unwrap();
        *t = Tensor::zeros(&[2, 2]);
        assert!(matches!(
            ck.build_model(),
            Err(GtiError::Checkpoint(CheckpointError::ShapeMismatch(_)))
        ));
    }

    #[test]
    fn file_round_trip() {
        let (_, m, _) = trained();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.gti");
        save_checkpoint(&path, &Checkpoint::capture(&m, None, None, None)).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert!(ck.train_config.is_none());
        assert!(ck.build_trainer(&ck.build_model().unwrap()).is_err());
    }
}

//! Corpus loading and single-run training shared by `train` and `ablate`.

use std::fs;
use std::path::{Path, PathBuf};

use gti_core::data::{
    convert_to_iobes, load_embeddings_file, read_conll_file, split_validation, Featurizer, RawSentence, Sentence,
    TaskLayout,
};
use gti_core::model::STATE_SIZE_SWEEP;
use gti_core::train::{evaluate, fit, Control, EpochRecord, ModelScores, TrainConfig, TrainLog, Trainer};
use gti_core::{GtiConfig, GtiModel, Tensor, Variant};
use log::{info, warn};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::args::{DataArgs, ModelArgs, OptimArgs};
use crate::error::{CliError, CliResult};

/// Content hash of a file in the form git uses for blobs.
pub fn blob_hash(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path)?;
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(&bytes);
    Ok(hex::encode(h.finalize()))
}

#[derive(Clone, Debug, Serialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
}

pub fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::not_found(path))
    }
}

/// Everything derived from the data files before a model is built.
pub struct Corpus {
    pub layout: TaskLayout,
    pub featurizer: Featurizer,
    pub word_table: Option<Tensor>,
    pub train: Vec<Sentence>,
    pub dev: Vec<Sentence>,
    pub test: Vec<Sentence>,
    pub inputs: Vec<InputFile>,
}

fn read_split(path: &Path, args: &DataArgs) -> CliResult<Vec<RawSentence>> {
    require_file(path)?;
    let mut raw = read_conll_file(path, args.data_format.n_columns())?;
    convert_to_iobes(&mut raw, args.data_format)?;
    Ok(raw)
}

impl Corpus {
    /// `split_seed` seeds the dev hold-out when `--dev-split` is used.
    pub fn load(args: &DataArgs, split_seed: u64) -> CliResult<Self> {
        let mut paths = vec![&args.train];
        paths.extend(args.dev.iter());
        paths.extend(args.test.iter());
        paths.extend(args.embeddings.iter());
        for p in &paths {
            require_file(p)?;
        }
        let inputs = paths
            .iter()
            .map(|p| {
                Ok(InputFile {
                    path: (*p).clone(),
                    sha256: blob_hash(p)?,
                })
            })
            .collect::<CliResult<Vec<_>>>()?;

        let mut train = read_split(&args.train, args)?;
        let mut dev = match &args.dev {
            Some(p) => read_split(p, args)?,
            None => Vec::new(),
        };
        if args.dev.is_none() && args.dev_split > 0 {
            (train, dev) = split_validation(train, args.dev_split, split_seed)?;
        }
        let test = match &args.test {
            Some(p) => read_split(p, args)?,
            None => Vec::new(),
        };
        if train.is_empty() {
            return Err(CliError::new(
                "DATA_INVALID",
                CliError::USAGE,
                "training file has no sentences",
            ));
        }

        let featurizer = Featurizer::build(&train, dev.iter().chain(&test), args.normalize_digits);
        let layout = TaskLayout::build(
            args.data_format,
            &args.main,
            &args.aux,
            train.iter().chain(&dev).chain(&test),
        )?;
        let word_table = match &args.embeddings {
            Some(p) => {
                let (table, stats) = load_embeddings_file(p, &featurizer.words, split_seed)?;
                info!("embeddings: {stats:?}");
                Some(table)
            }
            None => None,
        };
        Ok(Corpus {
            train: layout.encode_all(&featurizer, &train, true)?,
            dev: layout.encode_all(&featurizer, &dev, true)?,
            test: layout.encode_all(&featurizer, &test, true)?,
            layout,
            featurizer,
            word_table,
            inputs,
        })
    }

    pub fn model_config(&self, m: &ModelArgs, variant: Variant, dropout: f64) -> GtiConfig {
        let mut c = GtiConfig::new(
            self.layout.main.clone(),
            self.layout.aux.clone(),
            self.featurizer.words.len(),
            self.featurizer.chars.len(),
        );
        c.d_word = self.word_table.as_ref().map_or(m.d_word, |t| t.shape()[1]);
        c.d_char = m.d_char.unwrap_or(c.d_word);
        c.n_char_filters = m.char_filters;
        c.char_kernel = m.char_kernel;
        c.d_label = m.d_label;
        c.state_size = m.state_size;
        c.variant = variant;
        c.dropout_rate = dropout;
        c.use_iobes_mask = m.iobes_mask;
        c
    }
}

pub fn train_config(o: &OptimArgs, seed: u64) -> TrainConfig {
    TrainConfig {
        alpha0: o.alpha0,
        total_epochs: o.schedule_epochs,
        cycles: o.cycles,
        epoch_cap: o.epochs,
        batch_size: o.batch_size,
        seed,
        dropout: o.dropout,
        clip_norm: o.clip.then_some(TrainConfig::DEFAULT_CLIP_NORM),
        ..TrainConfig::default()
    }
}

pub fn warn_state_size(state_size: usize) {
    if !STATE_SIZE_SWEEP.contains(&state_size) {
        warn!("state size {state_size} is outside the tuned sweep {STATE_SIZE_SWEEP:?}");
    }
}

pub struct RunResult {
    pub model: GtiModel,
    pub trainer: Trainer,
    pub log: TrainLog,
    pub train_score: f64,
    pub test: Option<ModelScores>,
}

/// Builds, trains and scores one model.
pub fn run_one(corpus: &Corpus, m: &ModelArgs, o: &OptimArgs, variant: Variant, seed: u64) -> CliResult<RunResult> {
    let config = corpus.model_config(m, variant, o.dropout);
    let mut model = GtiModel::new(config, seed, corpus.word_table.clone())?;
    let mut trainer = Trainer::new(train_config(o, seed), &model)?;
    info!("{} parameters={} seed={seed}", variant.label(), model.parameter_count());

    let threshold = o.until_train_score;
    let train = &corpus.train;
    let mut until = |model: &GtiModel, _: &EpochRecord| -> gti_core::Result<Control> {
        match threshold {
            Some(t) if evaluate(model, train)?.main_score(model) >= t => Ok(Control::Stop),
            _ => Ok(Control::Continue),
        }
    };
    let log = fit(&mut model, &mut trainer, &corpus.train, &corpus.dev, &mut [&mut until])?;
    let train_score = evaluate(&model, &corpus.train)?.main_score(&model);
    let test = if corpus.test.is_empty() {
        None
    } else {
        Some(evaluate(&model, &corpus.test)?)
    };
    Ok(RunResult {
        model,
        trainer,
        log,
        train_score,
        test,
    })
}

use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use gti_core::data::{convert_to_iobes, read_conll_file, write_conll, RawSentence, TaskLayout};
use gti_core::gradcheck::{gradcheck, tiny_model, GradcheckConfig};
use gti_core::synthetic::corpus;
use gti_core::train::{load_checkpoint, save_checkpoint, score_predictions, Checkpoint, ModelScores};
use gti_core::{GtiModel, OpKind, Variant};
use log::info;
use rayon::prelude::*;
use serde::Serialize;

use crate::args::{AblateArgs, Command, EvalArgs, GradcheckArgs, PredictArgs, SynthArgs, TrainArgs};
use crate::error::{CliError, CliResult};
use crate::pipeline::{blob_hash, require_file, run_one, warn_state_size, Corpus, InputFile};

/// Reproduction record written next to every run's outputs.
#[derive(Serialize)]
struct RunManifest<'a> {
    tool_version: &'static str,
    command: &'a Command,
    inputs: Vec<InputFile>,
    threads: usize,
}

fn write_manifest(dir: &Path, command: &Command, inputs: Vec<InputFile>) -> CliResult<()> {
    let m = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION"),
        command,
        inputs,
        threads: rayon::current_num_threads(),
    };
    fs::write(dir.join("run.json"), serde_json::to_string_pretty(&m)?)?;
    Ok(())
}

fn scores_text(model: &GtiModel, scores: &ModelScores) -> String {
    let c = &model.config;
    let mut out = format!("{} {:.4}\n", c.main.name, scores.main.score(c.main.span));
    for (t, r) in c.aux.iter().zip(&scores.aux) {
        out.push_str(&format!("{} {:.4}\n", t.name, r.score(t.span)));
    }
    out
}

fn write_reports(dir: &Path, stem: &str, model: &GtiModel, scores: &ModelScores) -> CliResult<()> {
    fs::write(dir.join(format!("{stem}.txt")), scores.main.to_kv())?;
    for (t, r) in model.config.aux.iter().zip(&scores.aux) {
        fs::write(dir.join(format!("{stem}.{}.txt", t.name)), r.to_kv())?;
    }
    Ok(())
}

pub fn train(args: &TrainArgs, command: &Command) -> CliResult<()> {
    warn_state_size(args.model.state_size);
    let corpus = Corpus::load(&args.data, args.seed)?;
    fs::create_dir_all(&args.out_dir)?;
    write_manifest(&args.out_dir, command, corpus.inputs.clone())?;

    let run = run_one(&corpus, &args.model, &args.optim, args.variant, args.seed)?;
    let ckpt = Checkpoint::capture(
        &run.model,
        Some(&run.trainer),
        Some(&corpus.featurizer),
        Some(&corpus.layout),
    );
    save_checkpoint(&args.out_dir.join("model.gti"), &ckpt)?;
    fs::write(
        args.out_dir.join("train_log.json"),
        serde_json::to_string_pretty(&run.log)?,
    )?;

    println!(
        "trained {} for {} epochs; train {} {:.4}",
        run.model.variant().label(),
        run.log.epochs.len(),
        corpus.layout.main.name,
        run.train_score
    );
    if let (Some(e), Some(s)) = (run.log.best_epoch, run.log.best_dev) {
        println!("best dev {s:.4} at epoch {e}");
    }
    if let Some(test) = &run.test {
        write_reports(&args.out_dir, "test_report", &run.model, test)?;
        print!("test\n{}", scores_text(&run.model, test));
    }
    Ok(())
}

/// Fails with a config mismatch when `raw` carries a tag outside the
/// checkpoint's inventories.
fn check_inventory(layout: &TaskLayout, raw: &[RawSentence]) -> CliResult<()> {
    let tasks =
        std::iter::once((&layout.main, layout.main_column())).chain(layout.aux.iter().zip(layout.aux_columns()));
    for (task, col) in tasks {
        for s in raw {
            let column = s
                .columns
                .get(col)
                .ok_or_else(|| CliError::config(format!("data has no column for task `{}`", task.name)))?;
            if let Some(t) = column.iter().find(|t| task.tag_id(t).is_none()) {
                return Err(CliError::config(format!(
                    "tag `{t}` of task `{}` is not in the checkpoint inventory",
                    task.name
                )));
            }
        }
    }
    Ok(())
}

struct Loaded {
    model: GtiModel,
    featurizer: gti_core::data::Featurizer,
    layout: TaskLayout,
}

fn load_model(path: &Path) -> CliResult<Loaded> {
    require_file(path)?;
    let ckpt = load_checkpoint(path)?;
    let model = ckpt.build_model()?;
    let (Some(featurizer), Some(layout)) = (ckpt.featurizer, ckpt.layout) else {
        return Err(CliError::new(
            "CHECKPOINT_INVALID",
            CliError::USAGE,
            "checkpoint lacks vocabularies or task layout",
        ));
    };
    if layout.main != model.config.main || layout.aux != model.config.aux {
        return Err(CliError::config(
            "checkpoint task layout disagrees with its model config",
        ));
    }
    Ok(Loaded {
        model,
        featurizer,
        layout,
    })
}

pub fn eval(args: &EvalArgs) -> CliResult<()> {
    let loaded = load_model(&args.checkpoint)?;
    require_file(&args.data)?;
    let format = loaded.layout.format;
    let mut raw = read_conll_file(&args.data, format.n_columns())?;
    convert_to_iobes(&mut raw, format)?;
    check_inventory(&loaded.layout, &raw)?;
    let sentences = loaded.layout.encode_all(&loaded.featurizer, &raw, true)?;
    let preds = sentences
        .par_iter()
        .map(|s| loaded.model.predict(s))
        .collect::<gti_core::Result<Vec<_>>>()?;
    let scores = score_predictions(&loaded.model, &sentences, &preds)?;
    print!("{}", scores.main.to_kv());
    if let Some(dir) = &args.out_dir {
        fs::create_dir_all(dir)?;
        write_reports(dir, "eval_report", &loaded.model, &scores)?;
    }
    Ok(())
}

/// Whitespace-separated lines, blank line between sentences. The first field
/// is the token.
fn read_token_lines(path: &Path) -> CliResult<Vec<Vec<Vec<String>>>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    let mut cur: Vec<Vec<String>> = Vec::new();
    for line in text.lines() {
        let fields: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        if fields.is_empty() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else {
            cur.push(fields);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    Ok(out)
}

pub fn predict(args: &PredictArgs) -> CliResult<()> {
    let loaded = load_model(&args.checkpoint)?;
    require_file(&args.input)?;
    let lines = read_token_lines(&args.input)?;
    let layout = &loaded.layout;
    let unlabelled: Vec<RawSentence> = lines
        .iter()
        .map(|s| RawSentence {
            tokens: s.iter().map(|f| f[0].clone()).collect(),
            columns: Vec::new(),
        })
        .collect();
    let sentences = layout.encode_all(&loaded.featurizer, &unlabelled, false)?;
    let preds = sentences
        .par_iter()
        .map(|s| loaded.model.predict(s))
        .collect::<gti_core::Result<Vec<_>>>()?;

    let c = &loaded.model.config;
    let mut out = String::new();
    for (fields, p) in lines.iter().zip(&preds) {
        let aux: Vec<Vec<String>> = c.aux.iter().zip(&p.aux).map(|(t, ids)| t.decode(ids)).collect();
        let main = c.main.decode(&p.main);
        for (i, f) in fields.iter().enumerate() {
            out.push_str(&f.join(" "));
            for a in &aux {
                out.push(' ');
                out.push_str(&a[i]);
            }
            out.push(' ');
            out.push_str(&main[i]);
            out.push('\n');
        }
        out.push('\n');
    }
    match &args.output {
        Some(p) => fs::write(p, out)?,
        None => std::io::stdout().lock().write_all(out.as_bytes())?,
    }
    Ok(())
}

pub fn run_gradcheck(args: &GradcheckArgs) -> CliResult<()> {
    let fault = args.corrupt.as_deref().map(OpKind::from_str).transpose()?;
    let (model, sentence) = tiny_model(args.variant, args.seed)?;
    let report = gradcheck(&model, &sentence, &GradcheckConfig::default(), fault)?;
    let text = report.to_string();
    println!("{text}");
    if let Some(dir) = &args.out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("gradcheck.txt"), &text)?;
    }
    if report.passed() {
        return Ok(());
    }
    let mut msg = format!(
        "gradcheck failed, offending parameters: {}",
        report.offenders().join(", ")
    );
    if let Some(op) = fault {
        msg.push_str(&format!(" (injected fault in `{op}`)"));
    }
    Err(CliError::numerical(msg))
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub label: String,
    pub scores: Vec<f64>,
    pub min: f64,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
    pub max: f64,
}

impl AblationRow {
    pub fn new(variant: Variant, scores: Vec<f64>) -> Self {
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let std = if scores.len() > 1 {
            (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        AblationRow {
            variant,
            label: variant.label().to_string(),
            min: scores.iter().copied().fold(f64::INFINITY, f64::min),
            max: scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            scores,
            mean,
            std,
        }
    }
}

#[derive(Serialize)]
struct AblationReport<'a> {
    metric: &'a str,
    main: &'a str,
    aux: &'a [String],
    seed_count: usize,
    seeds: &'a [u64],
    rows: &'a [AblationRow],
}

fn ablation_table(metric: &str, args: &AblateArgs, rows: &[AblationRow]) -> String {
    let seeds: Vec<String> = args.seeds.iter().map(u64::to_string).collect();
    let mut out = format!(
        "main={} aux={} metric={metric} seeds={} ({} seeds)\n",
        args.data.main,
        args.data.aux.join(","),
        seeds.join(","),
        args.seeds.len()
    );
    out.push_str(&format!(
        "{:<24} {:>8} {:>8} {:>8} {:>8}\n",
        "model", "min", "mean", "std", "max"
    ));
    for r in rows {
        out.push_str(&format!(
            "{:<24} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
            r.label, r.min, r.mean, r.std, r.max
        ));
    }
    out
}

pub fn ablate(args: &AblateArgs, command: &Command) -> CliResult<()> {
    if args.seeds.is_empty() || args.variants.is_empty() {
        return Err(CliError::usage("ablation needs at least one seed and one variant"));
    }
    warn_state_size(args.model.state_size);
    // A fixed split seed keeps the dev hold-out identical across runs.
    let corpus = Corpus::load(&args.data, 0)?;
    fs::create_dir_all(&args.out_dir)?;
    write_manifest(&args.out_dir, command, corpus.inputs.clone())?;

    let metric = if !corpus.test.is_empty() {
        "test"
    } else if !corpus.dev.is_empty() {
        "dev"
    } else {
        "train"
    };
    let jobs: Vec<(Variant, u64)> = args
        .variants
        .iter()
        .flat_map(|&v| args.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let scores = jobs
        .par_iter()
        .map(|&(v, seed)| -> CliResult<f64> {
            let run = run_one(&corpus, &args.model, &args.optim, v, seed)?;
            let score = match (&run.test, run.log.best_dev) {
                (Some(t), _) => t.main_score(&run.model),
                (None, Some(d)) => d,
                (None, None) => run.train_score,
            };
            info!("{} seed {seed}: {metric} {score:.4}", v.label());
            Ok(score)
        })
        .collect::<CliResult<Vec<_>>>()?;
    let rows: Vec<AblationRow> = args
        .variants
        .iter()
        .zip(scores.chunks(args.seeds.len()))
        .map(|(&v, s)| AblationRow::new(v, s.to_vec()))
        .collect();

    let table = ablation_table(metric, args, &rows);
    fs::write(args.out_dir.join("ablation.txt"), &table)?;
    let report = AblationReport {
        metric,
        main: &args.data.main,
        aux: &args.data.aux,
        seed_count: args.seeds.len(),
        seeds: &args.seeds,
        rows: &rows,
    };
    fs::write(
        args.out_dir.join("ablation.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    print!("{table}");
    Ok(())
}

pub fn synth(args: &SynthArgs) -> CliResult<()> {
    let text = write_conll(&corpus(args.sentences, args.seed));
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&args.out, text)?;
    println!("{} {}", args.out.display(), blob_hash(&args.out)?);
    Ok(())
}

pub fn run(command: &Command) -> CliResult<()> {
    match command {
        Command::Train(a) => train(a, command),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Ablate(a) => ablate(a, command),
        Command::Synth(a) => synth(a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    #[test]
    fn ablation_row_statistics() {
        let r = AblationRow::new(Variant::Gti, vec![0.9, 1.0, 0.8]);
        assert_eq!(r.min, 0.8);
        assert_eq!(r.max, 1.0);
        assert!((r.mean - 0.9).abs() < 1e-12);
        assert!((r.std - 0.1).abs() < 1e-12);
        assert_eq!(AblationRow::new(Variant::Ti, vec![0.7]).std, 0.0);
    }

    #[test]
    fn token_lines_split_on_blank_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p: PathBuf = dir.path().join("in.txt");
        fs::write(&p, "a X\nb\n\n\nc\n").unwrap();
        let s = read_token_lines(&p).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0][0], vec!["a", "X"]);
        assert_eq!(s[1][0], vec!["c"]);
    }
}

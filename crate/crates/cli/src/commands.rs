//! One function per subcommand. Each returns the artifacts it wrote.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use re3qa_core::corpus::{filter_split, generate_synthetic, load_dataset, save_dataset, Split};
use re3qa_core::encoder::ModelParams;
use re3qa_core::inference::{
    block_pass_benchmark, evaluate, format_reports, write_candidates, write_predictions, Ablation,
    EvalReport, Evaluation,
};
use re3qa_core::preprocess::{prepare_all, PreparedInstance, Vocabulary};
use re3qa_core::train::{check_model_gradients, train, StepRecord, TrainObserver};

use crate::config::RunConfig;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: PathBuf, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn write_json(path: PathBuf, value: &impl Serialize) -> Result<PathBuf> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text)
}

/// `gen`: writes the synthetic dataset to `<out>/dataset.jsonl`.
pub fn gen(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    create_dir(&cfg.out)?;
    let instances = generate_synthetic(&cfg.synthetic()?)?;
    let path = cfg.out.join("dataset.jsonl");
    save_dataset(&instances, &path)?;
    log::info!("{} instances written to {}", instances.len(), path.display());
    Ok(vec![path, cfg.write_resolved("gen")?])
}

struct FileObserver {
    dir: PathBuf,
    log: BufWriter<File>,
    written: Vec<PathBuf>,
}

impl TrainObserver<f32> for FileObserver {
    fn on_step(&mut self, r: &StepRecord) -> re3qa_core::Result<()> {
        writeln!(
            self.log,
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6e}",
            r.epoch, r.step, r.losses.retrieve, r.losses.read, r.losses.rerank, r.learning_rate
        )
        .map_err(|e| re3qa_core::Error::Io {
            path: self.dir.join("train_log.tsv"),
            source: e,
        })
    }

    fn on_epoch(&mut self, epoch: usize, params: &ModelParams<f32>) -> re3qa_core::Result<()> {
        let path = self.dir.join(format!("checkpoint-epoch{epoch}.bin"));
        params.save(&path)?;
        self.written.push(path);
        Ok(())
    }
}

/// Trains a model into `dir` and returns the written artifacts.
fn train_into(cfg: &RunConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let all = load_dataset(&cfg.dataset)?;
    let instances = filter_split(&all, Split::Train);
    if instances.is_empty() {
        bail!("{} has no train instances", cfg.dataset.display());
    }
    let vocab = Vocabulary::build(&instances);
    let vocab_path = dir.join("vocab.txt");
    vocab.save(&vocab_path)?;
    let data = prepare_all(&instances, &cfg.preprocess(), &vocab)?;
    let model = cfg.model(vocab.len());
    model.validate()?;
    let mut params = ModelParams::<f32>::init(model, cfg.seed, cfg.init_std)?;
    let log_path = dir.join("train_log.tsv");
    let file = File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut observer = FileObserver {
        dir: dir.to_path_buf(),
        log: BufWriter::new(file),
        written: Vec::new(),
    };
    writeln!(observer.log, "epoch\tstep\tL_I\tL_II\tL_III\tlr")?;
    let segments: usize = data.iter().map(|d| d.segments.len()).sum();
    log::info!(
        "training on {} instances / {segments} segments, {} parameters",
        data.len(),
        re3qa_core::encoder::Parameters::num_parameters(&params)
    );
    let started = Instant::now();
    train(&mut params, &data, &cfg.train(), &mut observer)?;
    observer.log.flush()?;
    log::info!("training took {:.1}s", started.elapsed().as_secs_f64());
    let model_path = dir.join("model.bin");
    params.save(&model_path)?;
    let mut written = vec![vocab_path, log_path];
    written.append(&mut observer.written);
    written.push(model_path);
    Ok(written)
}

/// `train`: vocabulary, per-epoch checkpoints, the final model and the step log.
pub fn train_cmd(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let mut written = train_into(cfg, &cfg.out)?;
    written.push(cfg.write_resolved("train")?);
    Ok(written)
}

fn load_model(dir: &Path) -> Result<(Vocabulary, ModelParams<f32>)> {
    let vocab = Vocabulary::load(dir.join("vocab.txt"))?;
    let params = ModelParams::<f32>::load(dir.join("model.bin"))?;
    if params.config.vocab_size != vocab.len() {
        bail!(
            "model in {} expects {} tokens but vocab.txt has {}",
            dir.display(),
            params.config.vocab_size,
            vocab.len()
        );
    }
    Ok((vocab, params))
}

fn load_split(cfg: &RunConfig, vocab: &Vocabulary) -> Result<Vec<PreparedInstance>> {
    let all = load_dataset(&cfg.dataset)?;
    let instances = filter_split(&all, cfg.split);
    if instances.is_empty() {
        bail!("{} has no {} instances", cfg.dataset.display(), cfg.split);
    }
    Ok(prepare_all(&instances, &cfg.preprocess(), vocab)?)
}

fn run_eval(
    cfg: &RunConfig,
    params: &ModelParams<f32>,
    data: &[PreparedInstance],
    ablation: Ablation,
) -> Result<Evaluation> {
    let base = cfg.inference();
    Ok(if cfg.verify_f64 {
        evaluate(&params.cast::<f64>(), data, &base, ablation)?
    } else {
        evaluate(params, data, &base, ablation)?
    })
}

fn write_prediction_files(out: &Path, ev: &Evaluation) -> Result<Vec<PathBuf>> {
    let pred_path = out.join("predictions.tsv");
    let mut buf = Vec::new();
    write_predictions(&ev.predictions, &mut buf)?;
    write_file(pred_path.clone(), buf)?;
    let cand_path = out.join("candidates.tsv");
    let mut buf = Vec::new();
    write_candidates(&ev.candidates, &mut buf)?;
    write_file(cand_path.clone(), buf)?;
    Ok(vec![pred_path, cand_path])
}

/// `predict`: answers for the configured split under the configured ablation.
pub fn predict_cmd(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    create_dir(&cfg.out)?;
    let (vocab, params) = load_model(&cfg.model_dir)?;
    let data = load_split(cfg, &vocab)?;
    let ev = run_eval(cfg, &params, &data, cfg.ablation)?;
    let mut written = write_prediction_files(&cfg.out, &ev)?;
    written.push(cfg.write_resolved("predict")?);
    Ok(written)
}

/// Evaluates every ablation; predictions come from the full model.
fn eval_all(cfg: &RunConfig, model_dir: &Path) -> Result<(Vec<EvalReport>, Evaluation)> {
    let (vocab, params) = load_model(model_dir)?;
    let data = load_split(cfg, &vocab)?;
    let full = run_eval(cfg, &params, &data, Ablation::Full)?;
    let mut reports = vec![full.report.clone()];
    for a in &Ablation::ALL[1..] {
        reports.push(run_eval(cfg, &params, &data, *a)?.report);
    }
    Ok((reports, full))
}

/// `eval`: a text table and a JSON record with all four ablation columns,
/// plus prediction and candidate files from the full model.
pub fn eval_cmd(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    create_dir(&cfg.out)?;
    let (reports, full) = eval_all(cfg, &cfg.model_dir)?;
    let table = format_reports(&reports);
    print!("{table}");
    let mut written = vec![
        write_file(cfg.out.join("eval_report.txt"), &table)?,
        write_json(cfg.out.join("eval_report.json"), &reports)?,
    ];
    written.extend(write_prediction_files(&cfg.out, &full)?);
    written.push(cfg.write_resolved("eval")?);
    Ok(written)
}

/// `bench`: block passes of the shared encoder against separate models.
pub fn bench_cmd(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    create_dir(&cfg.out)?;
    let b = block_pass_benchmark(cfg.segments, cfg.top_n, cfg.layers, cfg.retrieve_depth)?;
    let mut table = format!(
        "{:>4} {:>4} {:>4} {:>4} {:>8} {:>9} {:>7}\n",
        "n", "N", "I", "J", "unified", "pipeline", "ratio"
    );
    let _ = writeln!(
        table,
        "{:>4} {:>4} {:>4} {:>4} {:>8} {:>9} {:>7.4}",
        b.segments,
        b.top_n,
        b.layers,
        b.depth,
        b.unified,
        b.pipeline,
        b.ratio()
    );
    print!("{table}");
    #[derive(Serialize)]
    struct Row {
        #[serde(flatten)]
        count: re3qa_core::inference::BlockPassCount,
        ratio: f64,
    }
    Ok(vec![
        write_file(cfg.out.join("bench.txt"), &table)?,
        write_json(cfg.out.join("bench.json"), &Row { count: b, ratio: b.ratio() })?,
        cfg.write_resolved("bench")?,
    ])
}

/// `gradcheck`: finite-difference verification of every loss in 64-bit.
pub fn gradcheck_cmd(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    create_dir(&cfg.out)?;
    let checks = check_model_gradients(cfg.seed, cfg.gradcheck_epsilon, cfg.gradcheck_tolerance)?;
    let mut text = String::new();
    for c in &checks {
        let _ = writeln!(text, "== {} ==\n{}\n", c.loss, c.report);
    }
    let all = checks.iter().all(|c| c.report.passed());
    let _ = writeln!(text, "gradcheck: {}", if all { "PASS" } else { "FAIL" });
    print!("{text}");
    Ok(vec![
        write_file(cfg.out.join("gradcheck.txt"), &text)?,
        cfg.write_resolved("gradcheck")?,
    ])
}

/// One row of the depth sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub depth: usize,
    pub map: f64,
    pub top_n: Vec<re3qa_core::inference::TopN>,
    pub em: f64,
    pub f1: f64,
    pub block_passes: usize,
}

pub fn format_sweep(rows: &[SweepRow]) -> String {
    let mut out = format!("{:>3} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>12}\n", "J", "MAP", "top-1", "top-2", "top-3", "EM", "F1", "block_passes");
    for r in rows {
        let _ = write!(out, "{:>3} {:>7.4}", r.depth, r.map);
        for t in &r.top_n {
            let _ = write!(out, " {:>7.4}", t.rate);
        }
        let _ = writeln!(out, " {:>7.4} {:>7.4} {:>12}", r.em, r.f1, r.block_passes);
    }
    out
}

/// `sweep-j`: trains and evaluates one model per early-exit depth.
pub fn sweep_j_cmd(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    create_dir(&cfg.out)?;
    if cfg.sweep_j.0.is_empty() {
        bail!("sweep_j is empty");
    }
    let mut rows = Vec::new();
    let mut written = Vec::new();
    for &j in &cfg.sweep_j.0 {
        let run = RunConfig {
            retrieve_depth: j,
            ..cfg.clone()
        };
        let dir = cfg.out.join(format!("J{j}"));
        log::info!("sweep: training with J = {j}");
        written.extend(train_into(&run, &dir)?);
        let (reports, _) = eval_all(&run, &dir)?;
        let r = &reports[0];
        rows.push(SweepRow {
            depth: j,
            map: r.map,
            top_n: r.top_n.clone(),
            em: r.em,
            f1: r.f1,
            block_passes: r.block_passes,
        });
    }
    let table = format_sweep(&rows);
    print!("{table}");
    written.push(write_file(cfg.out.join("sweep_j.txt"), &table)?);
    written.push(write_json(cfg.out.join("sweep_j.json"), &rows)?);
    written.push(cfg.write_resolved("sweep-j")?);
    Ok(written)
}

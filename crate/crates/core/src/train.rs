//! Training, evaluation and attention-dump workflows behind the CLI.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor};
use crate::config::{OptimizerKind, RunConfig, Task};
use crate::data::{
    batchify, load_dataset, load_pretrained, sentiment_to_binary, Batch, DatasetKind,
    EmbeddingTable, Encoded, Example, Vocabulary, BOS, EOS,
};
use crate::error::{Error, Result};
use crate::heads::{EvalMetrics, NLI_LABELS};
use crate::model::Model;
use crate::optim::{renorm_gradients, scale_embedding_grads, sgd_step, AdamState, SgdSchedule};
use crate::params::ParamStore;
use crate::synthetic::{copy_examples, copy_vocab};

/// Encoded splits and the vocabulary they were encoded with.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub vocab: Vocabulary,
    pub train: Vec<Encoded>,
    pub valid: Vec<Encoded>,
    pub test: Vec<Encoded>,
    pub labels: usize,
}

fn dataset_kind(task: Task) -> DatasetKind {
    match task {
        Task::Lm => DatasetKind::LmText,
        Task::Sentiment => DatasetKind::LabeledSentences,
        Task::Nli | Task::Copy => DatasetKind::SentencePairs,
    }
}

fn label_count(cfg: &RunConfig) -> usize {
    match cfg.task {
        Task::Sentiment => cfg.classes,
        Task::Nli => NLI_LABELS.len(),
        Task::Lm | Task::Copy => 0,
    }
}

fn read_split(cfg: &RunConfig, path: Option<&Path>) -> Result<Vec<Example>> {
    let Some(path) = path else {
        return Ok(Vec::new());
    };
    let examples = load_dataset(path, dataset_kind(cfg.task))?.examples;
    if cfg.task == Task::Sentiment {
        if let Some(bad) = examples.iter().filter_map(|e| e.label).find(|&l| l >= 5) {
            return Err(Error::Format {
                path: path.into(),
                line: 0,
                msg: format!("sentiment label {bad} is outside 0..4"),
            });
        }
        if cfg.classes == 2 {
            return Ok(sentiment_to_binary(&examples));
        }
    }
    Ok(examples)
}

fn encode(cfg: &RunConfig, vocab: &Vocabulary, examples: &[Example]) -> Vec<Encoded> {
    examples
        .iter()
        .map(|e| {
            let first = if cfg.task == Task::Lm {
                let mut wrapped = vec![BOS.to_string()];
                wrapped.extend(e.tokens.iter().cloned());
                wrapped.push(EOS.to_string());
                vocab.encode(&wrapped)
            } else {
                vocab.encode(&e.tokens)
            };
            Encoded {
                first,
                second: e.second.as_ref().map(|s| vocab.encode(s)),
                label: e.label,
            }
        })
        .collect()
}

/// Loads and encodes every configured split. The vocabulary is built from
/// the training split unless one is given.
pub fn prepare(cfg: &RunConfig, vocab: Option<Vocabulary>) -> Result<Prepared> {
    if cfg.task == Task::Copy {
        let vocab = vocab.unwrap_or_else(|| copy_vocab(cfg.copy_vocab));
        let held_out = |offset: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(offset));
            copy_examples(
                &mut rng,
                cfg.copy_eval_size,
                cfg.copy_vocab,
                cfg.copy_min_len,
                cfg.copy_max_len,
            )
        };
        return Ok(Prepared {
            vocab,
            train: Vec::new(),
            valid: held_out(1 << 32),
            test: held_out(2 << 32),
            labels: 0,
        });
    }
    let train = read_split(cfg, cfg.train.as_deref())?;
    let vocab = match vocab {
        Some(v) => v,
        None => {
            if train.is_empty() {
                return Err(Error::config("train", "a training file is required"));
            }
            let stream = train
                .iter()
                .flat_map(|e| e.tokens.iter().chain(e.second.iter().flatten()))
                .map(String::as_str);
            let max = (cfg.max_vocab > 0).then_some(cfg.max_vocab);
            Vocabulary::build(stream, cfg.min_freq, max)?
        }
    };
    let valid = read_split(cfg, cfg.valid.as_deref())?;
    let test = read_split(cfg, cfg.test.as_deref())?;
    Ok(Prepared {
        train: encode(cfg, &vocab, &train),
        valid: encode(cfg, &vocab, &valid),
        test: encode(cfg, &vocab, &test),
        labels: label_count(cfg),
        vocab,
    })
}

/// Builds the model for `cfg` over `vocab`, loading pretrained vectors when
/// configured.
pub fn build_model(cfg: &RunConfig, vocab: &Vocabulary) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let table = match &cfg.pretrained {
        Some(path) => load_pretrained(path, vocab, cfg.seed)?,
        None => EmbeddingTable::random(vocab.len(), cfg.embed, &mut rng),
    };
    Model::build(cfg, table, label_count(cfg), &mut rng)
}

/// Evaluation-mode metrics summed over `examples`.
pub fn evaluate(model: &Model, examples: &[Encoded], batch_size: usize) -> Result<EvalMetrics> {
    let mut total = EvalMetrics::default();
    for batch in batchify(examples, batch_size, 0, false, false)? {
        let mut g = Graph::new();
        let p = model.store.bind(&mut g);
        let fwd = model.forward::<ChaCha8Rng>(&mut g, &p, &batch, None)?;
        total.merge(fwd.metrics);
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub valid: Option<EvalMetrics>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Validation metrics of the kept checkpoint.
    pub best: Option<EvalMetrics>,
    pub test: Option<EvalMetrics>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }
}

/// Whether `a` is a better validation result than `b` for `task`.
fn better(task: Task, a: &EvalMetrics, b: &EvalMetrics) -> bool {
    match task {
        Task::Lm | Task::Copy => a.ppl() < b.ppl(),
        _ => a.accuracy() > b.accuracy(),
    }
}

enum Optimizer {
    Sgd(SgdSchedule),
    Adam(AdamState, f64),
}

impl Optimizer {
    fn lr(&self) -> f64 {
        match self {
            Optimizer::Sgd(s) => s.lr,
            Optimizer::Adam(_, lr) => *lr,
        }
    }
}

/// Output files written by [`train`].
struct Outputs {
    dir: PathBuf,
    train_log: fs::File,
    metrics_log: fs::File,
}

impl Outputs {
    fn create(dir: &Path, cfg: &RunConfig, vocab: &Vocabulary) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let config = dir.join("config.txt");
        fs::write(&config, cfg.to_text()).map_err(|e| Error::io(&config, e))?;
        vocab.save(&dir.join("vocab.txt"))?;
        let open = |name: &str| {
            let path = dir.join(name);
            fs::File::create(&path).map_err(|e| Error::io(path, e))
        };
        Ok(Outputs {
            dir: dir.to_path_buf(),
            train_log: open("train.log")?,
            metrics_log: open("metrics.log")?,
        })
    }

    fn line(file: &mut fs::File, dir: &Path, name: &str, text: &str) -> Result<()> {
        writeln!(file, "{text}").map_err(|e| Error::io(dir.join(name), e))
    }

    fn step(&mut self, r: &StepRecord) -> Result<()> {
        let text = format!(
            "step={} epoch={} loss={} grad_norm={} lr={}",
            r.step, r.epoch, r.loss, r.grad_norm, r.lr
        );
        Self::line(&mut self.train_log, &self.dir, "train.log", &text)
    }

    fn metrics(&mut self, text: &str) -> Result<()> {
        Self::line(&mut self.metrics_log, &self.dir, "metrics.log", text)
    }

    fn checkpoint(&self, store: &ParamStore) -> Result<()> {
        store.save(&self.dir.join("checkpoint.json"))
    }
}

/// Trains `cfg` from scratch. With `out`, writes `config.txt`, `vocab.txt`,
/// `train.log`, `metrics.log` and the best-validation `checkpoint.json`
/// there. The returned model holds the kept weights.
pub fn train(cfg: &RunConfig, out: Option<&Path>) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    let data = prepare(cfg, None)?;
    if cfg.task != Task::Copy && data.train.is_empty() {
        return Err(Error::config("train", "training split is empty"));
    }
    let mut model = build_model(cfg, &data.vocab)?;
    let mut outputs = match out {
        Some(dir) => Some(Outputs::create(dir, cfg, &data.vocab)?),
        None => None,
    };
    let mut optimizer = match cfg.optimizer {
        OptimizerKind::Sgd => {
            Optimizer::Sgd(SgdSchedule::new(cfg.lr, cfg.lr_decay, cfg.decay_threshold)?)
        }
        OptimizerKind::Adam => Optimizer::Adam(AdamState::new(model.store.values()), cfg.lr),
    };
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DROPOUT_STREAM);
    let mut copy_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3 << 32));
    let decayed: Vec<bool> = model.store.names().iter().map(|n| n != "embed").collect();
    let mut report = TrainReport::default();
    let mut best_values: Vec<Tensor> = model.store.values().to_vec();
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        let batches = if cfg.task == Task::Copy {
            let examples = copy_examples(
                &mut copy_rng,
                cfg.steps_per_epoch * cfg.batch_size,
                cfg.copy_vocab,
                cfg.copy_min_len,
                cfg.copy_max_len,
            );
            batchify(&examples, cfg.batch_size, 0, false, false)?
        } else {
            let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64);
            batchify(&data.train, cfg.batch_size, seed, true, cfg.bucketing)?
        };
        for batch in &batches {
            step += 1;
            let (loss, grad_norm) = train_step(
                cfg,
                &mut model,
                &mut optimizer,
                batch,
                epoch,
                &decayed,
                &mut dropout_rng,
            )?;
            let record = StepRecord {
                step,
                epoch,
                loss,
                grad_norm,
                lr: optimizer.lr(),
            };
            if let Some(o) = outputs.as_mut() {
                o.step(&record)?;
            }
            report.steps.push(record);
        }
        let valid = if data.valid.is_empty() {
            None
        } else {
            Some(evaluate(&model, &data.valid, cfg.batch_size)?)
        };
        let lr = optimizer.lr();
        if let Some(v) = valid {
            if let Some(o) = outputs.as_mut() {
                o.metrics(&format!(
                    "epoch={epoch} lr={lr} {}",
                    v.record(task_name(cfg), "valid")
                ))?;
            }
            if report.best.is_none_or(|b| better(cfg.task, &v, &b)) {
                report.best = Some(v);
                best_values = model.store.values().to_vec();
            }
            if let Optimizer::Sgd(s) = &mut optimizer {
                s.end_epoch(v.ppl());
            }
        } else {
            best_values = model.store.values().to_vec();
        }
        report.epochs.push(EpochRecord { epoch, lr, valid });
    }

    for (dst, src) in model.store.values_mut().iter_mut().zip(best_values) {
        *dst = src;
    }
    if let Some(o) = outputs.as_mut() {
        o.checkpoint(&model.store)?;
    }
    if !data.test.is_empty() {
        let t = evaluate(&model, &data.test, cfg.batch_size)?;
        if let Some(o) = outputs.as_mut() {
            o.metrics(&t.record(task_name(cfg), "test").to_string())?;
        }
        report.test = Some(t);
    }
    Ok((model, report))
}

/// Mixed into the seed so dropout draws are independent of initialization.
const DROPOUT_STREAM: u64 = 0x5eed_d20b;

fn task_name(cfg: &RunConfig) -> &'static str {
    match cfg.task {
        Task::Lm => "lm",
        Task::Sentiment => "sentiment",
        Task::Nli => "nli",
        Task::Copy => "copy",
    }
}

/// One update: forward, backward on the mean loss, L2, embedding policy,
/// renormalization, optimizer step. Returns the loss and pre-clip norm.
fn train_step(
    cfg: &RunConfig,
    model: &mut Model,
    optimizer: &mut Optimizer,
    batch: &Batch,
    epoch: usize,
    decayed: &[bool],
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let p = model.store.bind(&mut g);
    let fwd = model.forward(&mut g, &p, batch, Some(rng))?;
    let loss = g.scale(fwd.nll, 1.0 / batch.size() as f64)?;
    let mut value = g.value(loss).item();
    g.backward(loss)?;
    let mut grads = model.store.grads(&g, &p);
    if cfg.l2 > 0.0 {
        for ((grad, w), &on) in grads.iter_mut().zip(model.store.values()).zip(decayed) {
            if on {
                value += 0.5 * cfg.l2 * w.norm_sq();
                for (gi, wi) in grad.data_mut().iter_mut().zip(w.data()) {
                    *gi += cfg.l2 * wi;
                }
            }
        }
    }
    let emb = model.embedding;
    let emb_index = model
        .store
        .ids()
        .position(|id| id == emb)
        .expect("embedding id");
    scale_embedding_grads(
        &mut grads[emb_index],
        &model.pretrained,
        epoch,
        cfg.embed_policy,
    );
    let norm = renorm_gradients(&mut grads, cfg.max_grad_norm)?;
    match optimizer {
        Optimizer::Sgd(s) => sgd_step(model.store.values_mut(), &grads, s.lr),
        Optimizer::Adam(state, lr) => state.step(model.store.values_mut(), &grads, *lr),
    }
    Ok((value, norm))
}

fn checkpoint_dir(checkpoint: &Path) -> &Path {
    checkpoint.parent().unwrap_or_else(|| Path::new("."))
}

/// Rebuilds the model described by `cfg` and loads `checkpoint` into it.
/// The vocabulary is read from `vocab.txt` beside the checkpoint.
pub fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<(Model, Vocabulary)> {
    cfg.validate()?;
    let vocab = if cfg.task == Task::Copy {
        copy_vocab(cfg.copy_vocab)
    } else {
        Vocabulary::load(&checkpoint_dir(checkpoint).join("vocab.txt"))?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let table = EmbeddingTable::random(vocab.len(), cfg.embed, &mut rng);
    let mut model = Model::build(cfg, table, label_count(cfg), &mut rng)?;
    model.store.load(checkpoint)?;
    Ok((model, vocab))
}

/// Metrics of a stored checkpoint on `cfg.eval_split`.
pub fn run_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalMetrics> {
    let (model, vocab) = load_model(cfg, checkpoint)?;
    let data = prepare(cfg, Some(vocab))?;
    let (split, field) = match cfg.eval_split.as_str() {
        "test" => (&data.test, "test"),
        _ => (&data.valid, "valid"),
    };
    if split.is_empty() {
        return Err(Error::config(
            field,
            "evaluation split is not configured or empty",
        ));
    }
    evaluate(&model, split, cfg.batch_size)
}

/// Splits dump input into one or two token sequences. Pair inputs separate
/// the sequences with a tab or ` ||| `.
fn dump_tokens(cfg: &RunConfig, text: &str) -> Result<(Vec<String>, Option<Vec<String>>)> {
    let lower = cfg.task == Task::Nli;
    let words = |s: &str| -> Vec<String> {
        s.split_whitespace()
            .map(|w| {
                if lower {
                    w.to_lowercase()
                } else {
                    w.to_string()
                }
            })
            .collect()
    };
    let pair = matches!(cfg.task, Task::Nli | Task::Copy);
    let (a, b) = if pair {
        let (a, b) = text
            .split_once('\t')
            .or_else(|| text.split_once("|||"))
            .ok_or_else(|| {
                Error::Precondition("pair input needs `first ||| second` or a tab".into())
            })?;
        (words(a), Some(words(b)))
    } else {
        (words(text), None)
    };
    if a.is_empty() || b.as_ref().is_some_and(Vec::is_empty) {
        return Err(Error::Precondition("empty input".into()));
    }
    Ok((a, b))
}

/// Attention trace text: per section, the token strings, a header, then
/// `t<TAB>i<TAB>weight` rows with 1-based positions.
pub fn dump_attention(
    cfg: &RunConfig,
    model: &Model,
    vocab: &Vocabulary,
    text: &str,
) -> Result<String> {
    let (first, second) = dump_tokens(cfg, text)?;
    let ids_a = vocab.encode(&first);
    let ids_b = second.as_ref().map(|s| vocab.encode(s));
    let mut g = Graph::new();
    let p = model.store.bind(&mut g);
    let traces = model.attention_traces(&mut g, &p, &ids_a, ids_b.as_deref())?;
    let mut out = String::new();
    for trace in traces {
        let reads_second =
            trace.section.starts_with("decoder") || trace.section.starts_with("hypothesis");
        let tokens = if reads_second {
            second.as_deref().unwrap_or_default()
        } else {
            &first
        };
        let _ = writeln!(out, "# section {}", trace.section);
        let _ = writeln!(out, "# tokens {}", tokens.join(" "));
        if trace.section.ends_with("inter") {
            let _ = writeln!(out, "# source {}", first.join(" "));
        }
        out.push_str("t\ti\tweight\n");
        let inter = trace.section.ends_with("inter");
        for (step, weights) in trace.steps.iter().enumerate() {
            let Some(w) = weights else { continue };
            let row = g.value(*w).row_slice(0);
            let t = step + 1;
            // Intra weights cover the last `row.len()` positions before t.
            let offset = if inter { 0 } else { t - 1 - row.len() };
            for (j, weight) in row.iter().enumerate() {
                let _ = writeln!(out, "{t}\t{}\t{weight:.12}", offset + j + 1);
            }
        }
    }
    Ok(out)
}

/// Loads `checkpoint`, dumps the attention of `text` and writes it to `out`.
pub fn run_dump_attention(
    cfg: &RunConfig,
    checkpoint: &Path,
    text: &str,
    out: &Path,
) -> Result<()> {
    let (model, vocab) = load_model(cfg, checkpoint)?;
    let dump = dump_attention(cfg, &model, &vocab, text)?;
    fs::write(out, dump).map_err(|e| Error::io(out, e))
}

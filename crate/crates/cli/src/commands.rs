use crate::error::CliError;
use crate::manifest::{Manifest, Resolved};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};
use xoffense_core::datasets::{self, ColumnMapping, LabelSchema};
use xoffense_core::experiment::{self, Pipeline, Strategy};
use xoffense_core::metrics::{self, ConfusionMatrix, EvalReport, RunMetadata};
use xoffense_core::model::Model;
use xoffense_core::synth::{self, SynthSpec};
use xoffense_core::tokenizer::{self, Vocabulary};
use xoffense_core::trainer;
use xoffense_core::transfer::{self, Checkpoint, CheckpointMetadata};

pub const REPORT_MD: &str = "report.md";
pub const REPORT_CSV: &str = "report.csv";
pub const CONFUSION_CSV: &str = "confusion.csv";
pub const HISTORY_CSV: &str = "history.csv";
pub const CURVE_CSV: &str = "curve.csv";
pub const MODEL_CKPT: &str = "model.ckpt";
pub const PRETRAIN_HISTORY_CSV: &str = "pretrain_history.csv";
/// Timestamps live here so the CSV outputs stay byte-identical across reruns.
pub const RUN_INFO: &str = "run_info.txt";
const EVAL_BATCH: usize = 64;

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

struct Output {
    dir: PathBuf,
    started: u64,
    command: String,
}

impl Output {
    fn create(dir: &Path, command: &str) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            started: now(),
            command: command.to_string(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&self, name: &str, content: &str) -> Result<(), CliError> {
        let p = self.path(name);
        std::fs::write(&p, content).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", p.display())))
    }

    fn write_reports(&self, reports: &[EvalReport], confusion: Option<&ConfusionMatrix>) -> Result<(), CliError> {
        let tables = metrics::render_tables(reports).map_err(CliError::runtime)?;
        self.write(REPORT_MD, &tables.markdown)?;
        self.write(REPORT_CSV, &tables.csv)?;
        if let Some(cm) = confusion {
            self.write(CONFUSION_CSV, &metrics::render_heatmap_data(cm))?;
        }
        Ok(())
    }

    fn finish(&self) -> Result<(), CliError> {
        let info = format!(
            "command={}\nstarted_unix={}\nfinished_unix={}\nversion={}\n",
            self.command,
            self.started,
            now(),
            env!("CARGO_PKG_VERSION")
        );
        self.write(RUN_INFO, &info)
    }
}

fn load_checkpoint(path: &Path, field: &str) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).map_err(|e| CliError::Validation(format!("{field}: {e}")))
}

pub fn tokenizer_train(corpus: &[PathBuf], vocab_size: usize, lowercase: bool, out: &Path) -> Result<(), CliError> {
    let mut lines = Vec::new();
    for p in corpus {
        let text = std::fs::read_to_string(p).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
        lines.extend(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string));
    }
    let vocab = tokenizer::train_bpe(&lines, vocab_size, lowercase).map_err(CliError::validation)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    }
    vocab.save(out).map_err(CliError::runtime)?;
    println!(
        "wrote {} ({} tokens, {} merges, hash {})",
        out.display(),
        vocab.len(),
        vocab.num_merges(),
        &vocab.content_hash()[..16]
    );
    Ok(())
}

pub fn synth_gen(spec_path: Option<&Path>, out_dir: &Path) -> Result<(), CliError> {
    let spec = match spec_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
            toml::from_str::<SynthSpec>(&text)
                .map_err(|e| CliError::Validation(format!("spec {}: {}", p.display(), e.message())))?
        }
        None => SynthSpec::default(),
    };
    let corpora = synth::generate_synthetic_bilingual(&spec).map_err(CliError::validation)?;
    corpora.write_to_dir(out_dir).map_err(CliError::runtime)?;
    println!(
        "wrote {} pretraining lines, {} source, {} target train, {} target test instances to {}",
        corpora.pretrain.len(),
        corpora.source_train.len(),
        corpora.target_train.len(),
        corpora.target_test.len(),
        out_dir.display()
    );
    Ok(())
}

pub fn pretrain(manifest_path: &Path) -> Result<(), CliError> {
    let r = Manifest::load(manifest_path)?;
    let section = r
        .manifest
        .pretrain
        .clone()
        .ok_or_else(|| CliError::Validation("manifest field pretrain: section is required for this command".to_string()))?;
    let vocab = r.vocabulary()?;
    let config = r.encoder_config(&vocab)?;
    let model = match &r.init_checkpoint {
        Some(p) => {
            let ck = load_checkpoint(p, "transfer.init_checkpoint")?;
            ck.check_vocabulary(&vocab.content_hash()).map_err(CliError::validation)?;
            let report = transfer::compatibility_check(&ck, &config);
            if let Some(m) = report.mismatches.iter().find(|m| m.field != "dropout_rate") {
                return Err(CliError::Validation(format!(
                    "transfer.init_checkpoint: {} is {} in the checkpoint but {} in the manifest",
                    m.field, m.checkpoint, m.requested
                )));
            }
            let mut model = ck.to_model().map_err(CliError::validation)?;
            model.config = config.clone();
            model
        }
        None => Model::new(config.clone(), None, r.manifest.model.init_seed).map_err(CliError::validation)?,
    };
    let mut lines = Vec::new();
    for p in &r.corpus {
        let text = std::fs::read_to_string(p).map_err(|e| CliError::Validation(format!("pretrain.corpus {}: {e}", p.display())))?;
        lines.extend(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string));
    }
    let out = Output::create(&r.output_dir, "pretrain")?;
    let (model, history) = trainer::pretrain_mlm(model, &lines, &vocab, &section.mlm).map_err(CliError::runtime)?;
    let meta = CheckpointMetadata {
        task: "mlm".to_string(),
        labels: Vec::new(),
        seed: section.mlm.seed,
        steps: history.steps as u64,
        vocab_hash: vocab.content_hash(),
    };
    transfer::save_checkpoint(&model, &out.path(MODEL_CKPT), meta).map_err(CliError::runtime)?;
    let mut csv = String::from("epoch,mlm_loss\n");
    for (i, l) in history.epoch_losses.iter().enumerate() {
        csv.push_str(&format!("{},{l}\n", i + 1));
    }
    out.write(PRETRAIN_HISTORY_CSV, &csv)?;
    out.finish()?;
    println!(
        "pretrained {} steps, final epoch loss {:.4}; wrote {}",
        history.steps,
        history.epoch_losses.last().copied().unwrap_or(0.0),
        out.path(MODEL_CKPT).display()
    );
    Ok(())
}

struct Loaded {
    vocab: Vocabulary,
    config: xoffense_core::encoder::EncoderConfig,
    source: Option<Checkpoint>,
    init: Option<Checkpoint>,
}

fn load_common(r: &Resolved) -> Result<Loaded, CliError> {
    let vocab = r.vocabulary()?;
    let config = r.encoder_config(&vocab)?;
    let source = r
        .checkpoint
        .as_ref()
        .map(|p| load_checkpoint(p, "transfer.checkpoint"))
        .transpose()?;
    let init = r
        .init_checkpoint
        .as_ref()
        .map(|p| load_checkpoint(p, "transfer.init_checkpoint"))
        .transpose()?;
    Ok(Loaded {
        vocab,
        config,
        source,
        init,
    })
}

impl Loaded {
    fn pipeline<'a>(&'a self, r: &'a Resolved) -> Pipeline<'a> {
        Pipeline {
            vocab: &self.vocab,
            config: &self.config,
            train: &r.manifest.train,
            source: self.source.as_ref(),
            init: self.init.as_ref(),
            model_name: &r.manifest.model_name,
            eval_batch: EVAL_BATCH,
        }
    }
}

pub fn train(manifest_path: &Path) -> Result<(), CliError> {
    let r = Manifest::load(manifest_path)?;
    let loaded = load_common(&r)?;
    let train_set = r.train_set()?;
    let test_set = r.test_path.as_ref().map(|_| r.test_set()).transpose()?;
    let strategy = r.manifest.transfer.strategy;
    let seed = r.manifest.train.seed;
    let pipe = loaded.pipeline(&r);
    let model = pipe
        .initial_model(strategy, train_set.schema.len(), seed)
        .map_err(CliError::validation)?;

    let out = Output::create(&r.output_dir, "train")?;
    let (model, history) =
        trainer::train_classifier(model, &train_set, &loaded.vocab, &r.manifest.train).map_err(CliError::runtime)?;
    let meta = CheckpointMetadata {
        task: train_set.schema.task.clone(),
        labels: train_set.schema.labels.clone(),
        seed,
        steps: history.steps_taken as u64,
        vocab_hash: loaded.vocab.content_hash(),
    };
    transfer::save_checkpoint(&model, &out.path(MODEL_CKPT), meta).map_err(CliError::runtime)?;
    out.write(HISTORY_CSV, &history.to_csv())?;
    println!(
        "{strategy}: {} steps, {}, best round {:?}",
        history.steps_taken,
        history.stop_reason.as_str(),
        history.best_round
    );
    if let Some(test) = &test_set {
        let metadata = RunMetadata {
            model: r.manifest.model_name.clone(),
            strategy: strategy.to_string(),
            n_train: train_set.len(),
            seed,
        };
        let (cm, report) =
            experiment::evaluate(&model, test, &loaded.vocab, metadata, EVAL_BATCH).map_err(CliError::runtime)?;
        out.write_reports(std::slice::from_ref(&report), Some(&cm))?;
        println!("test macro F1 {:.4}, weighted F1 {:.4}", report.macro_f1, report.weighted_f1);
    }
    out.finish()
}

pub struct EvaluateArgs<'a> {
    pub checkpoint: &'a Path,
    pub dataset: &'a Path,
    pub tokenizer: &'a Path,
    pub out: &'a Path,
    pub columns: ColumnMapping,
}

pub fn evaluate(args: EvaluateArgs<'_>) -> Result<(), CliError> {
    let ck = load_checkpoint(args.checkpoint, "--checkpoint")?;
    let vocab = Vocabulary::load(args.tokenizer).map_err(|e| CliError::Validation(format!("--tokenizer: {e}")))?;
    ck.check_vocabulary(&vocab.content_hash()).map_err(CliError::validation)?;
    let classes = ck
        .classifier_classes()
        .ok_or_else(|| CliError::Validation("--checkpoint: checkpoint has no classifier head".to_string()))?;
    let model = transfer::load_full(&ck, classes).map_err(CliError::validation)?;
    let labels = if ck.metadata.labels.is_empty() {
        (0..classes).map(|c| c.to_string()).collect()
    } else {
        ck.metadata.labels.clone()
    };
    let schema = LabelSchema::new(ck.metadata.task.clone(), labels).map_err(CliError::validation)?;
    let data = datasets::load_tsv(args.dataset, &schema, &args.columns).map_err(|e| CliError::Validation(format!("--dataset: {e}")))?;
    if data.is_empty() {
        return Err(CliError::Validation("--dataset: no instances".to_string()));
    }
    let out = Output::create(args.out, "evaluate")?;
    let metadata = RunMetadata {
        model: ck.metadata.task.clone(),
        strategy: "checkpoint".to_string(),
        n_train: 0,
        seed: ck.metadata.seed,
    };
    let (cm, report) = experiment::evaluate(&model, &data, &vocab, metadata, EVAL_BATCH).map_err(CliError::runtime)?;
    out.write_reports(std::slice::from_ref(&report), Some(&cm))?;
    out.finish()?;
    println!(
        "{} instances: macro F1 {:.4}, weighted F1 {:.4}; wrote {}",
        data.len(),
        report.macro_f1,
        report.weighted_f1,
        out.path(REPORT_CSV).display()
    );
    Ok(())
}

pub fn progress_test(manifest_path: &Path, sizes: &[usize], seeds: &[u64]) -> Result<(), CliError> {
    let r = Manifest::load(manifest_path)?;
    let strategy = r.manifest.transfer.strategy;
    if !strategy.is_transfer() {
        return Err(CliError::Validation(
            "manifest field transfer.strategy: progress-test compares scratch against a transfer strategy".to_string(),
        ));
    }
    if sizes.is_empty() || seeds.is_empty() {
        return Err(CliError::Validation("--sizes and --seeds must be non-empty".to_string()));
    }
    let loaded = load_common(&r)?;
    let train_set = r.train_set()?;
    let test_set = r.test_set()?;
    if let Some(&n) = sizes.iter().find(|&&n| n > train_set.len()) {
        return Err(CliError::Validation(format!(
            "--sizes: {n} exceeds the {} instances in data.train",
            train_set.len()
        )));
    }
    let pipe = loaded.pipeline(&r);
    // surface strategy/checkpoint mismatches before any training
    for s in [Strategy::Scratch, strategy] {
        pipe.initial_model(s, train_set.schema.len(), seeds[0]).map_err(CliError::validation)?;
    }
    let out = Output::create(&r.output_dir, "progress-test")?;
    let result = pipe
        .progress_test(&[Strategy::Scratch, strategy], &train_set, &test_set, sizes, seeds)
        .map_err(CliError::runtime)?;
    out.write(CURVE_CSV, &result.curve_csv().map_err(CliError::runtime)?)?;
    out.write_reports(&result.reports, None)?;
    out.finish()?;
    let mut sorted = sizes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    for n in sorted {
        let line: Vec<String> = [Strategy::Scratch, strategy]
            .iter()
            .map(|&s| format!("{s} {:.4}", result.mean_f1(s, n).unwrap_or(f64::NAN)))
            .collect();
        println!("n_train={n}: {}", line.join(", "));
    }
    Ok(())
}

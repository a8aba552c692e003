use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use bregkge::bregman::divergence_curve;
use bregkge::data::{load_split, load_triples, to_queries, QuerySet, TripleSet, UnknownNames, Vocab};
use bregkge::error::{DataError, ModelError, TrainError};
use bregkge::eval::{evaluate as eval_model, kg_kl_divergence, FilterIndex, Metrics};
use bregkge::losses::LossFamily;
use bregkge::models::Model;
use bregkge::oracle::{certify_row, certify_sans, CertifyOptions, ANALYTIC_ROWS};
use bregkge::synthetic::generate;
use bregkge::trainer::{self, TrainOutcome};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{ConfigError, ConfigFile};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_DIVERGENCE: u8 = 4;
pub const EXIT_ORACLE: u8 = 5;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{0}")]
    Train(TrainError),
    #[error("{0}")]
    Oracle(String),
    #[error("cannot write {path}: {source}")]
    Output {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => EXIT_CONFIG,
            CliError::Data(_) | CliError::Output { .. } => EXIT_DATA,
            CliError::Oracle(_) => EXIT_ORACLE,
            CliError::Train(e) => match e {
                TrainError::Divergence { .. } => EXIT_DIVERGENCE,
                TrainError::Data(_) | TrainError::Model(ModelError::Io(_) | ModelError::Format(_)) => {
                    EXIT_DATA
                }
                _ => EXIT_CONFIG,
            },
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Data(d) => CliError::Data(d),
            other => CliError::Train(other),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Train(e.into())
    }
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum Split {
    Valid,
    Test,
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|source| CliError::Output {
        path: path.to_path_buf(),
        source,
    })
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

/// Train/valid/test splits with a shared vocabulary.
pub struct Dataset {
    pub num_entities: usize,
    pub num_relations: usize,
    pub train: TripleSet,
    pub valid: TripleSet,
    pub test: TripleSet,
}

impl Dataset {
    pub fn filter(&self) -> FilterIndex {
        FilterIndex::new([&self.train, &self.valid, &self.test])
    }
}

pub fn load_dataset(cfg: &ConfigFile) -> Result<Dataset, CliError> {
    if let Some(spec) = &cfg.data.synthetic {
        let g = generate(spec)?;
        return Ok(Dataset {
            num_entities: g.num_entities(),
            num_relations: g.num_relations(),
            train: g.train,
            valid: g.valid,
            test: g.test,
        });
    }
    let dir = cfg.data_dir()?;
    let (mut vocab, train) = load_triples(dir.join(&cfg.data.train))?;
    let valid = load_split(dir.join(&cfg.data.valid), &mut vocab, UnknownNames::Reject)?;
    let test = load_split(dir.join(&cfg.data.test), &mut vocab, UnknownNames::Reject)?;
    Ok(Dataset {
        num_entities: vocab.num_entities(),
        num_relations: vocab.num_relations(),
        train,
        valid,
        test,
    })
}

fn config_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn run_dir(out: &Path, resolved: &str) -> Result<PathBuf, CliError> {
    let dir = out.join(config_hash(resolved));
    fs::create_dir_all(&dir).map_err(|source| CliError::Output {
        path: dir.clone(),
        source,
    })?;
    Ok(dir)
}

fn metrics_or_none(model: &Model, set: &TripleSet, filter: &FilterIndex) -> Result<Option<Metrics>, CliError> {
    if set.is_empty() {
        return Ok(None);
    }
    Ok(Some(eval_model(model, &to_queries(set), Some(filter))?.metrics))
}

/// Writes checkpoint, report, progress log and timing for one finished run.
fn write_run(
    dir: &Path,
    prefix: &str,
    resolved: &str,
    outcome: &TrainOutcome,
    data: &Dataset,
    filter: &FilterIndex,
) -> Result<serde_json::Value, CliError> {
    let ckpt = dir.join(format!("{prefix}checkpoint.bin"));
    outcome.best.save(&ckpt)?;
    let mut report = outcome.report.clone();
    report.checkpoint = Some(ckpt.display().to_string());
    let test = metrics_or_none(&outcome.best, &data.test, filter)?;
    let doc = json!({
        "config": resolved,
        "train": report,
        "test": test,
    });
    write_file(&dir.join(format!("{prefix}report.json")), to_json(&doc))?;
    write_file(&dir.join(format!("{prefix}progress.log")), report.progress_log())?;
    write_file(
        &dir.join(format!("{prefix}timing.json")),
        to_json(&json!({ "wall_time_secs": outcome.wall_time_secs })),
    )?;
    Ok(doc)
}

fn load_config(path: &Path) -> Result<(ConfigFile, String), CliError> {
    let cfg = ConfigFile::load(path)?;
    cfg.train_config()
        .validate()
        .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
    let resolved = cfg.to_toml();
    Ok((cfg, resolved))
}

pub fn train(config: &Path, warm_start: Option<PathBuf>, out: &Path) -> Result<(), CliError> {
    let (mut cfg, _) = load_config(config)?;
    if warm_start.is_some() {
        cfg.optim.warm_start = warm_start;
    }
    let resolved = cfg.to_toml();
    let data = load_dataset(&cfg)?;
    let tc = cfg.train_config();
    if let Some(ws) = &tc.warm_start {
        trainer::warm_start(&tc, ws, data.num_entities, data.num_relations)?;
    }
    let filter = data.filter();
    let use_filter = cfg.eval.filtered.then_some(&filter);
    let outcome = trainer::train(
        &tc,
        &to_queries(&data.train),
        &to_queries(&data.valid),
        use_filter,
        data.num_entities,
        data.num_relations,
        None,
    )?;
    let dir = run_dir(out, &resolved)?;
    write_file(&dir.join("config.toml"), &resolved)?;
    let doc = write_run(&dir, "", &resolved, &outcome, &data, &filter)?;
    print!("{}", outcome.report.progress_log());
    println!("run directory: {}", dir.display());
    if let Some(m) = doc.get("test").filter(|v| !v.is_null()) {
        println!("test: {m}");
    }
    Ok(())
}

pub fn evaluate(config: &Path, checkpoint: &Path, split: Split) -> Result<(), CliError> {
    let (cfg, _) = load_config(config)?;
    let data = load_dataset(&cfg)?;
    let header = bregkge::models::CheckpointHeader::read_path(checkpoint)?;
    trainer::check_warm_start(&header, &cfg.train_config().model, data.num_entities, data.num_relations)?;
    let model = Model::load(checkpoint)?;
    let set = match split {
        Split::Valid => &data.valid,
        Split::Test => &data.test,
    };
    let filter = data.filter();
    let report = eval_model(&model, &to_queries(set), cfg.eval.filtered.then_some(&filter))?;
    print!("{}", to_json(&report.metrics));
    Ok(())
}

pub fn oracle(row: &str, nu: usize, worlds: usize, seed: u64) -> Result<(), CliError> {
    if nu == 0 {
        return Err(CliError::Usage("--nu must be at least 1".into()));
    }
    if row == "sans" {
        let report = certify_sans(worlds, 8, seed).map_err(|e| CliError::Oracle(e.to_string()))?;
        print!("{}", to_json(&report));
        return if report.passed {
            Ok(())
        } else {
            Err(CliError::Oracle("sans fixed-point checks failed".into()))
        };
    }
    let rows: Vec<LossFamily> = if row == "all" {
        ANALYTIC_ROWS.to_vec()
    } else {
        let family: LossFamily = serde_json::from_value(json!(row))
            .map_err(|_| CliError::Usage(format!("unknown row {row:?}")))?;
        if !ANALYTIC_ROWS.contains(&family) {
            return Err(CliError::Usage(format!("{row} has no closed-form row")));
        }
        vec![family]
    };
    let opts = CertifyOptions {
        worlds,
        nu,
        seed,
        ..Default::default()
    };
    let reports: Vec<_> = rows.iter().map(|&f| certify_row(f, &opts)).collect();
    print!("{}", to_json(&reports));
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.row.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Oracle(format!("failed rows: {}", failed.join(", "))))
    }
}

pub fn curve(reference: f64, points: usize, out: &Path) -> Result<(), CliError> {
    let c = divergence_curve(reference, points).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut buf = Vec::new();
    c.write_csv(&mut buf).expect("in-memory write");
    write_file(out, buf)?;
    println!("wrote {} points to {}", c.grid.len(), out.display());
    Ok(())
}

pub fn stats(train: &Path, test: &Path, csv: Option<&Path>) -> Result<(), CliError> {
    let mut vocab = Vocab::new();
    let train_set = load_split(train, &mut vocab, UnknownNames::Extend)?;
    let test_set = load_split(test, &mut vocab, UnknownNames::Extend)?;
    let kl = kg_kl_divergence(&train_set, &test_set, vocab.num_entities())
        .map_err(|e| CliError::Data(DataError::Invalid(e.to_string())))?;
    let doc = json!({
        "entities": vocab.num_entities(),
        "relations": vocab.num_relations(),
        "train_triples": train_set.len(),
        "test_triples": test_set.len(),
        "kl": kl,
    });
    print!("{}", to_json(&doc));
    if let Some(path) = csv {
        let mut f = fs::File::create(path).map_err(|source| CliError::Output {
            path: path.to_path_buf(),
            source,
        })?;
        let row = format!(
            "entities,relations,train_triples,test_triples,kl_tail,kl_head,kl,skipped\n{},{},{},{},{},{},{},{}\n",
            vocab.num_entities(),
            vocab.num_relations(),
            train_set.len(),
            test_set.len(),
            kl.tail,
            kl.head,
            kl.kl,
            kl.skipped
        );
        f.write_all(row.as_bytes()).map_err(|source| CliError::Output {
            path: path.to_path_buf(),
            source,
        })?;
    }
    Ok(())
}

pub fn pipeline(config: &Path, finetune: &Path, out: &Path) -> Result<(), CliError> {
    let (pre_cfg, pre_text) = load_config(config)?;
    let (fine_cfg, fine_text) = load_config(finetune)?;
    if pre_cfg.data != fine_cfg.data {
        return Err(CliError::Usage("pre-training and fine-tuning configs use different [data]".into()));
    }
    let data = load_dataset(&pre_cfg)?;
    let filter = data.filter();
    let use_filter = pre_cfg.eval.filtered.then_some(&filter);
    let train_q: QuerySet = to_queries(&data.train);
    let dev_q = to_queries(&data.valid);
    let res = trainer::pretrain_pipeline(
        &pre_cfg.train_config(),
        &fine_cfg.train_config(),
        &train_q,
        &dev_q,
        use_filter,
        data.num_entities,
        data.num_relations,
    )?;
    let dir = run_dir(out, &format!("{pre_text}\n{fine_text}"))?;
    write_file(&dir.join("pretrain.toml"), &pre_text)?;
    write_file(&dir.join("finetune.toml"), &fine_text)?;
    write_run(&dir, "pretrain-", &pre_text, &res.pretrain, &data, &filter)?;
    write_run(&dir, "finetune-", &fine_text, &res.finetune, &data, &filter)?;
    write_run(&dir, "cold-", &fine_text, &res.cold, &data, &filter)?;
    let summary = json!({
        "pretrain_dev_mrr": res.pretrain.report.best_dev_mrr,
        "finetune_dev_mrr": res.finetune.report.best_dev_mrr,
        "cold_dev_mrr": res.cold.report.best_dev_mrr,
    });
    write_file(&dir.join("pipeline.json"), to_json(&summary))?;
    print!("{}", to_json(&summary));
    println!("run directory: {}", dir.display());
    Ok(())
}

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use caes_core::caes::{
    build_feature_table, build_run_report, emit_report, read_report, score_features_ncc,
    CaesError, CaesRunReport, ReportInputs,
};
use caes_core::causepairs::{load_tubingen, make_training_corpus, write_pairs_jsonl, Direction, PairError};
use caes_core::imaging::{
    generate_blob_dataset, load_image_dataset, save_image_dataset, split_stratified,
    train_classifier, ClassifierModel, ImageDataset, ImagingError,
};
use caes_core::ncc::{load_ncc, save_ncc, score_pairs, train_ncc, weighted_accuracy, NccError};
use caes_core::nn::checkpoint::file_sha256;
use caes_core::saliency::{masks_for_dataset, MaskSource, SaliencyError};
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, DatasetSource, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    GenData,
    TrainNcc,
    EvalNcc,
    TrainClassifier,
    MakeMasks,
    Score,
    Report,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Pair(#[from] PairError),
    #[error(transparent)]
    Ncc(#[from] NccError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Saliency(#[from] SaliencyError),
    #[error(transparent)]
    Caes(#[from] CaesError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    /// 1 for configuration problems, 2 for everything that fails at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            _ => 2,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let body = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    fs::write(path, body).map_err(io_err(path))
}

fn require_file(field: &str, path: &Path) -> Result<(), ConfigError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(ConfigError::invalid(field, format!("{} does not exist", path.display())))
    }
}

fn require_dir(field: &str, path: &Path) -> Result<(), ConfigError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(ConfigError::invalid(field, format!("{} is not a directory", path.display())))
    }
}

fn report_dir(cfg: &RunConfig, source: MaskSource) -> PathBuf {
    cfg.output_dir.join(source.to_string())
}

/// File-system preconditions of `cmd`.
pub fn validate_inputs(cmd: Command, cfg: &RunConfig) -> Result<(), ConfigError> {
    let needs_dataset = matches!(cmd, Command::TrainClassifier | Command::MakeMasks | Command::Score);
    if needs_dataset && cfg.dataset.source == DatasetSource::Path {
        require_dir("dataset.path", cfg.dataset.path.as_deref().unwrap_or(Path::new("")))?;
    }
    let sources = cfg.saliency.mask_source.sources();
    match cmd {
        Command::GenData | Command::TrainNcc | Command::TrainClassifier => {}
        Command::EvalNcc => {
            require_file("ncc.checkpoint", &cfg.ncc_checkpoint())?;
            require_dir("ncc.tubingen_dir", &cfg.ncc.tubingen_dir)?;
        }
        Command::MakeMasks => {
            if sources.contains(&MaskSource::Gradcam) {
                require_file("classifier.checkpoint", &cfg.classifier_checkpoint())?;
            }
        }
        Command::Score => {
            require_file("classifier.checkpoint", &cfg.classifier_checkpoint())?;
            require_file("ncc.checkpoint", &cfg.ncc_checkpoint())?;
        }
        Command::Report => {
            for s in sources {
                require_file("output_dir", &report_dir(cfg, s).join("caes.json"))?;
            }
        }
    }
    Ok(())
}

/// Human-readable steps `cmd` would perform.
pub fn plan(cmd: Command, cfg: &RunConfig) -> Vec<String> {
    let out = cfg.output_dir.display();
    let dataset = match cfg.dataset.source {
        DatasetSource::Synthetic => format!(
            "generate blob dataset ({} classes x {}, {}px, seed {})",
            cfg.dataset.classes,
            cfg.dataset.per_class,
            cfg.classifier.input_size,
            cfg.seeds.data()
        ),
        DatasetSource::Path => format!(
            "load dataset from {} at {}px",
            cfg.dataset.path.as_deref().unwrap_or(Path::new("")).display(),
            cfg.classifier.input_size
        ),
    };
    let sources: Vec<String> = cfg.saliency.mask_source.sources().iter().map(|s| s.to_string()).collect();
    match cmd {
        Command::GenData => vec![
            dataset,
            format!("write images to {out}/dataset"),
            format!("write {} synthetic pairs to {out}/ncc-corpus.jsonl", cfg.ncc.corpus_size),
        ],
        Command::TrainNcc => vec![
            format!("generate {} synthetic pairs (seed {})", cfg.ncc.corpus_size, cfg.seeds.data()),
            format!("train NCC for {} epochs (seed {})", cfg.ncc.train.epochs, cfg.seeds.train()),
            format!("save {}", cfg.ncc_checkpoint().display()),
        ],
        Command::EvalNcc => vec![
            format!("load {}", cfg.ncc_checkpoint().display()),
            format!("score pairs in {}", cfg.ncc.tubingen_dir.display()),
        ],
        Command::TrainClassifier => vec![
            dataset,
            format!(
                "train classifier for {} epochs at lr {} (seed {})",
                cfg.classifier.epochs,
                cfg.classifier.learning_rate,
                cfg.seeds.train()
            ),
            format!("save {}", cfg.classifier_checkpoint().display()),
        ],
        Command::MakeMasks => vec![
            dataset,
            format!("compute {} masks into {out}/masks", sources.join(" and ")),
        ],
        Command::Score => vec![
            dataset,
            format!("load {}", cfg.classifier_checkpoint().display()),
            format!("load {}", cfg.ncc_checkpoint().display()),
            format!("score features with {} masks, write reports under {out}", sources.join(" and ")),
        ],
        Command::Report => vec![format!("re-emit tables and charts for {}", sources.join(" and "))],
    }
}

pub fn load_dataset(cfg: &RunConfig) -> Result<ImageDataset, CliError> {
    Ok(match cfg.dataset.source {
        DatasetSource::Synthetic => generate_blob_dataset(
            cfg.dataset.classes,
            cfg.dataset.per_class,
            cfg.classifier.input_size,
            cfg.seeds.data(),
        ),
        DatasetSource::Path => load_image_dataset(
            cfg.dataset.path.as_deref().expect("validated"),
            cfg.classifier.input_size,
        )?,
    })
}

pub fn gen_data(cfg: &RunConfig) -> Result<(), CliError> {
    if cfg.dataset.source == DatasetSource::Synthetic {
        let ds = load_dataset(cfg)?;
        save_image_dataset(&ds, cfg.output_dir.join("dataset"))?;
        log::info!("wrote {} images", ds.len());
    }
    let corpus = make_training_corpus(&cfg.pair_config(), cfg.ncc.corpus_size)?;
    fs::create_dir_all(&cfg.output_dir).map_err(io_err(&cfg.output_dir))?;
    write_pairs_jsonl(cfg.output_dir.join("ncc-corpus.jsonl"), &corpus)?;
    log::info!("wrote {} synthetic pairs", corpus.len());
    Ok(())
}

pub fn train_ncc_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let corpus = make_training_corpus(&cfg.pair_config(), cfg.ncc.corpus_size)?;
    let t = train_ncc(&corpus, &cfg.ncc_train())?;
    let best = t.best();
    log::info!(
        "ncc best epoch {}: held-out loss {:.4}, accuracy {:.4}",
        best.epoch,
        best.heldout_loss,
        best.heldout_accuracy
    );
    let path = cfg.ncc_checkpoint();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    save_ncc(&t.model, &path)?;
    write_json(&cfg.output_dir.join("ncc-history.json"), &t.history)
}

pub fn eval_ncc(cfg: &RunConfig, out: &mut dyn Write) -> Result<f64, CliError> {
    let model = load_ncc(cfg.ncc_checkpoint())?;
    let pairs = load_tubingen(&cfg.ncc.tubingen_dir)?;
    let scores = score_pairs(&model, &pairs)?;
    let acc = weighted_accuracy(&scores, &pairs)?;
    let stdout = |e| CliError::Io {
        path: PathBuf::from("<stdout>"),
        source: e,
    };
    for (s, p) in scores.iter().zip(&pairs) {
        let label = match p.direction {
            Direction::XtoY => "1",
            Direction::YtoX => "-1",
            Direction::Unlabeled => "0",
        };
        writeln!(out, "{}\t{}\t{}\t{}", s.pair_id, s.p_xy, label, p.weight).map_err(stdout)?;
    }
    writeln!(out, "weighted_accuracy={acc}").map_err(stdout)?;
    Ok(acc)
}

pub fn train_classifier_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let ds = load_dataset(cfg)?;
    let split = split_stratified(&ds, cfg.dataset.train_fraction, cfg.dataset.val_fraction, cfg.seeds.data());
    let spec = cfg.classifier_spec(ds.num_classes());
    let t = train_classifier(spec, &split.train, &split.val, &cfg.classifier_train())?;
    let best = t.best();
    log::info!(
        "classifier best epoch {}: val loss {:.4}, val accuracy {:.4}",
        best.epoch,
        best.val_loss,
        best.val_accuracy
    );
    let path = cfg.classifier_checkpoint();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    t.model.save(&path)?;
    write_json(&cfg.output_dir.join("classifier-history.json"), &t.history)
}

fn load_classifier(cfg: &RunConfig, ds: &ImageDataset) -> Result<ClassifierModel, CliError> {
    let model = ClassifierModel::load(cfg.classifier_checkpoint())?;
    if model.num_classes() != ds.num_classes() {
        return Err(ConfigError::invalid(
            "classifier.checkpoint",
            format!("model has {} classes, dataset has {}", model.num_classes(), ds.num_classes()),
        )
        .into());
    }
    Ok(model)
}

pub fn make_masks(cfg: &RunConfig) -> Result<(), CliError> {
    let ds = load_dataset(cfg)?;
    let sources = cfg.saliency.mask_source.sources();
    let model = if sources.contains(&MaskSource::Gradcam) {
        Some(load_classifier(cfg, &ds)?)
    } else {
        None
    };
    for source in sources {
        let set = masks_for_dataset(model.as_ref(), &ds, source, cfg.saliency.retain_fraction)?;
        set.write(&cfg.output_dir.join("masks").join(source.to_string()))?;
        log::info!("{source}: {} masks, {} degenerate", set.masks.len(), set.degenerate.len());
    }
    Ok(())
}

/// Full pipeline for every configured mask source; returns the reports.
pub fn score(cfg: &RunConfig) -> Result<Vec<CaesRunReport>, CliError> {
    let ds = load_dataset(cfg)?;
    let model = load_classifier(cfg, &ds)?;
    let ncc = load_ncc(cfg.ncc_checkpoint())?;
    let mut checksums = BTreeMap::new();
    for (role, path) in [("classifier", cfg.classifier_checkpoint()), ("ncc", cfg.ncc_checkpoint())] {
        checksums.insert(role.to_string(), file_sha256(&path).map_err(NccError::from)?);
    }
    let mut reports = Vec::new();
    for source in cfg.saliency.mask_source.sources() {
        let masks = masks_for_dataset(Some(&model), &ds, source, cfg.saliency.retain_fraction)?;
        let table = build_feature_table(&model, &ds, &masks, cfg.caes.effect_variable)?;
        let dir = report_dir(cfg, source);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        table.write_json(&dir.join("features.json"))?;
        let mut scores = BTreeMap::new();
        for k in 0..table.class_names.len() {
            if table.class_rows(k).next().is_some() {
                scores.insert(k, score_features_ncc(&ncc, &table, k, cfg.caes.batches)?);
            }
        }
        let report = build_run_report(ReportInputs {
            table: &table,
            scores: &scores,
            fraction: cfg.caes.fraction,
            run_id: cfg.run_id(),
            config: cfg.snapshot(),
            checksums: checksums.clone(),
        })?;
        emit_report(&report, &dir)?;
        log::info!(
            "{source}: {} classes scored, {} images excluded",
            report.classes.len(),
            table.excluded.len()
        );
        reports.push(report);
    }
    write_summary(cfg, &reports)?;
    Ok(reports)
}

#[derive(Debug, Serialize)]
struct SourceSummary {
    mask_source: MaskSource,
    /// Mean over classes, sets and ratios of the reported sigma std.
    mean_sigma_std: f64,
}

fn write_summary(cfg: &RunConfig, reports: &[CaesRunReport]) -> Result<(), CliError> {
    let rows: Vec<SourceSummary> = reports
        .iter()
        .map(|r| SourceSummary {
            mask_source: r.mask_source,
            mean_sigma_std: r.mean_sigma_std(),
        })
        .collect();
    write_json(&cfg.output_dir.join("summary.json"), &rows)
}

pub fn report(cfg: &RunConfig) -> Result<Vec<CaesRunReport>, CliError> {
    let mut reports = Vec::new();
    for source in cfg.saliency.mask_source.sources() {
        let dir = report_dir(cfg, source);
        let r = read_report(&dir.join("caes.json"))?;
        emit_report(&r, &dir)?;
        reports.push(r);
    }
    write_summary(cfg, &reports)?;
    Ok(reports)
}

pub fn execute(cmd: Command, cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        Command::GenData => gen_data(cfg),
        Command::TrainNcc => train_ncc_cmd(cfg),
        Command::EvalNcc => eval_ncc(cfg, out).map(|_| ()),
        Command::TrainClassifier => train_classifier_cmd(cfg),
        Command::MakeMasks => make_masks(cfg),
        Command::Score => score(cfg).map(|_| ()),
        Command::Report => report(cfg).map(|_| ()),
    }
}

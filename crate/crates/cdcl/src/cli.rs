//! Command-line front end: data generation, pretraining, adaptation,
//! evaluation, and embedding export over the text file formats.
//!
//! Configuration is a flat key/value map. Precedence per key:
//! command-line `--set` (and `--seed`) over a `--config` JSON file over
//! the built-in default. Unknown keys are rejected outright, and the
//! fully resolved map is echoed to `config.resolved` in the output
//! directory so every run records what it actually used.
//!
//! Exit codes: 0 success; 2 usage, configuration, or format problems;
//! 3 file system problems; 4 numerical breakdown (non-finite loss).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::data::{
    generate_shifted_pair, load_dataset, load_labels, save_dataset, save_labels,
    write_embeddings_tsv, Dataset, EmbeddingRow, ShiftConfig, SENTINEL_UNLABELED,
};
use crate::error::{Error, Result};
use crate::losses::PairMode;
use crate::model::{Activation, Domain, EncoderConfig, Model};
use crate::pseudolabel::{generate_pseudo_labels, LabelingMode, PseudoLabelConfig};
use crate::trainer::{
    evaluate, pretrain_source, train_sdf, train_uda, HyperParams, TrainReport,
};

const DEFAULTS: &[(&str, &str)] = &[
    ("activation", "tanh"),
    ("batch_size", "32"),
    ("bottleneck", "true"),
    ("class_center_radius", "3.0"),
    ("classes", "3"),
    ("cluster_stddev", "1.0"),
    ("confidence_threshold", "0.0"),
    ("epochs", "15"),
    ("feature_dim", "8"),
    ("hidden_dims", "16"),
    ("input_dim", "8"),
    ("iters_per_epoch", "12"),
    ("kmeans_max_iters", "100"),
    ("kmeans_tol", "1e-6"),
    ("lambda", "1.6"),
    ("lr_backbone", "0.001"),
    ("lr_new_layers", "0.01"),
    ("momentum", "0.9"),
    ("pair_mode", "cross-domain"),
    ("per_class_count", "100"),
    ("per_domain_bn", "false"),
    ("pretrain_epochs", "40"),
    ("pretrain_iters", "12"),
    ("rotation_angle", "0.9"),
    ("schedule_b", "0.75"),
    ("seed", "7"),
    ("share_ce_batch", "false"),
    ("tau", "0.05"),
    ("train_split", "0.9"),
    ("translation", "0,0,0.5,0.5,0.5,0.5,0.5,0.5"),
];

/// Resolved run configuration: every known key bound to a string value.
#[derive(Debug, Clone)]
pub struct RunConfig {
    map: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn defaults() -> Self {
        RunConfig {
            map: DEFAULTS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    fn known(&self, key: &str) -> Result<()> {
        if self.map.contains_key(key) {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("unknown configuration key '{key}'")))
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.known(key)?;
        self.map.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Apply a flat JSON object; values may be strings, numbers, booleans,
    /// or arrays of numbers (joined with commas).
    pub fn apply_json(&mut self, text: &str, origin: &Path) -> Result<()> {
        let parsed: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| Error::format(origin, e.line(), format!("invalid JSON: {e}")))?;
        let obj = parsed.as_object().ok_or_else(|| {
            Error::format(origin, 1, "configuration file must hold a JSON object")
        })?;
        for (key, value) in obj {
            let rendered = match value {
                serde_json::Value::String(s) => s.clone(),
                serde_json::Value::Number(n) => n.to_string(),
                serde_json::Value::Bool(b) => b.to_string(),
                serde_json::Value::Array(items) => {
                    let mut parts = Vec::with_capacity(items.len());
                    for item in items {
                        match item {
                            serde_json::Value::Number(n) => parts.push(n.to_string()),
                            _ => {
                                return Err(Error::InvalidConfig(format!(
                                    "key '{key}': arrays may only hold numbers"
                                )))
                            }
                        }
                    }
                    parts.join(",")
                }
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "key '{key}': unsupported value {other}"
                    )))
                }
            };
            self.set(key, &rendered)?;
        }
        Ok(())
    }

    pub fn apply_set_flag(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(format!("--set expects KEY=VALUE, got '{assignment}'"))
        })?;
        self.set(key.trim(), value.trim())
    }

    fn raw(&self, key: &str) -> &str {
        self.map
            .get(key)
            .unwrap_or_else(|| panic!("unknown config key '{key}' requested"))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<T> {
        self.raw(key).parse().map_err(|_| {
            Error::InvalidConfig(format!(
                "key '{key}': expected {what}, got '{}'",
                self.raw(key)
            ))
        })
    }

    fn f64(&self, key: &str) -> Result<f64> {
        self.parse(key, "a number")
    }

    fn usize(&self, key: &str) -> Result<usize> {
        self.parse(key, "a nonnegative integer")
    }

    fn u64(&self, key: &str) -> Result<u64> {
        self.parse(key, "a nonnegative integer")
    }

    fn bool(&self, key: &str) -> Result<bool> {
        match self.raw(key) {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(Error::InvalidConfig(format!(
                "key '{key}': expected true or false, got '{other}'"
            ))),
        }
    }

    fn list_f64(&self, key: &str) -> Result<Vec<f64>> {
        let raw = self.raw(key).trim();
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|part| {
                part.trim().parse().map_err(|_| {
                    Error::InvalidConfig(format!(
                        "key '{key}': expected comma-separated numbers, got '{raw}'"
                    ))
                })
            })
            .collect()
    }

    fn list_usize(&self, key: &str) -> Result<Vec<usize>> {
        let raw = self.raw(key).trim();
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|part| {
                part.trim().parse().map_err(|_| {
                    Error::InvalidConfig(format!(
                        "key '{key}': expected comma-separated integers, got '{raw}'"
                    ))
                })
            })
            .collect()
    }

    pub fn shift_config(&self) -> Result<ShiftConfig> {
        Ok(ShiftConfig {
            classes: self.usize("classes")?,
            input_dim: self.usize("input_dim")?,
            per_class_count: self.usize("per_class_count")?,
            class_center_radius: self.f64("class_center_radius")?,
            cluster_stddev: self.f64("cluster_stddev")?,
            rotation_angle: self.f64("rotation_angle")?,
            translation: self.list_f64("translation")?,
            seed: self.u64("seed")?,
        })
    }

    pub fn encoder_config(&self) -> Result<EncoderConfig> {
        Ok(EncoderConfig {
            input_dim: self.usize("input_dim")?,
            hidden_dims: self.list_usize("hidden_dims")?,
            feature_dim: self.usize("feature_dim")?,
            activation: Activation::parse(self.raw("activation"))?,
            per_domain_bn: self.bool("per_domain_bn")?,
            bottleneck: self.bool("bottleneck")?,
        })
    }

    /// Hyperparameters for the adaptation loops, or for pretraining
    /// (which takes its epoch and iteration counts from separate keys).
    pub fn hyper(&self, pretrain: bool) -> Result<HyperParams> {
        Ok(HyperParams {
            tau: self.f64("tau")?,
            lambda: self.f64("lambda")?,
            confidence_threshold: self.f64("confidence_threshold")?,
            lr_backbone: self.f64("lr_backbone")?,
            lr_new_layers: self.f64("lr_new_layers")?,
            schedule_b: self.f64("schedule_b")?,
            momentum: self.f64("momentum")?,
            epochs: self.usize(if pretrain { "pretrain_epochs" } else { "epochs" })?,
            iters_per_epoch: self.usize(if pretrain { "pretrain_iters" } else { "iters_per_epoch" })?,
            batch_size: self.usize("batch_size")?,
            seed: self.u64("seed")?,
            kmeans_max_iters: self.usize("kmeans_max_iters")?,
            kmeans_tol: self.f64("kmeans_tol")?,
            pair_mode: PairMode::parse(self.raw("pair_mode"))?,
            share_ce_batch: self.bool("share_ce_batch")?,
            train_split: self.f64("train_split")?,
        })
    }

    fn pseudo_cfg(&self) -> Result<PseudoLabelConfig> {
        Ok(PseudoLabelConfig {
            confidence_threshold: self.f64("confidence_threshold")?,
            max_iters: self.usize("kmeans_max_iters")?,
            tol: self.f64("kmeans_tol")?,
        })
    }

    /// Parse every typed view once so bad values fail before any work.
    pub fn validate(&self) -> Result<()> {
        self.shift_config()?;
        self.encoder_config()?;
        self.hyper(false)?;
        self.hyper(true)?;
        Ok(())
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        self.map.clone()
    }

    fn rendered(&self, extra: &[(&str, &str)]) -> String {
        let mut merged = self.map.clone();
        for (k, v) in extra {
            merged.insert(k.to_string(), v.to_string());
        }
        let mut out = String::new();
        for (k, v) in &merged {
            writeln!(out, "{k}={v}").unwrap();
        }
        out
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "cdcl",
    version,
    about = "Cross-domain contrastive domain adaptation on synthetic benchmarks"
)]
struct Cli {
    /// JSON file with configuration overrides.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Shorthand for --set seed=N.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a source/target benchmark pair.
    GenData {
        /// Existing directory for source.ds, target.ds, target.labels.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Pretrain a model on labeled source data.
    Pretrain {
        #[arg(long, value_name = "FILE")]
        source: PathBuf,
        /// Existing directory for source_model.ckpt and the report.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Adapt a pretrained model to unlabeled target data.
    Adapt {
        /// standard, source-free, or ablation:<pair-mode>.
        #[arg(long)]
        mode: String,
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        #[arg(long, value_name = "FILE")]
        source: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        target: PathBuf,
        /// Ground-truth target labels; fills the accuracy fields of the
        /// report but never influences training.
        #[arg(long = "target-labels", value_name = "FILE")]
        target_labels: Option<PathBuf>,
        /// Existing directory for the adapted model, report, embeddings.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a labeled dataset.
    Eval {
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        /// Label sidecar for unlabeled datasets.
        #[arg(long, value_name = "FILE")]
        labels: Option<PathBuf>,
        /// Which domain's normalization statistics to use; defaults to
        /// the dataset's own domain tag.
        #[arg(long)]
        domain: Option<String>,
    },
    /// Export unit-norm embeddings with pseudo-labels as TSV.
    ExportEmbeddings {
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        #[arg(long, value_name = "FILE")]
        target: PathBuf,
        /// Labeled source data; enables prototype initialization from
        /// sample means and adds source rows to the export.
        #[arg(long, value_name = "FILE")]
        source: Option<PathBuf>,
        #[arg(long = "target-labels", value_name = "FILE")]
        target_labels: Option<PathBuf>,
        /// Existing directory for embeddings.tsv.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => 3,
        Error::NonFinite(_) => 4,
        _ => 2,
    }
}

/// Print to stdout, exiting quietly if the reader went away (e.g. `| head`).
fn emit(text: &str) {
    use std::io::Write;
    let mut out = std::io::stdout();
    if out.write_all(text.as_bytes()).is_err() || out.flush().is_err() {
        std::process::exit(0);
    }
}

/// Parse arguments, run, and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // clap exits 0 for --help/--version, 2 for usage errors
            e.exit();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::defaults();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        cfg.apply_json(&text, path)?;
    }
    for assignment in &cli.set {
        cfg.apply_set_flag(assignment)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require_dir(path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "output directory does not exist",
            ),
        ))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_resolved(cfg: &RunConfig, dir: &Path, extra: &[(&str, &str)]) -> Result<()> {
    let rendered = cfg.rendered(extra);
    emit(&rendered);
    write_text(&dir.join("config.resolved"), &rendered)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::InvalidConfig(format!("report serialization failed: {e}")))?;
    write_text(path, &format!("{text}\n"))
}

/// How an adaptation run trains.
#[derive(Debug, Clone, PartialEq, Eq)]
enum AdaptMode {
    Standard,
    SourceFree,
    /// Standard training with an overridden pair formation mode.
    Ablation(PairMode),
}

impl AdaptMode {
    fn parse(s: &str) -> Result<Self> {
        if s == "standard" {
            Ok(AdaptMode::Standard)
        } else if s == "source-free" {
            Ok(AdaptMode::SourceFree)
        } else if let Some(mode) = s.strip_prefix("ablation:") {
            Ok(AdaptMode::Ablation(PairMode::parse(mode)?))
        } else {
            Err(Error::InvalidConfig(format!(
                "unknown adapt mode '{s}' (expected standard, source-free, or ablation:<pair-mode>)"
            )))
        }
    }
}

fn load_truth(path: &Path, expected_len: usize) -> Result<Vec<i32>> {
    let (labels, _) = load_labels(path)?;
    if labels.len() != expected_len {
        return Err(Error::DimensionMismatch {
            expected: expected_len,
            got: labels.len(),
            context: "label sidecar length",
        });
    }
    Ok(labels)
}

/// Embedding export: eval-mode target embeddings with fresh pseudo-labels
/// (and source rows when source data is in play).
fn export_embeddings(
    model: &Model,
    target: &Dataset,
    target_truth: Option<&[i32]>,
    source: Option<&Dataset>,
    plc: &PseudoLabelConfig,
    path: &Path,
) -> Result<()> {
    let pseudo = match source {
        Some(s) => generate_pseudo_labels(
            model,
            &target.features,
            LabelingMode::Standard,
            Some((&s.features, &s.labels)),
            plc,
        )?,
        None => {
            if model.classifier_frozen {
                generate_pseudo_labels(model, &target.features, LabelingMode::SourceFree, None, plc)?
            } else {
                let mut prepared = model.clone();
                prepared.prepare_source_free()?;
                generate_pseudo_labels(
                    &prepared,
                    &target.features,
                    LabelingMode::SourceFree,
                    None,
                    plc,
                )?
            }
        }
    };
    let tz = model.encode_eval(&target.features, &[], Domain::Target)?.z;
    let mut rows = Vec::with_capacity(target.len());
    for i in 0..target.len() {
        rows.push(EmbeddingRow {
            id: i,
            domain: Domain::Target,
            label: target_truth.map_or(SENTINEL_UNLABELED, |t| t[i]),
            pseudo_label: if pseudo.retained[i] { pseudo.labels[i] } else { SENTINEL_UNLABELED },
            confidence: pseudo.confidences[i],
            z: tz.row(i).to_vec(),
        });
    }
    if let Some(s) = source {
        let sz = model.encode_eval(&s.features, &[], Domain::Source)?.z;
        for i in 0..s.len() {
            rows.push(EmbeddingRow {
                id: target.len() + i,
                domain: Domain::Source,
                label: s.labels[i],
                pseudo_label: SENTINEL_UNLABELED,
                confidence: 1.0,
                z: sz.row(i).to_vec(),
            });
        }
    }
    write_embeddings_tsv(path, &rows)
}

fn attach_target_eval(
    report: &mut TrainReport,
    model: &Model,
    target: &Dataset,
    truth: &[i32],
) -> Result<()> {
    let eval = evaluate(model, &target.features, truth, Domain::Target)?;
    report.target_accuracy = Some(eval.accuracy);
    report.per_class_accuracy = Some(eval.per_class_accuracy);
    report.mean_class_accuracy = Some(eval.mean_class_accuracy);
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    match &cli.command {
        Command::GenData { out } => {
            require_dir(out)?;
            let pair = generate_shifted_pair(&cfg.shift_config()?)?;
            save_dataset(&pair.source, out.join("source.ds"))?;
            save_dataset(&pair.target, out.join("target.ds"))?;
            save_labels(&pair.target_truth, pair.target.classes, out.join("target.labels"))?;
            write_resolved(&cfg, out, &[])?;
            emit(&format!(
                "wrote {} source and {} target samples to {}\n",
                pair.source.len(),
                pair.target.len(),
                out.display()
            ));
            Ok(())
        }
        Command::Pretrain { source, out } => {
            require_dir(out)?;
            let source_ds = load_dataset(source)?;
            let enc = cfg.encoder_config()?;
            if enc.input_dim != source_ds.features.cols {
                return Err(Error::InvalidConfig(format!(
                    "config input_dim {} does not match dataset dimension {} \
                     (use --set input_dim={})",
                    enc.input_dim,
                    source_ds.features.cols,
                    source_ds.features.cols
                )));
            }
            let hyper = cfg.hyper(true)?;
            let (model, mut report) = pretrain_source(&source_ds, &enc, &hyper)?;
            report.config = cfg.to_map();
            model.save_checkpoint(&out.join("source_model.ckpt"))?;
            write_json(&out.join("pretrain_report.json"), &report)?;
            write_resolved(&cfg, out, &[])?;
            emit(&format!(
                "pretrained for {} epochs; best validation accuracy {:.4} at epoch {}\n",
                report.epochs, report.best_val_accuracy, report.best_epoch
            ));
            Ok(())
        }
        Command::Adapt {
            mode,
            ckpt,
            source,
            target,
            target_labels,
            out,
        } => {
            require_dir(out)?;
            let adapt_mode = AdaptMode::parse(mode)?;
            if adapt_mode == AdaptMode::SourceFree && source.is_some() {
                return Err(Error::InvalidConfig(
                    "source data forbidden in source-free mode".into(),
                ));
            }
            let model = Model::load_checkpoint(ckpt)?;
            let target_ds = load_dataset(target)?;
            let truth = target_labels
                .as_ref()
                .map(|p| load_truth(p, target_ds.len()))
                .transpose()?;
            let mut hyper = cfg.hyper(false)?;
            let mut extra: Vec<(&str, &str)> = vec![("adapt_mode", mode.as_str())];
            let pair_mode_override;
            let (adapted, mut report, source_ds) = match adapt_mode {
                AdaptMode::Standard | AdaptMode::Ablation(_) => {
                    if let AdaptMode::Ablation(pm) = adapt_mode {
                        hyper.pair_mode = pm;
                        pair_mode_override = pm.to_string();
                        extra.push(("pair_mode", pair_mode_override.as_str()));
                    }
                    let source_path = source.as_ref().ok_or_else(|| {
                        Error::InvalidConfig(format!("adapt mode '{mode}' requires --source"))
                    })?;
                    let source_ds = load_dataset(source_path)?;
                    let (m, r) = train_uda(model, &source_ds, &target_ds, &hyper)?;
                    (m, r, Some(source_ds))
                }
                AdaptMode::SourceFree => {
                    let (m, r) = train_sdf(model, &target_ds, &hyper)?;
                    (m, r, None)
                }
            };
            report.config = cfg.to_map();
            report
                .config
                .insert("adapt_mode".into(), mode.clone());
            if let AdaptMode::Ablation(pm) = adapt_mode {
                report.config.insert("pair_mode".into(), pm.to_string());
            }
            if let Some(truth) = &truth {
                attach_target_eval(&mut report, &adapted, &target_ds, truth)?;
            }
            adapted.save_checkpoint(&out.join("adapted_model.ckpt"))?;
            write_json(&out.join("train_report.json"), &report)?;
            export_embeddings(
                &adapted,
                &target_ds,
                truth.as_deref(),
                source_ds.as_ref(),
                &cfg.pseudo_cfg()?,
                &out.join("embeddings.tsv"),
            )?;
            write_resolved(&cfg, out, &extra)?;
            match report.target_accuracy {
                Some(acc) => emit(&format!("adaptation finished; target accuracy {acc:.4}\n")),
                None => emit("adaptation finished\n"),
            }
            Ok(())
        }
        Command::Eval {
            ckpt,
            data,
            labels,
            domain,
        } => {
            let model = Model::load_checkpoint(ckpt)?;
            let ds = load_dataset(data)?;
            let truth = match labels {
                Some(path) => load_truth(path, ds.len())?,
                None => {
                    if !ds.is_labeled() {
                        return Err(Error::LabelsRequired(
                            "evaluation of an unlabeled dataset (pass --labels)",
                        ));
                    }
                    ds.labels.clone()
                }
            };
            let dom = match domain {
                Some(d) => Domain::parse(d)?,
                None => ds.domain,
            };
            let report = evaluate(&model, &ds.features, &truth, dom)?;
            let text = serde_json::to_string_pretty(&report)
                .map_err(|e| Error::InvalidConfig(format!("report serialization failed: {e}")))?;
            emit(&format!("{text}\n"));
            Ok(())
        }
        Command::ExportEmbeddings {
            ckpt,
            target,
            source,
            target_labels,
            out,
        } => {
            require_dir(out)?;
            let model = Model::load_checkpoint(ckpt)?;
            let target_ds = load_dataset(target)?;
            let truth = target_labels
                .as_ref()
                .map(|p| load_truth(p, target_ds.len()))
                .transpose()?;
            let source_ds = source.as_ref().map(load_dataset).transpose()?;
            export_embeddings(
                &model,
                &target_ds,
                truth.as_deref(),
                source_ds.as_ref(),
                &cfg.pseudo_cfg()?,
                &out.join("embeddings.tsv"),
            )?;
            emit(&format!("wrote embeddings for {} target samples\n", target_ds.len()));
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_cover_every_key_and_validate() {
        let cfg = RunConfig::defaults();
        cfg.validate().unwrap();
        assert_eq!(cfg.raw("tau"), "0.05");
        assert_eq!(cfg.raw("pair_mode"), "cross-domain");
    }

    #[test]
    fn set_flag_overrides_and_rejects_unknown_keys() {
        let mut cfg = RunConfig::defaults();
        cfg.apply_set_flag("tau=0.1").unwrap();
        assert_eq!(cfg.raw("tau"), "0.1");
        assert!(matches!(
            cfg.apply_set_flag("not_a_key=1"),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            cfg.apply_set_flag("tau"),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn json_overrides_types_and_unknown_keys() {
        let mut cfg = RunConfig::defaults();
        cfg.apply_json(
            r#"{"tau": 0.2, "hidden_dims": [4, 4], "share_ce_batch": true, "activation": "tanh"}"#,
            Path::new("test.json"),
        )
        .unwrap();
        assert_eq!(cfg.raw("tau"), "0.2");
        assert_eq!(cfg.raw("hidden_dims"), "4,4");
        assert_eq!(cfg.raw("share_ce_batch"), "true");
        cfg.validate().unwrap();
        assert!(matches!(
            cfg.apply_json(r#"{"bogus": 1}"#, Path::new("test.json")),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            cfg.apply_json("{", Path::new("test.json")),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let mut cfg = RunConfig::defaults();
        assert_eq!(cfg.raw("lambda"), "1.6");
        cfg.apply_json(r#"{"lambda": 0.8}"#, Path::new("test.json")).unwrap();
        assert_eq!(cfg.raw("lambda"), "0.8");
        cfg.apply_set_flag("lambda=0.4").unwrap();
        assert_eq!(cfg.raw("lambda"), "0.4");
    }

    #[test]
    fn bad_values_fail_validation() {
        let mut cfg = RunConfig::defaults();
        cfg.apply_set_flag("tau=cold").unwrap();
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
        let mut cfg = RunConfig::defaults();
        cfg.apply_set_flag("pair_mode=diagonal").unwrap();
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
        let mut cfg = RunConfig::defaults();
        cfg.apply_set_flag("per_domain_bn=yes").unwrap();
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn adapt_mode_parsing() {
        assert_eq!(AdaptMode::parse("standard").unwrap(), AdaptMode::Standard);
        assert_eq!(AdaptMode::parse("source-free").unwrap(), AdaptMode::SourceFree);
        assert_eq!(
            AdaptMode::parse("ablation:in-domain").unwrap(),
            AdaptMode::Ablation(PairMode::InDomain)
        );
        assert!(AdaptMode::parse("ablation:diagonal").is_err());
        assert!(AdaptMode::parse("offline").is_err());
    }

    #[test]
    fn exit_codes_by_error_class() {
        assert_eq!(exit_code(&Error::InvalidConfig("x".into())), 2);
        assert_eq!(
            exit_code(&Error::format(Path::new("f"), 3, "bad")),
            2
        );
        assert_eq!(
            exit_code(&Error::io(
                Path::new("f"),
                std::io::Error::new(std::io::ErrorKind::NotFound, "missing")
            )),
            3
        );
        assert_eq!(exit_code(&Error::NonFinite("loss".into())), 4);
    }

    #[test]
    fn rendered_config_is_sorted_lines() {
        let cfg = RunConfig::defaults();
        let text = cfg.rendered(&[("adapt_mode", "standard")]);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), DEFAULTS.len() + 1);
        let mut sorted = lines.clone();
        sorted.sort_unstable();
        assert_eq!(lines, sorted);
        assert!(lines.iter().any(|l| *l == "adapt_mode=standard"));
    }
}

//! Config-driven experiment runner.
//!
//! Configs are flat `key = value` text files with `#` comments; command-line
//! overrides use the same `key=value` syntax and win over file entries. Every
//! run writes one CSV row per round plus a `last5_mean` summary row, and two
//! runs with the same config and master seed produce byte-identical files.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attack::{AttackConfig, AttackKind};
use crate::data::{dirichlet_partition, load_idx, synth_train_test, Dataset, PartitionConfig};
use crate::error::{Error, Result};
use crate::eval::{EvalAttack, RoundReport};
use crate::federation::{derive_seed, run_training, Method, RoundConfig, ServerState};
use crate::federation::{SALT_DATA, SALT_PARTITION, SALT_SUBSAMPLE};

/// Environment variable that redirects relative report paths.
pub const OUTPUT_DIR_ENV: &str = "FATCC_OUTPUT_DIR";

const SUMMARY_LABEL: &str = "last5_mean";
const SUMMARY_WINDOW: usize = 5;

/// Where the training and test data come from.
#[derive(Debug, Clone)]
pub enum DatasetSpec {
    Synthetic {
        classes: usize,
        dims: usize,
        train_per_class: usize,
        test_per_class: usize,
        spread: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Fraction of the training set kept (subsampled before
        /// partitioning); 1.0 keeps everything.
        subsample: f64,
    },
}

/// Client partitioning options; the seed defaults to a value derived from
/// the master seed when not set explicitly.
#[derive(Debug, Clone, Copy)]
pub struct PartitionOptions {
    pub num_clients: usize,
    pub gamma: f64,
    pub seed: Option<u64>,
}

/// A fully resolved experiment description.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub partition: PartitionOptions,
    /// Hidden layer widths; input and class widths come from the data.
    pub hidden: Vec<usize>,
    pub round: RoundConfig,
    pub rounds: usize,
    pub eval_attacks: Vec<EvalAttack>,
    /// Evaluate on a fixed random subset of the test set when positive.
    pub eval_subset: usize,
    pub output: PathBuf,
    pub parallel: bool,
}

impl ExperimentConfig {
    /// Desk-scale synthetic defaults; mirrors the config-file defaults.
    pub fn synthetic(method: Method) -> Self {
        let mut round = RoundConfig::new(method);
        round.train_attack = AttackConfig::training(0.1, 0.025, 10);
        ExperimentConfig {
            dataset: DatasetSpec::Synthetic {
                classes: 10,
                dims: 32,
                train_per_class: 200,
                test_per_class: 50,
                spread: 0.15,
            },
            partition: PartitionOptions {
                num_clients: 5,
                gamma: 0.5,
                seed: None,
            },
            hidden: vec![64, 16],
            round,
            rounds: 30,
            eval_attacks: vec![EvalAttack::new(
                "pgd40",
                AttackKind::Pgd,
                AttackConfig::evaluation(0.1),
            )],
            eval_subset: 0,
            output: PathBuf::from("report.csv"),
            parallel: true,
        }
    }

    /// Parses a config file plus `key=value` overrides.
    pub fn parse(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config {
            location: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let location = format!("{}:{}", path.display(), lineno + 1);
            let (key, value) = trimmed.split_once('=').ok_or_else(|| Error::Config {
                location: location.clone(),
                message: format!("expected `key = value`, got `{trimmed}`"),
            })?;
            entries.push((key.trim().to_string(), value.trim().to_string(), location));
        }
        for (i, item) in overrides.iter().enumerate() {
            let location = format!("override {}", i + 1);
            let (key, value) = item.split_once('=').ok_or_else(|| Error::Config {
                location: location.clone(),
                message: format!("expected `key=value`, got `{item}`"),
            })?;
            entries.push((key.trim().to_string(), value.trim().to_string(), location));
        }
        Self::from_entries(entries)
    }

    fn from_entries(entries: Vec<(String, String, String)>) -> Result<ExperimentConfig> {
        let reader = ConfigReader::new(entries);

        let method_str = reader.string("method", "fatcc")?;
        let method = Method::parse(&method_str).ok_or_else(|| {
            reader.error(
                "method",
                format!("unknown method `{method_str}` (expected fst, fedpgd, fatcc, fatcc_no_calib, or fatcc_no_contrast)"),
            )
        })?;
        let mut config = ExperimentConfig::synthetic(method);

        config.round.train.seed = reader.u64("seed", 0)?;
        config.rounds = reader.usize("rounds", 30)?;
        config.parallel = reader.bool("parallel", true)?;
        config.output = PathBuf::from(reader.string("output", "report.csv")?);

        match reader.string("dataset.kind", "synth")?.as_str() {
            "synth" => {
                config.dataset = DatasetSpec::Synthetic {
                    classes: reader.usize("dataset.synth.classes", 10)?,
                    dims: reader.usize("dataset.synth.dims", 32)?,
                    train_per_class: reader.usize("dataset.synth.train_per_class", 200)?,
                    test_per_class: reader.usize("dataset.synth.test_per_class", 50)?,
                    spread: reader.f64("dataset.synth.spread", 0.15)?,
                };
            }
            "idx" => {
                config.dataset = DatasetSpec::Idx {
                    train_images: PathBuf::from(reader.required("dataset.idx.train_images")?),
                    train_labels: PathBuf::from(reader.required("dataset.idx.train_labels")?),
                    test_images: PathBuf::from(reader.required("dataset.idx.test_images")?),
                    test_labels: PathBuf::from(reader.required("dataset.idx.test_labels")?),
                    subsample: reader.f64("dataset.idx.subsample", 1.0)?,
                };
            }
            other => {
                return Err(reader.error(
                    "dataset.kind",
                    format!("unknown dataset kind `{other}` (expected synth or idx)"),
                ));
            }
        }

        config.partition = PartitionOptions {
            num_clients: reader.usize("partition.clients", 5)?,
            gamma: reader.f64("partition.gamma", 0.5)?,
            seed: reader.opt_u64("partition.seed")?,
        };

        let hidden_str = reader.string("model.hidden", "64,16")?;
        config.hidden = hidden_str
            .split(',')
            .map(|w| {
                w.trim().parse::<usize>().map_err(|_| {
                    reader.error("model.hidden", format!("bad width `{}` in `{hidden_str}`", w))
                })
            })
            .collect::<Result<_>>()?;

        config.round.train.learning_rate = reader.f64("train.lr", 0.01)?;
        config.round.train.batch_size = reader.usize("train.batch_size", 128)?;
        config.round.train.local_epochs = reader.usize("train.local_epochs", 1)?;

        let kind_str = reader.string("attack.kind", "pgd")?;
        config.round.train_attack_kind = parse_attack_kind(&kind_str)
            .ok_or_else(|| reader.error("attack.kind", format!("unknown attack `{kind_str}`")))?;
        let epsilon = reader.f64("attack.epsilon", 0.1)?;
        let step_size = reader.f64("attack.step_size", epsilon / 4.0)?;
        let steps = reader.usize("attack.steps", 10)?;
        let random_start = reader.bool("attack.random_start", true)?;
        config.round.train_attack = AttackConfig {
            epsilon,
            step_size,
            steps,
            random_start,
            clamp: (0.0, 1.0),
        };

        config.round.calibration.alpha = reader.f64("calib.alpha", 10.0)?;
        config.round.calibration.beta = reader.f64("calib.beta", 5.0)?;
        config.round.calibration.enabled = reader.bool("calib.enabled", true)?;
        config.round.contrast.temperature = reader.f64("contrast.tau", 0.07)?;
        config.round.contrast.lambda = reader.f64("contrast.lambda", 1.0)?;
        config.round.contrast.enabled = reader.bool("contrast.enabled", true)?;
        config.round.adversarial_prototypes = reader.bool("contrast.adv_features", true)?;

        let eval_eps = reader.f64("eval.epsilon", epsilon)?;
        let eval_step = reader.opt_f64("eval.step_size")?;
        let attack_list = reader.string("eval.attacks", "pgd40")?;
        config.eval_attacks = attack_list
            .split(',')
            .map(|token| {
                parse_eval_attack(token.trim(), eval_eps, eval_step)
                    .ok_or_else(|| reader.error("eval.attacks", format!("bad attack `{token}`")))
            })
            .collect::<Result<_>>()?;
        config.eval_subset = reader.usize("eval.subset", 0)?;

        reader.finish()?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.round.validate()?;
        if self.rounds == 0 {
            return Err(Error::invalid("rounds", "must be at least 1"));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::invalid("model.hidden", "zero hidden width"));
        }
        PartitionConfig {
            num_clients: self.partition.num_clients,
            gamma: self.partition.gamma,
            seed: 0,
        }
        .validate()?;
        for attack in &self.eval_attacks {
            attack.config.validate()?;
        }
        match &self.dataset {
            DatasetSpec::Synthetic {
                classes,
                dims,
                train_per_class,
                test_per_class,
                spread,
            } => {
                if *classes == 0 || *dims == 0 || *train_per_class == 0 || *test_per_class == 0 {
                    return Err(Error::invalid(
                        "dataset.synth",
                        "classes, dims, and per-class counts must be positive",
                    ));
                }
                if *spread < 0.0 {
                    return Err(Error::invalid("dataset.synth.spread", "must be nonnegative"));
                }
            }
            DatasetSpec::Idx { subsample, .. } => {
                if !(0.0 < *subsample && *subsample <= 1.0) {
                    return Err(Error::invalid(
                        "dataset.idx.subsample",
                        format!("must lie in (0, 1], got {subsample}"),
                    ));
                }
            }
        }
        Ok(())
    }
}

fn parse_attack_kind(s: &str) -> Option<AttackKind> {
    match s {
        "fgsm" => Some(AttackKind::Fgsm),
        "bim" => Some(AttackKind::Bim),
        "pgd" => Some(AttackKind::Pgd),
        _ => None,
    }
}

/// Parses an evaluation attack token: `fgsm`, `bim`, `pgd`, or an iterative
/// kind with a step-count suffix like `pgd40`.
fn parse_eval_attack(token: &str, epsilon: f64, step_size: Option<f64>) -> Option<EvalAttack> {
    let split = token.find(|c: char| c.is_ascii_digit()).unwrap_or(token.len());
    let (kind_str, steps_str) = token.split_at(split);
    let kind = parse_attack_kind(kind_str)?;
    let steps = if steps_str.is_empty() {
        40
    } else {
        steps_str.parse::<usize>().ok()?
    };
    if kind == AttackKind::Fgsm && !steps_str.is_empty() {
        return None;
    }
    let config = AttackConfig {
        epsilon,
        step_size: step_size.unwrap_or(epsilon / 10.0),
        steps,
        random_start: false,
        clamp: (0.0, 1.0),
    };
    Some(EvalAttack::new(token, kind, config))
}

/// Key-value store with consumed-key tracking and location diagnostics.
struct ConfigReader {
    values: BTreeMap<String, (String, String)>,
    consumed: std::cell::RefCell<std::collections::BTreeSet<String>>,
}

impl ConfigReader {
    fn new(entries: Vec<(String, String, String)>) -> Self {
        let mut values = BTreeMap::new();
        for (key, value, location) in entries {
            values.insert(key, (value, location));
        }
        ConfigReader {
            values,
            consumed: Default::default(),
        }
    }

    fn error(&self, key: &str, message: String) -> Error {
        let location = self
            .values
            .get(key)
            .map(|(_, loc)| loc.clone())
            .unwrap_or_else(|| format!("key `{key}`"));
        Error::Config { location, message }
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.consumed.borrow_mut().insert(key.to_string());
        self.values.get(key).map(|(v, _)| v.as_str())
    }

    fn string(&self, key: &str, default: &str) -> Result<String> {
        Ok(self.raw(key).unwrap_or(default).to_string())
    }

    fn required(&self, key: &str) -> Result<String> {
        self.raw(key).map(str::to_string).ok_or_else(|| Error::Config {
            location: format!("key `{key}`"),
            message: "required key is missing".into(),
        })
    }

    fn f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse::<f64>()
                .map_err(|_| self.error(key, format!("`{v}` is not a number"))),
        }
    }

    fn opt_f64(&self, key: &str) -> Result<Option<f64>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<f64>()
                .map(Some)
                .map_err(|_| self.error(key, format!("`{v}` is not a number"))),
        }
    }

    fn usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse::<usize>()
                .map_err(|_| self.error(key, format!("`{v}` is not a nonnegative integer"))),
        }
    }

    fn u64(&self, key: &str, default: u64) -> Result<u64> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse::<u64>()
                .map_err(|_| self.error(key, format!("`{v}` is not an unsigned integer"))),
        }
    }

    fn opt_u64(&self, key: &str) -> Result<Option<u64>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<u64>()
                .map(Some)
                .map_err(|_| self.error(key, format!("`{v}` is not an unsigned integer"))),
        }
    }

    fn bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.raw(key) {
            None => Ok(default),
            Some("true") | Some("1") | Some("yes") => Ok(true),
            Some("false") | Some("0") | Some("no") => Ok(false),
            Some(v) => Err(self.error(key, format!("`{v}` is not a boolean"))),
        }
    }

    fn finish(&self) -> Result<()> {
        let consumed = self.consumed.borrow();
        for (key, (_, location)) in &self.values {
            if !consumed.contains(key) {
                return Err(Error::Config {
                    location: location.clone(),
                    message: format!("unknown key `{key}`"),
                });
            }
        }
        Ok(())
    }
}

/// Summary metrics: arithmetic means of the final rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub clean_accuracy: f64,
    pub robust_accuracy: Vec<(String, f64)>,
    pub train_loss: f64,
}

/// Mean of the last `min(5, len)` round reports.
pub fn summarize(reports: &[RoundReport]) -> SummaryRow {
    let window = SUMMARY_WINDOW.min(reports.len());
    let tail = &reports[reports.len() - window..];
    let n = tail.len() as f64;
    let clean_accuracy = tail.iter().map(|r| r.clean_accuracy).sum::<f64>() / n;
    let train_loss = tail.iter().map(|r| r.train_loss).sum::<f64>() / n;
    let robust_accuracy = tail[0]
        .robust_accuracy
        .iter()
        .enumerate()
        .map(|(i, (name, _))| {
            let mean = tail.iter().map(|r| r.robust_accuracy[i].1).sum::<f64>() / n;
            (name.clone(), mean)
        })
        .collect();
    SummaryRow {
        clean_accuracy,
        robust_accuracy,
        train_loss,
    }
}

/// Everything a finished experiment produced.
#[derive(Debug)]
pub struct ExperimentOutcome {
    pub server: ServerState,
    pub reports: Vec<RoundReport>,
    pub summary: SummaryRow,
    pub csv_path: PathBuf,
}

fn resolve_output_path(configured: &Path) -> PathBuf {
    if configured.is_relative() {
        if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
            if !dir.is_empty() {
                return PathBuf::from(dir).join(configured);
            }
        }
    }
    configured.to_path_buf()
}

fn build_datasets(config: &ExperimentConfig, master: u64) -> Result<(Dataset, Dataset)> {
    match &config.dataset {
        DatasetSpec::Synthetic {
            classes,
            dims,
            train_per_class,
            test_per_class,
            spread,
        } => synth_train_test(
            *classes,
            *dims,
            *train_per_class,
            *test_per_class,
            *spread,
            derive_seed(master, 0, SALT_DATA),
        ),
        DatasetSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            subsample,
        } => {
            let mut train = load_idx(train_images, train_labels)?;
            let test = load_idx(test_images, test_labels)?;
            if *subsample < 1.0 {
                train = train.subsample(*subsample, derive_seed(master, 0, SALT_SUBSAMPLE))?;
            }
            Ok((train, test))
        }
    }
}

fn eval_subset(test: &Dataset, size: usize, master: u64) -> Result<Dataset> {
    if size == 0 || size >= test.len() {
        return Ok(test.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master, 0, usize::MAX - 4));
    let mut indices: Vec<usize> = (0..test.len()).collect();
    indices.shuffle(&mut rng);
    indices.truncate(size);
    indices.sort_unstable();
    test.subset(&indices)
}

/// Runs a full experiment and writes its CSV report.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let master = config.round.train.seed;
    let (train, test) = build_datasets(config, master)?;
    let test = eval_subset(&test, config.eval_subset, master)?;

    let partition = PartitionConfig {
        num_clients: config.partition.num_clients,
        gamma: config.partition.gamma,
        seed: config
            .partition
            .seed
            .unwrap_or_else(|| derive_seed(master, 0, SALT_PARTITION)),
    };
    let shards = dirichlet_partition(&train, &partition)?;

    let (server, reports) = run_training(
        &train,
        &test,
        &shards,
        &config.round,
        config.rounds,
        &config.hidden,
        &config.eval_attacks,
        config.parallel,
    )?;

    let summary = summarize(&reports);
    let csv_path = resolve_output_path(&config.output);
    if let Some(parent) = csv_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(&csv_path, render_csv(&reports, &summary))?;

    Ok(ExperimentOutcome {
        server,
        reports,
        summary,
        csv_path,
    })
}

/// CSV schema: `round,ca,ra_<attack>...,train_loss` with one row per round
/// and a final `last5_mean` summary row. Floats use the shortest
/// round-trippable representation so summary means can be re-derived from
/// the parsed rows.
pub fn render_csv(reports: &[RoundReport], summary: &SummaryRow) -> String {
    let mut out = String::from("round,ca");
    if let Some(first) = reports.first() {
        for (name, _) in &first.robust_accuracy {
            out.push_str(",ra_");
            out.push_str(name);
        }
    } else {
        for (name, _) in &summary.robust_accuracy {
            out.push_str(",ra_");
            out.push_str(name);
        }
    }
    out.push_str(",train_loss\n");
    for report in reports {
        out.push_str(&report.round.to_string());
        out.push(',');
        out.push_str(&report.clean_accuracy.to_string());
        for (_, ra) in &report.robust_accuracy {
            out.push(',');
            out.push_str(&ra.to_string());
        }
        out.push(',');
        out.push_str(&report.train_loss.to_string());
        out.push('\n');
    }
    out.push_str(SUMMARY_LABEL);
    out.push(',');
    out.push_str(&summary.clean_accuracy.to_string());
    for (_, ra) in &summary.robust_accuracy {
        out.push(',');
        out.push_str(&ra.to_string());
    }
    out.push(',');
    out.push_str(&summary.train_loss.to_string());
    out.push('\n');
    out
}

/// A parsed CSV report: header plus labeled numeric rows.
#[derive(Debug, Clone)]
pub struct ParsedReport {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl ParsedReport {
    pub fn read(path: &Path) -> Result<ParsedReport> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::SchemaMismatch(format!(
            "{}: empty report",
            path.display()
        )))?;
        let columns: Vec<String> = header.split(',').map(str::to_string).collect();
        let mut rows = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let label = fields.next().unwrap_or_default().to_string();
            let values: Vec<f64> = fields
                .map(|f| {
                    f.parse::<f64>().map_err(|_| {
                        Error::SchemaMismatch(format!(
                            "{}:{}: `{f}` is not a number",
                            path.display(),
                            lineno + 2
                        ))
                    })
                })
                .collect::<Result<_>>()?;
            if values.len() + 1 != columns.len() {
                return Err(Error::SchemaMismatch(format!(
                    "{}:{}: {} fields for {} columns",
                    path.display(),
                    lineno + 2,
                    values.len() + 1,
                    columns.len()
                )));
            }
            rows.push((label, values));
        }
        Ok(ParsedReport { columns, rows })
    }

    pub fn summary(&self) -> Result<&(String, Vec<f64>)> {
        self.rows
            .iter()
            .find(|(label, _)| label == SUMMARY_LABEL)
            .ok_or_else(|| Error::SchemaMismatch(format!("missing `{SUMMARY_LABEL}` row")))
    }
}

/// Per-metric difference between the summary rows of two reports.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricDelta {
    pub metric: String,
    pub first: f64,
    pub second: f64,
    /// `first - second`.
    pub delta: f64,
}

/// Summary-row comparison of two reports with identical schemas.
#[derive(Debug, Clone)]
pub struct CompareSummary {
    pub metrics: Vec<MetricDelta>,
}

impl fmt::Display for CompareSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for m in &self.metrics {
            writeln!(
                f,
                "{:<16} {:>12.6} {:>12.6} {:>+12.6}",
                m.metric, m.first, m.second, m.delta
            )?;
        }
        Ok(())
    }
}

/// Compares the summary rows of two CSV reports.
pub fn compare_reports(first: &Path, second: &Path) -> Result<CompareSummary> {
    let a = ParsedReport::read(first)?;
    let b = ParsedReport::read(second)?;
    if a.columns != b.columns {
        for col in &a.columns {
            if !b.columns.contains(col) {
                return Err(Error::SchemaMismatch(format!(
                    "column `{col}` missing from {}",
                    second.display()
                )));
            }
        }
        for col in &b.columns {
            if !a.columns.contains(col) {
                return Err(Error::SchemaMismatch(format!(
                    "column `{col}` missing from {}",
                    first.display()
                )));
            }
        }
        return Err(Error::SchemaMismatch("column order differs".into()));
    }
    let (_, row_a) = a.summary()?;
    let (_, row_b) = b.summary()?;
    let metrics = a
        .columns
        .iter()
        .skip(1)
        .zip(row_a.iter().zip(row_b))
        .map(|(metric, (&x, &y))| MetricDelta {
            metric: metric.clone(),
            first: x,
            second: y,
            delta: x - y,
        })
        .collect();
    Ok(CompareSummary { metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_config(dir: &tempfile::TempDir, body: &str) -> PathBuf {
        let path = dir.path().join("exp.cfg");
        let mut f = fs::File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    #[test]
    fn parse_defaults_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(
            &dir,
            "# comment\nmethod = fedpgd\nrounds = 3\ntrain.lr = 0.05\n",
        );
        let config =
            ExperimentConfig::parse(&path, &["rounds=7".into(), "seed=9".into()]).unwrap();
        assert_eq!(config.round.method, Method::FedPgd);
        assert_eq!(config.rounds, 7); // override wins
        assert_eq!(config.round.train.seed, 9);
        assert!((config.round.train.learning_rate - 0.05).abs() < 1e-15);
        assert_eq!(config.hidden, vec![64, 16]);
        assert_eq!(config.eval_attacks.len(), 1);
        assert_eq!(config.eval_attacks[0].name, "pgd40");
        assert_eq!(config.eval_attacks[0].config.steps, 40);
    }

    #[test]
    fn parse_rejects_unknown_key_with_location() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(&dir, "method = fst\nnot.a.key = 3\n");
        let err = ExperimentConfig::parse(&path, &[]).unwrap_err();
        let text = err.to_string();
        assert!(text.contains("not.a.key"), "{text}");
        assert!(text.contains(":2"), "{text}");
    }

    #[test]
    fn parse_rejects_bad_value_with_location() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(&dir, "rounds = many\n");
        let err = ExperimentConfig::parse(&path, &[]).unwrap_err();
        let text = err.to_string();
        assert!(text.contains(":1"), "{text}");
        assert!(text.contains("many"), "{text}");
    }

    #[test]
    fn eval_attack_tokens_parse_with_step_suffix() {
        let a = parse_eval_attack("pgd40", 0.3, None).unwrap();
        assert_eq!(a.config.steps, 40);
        assert!((a.config.step_size - 0.03).abs() < 1e-15);
        assert!(!a.config.random_start);
        let b = parse_eval_attack("bim7", 0.1, Some(0.02)).unwrap();
        assert_eq!(b.config.steps, 7);
        assert!((b.config.step_size - 0.02).abs() < 1e-15);
        assert!(parse_eval_attack("fgsm", 0.1, None).is_some());
        assert!(parse_eval_attack("fgsm3", 0.1, None).is_none());
        assert!(parse_eval_attack("square", 0.1, None).is_none());
    }

    #[test]
    fn csv_rendering_has_stable_schema() {
        let reports = vec![
            RoundReport {
                round: 1,
                clean_accuracy: 0.5,
                robust_accuracy: vec![("pgd40".into(), 0.25)],
                train_loss: 2.0,
            },
            RoundReport {
                round: 2,
                clean_accuracy: 0.75,
                robust_accuracy: vec![("pgd40".into(), 0.5)],
                train_loss: 1.0,
            },
        ];
        let summary = summarize(&reports);
        let csv = render_csv(&reports, &summary);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "round,ca,ra_pgd40,train_loss");
        assert_eq!(lines.next().unwrap(), "1,0.5,0.25,2");
        assert_eq!(lines.next().unwrap(), "2,0.75,0.5,1");
        assert_eq!(lines.next().unwrap(), "last5_mean,0.625,0.375,1.5");
    }

    #[test]
    fn summary_means_are_recomputable_from_rows() {
        let reports: Vec<RoundReport> = (1..=8)
            .map(|round| RoundReport {
                round,
                clean_accuracy: 0.1 * round as f64,
                robust_accuracy: vec![("pgd40".into(), 0.05 * round as f64)],
                train_loss: 1.0 / round as f64,
            })
            .collect();
        let summary = summarize(&reports);
        // Only the last 5 rounds count.
        let tail: Vec<&RoundReport> = reports[3..].iter().collect();
        let mean_ca = tail.iter().map(|r| r.clean_accuracy).sum::<f64>() / 5.0;
        assert!((summary.clean_accuracy - mean_ca).abs() < 1e-12);
    }

    #[test]
    fn compare_identical_files_gives_zero_deltas() {
        let dir = tempfile::tempdir().unwrap();
        let body = "round,ca,ra_pgd40,train_loss\n1,0.5,0.2,2\nlast5_mean,0.5,0.2,2\n";
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        fs::write(&a, body).unwrap();
        fs::write(&b, body).unwrap();
        let cmp = compare_reports(&a, &b).unwrap();
        assert!(cmp.metrics.iter().all(|m| m.delta == 0.0));
    }

    #[test]
    fn compare_reports_summary_delta() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        fs::write(&a, "round,ca,train_loss\n1,0.9,1\nlast5_mean,0.9,1\n").unwrap();
        fs::write(&b, "round,ca,train_loss\n1,0.85,1\nlast5_mean,0.85,1\n").unwrap();
        let cmp = compare_reports(&a, &b).unwrap();
        let ca = cmp.metrics.iter().find(|m| m.metric == "ca").unwrap();
        assert!((ca.delta - 0.05).abs() < 1e-12);
    }

    #[test]
    fn compare_rejects_schema_mismatch_naming_column() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        fs::write(&a, "round,ca,ra_pgd40,train_loss\nlast5_mean,0.9,0.5,1\n").unwrap();
        fs::write(&b, "round,ca,train_loss\nlast5_mean,0.85,1\n").unwrap();
        let err = compare_reports(&a, &b).unwrap_err();
        assert!(err.to_string().contains("ra_pgd40"), "{err}");
    }
}

//! Command implementations behind the `tlsrec` binary.
//!
//! Every command reads one TOML run config (see `RunConfig`) and writes
//! into its `output_dir`:
//!
//! ```text
//! config.toml           snapshot of the config that produced the run
//! instances.tsv         padded training instances (ingest)
//! instances.header      header of the instance file in use
//! checkpoints/          best.ckpt, ablate-<variant>.ckpt
//! logs/                 train.jsonl, ablate-<variant>.jsonl
//! reports/              ingest.txt, eval.txt, eval.jsonl, ablation.txt, ablation.jsonl
//! inspect/              attention, pooling and gate CSVs
//! ```

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use tlsrec::checkpoint;
use tlsrec::dataset::{
    build_dataset, instance_header, parse_interactions, read_instances, write_instances, DatasetSplit,
    FormatDescriptor, IngestConfig, IngestReport, Portion, TrainingInstance,
};
use tlsrec::evaluation::{
    evaluate, export_inspection, write_attention_csv, write_gate_csv, write_pool_csv, EvalOptions, RankingReport,
};
use tlsrec::model::{Model, ModelConfig, Variant};
use tlsrec::training::{train_with_observer, EpochRecord, TrainConfig};
use tlsrec::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Raw interaction file; required by `ingest`.
    pub path: Option<PathBuf>,
    /// Instance file; defaults to `<output_dir>/instances.tsv`.
    pub instances: Option<PathBuf>,
    pub delimiter: char,
    pub has_header: bool,
    pub user_column: usize,
    pub item_column: usize,
    pub timestamp_column: usize,
    pub session_threshold_seconds: i64,
    pub sessions_per_instance: usize,
    pub lag_buckets: usize,
    pub split_ratios: [f64; 3],
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let ingest = IngestConfig::default();
        let format = FormatDescriptor::default();
        Self {
            path: None,
            instances: None,
            delimiter: format.delimiter,
            has_header: format.has_header,
            user_column: format.user_column,
            item_column: format.item_column,
            timestamp_column: format.timestamp_column,
            session_threshold_seconds: ingest.session_threshold_seconds,
            sessions_per_instance: ingest.sessions_per_instance,
            lag_buckets: ingest.lag_buckets,
            split_ratios: ingest.split_ratios,
            seed: ingest.seed,
        }
    }
}

impl DatasetSection {
    pub fn format(&self) -> FormatDescriptor {
        FormatDescriptor {
            delimiter: self.delimiter,
            has_header: self.has_header,
            user_column: self.user_column,
            item_column: self.item_column,
            timestamp_column: self.timestamp_column,
        }
    }

    pub fn ingest_config(&self) -> IngestConfig {
        IngestConfig {
            session_threshold_seconds: self.session_threshold_seconds,
            sessions_per_instance: self.sessions_per_instance,
            lag_buckets: self.lag_buckets,
            split_ratios: self.split_ratios,
            seed: self.seed,
        }
    }
}

/// Model hyper-parameters. Sequence length, session length and lag
/// buckets come from the instance file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub dropout: f64,
    pub variant: Variant,
    pub norm_epsilon: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            dim: m.dim,
            heads: m.heads,
            blocks: m.blocks,
            dropout: m.dropout,
            variant: m.variant,
            norm_epsilon: m.norm_epsilon,
        }
    }
}

impl ModelSection {
    pub fn config_for(&self, split: &DatasetSplit) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            heads: self.heads,
            sessions: split.sessions_per_instance,
            session_len: split.max_session_length,
            lag_buckets: split.lag_buckets,
            blocks: self.blocks,
            dropout: self.dropout,
            variant: self.variant,
            norm_epsilon: self.norm_epsilon,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub ks: Vec<usize>,
    pub split: String,
    pub exclude_history: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            ks: vec![20, 30],
            split: "test".into(),
            exclude_history: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub variants: Vec<Variant>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InspectSection {
    /// Raw user label; all of the user's instances in `split` are exported.
    pub user: Option<String>,
    /// Position inside `split`.
    pub index: Option<usize>,
    pub split: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub ablate: AblateSection,
    #[serde(default)]
    pub inspect: InspectSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().replace('\n', " ")))
    }

    /// Reads a config file; relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut config.output_dir);
        if let Some(p) = config.dataset.path.as_mut() {
            resolve(p);
        }
        if let Some(p) = config.dataset.instances.as_mut() {
            resolve(p);
        }
        Ok(config)
    }

    /// Checks every section before any work starts.
    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.session_threshold_seconds <= 0 {
            return Err(Error::Config(
                "dataset.session_threshold_seconds must be positive".into(),
            ));
        }
        if d.sessions_per_instance == 0 || d.lag_buckets == 0 {
            return Err(Error::Config(
                "dataset.sessions_per_instance and dataset.lag_buckets must be at least 1".into(),
            ));
        }
        tlsrec::dataset::validate_ratios(d.split_ratios)?;
        let mut probe = ModelConfig {
            sessions: d.sessions_per_instance,
            lag_buckets: d.lag_buckets,
            ..ModelConfig::default()
        };
        probe.dim = self.model.dim;
        probe.heads = self.model.heads;
        probe.dropout = self.model.dropout;
        probe.norm_epsilon = self.model.norm_epsilon;
        probe.validate()?;
        self.train.validate()?;
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::Config("eval.ks must list positive cutoffs".into()));
        }
        Portion::parse(&self.eval.split)?;
        if let Some(s) = &self.inspect.split {
            Portion::parse(s)?;
        }
        if self.ablate.variants.is_empty() {
            return Err(Error::Config("ablate.variants is empty".into()));
        }
        Ok(())
    }

    pub fn instances_path(&self) -> PathBuf {
        self.dataset
            .instances
            .clone()
            .unwrap_or_else(|| self.output_dir.join("instances.tsv"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.output_dir.join("checkpoints").join("best.ckpt")
    }

    fn dir(&self, name: &str) -> Result<PathBuf> {
        let dir = self.output_dir.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }

    fn snapshot(&self) -> Result<()> {
        fs::create_dir_all(&self.output_dir).map_err(|e| Error::io(&self.output_dir, e))?;
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        write_file(&self.output_dir.join("config.toml"), text.as_bytes())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn jsonl<T: Serialize>(records: &[T]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
        .collect()
}

pub fn cmd_ingest(config: &RunConfig) -> Result<IngestReport> {
    config.validate()?;
    let path = config
        .dataset
        .path
        .as_ref()
        .ok_or_else(|| Error::Config("dataset.path is required for ingest".into()))?;
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let log = parse_interactions(BufReader::new(file), &config.dataset.format())?;
    let (split, report) = build_dataset(&log, &config.dataset.ingest_config())?;
    config.snapshot()?;
    let out = config.instances_path();
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = fs::File::create(&out).map_err(|e| Error::io(&out, e))?;
    let mut w = BufWriter::new(file);
    write_instances(&split, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(&out, e))?;
    write_file(
        &config.output_dir.join("instances.header"),
        instance_header(&split).as_bytes(),
    )?;
    let reports = config.dir("reports")?;
    write_file(&reports.join("ingest.txt"), format!("{report}\n").as_bytes())?;
    Ok(report)
}

/// Loads the instance file named by the config and echoes its header
/// into the run directory.
pub fn load_split(config: &RunConfig) -> Result<DatasetSplit> {
    let path = config.instances_path();
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let split = read_instances(BufReader::new(file))?;
    let d = &config.dataset;
    if split.sessions_per_instance != d.sessions_per_instance || split.lag_buckets != d.lag_buckets {
        return Err(Error::Contract(format!(
            "instance file was built with sessions_per_instance={} lag_buckets={}, config asks for {} and {}",
            split.sessions_per_instance, split.lag_buckets, d.sessions_per_instance, d.lag_buckets
        )));
    }
    fs::create_dir_all(&config.output_dir).map_err(|e| Error::io(&config.output_dir, e))?;
    write_file(
        &config.output_dir.join("instances.header"),
        instance_header(&split).as_bytes(),
    )?;
    Ok(split)
}

#[derive(Debug)]
pub struct TrainSummary {
    pub model: Model,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
}

fn train_variant(
    config: &RunConfig,
    split: &DatasetSplit,
    variant: Variant,
    checkpoint_path: &Path,
    log_name: &str,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainSummary> {
    let mut model_config = config.model.config_for(split);
    model_config.variant = variant;
    let logs = config.dir("logs")?;
    let log_path = logs.join(log_name);
    let mut log_file = BufWriter::new(fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let mut write_err = None;
    let outcome = train_with_observer(split, &model_config, &config.train, &mut |r| {
        let line = json!({
            "epoch": r.epoch,
            "train_loss": r.train_loss,
            format!("val_hit@{}", config.train.validation_k): r.val_hit,
            format!("val_map@{}", config.train.validation_k): r.val_map,
            "wall_seconds": r.wall_seconds,
        });
        if let Err(e) = writeln!(log_file, "{line}") {
            write_err.get_or_insert(e);
        }
        progress(r);
    })?;
    if let Some(e) = write_err {
        return Err(Error::io(&log_path, e));
    }
    log_file.flush().map_err(|e| Error::io(&log_path, e))?;
    config.dir("checkpoints")?;
    checkpoint::save(&outcome.model, checkpoint_path)?;
    Ok(TrainSummary {
        model: outcome.model,
        best_epoch: outcome.best_epoch,
        log: outcome.log,
    })
}

pub fn cmd_train(config: &RunConfig, progress: &mut dyn FnMut(&EpochRecord)) -> Result<TrainSummary> {
    config.validate()?;
    let split = load_split(config)?;
    config.snapshot()?;
    train_variant(
        config,
        &split,
        config.model.variant,
        &config.checkpoint_path(),
        "train.jsonl",
        progress,
    )
}

fn eval_options(config: &RunConfig) -> EvalOptions {
    EvalOptions {
        ks: config.eval.ks.clone(),
        exclude_history: config.eval.exclude_history,
        retain_top: false,
    }
}

/// One JSON line per (k, metric).
pub fn report_records(report: &RankingReport, split: &str, variant: Variant) -> Vec<serde_json::Value> {
    let mut out = Vec::new();
    for row in &report.rows {
        for (metric, value) in [("hit", row.hit), ("map", row.map), ("ap", row.ap)] {
            out.push(json!({
                "split": split,
                "variant": variant.name(),
                "k": row.k,
                "metric": metric,
                "value": value,
                "instances": report.instances,
            }));
        }
    }
    out
}

pub fn cmd_eval(config: &RunConfig, checkpoint_path: Option<&Path>) -> Result<RankingReport> {
    config.validate()?;
    let split = load_split(config)?;
    let path = checkpoint_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| config.checkpoint_path());
    let model = checkpoint::load(&path)?;
    checkpoint::check_compatible(&model, &split)?;
    let portion = Portion::parse(&config.eval.split)?;
    let report = evaluate(&model, split.portion(portion), &eval_options(config))?;
    let reports = config.dir("reports")?;
    let variant = model.config().variant;
    let header = format!("split: {}\nvariant: {}\n", portion.name(), variant.label());
    write_file(&reports.join("eval.txt"), (header + &report.table()).as_bytes())?;
    write_file(
        &reports.join("eval.jsonl"),
        jsonl(&report_records(&report, portion.name(), variant)).as_bytes(),
    )?;
    Ok(report)
}

#[derive(Debug)]
pub struct AblationRow {
    pub variant: Variant,
    pub best_epoch: usize,
    pub report: RankingReport,
}

/// Variants as rows, (metric, k) as columns.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let Some(first) = rows.first() else {
        return String::new();
    };
    let mut s = format!("{:<12}", "variant");
    for r in &first.report.rows {
        s.push_str(&format!(
            "  {:>9}  {:>9}  {:>9}",
            format!("hit@{}", r.k),
            format!("map@{}", r.k),
            format!("ap@{}", r.k)
        ));
    }
    s.push('\n');
    for row in rows {
        s.push_str(&format!("{:<12}", row.variant.label()));
        for r in &row.report.rows {
            s.push_str(&format!("  {:>9.4}  {:>9.4}  {:>9.4}", r.hit, r.map, r.ap));
        }
        s.push('\n');
    }
    s
}

pub fn cmd_ablate(config: &RunConfig, progress: &mut dyn FnMut(Variant, &EpochRecord)) -> Result<Vec<AblationRow>> {
    config.validate()?;
    let split = load_split(config)?;
    config.snapshot()?;
    let portion = Portion::parse(&config.eval.split)?;
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for &variant in &config.ablate.variants {
        let ckpt = config
            .output_dir
            .join("checkpoints")
            .join(format!("ablate-{}.ckpt", variant.name()));
        let summary = train_variant(
            config,
            &split,
            variant,
            &ckpt,
            &format!("ablate-{}.jsonl", variant.name()),
            &mut |r| progress(variant, r),
        )?;
        let report = evaluate(&summary.model, split.portion(portion), &eval_options(config))?;
        records.extend(report_records(&report, portion.name(), variant));
        rows.push(AblationRow {
            variant,
            best_epoch: summary.best_epoch,
            report,
        });
    }
    let reports = config.dir("reports")?;
    write_file(&reports.join("ablation.txt"), ablation_table(&rows).as_bytes())?;
    write_file(&reports.join("ablation.jsonl"), jsonl(&records).as_bytes())?;
    Ok(rows)
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Instances picked by the `[inspect]` section.
pub fn select_instances<'a>(
    split: &'a DatasetSplit,
    inspect: &InspectSection,
) -> Result<(Portion, Vec<(usize, &'a TrainingInstance)>)> {
    let portion = Portion::parse(inspect.split.as_deref().unwrap_or("test"))?;
    let user = match &inspect.user {
        Some(label) => Some(
            split
                .user_labels
                .iter()
                .position(|l| l == label)
                .ok_or_else(|| Error::Lookup(format!("no user labelled {label:?}")))?,
        ),
        None => None,
    };
    let picked: Vec<(usize, &TrainingInstance)> = split
        .portion(portion)
        .iter()
        .enumerate()
        .filter(|(i, inst)| user.is_none_or(|u| inst.user == u) && inspect.index.is_none_or(|k| k == *i))
        .collect();
    if picked.is_empty() {
        return Err(Error::Lookup(format!(
            "no {} instance matches user={:?} index={:?}",
            portion.name(),
            inspect.user,
            inspect.index
        )));
    }
    let picked = if inspect.user.is_none() && inspect.index.is_none() {
        picked.into_iter().take(1).collect()
    } else {
        picked
    };
    Ok((portion, picked))
}

/// Writes the inspection CSVs and returns their paths.
pub fn cmd_inspect(config: &RunConfig, checkpoint_path: Option<&Path>) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let split = load_split(config)?;
    let path = checkpoint_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| config.checkpoint_path());
    let model = checkpoint::load(&path)?;
    checkpoint::check_compatible(&model, &split)?;
    let (portion, picked) = select_instances(&split, &config.inspect)?;
    let dir = config.dir("inspect")?;
    let mut written = Vec::new();
    let c = model.config().lag_buckets;
    for (index, inst) in picked {
        let stem = format!(
            "user-{}_{}-{}",
            sanitize(&split.user_labels[inst.user]),
            portion.name(),
            index
        );
        let ins = export_inspection(&model, inst)?;
        let mut emit = |name: String, body: Vec<u8>| -> Result<()> {
            let p = dir.join(name);
            write_file(&p, &body)?;
            written.push(p);
            Ok(())
        };
        for (b, att) in ins.attention.iter().enumerate() {
            let mut buf = Vec::new();
            write_attention_csv(att, &mut buf).expect("in-memory write");
            emit(format!("{stem}_attention_block{b}.csv"), buf)?;
        }
        let mut buf = Vec::new();
        write_pool_csv(&ins.pool_weights, &mut buf).expect("in-memory write");
        emit(format!("{stem}_pool.csv"), buf)?;
        if let Some(rows) = &ins.gate {
            let mut buf = Vec::new();
            write_gate_csv(rows, &mut buf).expect("in-memory write");
            emit(format!("{stem}_gate_delta1-{c}.csv"), buf)?;
        }
    }
    Ok(written)
}

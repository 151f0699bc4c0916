//! Interaction logs to padded training instances.
//!
//! Pipeline: parse delimiter-separated `(user, item, timestamp)` rows,
//! group and time-sort per user, cut sessions wherever the gap between
//! successive interactions exceeds a threshold, slide a window of `T + 1`
//! sessions over each user's sequence, discretize the lag before each
//! target session, split per user into train/validation/test, and pad
//! every session to the longest training session.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub timestamp: i64,
}

/// Column layout of a raw interaction file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FormatDescriptor {
    pub delimiter: char,
    pub has_header: bool,
    pub user_column: usize,
    pub item_column: usize,
    pub timestamp_column: usize,
}

impl Default for FormatDescriptor {
    fn default() -> Self {
        Self {
            delimiter: ',',
            has_header: false,
            user_column: 0,
            item_column: 1,
            timestamp_column: 2,
        }
    }
}

/// Parsed interactions with dense ids and the tables mapping them back to
/// the raw labels (in order of first appearance).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InteractionLog {
    pub interactions: Vec<Interaction>,
    pub user_labels: Vec<String>,
    pub item_labels: Vec<String>,
}

impl InteractionLog {
    pub fn user_count(&self) -> usize {
        self.user_labels.len()
    }

    pub fn item_count(&self) -> usize {
        self.item_labels.len()
    }

    /// Interactions grouped by user and stably sorted by timestamp.
    pub fn by_user(&self) -> Vec<Vec<Interaction>> {
        let mut out = vec![Vec::new(); self.user_count()];
        for &i in &self.interactions {
            out[i.user].push(i);
        }
        for seq in &mut out {
            seq.sort_by_key(|i| i.timestamp);
        }
        out
    }
}

#[derive(Default)]
struct IdTable {
    ids: HashMap<String, usize>,
    labels: Vec<String>,
}

impl IdTable {
    fn intern(&mut self, label: &str) -> usize {
        if let Some(&id) = self.ids.get(label) {
            return id;
        }
        let id = self.labels.len();
        self.ids.insert(label.to_string(), id);
        self.labels.push(label.to_string());
        id
    }
}

pub fn parse_interactions<R: Read>(source: R, format: &FormatDescriptor) -> Result<InteractionLog> {
    if !format.delimiter.is_ascii() {
        return Err(Error::Config(format!(
            "delimiter {:?} is not a single-byte character",
            format.delimiter
        )));
    }
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(format.delimiter as u8)
        .has_headers(format.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let needed = format.user_column.max(format.item_column).max(format.timestamp_column) + 1;
    let (mut users, mut items) = (IdTable::default(), IdTable::default());
    let mut interactions = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() < needed {
            return Err(Error::Parse {
                line,
                message: format!("expected at least {needed} fields, found {}", record.len()),
            });
        }
        let (user, item, ts) = (
            &record[format.user_column],
            &record[format.item_column],
            &record[format.timestamp_column],
        );
        for label in [user, item] {
            if label.contains(['\t', '\n', '\r']) {
                return Err(Error::Parse {
                    line,
                    message: format!("id {label:?} contains a tab or line break"),
                });
            }
        }
        let timestamp = ts.parse::<i64>().map_err(|_| Error::Parse {
            line,
            message: format!("timestamp {ts:?} is not an integer number of seconds"),
        })?;
        interactions.push(Interaction {
            user: users.intern(user),
            item: items.intern(item),
            timestamp,
        });
    }
    Ok(InteractionLog {
        interactions,
        user_labels: users.labels,
        item_labels: items.labels,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Session {
    pub items: Vec<usize>,
    pub start_ts: i64,
    pub end_ts: i64,
}

/// Cuts one user's time-sorted interactions into sessions. A new session
/// starts exactly when the gap to the previous interaction exceeds
/// `threshold_seconds`.
pub fn split_sessions(interactions: &[Interaction], threshold_seconds: i64) -> Result<Vec<Session>> {
    if threshold_seconds <= 0 {
        return Err(Error::Contract(format!(
            "session threshold must be positive, got {threshold_seconds}"
        )));
    }
    let mut sessions: Vec<Session> = Vec::new();
    let mut prev: Option<i64> = None;
    for i in interactions {
        match (prev, sessions.last_mut()) {
            (Some(p), _) if i.timestamp < p => {
                return Err(Error::Contract("interactions must be sorted by timestamp".into()));
            }
            (Some(p), Some(current)) if i.timestamp - p <= threshold_seconds => {
                current.items.push(i.item);
                current.end_ts = i.timestamp;
            }
            _ => sessions.push(Session {
                items: vec![i.item],
                start_ts: i.timestamp,
                end_ts: i.timestamp,
            }),
        }
        prev = Some(i.timestamp);
    }
    Ok(sessions)
}

/// Smallest strictly positive gap between successive interactions.
pub fn min_positive_gap(interactions: &[Interaction]) -> Option<i64> {
    interactions
        .windows(2)
        .map(|w| w[1].timestamp - w[0].timestamp)
        .filter(|&g| g > 0)
        .min()
}

/// `T` input sessions and the target session that follows them.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionWindow<'a> {
    pub inputs: Vec<&'a Session>,
    pub target: &'a Session,
}

/// Width-`T + 1` windows with stride 1. Sequences of `T` or fewer
/// sessions are left-padded with their first session. Returns `None`
/// for users with fewer than two sessions.
pub fn window_instances(sessions: &[Session], t: usize) -> Option<Vec<SessionWindow<'_>>> {
    if sessions.len() < 2 || t == 0 {
        return None;
    }
    if sessions.len() <= t {
        let pad = t + 1 - sessions.len();
        let mut inputs: Vec<&Session> = std::iter::repeat_n(&sessions[0], pad).collect();
        inputs.extend(&sessions[..sessions.len() - 1]);
        return Some(vec![SessionWindow {
            inputs,
            target: &sessions[sessions.len() - 1],
        }]);
    }
    Some(
        sessions
            .windows(t + 1)
            .map(|w| SessionWindow {
                inputs: w[..t].iter().collect(),
                target: &w[t],
            })
            .collect(),
    )
}

/// Repeats the final item until the session has `m` items.
pub fn pad_session(items: &[usize], m: usize) -> Result<Vec<usize>> {
    let Some(&last) = items.last() else {
        return Err(Error::Contract("cannot pad an empty session".into()));
    };
    if items.len() > m {
        return Err(Error::Contract(format!(
            "session of {} items exceeds the padded length {m}",
            items.len()
        )));
    }
    let mut out = items.to_vec();
    out.resize(m, last);
    Ok(out)
}

/// Like [`pad_session`], but sessions longer than `m` keep their last
/// `m` items. Used for evaluation instances whose sessions are longer
/// than any training session.
pub fn fit_session(items: &[usize], m: usize) -> Result<Vec<usize>> {
    let start = items.len().saturating_sub(m);
    pad_session(&items[start..], m)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimeLag {
    pub seconds: i64,
    /// Discretized lag in `[1, max_delta]`.
    pub delta: usize,
}

/// `delta = clamp(ceil(lag / min_gap), 1, max_delta)`.
pub fn discretize_lag(lag_seconds: i64, min_gap: i64, max_delta: usize) -> usize {
    debug_assert!(lag_seconds >= 0 && min_gap > 0 && max_delta >= 1);
    let steps = lag_seconds.div_euclid(min_gap) + i64::from(lag_seconds.rem_euclid(min_gap) != 0);
    (steps.max(1) as u64).min(max_delta as u64) as usize
}

pub fn compute_time_lag(last_input_ts: i64, target_start_ts: i64, min_gap: i64, max_delta: usize) -> Result<TimeLag> {
    let seconds = target_start_ts - last_input_ts;
    if seconds < 0 {
        return Err(Error::DataOrdering { lag_seconds: seconds });
    }
    if min_gap <= 0 || max_delta == 0 {
        return Err(Error::Contract(format!(
            "lag discretization needs a positive minimum gap and bucket count, got {min_gap} and {max_delta}"
        )));
    }
    Ok(TimeLag {
        seconds,
        delta: discretize_lag(seconds, min_gap, max_delta),
    })
}

/// One supervision unit: `T` input sessions, the target item set, and the
/// lag before the target session.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingInstance {
    pub user: usize,
    pub sessions: Vec<Vec<usize>>,
    /// Distinct target items, ascending.
    pub targets: Vec<usize>,
    pub lag_seconds: i64,
    pub delta: usize,
}

impl TrainingInstance {
    fn from_window(user: usize, window: &SessionWindow<'_>, min_gap: i64, max_delta: usize) -> Result<Self> {
        let last = window.inputs.last().expect("windows have at least one input");
        let lag = compute_time_lag(last.end_ts, window.target.start_ts, min_gap, max_delta)?;
        let mut targets = window.target.items.clone();
        targets.sort_unstable();
        targets.dedup();
        Ok(Self {
            user,
            sessions: window.inputs.iter().map(|s| s.items.clone()).collect(),
            targets,
            lag_seconds: lag.seconds,
            delta: lag.delta,
        })
    }

    pub fn max_session_len(&self) -> usize {
        self.sessions.iter().map(Vec::len).max().unwrap_or(0)
    }
}

/// Draws one negative per target item, uniformly from the items outside
/// the target set (with replacement).
pub fn sample_negatives<R: Rng + ?Sized>(targets: &[usize], item_count: usize, rng: &mut R) -> Result<Vec<usize>> {
    let mut sorted = targets.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if item_count <= sorted.len() {
        return Err(Error::Contract(format!(
            "cannot sample negatives: all {item_count} items are targets"
        )));
    }
    let free = item_count - sorted.len();
    Ok(targets
        .iter()
        .map(|_| {
            // k-th free item, skipping the sorted targets
            let mut k = rng.random_range(0..free);
            for &t in &sorted {
                if t <= k {
                    k += 1;
                } else {
                    break;
                }
            }
            k
        })
        .collect())
}

/// Split sizes for `n` instances by largest remainder. Users with fewer
/// than three instances fill train first, then test; with three or more
/// every split gets at least one instance.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    match n {
        0 => return [0, 0, 0],
        1 => return [1, 0, 0],
        2 => return [1, 0, 1],
        _ => {}
    }
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes: [usize; 3] = [0; 3];
    for (s, e) in sizes.iter_mut().zip(&exact) {
        *s = e.floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let assigned: usize = sizes.iter().sum();
    for &i in order.iter().cycle().take(n.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    for i in 0..3 {
        if sizes[i] == 0 {
            let donor = (0..3).max_by_key(|&j| (sizes[j], std::cmp::Reverse(j))).unwrap();
            sizes[donor] -= 1;
            sizes[i] += 1;
        }
    }
    sizes
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<TrainingInstance>,
    pub validation: Vec<TrainingInstance>,
    pub test: Vec<TrainingInstance>,
}

/// Per-user random partition by `ratios`. The user's shuffle is seeded
/// with `seed ^ user`, so the result does not depend on processing order.
pub fn split_dataset(instances: Vec<TrainingInstance>, ratios: [f64; 3], seed: u64) -> Result<Splits> {
    validate_ratios(ratios)?;
    let users = instances.iter().map(|i| i.user + 1).max().unwrap_or(0);
    let mut per_user: Vec<Vec<TrainingInstance>> = vec![Vec::new(); users];
    for inst in instances {
        per_user[inst.user].push(inst);
    }
    let mut splits = Splits::default();
    for (user, mut insts) in per_user.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ user as u64);
        insts.shuffle(&mut rng);
        let [n_train, n_val, _] = split_sizes(insts.len(), ratios);
        let mut rest = insts.into_iter();
        splits.train.extend(rest.by_ref().take(n_train));
        splits.validation.extend(rest.by_ref().take(n_val));
        splits.test.extend(rest);
    }
    Ok(splits)
}

pub fn validate_ratios(ratios: [f64; 3]) -> Result<()> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must be in [0,1] and sum to 1, got {ratios:?}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestConfig {
    pub session_threshold_seconds: i64,
    pub sessions_per_instance: usize,
    pub lag_buckets: usize,
    pub split_ratios: [f64; 3],
    pub seed: u64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            session_threshold_seconds: 2 * 3600,
            sessions_per_instance: 4,
            lag_buckets: 128,
            split_ratios: [0.7, 0.1, 0.2],
            seed: 42,
        }
    }
}

/// Dataset statistics in the layout of a dataset summary table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IngestReport {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub sessions: usize,
    pub avg_sessions_per_user: f64,
    pub avg_session_length: f64,
    pub density: f64,
    pub skipped_users: usize,
    pub instances: usize,
    pub train_instances: usize,
    pub validation_instances: usize,
    pub test_instances: usize,
    pub max_session_length: usize,
}

impl std::fmt::Display for IngestReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "#users                  {}", self.users)?;
        writeln!(f, "#items                  {}", self.items)?;
        writeln!(f, "#interactions           {}", self.interactions)?;
        writeln!(f, "#sessions               {}", self.sessions)?;
        writeln!(f, "avg #sessions per user  {:.2}", self.avg_sessions_per_user)?;
        writeln!(f, "avg length per session  {:.2}", self.avg_session_length)?;
        writeln!(f, "density                 {:.4}", self.density)?;
        writeln!(f, "skipped users (<2 sess) {}", self.skipped_users)?;
        writeln!(
            f,
            "instances               {} (train {}, validation {}, test {})",
            self.instances, self.train_instances, self.validation_instances, self.test_instances
        )?;
        write!(f, "max session length m    {}", self.max_session_length)
    }
}

/// Padded instances plus the header describing how they were built.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<TrainingInstance>,
    pub validation: Vec<TrainingInstance>,
    pub test: Vec<TrainingInstance>,
    pub user_labels: Vec<String>,
    pub item_labels: Vec<String>,
    pub sessions_per_instance: usize,
    pub max_session_length: usize,
    pub lag_buckets: usize,
    pub session_threshold_seconds: i64,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Portion {
    Train,
    Validation,
    Test,
}

impl Portion {
    pub fn name(self) -> &'static str {
        match self {
            Portion::Train => "train",
            Portion::Validation => "validation",
            Portion::Test => "test",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "train" => Ok(Portion::Train),
            "validation" => Ok(Portion::Validation),
            "test" => Ok(Portion::Test),
            other => Err(Error::Config(format!(
                "unknown split {other:?}; expected train, validation or test"
            ))),
        }
    }
}

impl DatasetSplit {
    pub fn user_count(&self) -> usize {
        self.user_labels.len()
    }

    pub fn item_count(&self) -> usize {
        self.item_labels.len()
    }

    pub fn portion(&self, p: Portion) -> &[TrainingInstance] {
        match p {
            Portion::Train => &self.train,
            Portion::Validation => &self.validation,
            Portion::Test => &self.test,
        }
    }

    pub fn instance_count(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }
}

/// Runs the full ingestion pipeline on a parsed log.
pub fn build_dataset(log: &InteractionLog, config: &IngestConfig) -> Result<(DatasetSplit, IngestReport)> {
    if config.sessions_per_instance == 0 {
        return Err(Error::Config("sessions_per_instance must be at least 1".into()));
    }
    if config.lag_buckets == 0 {
        return Err(Error::Config("lag_buckets must be at least 1".into()));
    }
    validate_ratios(config.split_ratios)?;
    let mut instances = Vec::new();
    let (mut session_count, mut session_items, mut skipped) = (0usize, 0usize, 0usize);
    for (user, seq) in log.by_user().iter().enumerate() {
        let sessions = split_sessions(seq, config.session_threshold_seconds)?;
        session_count += sessions.len();
        session_items += sessions.iter().map(|s| s.items.len()).sum::<usize>();
        let Some(windows) = window_instances(&sessions, config.sessions_per_instance) else {
            skipped += 1;
            continue;
        };
        let min_gap = min_positive_gap(seq).expect("two sessions imply a positive gap");
        for w in &windows {
            instances.push(TrainingInstance::from_window(user, w, min_gap, config.lag_buckets)?);
        }
    }
    let total = instances.len();
    let splits = split_dataset(instances, config.split_ratios, config.seed)?;
    let m = splits
        .train
        .iter()
        .map(TrainingInstance::max_session_len)
        .max()
        .or_else(|| splits.test.iter().map(TrainingInstance::max_session_len).max())
        .unwrap_or(1)
        .max(1);
    let pad = |insts: Vec<TrainingInstance>| -> Result<Vec<TrainingInstance>> {
        insts
            .into_iter()
            .map(|mut inst| {
                inst.sessions = inst.sessions.iter().map(|s| fit_session(s, m)).collect::<Result<_>>()?;
                Ok(inst)
            })
            .collect()
    };
    let split = DatasetSplit {
        train: pad(splits.train)?,
        validation: pad(splits.validation)?,
        test: pad(splits.test)?,
        user_labels: log.user_labels.clone(),
        item_labels: log.item_labels.clone(),
        sessions_per_instance: config.sessions_per_instance,
        max_session_length: m,
        lag_buckets: config.lag_buckets,
        session_threshold_seconds: config.session_threshold_seconds,
        seed: config.seed,
    };
    let (n, items) = (log.user_count(), log.item_count());
    let report = IngestReport {
        users: n,
        items,
        interactions: log.interactions.len(),
        sessions: session_count,
        avg_sessions_per_user: ratio(session_count, n),
        avg_session_length: ratio(session_items, session_count),
        density: ratio(log.interactions.len(), n * items),
        skipped_users: skipped,
        instances: total,
        train_instances: split.train.len(),
        validation_instances: split.validation.len(),
        test_instances: split.test.len(),
        max_session_length: m,
    };
    Ok((split, report))
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

const INSTANCE_MAGIC: &str = "tlsrec-instances";
const INSTANCE_VERSION: u32 = 1;

fn join_ids(ids: &[usize], sep: char) -> String {
    let mut s = String::new();
    for (k, id) in ids.iter().enumerate() {
        if k > 0 {
            s.push(sep);
        }
        write!(s, "{id}").unwrap();
    }
    s
}

/// Header lines of the instance file, also echoed into run directories.
pub fn instance_header(split: &DatasetSplit) -> String {
    format!(
        "{INSTANCE_MAGIC}\t{INSTANCE_VERSION}\n\
         users\t{}\nitems\t{}\nsessions_per_instance\t{}\nmax_session_length\t{}\n\
         lag_buckets\t{}\nsession_threshold_seconds\t{}\nseed\t{}\n",
        split.user_count(),
        split.item_count(),
        split.sessions_per_instance,
        split.max_session_length,
        split.lag_buckets,
        split.session_threshold_seconds,
        split.seed
    )
}

/// Writes the tab-separated instance file: header, id tables, then one
/// line per instance (`portion user delta lag sessions targets`, sessions
/// separated by `;`, items by `,`).
pub fn write_instances<W: Write>(split: &DatasetSplit, mut out: W) -> std::io::Result<()> {
    out.write_all(instance_header(split).as_bytes())?;
    for (i, l) in split.user_labels.iter().enumerate() {
        writeln!(out, "user\t{i}\t{l}")?;
    }
    for (i, l) in split.item_labels.iter().enumerate() {
        writeln!(out, "item\t{i}\t{l}")?;
    }
    for p in [Portion::Train, Portion::Validation, Portion::Test] {
        for inst in split.portion(p) {
            let sessions: Vec<String> = inst.sessions.iter().map(|s| join_ids(s, ',')).collect();
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                p.name(),
                inst.user,
                inst.delta,
                inst.lag_seconds,
                sessions.join(";"),
                join_ids(&inst.targets, ',')
            )?;
        }
    }
    Ok(())
}

pub fn read_instances<R: BufRead>(input: R) -> Result<DatasetSplit> {
    let mut lines = input.lines().enumerate();
    let mut next = |what: &str| -> Result<(u64, String)> {
        match lines.next() {
            Some((n, Ok(l))) => Ok((n as u64 + 1, l)),
            Some((n, Err(e))) => Err(Error::Parse {
                line: n as u64 + 1,
                message: e.to_string(),
            }),
            None => Err(Error::Format(format!("instance file ends before {what}"))),
        }
    };
    let (_, magic) = next("the header")?;
    if magic != format!("{INSTANCE_MAGIC}\t{INSTANCE_VERSION}") {
        return Err(Error::Format(format!(
            "not a version {INSTANCE_VERSION} instance file: {magic:?}"
        )));
    }
    let mut header = |key: &str| -> Result<i64> {
        let (line, l) = next(key)?;
        let value = l
            .strip_prefix(key)
            .and_then(|r| r.strip_prefix('\t'))
            .and_then(|v| v.parse::<i64>().ok());
        value.ok_or_else(|| Error::Parse {
            line,
            message: format!("expected header field {key}"),
        })
    };
    let users = header("users")? as usize;
    let items = header("items")? as usize;
    let t = header("sessions_per_instance")? as usize;
    let m = header("max_session_length")? as usize;
    let c = header("lag_buckets")? as usize;
    let threshold = header("session_threshold_seconds")?;
    let seed = header("seed")? as u64;

    let mut split = DatasetSplit {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        user_labels: Vec::with_capacity(users),
        item_labels: Vec::with_capacity(items),
        sessions_per_instance: t,
        max_session_length: m,
        lag_buckets: c,
        session_threshold_seconds: threshold,
        seed,
    };
    let parse_ids = |s: &str, line: u64, bound: usize| -> Result<Vec<usize>> {
        s.split(',')
            .map(|v| match v.parse::<usize>() {
                Ok(id) if id < bound => Ok(id),
                _ => Err(Error::Parse {
                    line,
                    message: format!("bad id {v:?}"),
                }),
            })
            .collect()
    };
    let bad = |line: u64, message: &str| Error::Parse {
        line,
        message: message.to_string(),
    };
    loop {
        let (line, l) = match next("") {
            Ok(v) => v,
            Err(Error::Format(_)) => break,
            Err(e) => return Err(e),
        };
        let fields: Vec<&str> = l.split('\t').collect();
        match fields[0] {
            "user" | "item" if fields.len() == 3 => {
                let labels = if fields[0] == "user" {
                    &mut split.user_labels
                } else {
                    &mut split.item_labels
                };
                if fields[1].parse::<usize>().ok() != Some(labels.len()) {
                    return Err(bad(line, "id tables must be dense and in order"));
                }
                labels.push(fields[2].to_string());
            }
            name @ ("train" | "validation" | "test") if fields.len() == 6 => {
                let user = fields[1].parse::<usize>().ok().filter(|&u| u < users);
                let delta = fields[2].parse::<usize>().ok().filter(|&d| (1..=c).contains(&d));
                let lag = fields[3].parse::<i64>().ok();
                let (Some(user), Some(delta), Some(lag_seconds)) = (user, delta, lag) else {
                    return Err(bad(line, "bad user, delta or lag"));
                };
                let sessions = fields[4]
                    .split(';')
                    .map(|s| parse_ids(s, line, items))
                    .collect::<Result<Vec<_>>>()?;
                if sessions.len() != t || sessions.iter().any(|s| s.len() != m) {
                    return Err(bad(line, "instance shape does not match the header"));
                }
                let inst = TrainingInstance {
                    user,
                    sessions,
                    targets: parse_ids(fields[5], line, items)?,
                    lag_seconds,
                    delta,
                };
                match Portion::parse(name)? {
                    Portion::Train => split.train.push(inst),
                    Portion::Validation => split.validation.push(inst),
                    Portion::Test => split.test.push(inst),
                }
            }
            _ => return Err(bad(line, "unrecognized record")),
        }
    }
    if split.user_labels.len() != users || split.item_labels.len() != items {
        return Err(Error::Format("id tables do not match the header counts".into()));
    }
    Ok(split)
}

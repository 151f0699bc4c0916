//! Generators for small interaction logs with planted structure. Both
//! produce `user,item,timestamp` CSV text that goes through the regular
//! ingestion path.

use std::fmt::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{parse_interactions, FormatDescriptor, IngestConfig, InteractionLog};
use crate::error::Result;

const DAY: i64 = 86_400;

/// Four users, twenty items. Each user cycles through five two-item
/// sessions, so the next session is a function of the current one.
pub fn memorization_csv(sessions_per_user: usize) -> String {
    let mut out = String::new();
    for u in 0..4usize {
        for k in 0..sessions_per_user {
            let ts = 1_000_000 + k as i64 * DAY;
            let a = 5 * u + k % 5;
            let b = 5 * u + (k + 1) % 5;
            writeln!(out, "u{u},i{a},{ts}").unwrap();
            writeln!(out, "u{u},i{b},{}", ts + 60).unwrap();
        }
    }
    out
}

/// Ingestion settings matching [`memorization_csv`].
pub fn memorization_ingest(seed: u64) -> IngestConfig {
    IngestConfig {
        session_threshold_seconds: 3600,
        sessions_per_instance: 3,
        lag_buckets: 4,
        split_ratios: [0.7, 0.1, 0.2],
        seed,
    }
}

/// Settings of the lag-dependent corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateCorpus {
    pub users: usize,
    pub clusters: usize,
    pub items_per_cluster: usize,
    pub sessions_per_user: usize,
    pub session_len: usize,
    /// Chance that a session following a home session is an excursion.
    pub excursion_rate: f64,
    /// Gap before a session that continues the previous one.
    pub short_gap_seconds: i64,
    /// Gap before a session that returns home.
    pub long_gap_seconds: i64,
    pub seed: u64,
}

impl Default for GateCorpus {
    fn default() -> Self {
        Self {
            users: 120,
            clusters: 10,
            items_per_cluster: 30,
            sessions_per_user: 24,
            session_len: 3,
            excursion_rate: 0.5,
            short_gap_seconds: 3600,
            long_gap_seconds: 40 * 3600,
            seed: 7,
        }
    }
}

impl GateCorpus {
    /// Items are grouped into clusters and every user has a home cluster.
    /// Sessions are either home sessions or excursions into another
    /// cluster. After an excursion the next session continues it when the
    /// gap is short and goes back home when the gap is long, so the
    /// target depends on the last session or on the long-run history
    /// according to the time lag alone.
    ///
    /// Items of one session share a timestamp, which makes the smallest
    /// positive gap of every user the short gap: short lags fall in
    /// bucket 1 and long lags in bucket `long_gap / short_gap` (clamped).
    pub fn csv(&self) -> String {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = String::new();
        for u in 0..self.users {
            let home = u % self.clusters;
            let mut ts = 1_000_000i64;
            let mut cluster = home;
            for k in 0..self.sessions_per_user {
                if k > 0 {
                    // the second session always follows a short gap so the
                    // user's smallest gap is the short one
                    let short = k == 1 || rng.random_bool(0.5);
                    ts += if short {
                        self.short_gap_seconds
                    } else {
                        self.long_gap_seconds
                    };
                    cluster = if cluster != home {
                        if short {
                            cluster
                        } else {
                            home
                        }
                    } else if rng.random_bool(self.excursion_rate) {
                        let other = rng.random_range(0..self.clusters - 1);
                        if other >= home {
                            other + 1
                        } else {
                            other
                        }
                    } else {
                        home
                    };
                }
                let mut picked: Vec<usize> = Vec::with_capacity(self.session_len);
                while picked.len() < self.session_len.min(self.items_per_cluster) {
                    let i = rng.random_range(0..self.items_per_cluster);
                    if !picked.contains(&i) {
                        picked.push(i);
                    }
                }
                for i in picked {
                    writeln!(out, "u{u},c{cluster}i{i},{ts}").unwrap();
                }
            }
        }
        out
    }

    /// Lag bucket of the long gap.
    pub fn long_bucket(&self) -> usize {
        (self.long_gap_seconds as f64 / self.short_gap_seconds as f64).ceil() as usize
    }

    /// Ingestion settings: sessions split below the short gap and `C`
    /// equal to the long-gap bucket.
    pub fn ingest(&self, sessions_per_instance: usize, split_seed: u64) -> IngestConfig {
        IngestConfig {
            session_threshold_seconds: self.short_gap_seconds / 2,
            sessions_per_instance,
            lag_buckets: self.long_bucket(),
            split_ratios: [0.7, 0.1, 0.2],
            seed: split_seed,
        }
    }
}

pub fn parse_csv(csv: &str) -> Result<InteractionLog> {
    parse_interactions(csv.as_bytes(), &FormatDescriptor::default())
}

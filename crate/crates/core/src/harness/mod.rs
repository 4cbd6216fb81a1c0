//! Benchmark suite: point-to-point latency, concurrent-dispatch speedup,
//! broadcast memory, and end-to-end federated rounds with per-state timing.
//!
//! Every runner builds its own endpoints on loopback, shapes the links with
//! [`netem`](crate::netem) and tears everything down before returning.
//! Payload sizes, bandwidths and serializer throughput are all multiplied by
//! the run's `scale`, so timings stay comparable to the unscaled setting
//! while the payloads fit on a desk machine.
//!
//! # Report schema
//!
//! Reports serialize to JSON as a whole, and to CSV with the header
//! `backend,tier,profile,metric,value,unit,rep`. The first CSV rows carry
//! metadata (`meta.*` metrics): tool version, seed, scale, store kind and
//! the fully resolved configuration as a JSON string. `rep` is empty for
//! aggregate rows.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::ser::SerializeMap;
use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::message::{ParticipantId, Payload};
use crate::netem::{sleep_precise, NetemError};
use crate::store::StoreError;
use crate::transport::{Delivery, TransportError};

mod bench;
mod e2e;
pub mod oracle;
mod report;

pub use bench::{
    run_concurrency_sweep, run_memory_probe, run_p2p, BenchSetup, MemoryPoint, MemoryReport, P2PReport, P2PSample,
    SpeedupReport, DEFAULT_SCALE,
};
pub use e2e::{run_e2e, ClientRecord, E2EReport, RoundConfig};
pub use report::{write_csv, write_json, Metrics, Report, ReportMeta, Row, Summary, CSV_HEADER};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("fedavg needs at least one update")]
    NoUpdates,
    #[error("update {index} has {actual} parameters, expected {expected}")]
    LengthMismatch {
        index: usize,
        expected: usize,
        actual: usize,
    },
    #[error("all {reps} repetitions failed; last error: {last}")]
    AllFailed { reps: u32, last: TransportError },
    #[error("round {round}: {received} of {expected} updates arrived, quorum is {quorum}")]
    QuorumNotMet {
        round: u32,
        received: usize,
        expected: usize,
        quorum: usize,
    },
    #[error("worker {0} panicked")]
    WorkerPanicked(ParticipantId),
    #[error("report output: {0}")]
    Output(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Netem(#[from] NetemError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Where a participant's wall-clock time goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum State {
    Communication,
    Serialization,
    /// Host/device copies. There is no device path here, so this stays zero.
    Migration,
    Waiting,
    Training,
    Aggregation,
}

impl State {
    pub const ALL: [State; 6] = [
        State::Communication,
        State::Serialization,
        State::Migration,
        State::Waiting,
        State::Training,
        State::Aggregation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            State::Communication => "communication",
            State::Serialization => "serialization",
            State::Migration => "migration",
            State::Waiting => "waiting",
            State::Training => "training",
            State::Aggregation => "aggregation",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Per-participant split of wall-clock time into [`State`]s.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TimingLedger {
    states: [Duration; 6],
    pub total_wall_clock: Duration,
}

impl TimingLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, state: State, d: Duration) {
        self.states[state.index()] += d;
    }

    pub fn get(&self, state: State) -> Duration {
        self.states[state.index()]
    }

    pub fn sum(&self) -> Duration {
        self.states.iter().sum()
    }

    /// State sum over wall clock; 1.0 means every instant is accounted for.
    pub fn closure(&self) -> f64 {
        if self.total_wall_clock.is_zero() {
            return 1.0;
        }
        self.sum().as_secs_f64() / self.total_wall_clock.as_secs_f64()
    }

    /// Splits a `recv` call: waiting until the first byte, communication
    /// until the payload is complete, deserialization to the end. Any time
    /// spent queued after completion counts as waiting.
    pub fn record_delivery(&mut self, d: &Delivery) {
        let deser_start = d.delivered_at - d.t_deserialize;
        let comm_start = d.first_byte_at.max(d.called_at);
        let comm_end = d.completed_at.min(deser_start);
        let comm = comm_end.saturating_duration_since(comm_start);
        let inside = deser_start.saturating_duration_since(d.called_at);
        self.add(State::Communication, comm);
        self.add(State::Waiting, inside.saturating_sub(comm));
        self.add(State::Serialization, d.t_deserialize);
    }

    /// Element-wise mean of several ledgers.
    pub fn mean<'a>(ledgers: impl IntoIterator<Item = &'a TimingLedger>) -> TimingLedger {
        let mut out = TimingLedger::new();
        let mut n = 0u32;
        for l in ledgers {
            for s in State::ALL {
                out.add(s, l.get(s));
            }
            out.total_wall_clock += l.total_wall_clock;
            n += 1;
        }
        if n > 0 {
            for d in out.states.iter_mut() {
                *d /= n;
            }
            out.total_wall_clock /= n;
        }
        out
    }
}

/// Serialized as seconds per state plus `total_wall_clock`.
impl Serialize for TimingLedger {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(State::ALL.len() + 1))?;
        for st in State::ALL {
            m.serialize_entry(st.name(), &self.get(st).as_secs_f64())?;
        }
        m.serialize_entry("total_wall_clock", &self.total_wall_clock.as_secs_f64())?;
        m.end()
    }
}

/// Uniform-weight element-wise mean. Sums in `f64` in update order.
pub fn fedavg(updates: &[Payload]) -> Result<Payload, HarnessError> {
    let first = updates.first().ok_or(HarnessError::NoUpdates)?;
    let len = first.len();
    let mut acc = vec![0f64; len];
    for (index, u) in updates.iter().enumerate() {
        if u.len() != len {
            return Err(HarnessError::LengthMismatch {
                index,
                expected: len,
                actual: u.len(),
            });
        }
        for (a, &p) in acc.iter_mut().zip(u.params()) {
            *a += p as f64;
        }
    }
    let n = updates.len() as f64;
    Ok(Payload::new(acc.into_iter().map(|a| (a / n) as f32).collect()))
}

/// Amplitude of the per-parameter training perturbation.
pub const TRAIN_PERTURBATION: f32 = 1e-3;

/// Stand-in for local training: a seeded sleep and a seeded nudge.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainDelayModel {
    pub base: Duration,
    /// Delay varies uniformly within `base * (1 ± jitter)`.
    pub jitter: f64,
    pub seed: u64,
}

impl TrainDelayModel {
    pub fn zero(seed: u64) -> Self {
        Self {
            base: Duration::ZERO,
            jitter: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if !(0.0..=1.0).contains(&self.jitter) {
            return Err(HarnessError::Config(format!(
                "train jitter must be in [0, 1], got {}",
                self.jitter
            )));
        }
        Ok(())
    }

    fn rng(&self, round: u32, client: ParticipantId) -> ChaCha8Rng {
        let stream = (u64::from(round) << 32) | u64::from(client.0);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    /// The sleep `synthetic_train` will take for this round and client.
    pub fn delay_for(&self, round: u32, client: ParticipantId) -> Duration {
        let u: f64 = self.rng(round, client).random_range(-1.0..=1.0);
        self.base.mul_f64((1.0 + self.jitter * u).max(0.0))
    }
}

/// Sleeps per `model` and returns `p` with a deterministic zero-mean
/// perturbation, plus the time taken.
pub fn synthetic_train(p: &Payload, model: &TrainDelayModel, round: u32, client: ParticipantId) -> (Payload, Duration) {
    let t = Instant::now();
    let mut rng = model.rng(round, client);
    let u: f64 = rng.random_range(-1.0..=1.0);
    let delay = model.base.mul_f64((1.0 + model.jitter * u).max(0.0));
    let params = p
        .params()
        .iter()
        .map(|&x| x + rng.random_range(-TRAIN_PERTURBATION..TRAIN_PERTURBATION))
        .collect();
    let out = Payload::new(params);
    sleep_precise(delay.saturating_sub(t.elapsed()));
    (out, t.elapsed())
}

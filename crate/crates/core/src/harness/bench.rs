use std::time::{Duration, Instant};

use serde::Serialize;

use super::oracle::{self, Links};
use super::report::{Metrics, Report, ReportMeta, Summary};
use super::HarnessError;
use crate::message::{make_scaled_tier_payload, FlMessage, MsgType, ParticipantId, Payload, PayloadTier};
use crate::netem::{LinkProfile, Shaper};
use crate::store::Store;
use crate::transport::{BackendSpec, BroadcastMode, Endpoint, EndpointConfig, Link};

/// Desk-scale factor applied to payloads and bandwidths by default.
pub const DEFAULT_SCALE: f64 = 0.02;

/// How long a receiver waits for one message before giving up.
const RECV_TIMEOUT: Duration = Duration::from_secs(600);

/// One backend, one payload tier, one link.
#[derive(Debug, Clone)]
pub struct BenchSetup {
    /// Unscaled preset; the run scales it.
    pub backend: BackendSpec,
    pub tier: PayloadTier,
    /// Unscaled link between the participants.
    pub profile: LinkProfile,
    pub scale: f64,
    pub seed: u64,
    pub store: Store,
}

impl BenchSetup {
    pub fn new(backend: BackendSpec, tier: PayloadTier, profile: LinkProfile) -> Self {
        Self {
            backend,
            tier,
            profile,
            scale: DEFAULT_SCALE,
            seed: 0,
            store: Store::memory(),
        }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_store(mut self, store: Store) -> Self {
        self.store = store;
        self
    }

    pub fn spec(&self) -> BackendSpec {
        self.backend.with_scale(self.scale)
    }

    pub fn link(&self) -> LinkProfile {
        self.profile.with_scale(self.scale)
    }

    /// Both ends reach the store from the same region as the link.
    pub fn store_link(&self) -> LinkProfile {
        self.profile.store_link().with_scale(self.scale)
    }

    /// The `i`-th distinct payload of this run.
    pub fn payload(&self, i: u64) -> Payload {
        make_scaled_tier_payload(self.tier, self.scale, self.seed.wrapping_add(i))
    }

    pub fn payload_bytes(&self) -> u64 {
        crate::message::serialized_len_for(self.tier.scaled_param_count(self.scale))
    }

    fn validate(&self) -> Result<(), HarnessError> {
        if !(self.scale > 0.0 && self.scale <= 1.0) {
            return Err(HarnessError::Config(format!(
                "scale must be in (0, 1], got {}",
                self.scale
            )));
        }
        self.spec().validate()?;
        Ok(())
    }

    fn links(&self) -> Links {
        Links {
            link: self.link(),
            sender_store: self.store_link(),
            receiver_store: self.store_link(),
        }
    }

    fn meta(&self) -> ReportMeta {
        ReportMeta::new(
            &self.spec(),
            self.tier,
            vec![self.link(), self.store_link()],
            self.seed,
            self.scale,
            self.store.backend().kind(),
        )
    }

    fn endpoint(&self, id: u32) -> Result<Endpoint, HarnessError> {
        let cfg = EndpointConfig::with_store(self.store.client(self.store_link()));
        Ok(Endpoint::bind(ParticipantId(id), self.spec(), cfg)?)
    }

    /// A sender and `n` receivers, all links sharing one shaper.
    fn star(&self, n: usize) -> Result<Star, HarnessError> {
        let sender = self.endpoint(0)?;
        let receivers = (1..=n as u32)
            .map(|i| self.endpoint(i))
            .collect::<Result<Vec<_>, _>>()?;
        let shaper = Shaper::new(self.link());
        let links = receivers
            .iter()
            .map(|r| sender.connect(r.id(), r.addr(), &shaper))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Star {
            sender,
            receivers,
            links,
        })
    }
}

struct Star {
    sender: Endpoint,
    receivers: Vec<Endpoint>,
    links: Vec<Link>,
}

struct BroadcastRun {
    /// Start of dispatch to the last receiver holding the bytes.
    completion: Duration,
    ledger_peak: u64,
}

/// Broadcasts `p` to `n` fresh receivers and waits for all of them.
fn broadcast_once(
    setup: &BenchSetup,
    p: &Payload,
    n: usize,
    mode: BroadcastMode,
    round: u32,
) -> Result<BroadcastRun, HarnessError> {
    let star = setup.star(n)?;
    let m = FlMessage::new(
        round,
        MsgType::GlobalModel,
        ParticipantId::SERVER,
        ParticipantId::SERVER,
        p.clone(),
    );
    let t0 = Instant::now();
    let report = star.sender.broadcast(&star.links, &m, mode)?;
    if let Some(failed) = report.outcomes.into_iter().find(|o| o.result.is_err()) {
        return Err(failed.result.unwrap_err().into());
    }
    let mut last = t0;
    for r in &star.receivers {
        let d = r.recv_timeout(RECV_TIMEOUT)?;
        last = last.max(d.completed_at);
    }
    Ok(BroadcastRun {
        completion: last - t0,
        ledger_peak: report.ledger_peak,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct P2PSample {
    pub rep: u32,
    /// From `send` to the deserialized payload at the receiver.
    pub latency_s: f64,
    pub t_serialize_s: f64,
    pub t_comm_s: f64,
    pub t_deserialize_s: f64,
    pub bytes_on_wire: u64,
    pub fetch_retries: u32,
}

#[derive(Debug, Clone, Serialize)]
pub struct P2PReport {
    pub meta: ReportMeta,
    pub payload_bytes: u64,
    pub store_put: bool,
    pub samples: Vec<P2PSample>,
    pub failures: Vec<String>,
    pub latency: Summary,
    pub t_serialize: Summary,
    pub t_comm: Summary,
    pub t_deserialize: Summary,
    pub ledger_peak: u64,
    pub predicted_latency_s: f64,
}

impl Report for P2PReport {
    fn meta(&self) -> &ReportMeta {
        &self.meta
    }

    fn metrics(&self) -> Metrics {
        let mut m = Metrics::new();
        m.num("payload_bytes", self.payload_bytes as f64, "B").num(
            "store_put",
            u8::from(self.store_put) as f64,
            "bool",
        );
        self.latency.push(&mut m, "latency", "s");
        self.t_serialize.push(&mut m, "t_serialize", "s");
        self.t_comm.push(&mut m, "t_comm", "s");
        self.t_deserialize.push(&mut m, "t_deserialize", "s");
        m.num("ledger_peak", self.ledger_peak as f64, "B")
            .num("predicted_latency", self.predicted_latency_s, "s")
            .num("failures", self.failures.len() as f64, "count");
        for s in &self.samples {
            m.rep("latency", s.latency_s, "s", s.rep);
        }
        m
    }
}

/// One-way transfers of fresh payloads after one warm-up.
pub fn run_p2p(setup: &BenchSetup, reps: u32) -> Result<P2PReport, HarnessError> {
    setup.validate()?;
    if reps == 0 {
        return Err(HarnessError::Config("reps must be at least 1".into()));
    }
    let star = setup.star(1)?;
    let (tx, rx, link) = (&star.sender, &star.receivers[0], &star.links[0]);
    let mut samples = Vec::new();
    let mut failures = Vec::new();
    let mut last_err = None;
    let mut ledger_peak = 0;
    // Rep 0 is the warm-up. Fresh payloads keep the store's key cache cold.
    for rep in 0..=reps {
        let m = FlMessage::new(
            rep + 1,
            MsgType::GlobalModel,
            tx.id(),
            rx.id(),
            setup.payload(u64::from(rep)),
        );
        tx.ledger().reset_peak();
        let t0 = Instant::now();
        let outcome = tx.send(link, &m).and_then(|r| Ok((r, rx.recv_timeout(RECV_TIMEOUT)?)));
        let (receipt, d) = match outcome {
            Ok(v) => v,
            Err(e) => {
                log::warn!("p2p rep {rep} failed: {e}");
                failures.push(format!("rep {rep}: {e}"));
                last_err = Some(e);
                continue;
            }
        };
        if rep == 0 {
            continue;
        }
        ledger_peak = ledger_peak.max(tx.ledger().peak());
        let latency = d.delivered_at - t0;
        samples.push(P2PSample {
            rep,
            latency_s: latency.as_secs_f64(),
            t_serialize_s: receipt.t_serialize.as_secs_f64(),
            t_comm_s: latency
                .saturating_sub(receipt.t_serialize + d.t_deserialize)
                .as_secs_f64(),
            t_deserialize_s: d.t_deserialize.as_secs_f64(),
            bytes_on_wire: receipt.bytes_on_wire,
            fetch_retries: d.fetch_retries,
        });
    }
    if samples.is_empty() {
        return Err(HarnessError::AllFailed {
            reps,
            last: last_err.expect("no sample means a failure"),
        });
    }
    let col = |f: fn(&P2PSample) -> f64| Summary::of(&samples.iter().map(f).collect::<Vec<_>>());
    let spec = setup.spec();
    let bytes = setup.payload_bytes();
    Ok(P2PReport {
        meta: setup.meta(),
        payload_bytes: bytes,
        store_put: spec.routes_to_store(bytes),
        latency: col(|s| s.latency_s),
        t_serialize: col(|s| s.t_serialize_s),
        t_comm: col(|s| s.t_comm_s),
        t_deserialize: col(|s| s.t_deserialize_s),
        samples,
        failures,
        ledger_peak,
        predicted_latency_s: oracle::p2p_latency(&spec, bytes, &setup.links()),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SpeedupReport {
    pub meta: ReportMeta,
    pub n_messages: usize,
    pub payload_bytes: u64,
    pub sequential_s: f64,
    pub concurrent_s: f64,
    /// `sequential_s / concurrent_s`.
    pub speedup: f64,
    pub ledger_peak_sequential: u64,
    pub ledger_peak_concurrent: u64,
    pub predicted_sequential_s: f64,
    pub predicted_concurrent_s: f64,
    pub predicted_speedup: f64,
}

impl Report for SpeedupReport {
    fn meta(&self) -> &ReportMeta {
        &self.meta
    }

    fn metrics(&self) -> Metrics {
        let mut m = Metrics::new();
        m.num("messages", self.n_messages as f64, "count")
            .num("payload_bytes", self.payload_bytes as f64, "B")
            .num("sequential", self.sequential_s, "s")
            .num("concurrent", self.concurrent_s, "s")
            .num("speedup", self.speedup, "x")
            .num("ledger_peak_sequential", self.ledger_peak_sequential as f64, "B")
            .num("ledger_peak_concurrent", self.ledger_peak_concurrent as f64, "B")
            .num("predicted_speedup", self.predicted_speedup, "x");
        m
    }
}

/// Delivers the same payload to `n_messages` distinct peers, once one at a
/// time and once all at once, each on a fresh set of endpoints. Completion
/// is when the last receiver holds the bytes.
pub fn run_concurrency_sweep(setup: &BenchSetup, n_messages: usize) -> Result<SpeedupReport, HarnessError> {
    setup.validate()?;
    if n_messages < 2 {
        return Err(HarnessError::Config(format!(
            "a sweep needs at least 2 messages, got {n_messages}"
        )));
    }
    let p = setup.payload(0);
    let seq = broadcast_once(setup, &p, n_messages, BroadcastMode::Sequential, 1)?;
    let con = broadcast_once(setup, &p, n_messages, BroadcastMode::Concurrent, 2)?;
    let spec = setup.spec();
    let bytes = p.serialized_len();
    let links = setup.links();
    let pred_seq = oracle::broadcast_completion(&spec, bytes, &links, n_messages, BroadcastMode::Sequential);
    let pred_con = oracle::broadcast_completion(&spec, bytes, &links, n_messages, BroadcastMode::Concurrent);
    Ok(SpeedupReport {
        meta: setup.meta(),
        n_messages,
        payload_bytes: bytes,
        sequential_s: seq.completion.as_secs_f64(),
        concurrent_s: con.completion.as_secs_f64(),
        speedup: seq.completion.as_secs_f64() / con.completion.as_secs_f64(),
        ledger_peak_sequential: seq.ledger_peak,
        ledger_peak_concurrent: con.ledger_peak,
        predicted_sequential_s: pred_seq,
        predicted_concurrent_s: pred_con,
        predicted_speedup: pred_seq / pred_con,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct MemoryPoint {
    pub peers: usize,
    pub ledger_peak: u64,
    pub completion_s: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MemoryReport {
    pub meta: ReportMeta,
    pub payload_bytes: u64,
    pub points: Vec<MemoryPoint>,
}

impl Report for MemoryReport {
    fn meta(&self) -> &ReportMeta {
        &self.meta
    }

    fn metrics(&self) -> Metrics {
        let mut m = Metrics::new();
        m.num("payload_bytes", self.payload_bytes as f64, "B");
        for p in &self.points {
            m.num(format!("ledger_peak@{}", p.peers), p.ledger_peak as f64, "B");
        }
        m
    }
}

/// Sender ledger peak of one concurrent broadcast per peer count.
pub fn run_memory_probe(setup: &BenchSetup, peer_counts: &[usize]) -> Result<MemoryReport, HarnessError> {
    setup.validate()?;
    let p = setup.payload(0);
    let mut points = Vec::with_capacity(peer_counts.len());
    for (i, &n) in peer_counts.iter().enumerate() {
        if n == 0 {
            return Err(HarnessError::Config("peer counts must be positive".into()));
        }
        let run = broadcast_once(setup, &p, n, BroadcastMode::Concurrent, i as u32 + 1)?;
        points.push(MemoryPoint {
            peers: n,
            ledger_peak: run.ledger_peak,
            completion_s: run.completion.as_secs_f64(),
        });
    }
    Ok(MemoryReport {
        meta: setup.meta(),
        payload_bytes: p.serialized_len(),
        points,
    })
}

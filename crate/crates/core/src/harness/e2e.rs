use std::collections::BTreeMap;
use std::sync::Barrier;
use std::thread;
use std::time::{Duration, Instant};

use serde::Serialize;

use super::oracle;
use super::report::{Metrics, Report, ReportMeta};
use super::{fedavg, synthetic_train, HarnessError, State, TimingLedger, TrainDelayModel, DEFAULT_SCALE};
use crate::message::{make_scaled_tier_payload, Digest, FlMessage, MsgType, ParticipantId, Payload, PayloadTier};
use crate::netem::{lookup, LinkProfile, Shaper, REGION_PROFILES};
use crate::store::{Store, StoreStats};
use crate::transport::{BackendSpec, BroadcastMode, Endpoint, EndpointConfig, Link, TransportError};

/// Setup of an end-to-end run: one server, `n_clients` clients.
#[derive(Debug, Clone)]
pub struct RoundConfig {
    pub n_clients: usize,
    pub n_rounds: u32,
    pub tier: PayloadTier,
    /// Unscaled preset.
    pub backend: BackendSpec,
    /// Unscaled server-client link of each client, in client order.
    pub profiles: Vec<LinkProfile>,
    /// Unscaled link from the server to the store.
    pub server_store_link: LinkProfile,
    pub train: TrainDelayModel,
    pub scale: f64,
    pub seed: u64,
    pub store: Store,
    /// Longest the server waits for one update.
    pub straggler_timeout: Duration,
    /// Minimum updates per round; `None` requires every client.
    pub quorum: Option<usize>,
}

impl RoundConfig {
    /// `n_clients` clients all on `profile`.
    pub fn uniform(backend: BackendSpec, tier: PayloadTier, profile: LinkProfile, n_clients: usize) -> Self {
        Self {
            n_clients,
            n_rounds: 1,
            tier,
            backend,
            server_store_link: profile.store_link(),
            profiles: vec![profile; n_clients],
            train: TrainDelayModel::zero(0),
            scale: DEFAULT_SCALE,
            seed: 0,
            store: Store::memory(),
            straggler_timeout: Duration::from_secs(900),
            quorum: None,
        }
    }

    /// Seven clients, one per measured region, server and store in the
    /// server's own region.
    pub fn geo_distributed(backend: BackendSpec, tier: PayloadTier) -> Self {
        let profiles: Vec<LinkProfile> = REGION_PROFILES
            .iter()
            .map(|n| lookup(n).expect("builtin profile"))
            .collect();
        Self {
            server_store_link: profiles[0].store_link(),
            n_clients: profiles.len(),
            profiles,
            ..Self::uniform(backend, tier, LinkProfile::identity(), 0)
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.n_clients == 0 {
            return bad("at least one client is required".into());
        }
        if self.profiles.len() != self.n_clients {
            return bad(format!(
                "{} profiles for {} clients",
                self.profiles.len(),
                self.n_clients
            ));
        }
        if self.n_rounds == 0 {
            return bad("at least one round is required".into());
        }
        if !(self.scale > 0.0 && self.scale <= 1.0) {
            return bad(format!("scale must be in (0, 1], got {}", self.scale));
        }
        if let Some(q) = self.quorum {
            if q == 0 || q > self.n_clients {
                return bad(format!("quorum {q} outside 1..={}", self.n_clients));
            }
        }
        self.train.validate()?;
        self.backend.with_scale(self.scale).validate()?;
        Ok(())
    }

    fn client_id(i: usize) -> ParticipantId {
        ParticipantId(i as u32 + 1)
    }

    fn scaled_profiles(&self) -> Vec<LinkProfile> {
        self.profiles.iter().map(|p| p.with_scale(self.scale)).collect()
    }

    fn scaled_store_links(&self) -> Vec<LinkProfile> {
        self.profiles
            .iter()
            .map(|p| p.store_link().with_scale(self.scale))
            .collect()
    }

    /// Closed-form total for this configuration.
    pub fn predicted_total(&self) -> Duration {
        let spec = self.backend.with_scale(self.scale);
        let bytes = crate::message::serialized_len_for(self.tier.scaled_param_count(self.scale));
        let (links, stores) = (self.scaled_profiles(), self.scaled_store_links());
        let server_store = self.server_store_link.with_scale(self.scale);
        let total: f64 = (1..=self.n_rounds)
            .map(|round| {
                let train: Vec<f64> = (0..self.n_clients)
                    .map(|i| self.train.delay_for(round, Self::client_id(i)).as_secs_f64())
                    .collect();
                oracle::e2e_round(&spec, bytes, &links, &stores, &server_store, &train)
            })
            .sum();
        Duration::from_secs_f64(total)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ClientRecord {
    pub id: ParticipantId,
    pub profile: String,
    pub ledger: TimingLedger,
}

#[derive(Debug, Clone, Serialize)]
pub struct E2EReport {
    pub meta: ReportMeta,
    pub n_clients: usize,
    pub n_rounds: u32,
    pub payload_bytes: u64,
    pub store_route: bool,
    pub total_wall_clock_s: f64,
    pub round_wall_clock_s: Vec<f64>,
    pub server: TimingLedger,
    pub clients: Vec<ClientRecord>,
    /// Client ledgers averaged over clients.
    pub client_mean: TimingLedger,
    pub final_digest: Digest,
    #[serde(skip)]
    pub final_payload: Payload,
    pub store: StoreStats,
    pub predicted_total_s: f64,
    pub failed_clients: Vec<ParticipantId>,
}

impl E2EReport {
    /// Every participant's ledger, server first.
    pub fn ledgers(&self) -> impl Iterator<Item = (ParticipantId, &TimingLedger)> {
        std::iter::once((ParticipantId::SERVER, &self.server)).chain(self.clients.iter().map(|c| (c.id, &c.ledger)))
    }
}

impl Report for E2EReport {
    fn meta(&self) -> &ReportMeta {
        &self.meta
    }

    fn metrics(&self) -> Metrics {
        let mut m = Metrics::new();
        m.num("payload_bytes", self.payload_bytes as f64, "B")
            .num("store_route", u8::from(self.store_route) as f64, "bool")
            .num("total_wall_clock", self.total_wall_clock_s, "s")
            .num("predicted_total", self.predicted_total_s, "s")
            .text("final_digest", self.final_digest.to_hex())
            .num("store_put_count", self.store.put_count as f64, "count")
            .num("store_get_count", self.store.get_count as f64, "count");
        for (i, r) in self.round_wall_clock_s.iter().enumerate() {
            m.rep("round_wall_clock", *r, "s", i as u32 + 1);
        }
        for (who, l) in [("server", &self.server), ("client_mean", &self.client_mean)] {
            for s in State::ALL {
                m.num(format!("{who}.{}", s.name()), l.get(s).as_secs_f64(), "s");
            }
        }
        for c in &self.clients {
            m.num(
                format!("{}.waiting", c.id),
                c.ledger.get(State::Waiting).as_secs_f64(),
                "s",
            );
        }
        m
    }
}

struct Participants {
    server: Endpoint,
    clients: Vec<Endpoint>,
    /// Server to each client.
    down: Vec<Link>,
    /// Each client to the server.
    up: Vec<Link>,
}

fn build(cfg: &RoundConfig) -> Result<Participants, HarnessError> {
    let spec = cfg.backend.with_scale(cfg.scale);
    let server_store = cfg.store.client(cfg.server_store_link.with_scale(cfg.scale));
    let server = Endpoint::bind(
        ParticipantId::SERVER,
        spec.clone(),
        EndpointConfig::with_store(server_store),
    )?;
    let mut clients = Vec::with_capacity(cfg.n_clients);
    for (i, store_link) in cfg.scaled_store_links().into_iter().enumerate() {
        let c = EndpointConfig::with_store(cfg.store.client(store_link));
        clients.push(Endpoint::bind(RoundConfig::client_id(i), spec.clone(), c)?);
    }
    let mut down = Vec::with_capacity(cfg.n_clients);
    let mut up = Vec::with_capacity(cfg.n_clients);
    for (c, profile) in clients.iter().zip(cfg.scaled_profiles()) {
        // Each direction gets its own shaper, as a full-duplex path would.
        down.push(server.connect(c.id(), c.addr(), &Shaper::new(profile.clone()))?);
        up.push(c.connect(server.id(), server.addr(), &Shaper::new(profile))?);
    }
    Ok(Participants {
        server,
        clients,
        down,
        up,
    })
}

fn client_loop(cfg: &RoundConfig, ep: &Endpoint, up: &Link, start: &Barrier) -> Result<TimingLedger, TransportError> {
    start.wait();
    let t0 = Instant::now();
    let mut ledger = TimingLedger::new();
    let result = (|| {
        for round in 1..=cfg.n_rounds {
            let d = loop {
                let d = ep.recv_timeout(cfg.straggler_timeout)?;
                if d.message.header().round == round {
                    break d;
                }
            };
            ledger.record_delivery(&d);
            let (update, took) = synthetic_train(d.message.payload(), &cfg.train, round, ep.id());
            ledger.add(State::Training, took);
            let m = FlMessage::new(round, MsgType::LocalUpdate, ep.id(), ParticipantId::SERVER, update);
            let t = Instant::now();
            let receipt = ep.send(up, &m)?;
            let wall = t.elapsed();
            ledger.add(State::Serialization, receipt.t_serialize);
            ledger.add(State::Communication, wall.saturating_sub(receipt.t_serialize));
        }
        Ok(())
    })();
    ledger.total_wall_clock = t0.elapsed();
    result.map(|()| ledger)
}

struct ServerOutcome {
    ledger: TimingLedger,
    rounds: Vec<f64>,
    global: Payload,
    failed: Vec<ParticipantId>,
}

fn server_loop(cfg: &RoundConfig, p: &Participants, start: &Barrier) -> Result<ServerOutcome, HarnessError> {
    let mut global = make_scaled_tier_payload(cfg.tier, cfg.scale, cfg.seed);
    let quorum = cfg.quorum.unwrap_or(cfg.n_clients);
    let mut failed = Vec::new();
    let mut rounds = Vec::new();
    let mut ledger = TimingLedger::new();
    start.wait();
    let t0 = Instant::now();
    for round in 1..=cfg.n_rounds {
        let t_round = Instant::now();
        let m = FlMessage::new(
            round,
            MsgType::GlobalModel,
            ParticipantId::SERVER,
            ParticipantId::SERVER,
            global.clone(),
        );
        let report = p.server.broadcast(&p.down, &m, BroadcastMode::Concurrent)?;
        ledger.add(State::Serialization, report.t_serialize);
        ledger.add(State::Communication, report.wall.saturating_sub(report.t_serialize));
        for peer in report.failed_peers() {
            log::warn!("round {round}: broadcast to {peer} failed");
            if !failed.contains(&peer) {
                failed.push(peer);
            }
        }
        let expected = cfg.n_clients - report.failed_peers().len();
        let mut updates = BTreeMap::new();
        while updates.len() < expected {
            match p.server.recv_timeout(cfg.straggler_timeout) {
                Ok(d) => {
                    ledger.record_delivery(&d);
                    // Late updates from earlier rounds are dropped.
                    if d.message.header().round == round {
                        updates.insert(d.from, d.message.into_payload());
                    }
                }
                Err(TransportError::RecvTimeout(_)) if updates.len() >= quorum => break,
                Err(TransportError::RecvTimeout(_)) => {
                    return Err(HarnessError::QuorumNotMet {
                        round,
                        received: updates.len(),
                        expected,
                        quorum,
                    })
                }
                Err(e) => return Err(e.into()),
            }
        }
        if updates.len() < quorum {
            return Err(HarnessError::QuorumNotMet {
                round,
                received: updates.len(),
                expected,
                quorum,
            });
        }
        let t = Instant::now();
        let ordered: Vec<Payload> = updates.into_values().collect();
        global = fedavg(&ordered)?;
        ledger.add(State::Aggregation, t.elapsed());
        rounds.push(t_round.elapsed().as_secs_f64());
    }
    ledger.total_wall_clock = t0.elapsed();
    Ok(ServerOutcome {
        ledger,
        rounds,
        global,
        failed,
    })
}

/// Runs `cfg.n_rounds` federated rounds with every participant on its own
/// thread. Per round the server broadcasts concurrently, each client
/// trains on what it received and replies, and the server averages the
/// updates in client order once the last one is in.
pub fn run_e2e(cfg: &RoundConfig) -> Result<E2EReport, HarnessError> {
    cfg.validate()?;
    let parts = build(cfg)?;
    let start = Barrier::new(cfg.n_clients + 1);
    let t0 = Instant::now();
    let (server, clients) = thread::scope(|s| {
        let handles: Vec<_> = parts
            .clients
            .iter()
            .zip(&parts.up)
            .map(|(ep, up)| {
                let start = &start;
                s.spawn(move || client_loop(cfg, ep, up, start))
            })
            .collect();
        let server = server_loop(cfg, &parts, &start);
        if server.is_err() {
            // Unblock clients still waiting for a model.
            for c in &parts.clients {
                c.close();
            }
        }
        let clients: Vec<_> = handles
            .into_iter()
            .enumerate()
            .map(|(i, h)| {
                h.join()
                    .map_err(|_| HarnessError::WorkerPanicked(RoundConfig::client_id(i)))
            })
            .collect();
        (server, clients)
    });
    let total = t0.elapsed();
    let server = server?;
    let mut failed = server.failed;
    let mut records = Vec::with_capacity(cfg.n_clients);
    for (i, r) in clients.into_iter().enumerate() {
        let id = RoundConfig::client_id(i);
        match r? {
            Ok(ledger) => records.push(ClientRecord {
                id,
                profile: cfg.profiles[i].name().to_owned(),
                ledger,
            }),
            Err(e) => {
                log::warn!("client {id} failed: {e}");
                if !failed.contains(&id) {
                    failed.push(id);
                }
            }
        }
    }
    let spec = cfg.backend.with_scale(cfg.scale);
    let bytes = crate::message::serialized_len_for(cfg.tier.scaled_param_count(cfg.scale));
    let mut profiles = cfg.scaled_profiles();
    profiles.push(cfg.server_store_link.with_scale(cfg.scale));
    let mut meta = ReportMeta::new(
        &spec,
        cfg.tier,
        cfg.scaled_profiles(),
        cfg.seed,
        cfg.scale,
        cfg.store.backend().kind(),
    );
    meta.profiles = profiles;
    Ok(E2EReport {
        meta,
        n_clients: cfg.n_clients,
        n_rounds: cfg.n_rounds,
        payload_bytes: bytes,
        store_route: spec.routes_to_store(bytes),
        total_wall_clock_s: total.as_secs_f64(),
        round_wall_clock_s: server.rounds,
        server: server.ledger,
        client_mean: TimingLedger::mean(records.iter().map(|c| &c.ledger)),
        clients: records,
        final_digest: server.global.version(),
        final_payload: server.global,
        store: cfg.store.stats(),
        predicted_total_s: cfg.predicted_total().as_secs_f64(),
        failed_clients: failed,
    })
}

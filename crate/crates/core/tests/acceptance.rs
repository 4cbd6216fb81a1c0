//! Acceptance suite. Runs every criterion in turn, prints one PASS/FAIL
//! line each, and exits non-zero if any failed.
//!
//! Pass criterion numbers as arguments to run a subset:
//! `cargo test --test acceptance -- 4 6`.

use std::io::Write;
use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use silocomm::harness::{
    fedavg, run_concurrency_sweep, run_e2e, run_memory_probe, BenchSetup, E2EReport, RoundConfig, State,
};
use silocomm::message::{
    make_payload, make_scaled_tier_payload, make_tier_payload, FlMessage, MsgType, ParticipantId, Payload, PayloadTier,
};
use silocomm::netem::{lookup, measure_transfer, model_transfer_time, LinkProfile, Shaper, REGION_PROFILES};
use silocomm::store::Store;
use silocomm::transport::{BackendSpec, BroadcastMode, Endpoint, EndpointConfig, Link};

const SCALE: f64 = 0.02;
const RECV: Duration = Duration::from_secs(600);

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn say(line: &str) {
    // Straight to the handle so the line shows even under output capture.
    let mut e = std::io::stderr();
    let _ = writeln!(e, "{line}");
}

struct Net {
    sender: Endpoint,
    receivers: Vec<Endpoint>,
    links: Vec<Link>,
}

/// A sender and `n` receivers on one shaped link, all using `store`.
fn net(spec: &BackendSpec, n: usize, profile: &LinkProfile, store: &Store) -> Net {
    let cfg = || EndpointConfig::with_store(store.client(profile.store_link()));
    let sender = Endpoint::bind(ParticipantId(0), spec.clone(), cfg()).unwrap();
    let receivers: Vec<Endpoint> = (1..=n as u32)
        .map(|i| Endpoint::bind(ParticipantId(i), spec.clone(), cfg()).unwrap())
        .collect();
    let shaper = Shaper::new(profile.clone());
    let links = receivers
        .iter()
        .map(|r| sender.connect(r.id(), r.addr(), &shaper).unwrap())
        .collect();
    Net {
        sender,
        receivers,
        links,
    }
}

fn msg(p: Payload) -> FlMessage {
    FlMessage::new(1, MsgType::GlobalModel, ParticipantId(0), ParticipantId(1), p)
}

fn c1_round_trip_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE_0001);
    let specs = BackendSpec::all_presets();
    let mut via_store = 0;
    for case in 0..200 {
        let tier = if rng.random_bool(0.5) {
            PayloadTier::Small
        } else {
            PayloadTier::Medium
        };
        let seed: u64 = rng.random();
        // Log-uniform thresholds from 1 kB to 100 MB so both routes occur.
        let threshold = 10f64.powf(rng.random_range(3.0..8.0)) as u64;
        let m = msg(make_tier_payload(tier, seed));
        for spec in &specs {
            let spec = spec.with_threshold(threshold);
            let n = net(&spec, 1, &LinkProfile::identity(), &Store::memory());
            let r = n
                .sender
                .send(&n.links[0], &m)
                .map_err(|e| format!("case {case} {spec}: {e}"))?;
            let d = n.receivers[0]
                .recv_timeout(RECV)
                .map_err(|e| format!("case {case} {spec}: {e}"))?;
            ensure!(d.message == m, "case {case} {spec} {tier} seed {seed}: message differs");
            via_store += usize::from(r.store_put);
        }
    }
    Ok(format!("1000 sends bit-identical, {via_store} via the store"))
}

fn c2_single_upload() -> Outcome {
    let p = make_tier_payload(PayloadTier::Big, 2);
    let spec = BackendSpec::hybrid();
    let mut seen = Vec::new();
    for n in [2usize, 4, 7] {
        let store = Store::memory();
        let net = net(&spec, n, &LinkProfile::identity(), &store);
        let m = msg(p.clone());
        let report = net
            .sender
            .broadcast(&net.links, &m, BroadcastMode::Concurrent)
            .map_err(|e| e.to_string())?;
        ensure!(
            report.all_ok() && report.store_put,
            "N={n}: broadcast failed or went inline"
        );
        for r in &net.receivers {
            let d = r.recv_timeout(RECV).map_err(|e| e.to_string())?;
            ensure!(d.message.payload() == &p, "N={n}: payload differs at {}", r.id());
        }
        let s = store.stats();
        ensure!(
            s.put_count == 1 && s.get_count == n as u64,
            "N={n}: put {} get {}",
            s.put_count,
            s.get_count
        );
        seen.push(format!("N={n}: put 1 get {n}"));
    }
    Ok(seen.join(", "))
}

fn c3_memory_scaling() -> Outcome {
    let counts = [1usize, 2, 4, 7, 16];
    let bahrain = lookup("nc-bahrain").unwrap();
    let mut out = Vec::new();
    for spec in [BackendSpec::grpc_like(), BackendSpec::hybrid()] {
        let setup = BenchSetup::new(spec.clone(), PayloadTier::Medium, bahrain.clone()).with_scale(SCALE);
        let r = run_memory_probe(&setup, &counts).map_err(|e| e.to_string())?;
        let p = r.payload_bytes as f64;
        for pt in &r.points {
            let n = pt.peers as f64;
            let peak = pt.ledger_peak as f64;
            if spec.hybrid {
                let bound = p + n * 1024.0 + 1_048_576.0;
                ensure!(peak <= bound, "hybrid N={}: peak {peak} > {bound}", pt.peers);
            } else {
                ensure!(
                    peak >= 0.9 * n * p,
                    "grpc N={}: peak {peak} < {}",
                    pt.peers,
                    0.9 * n * p
                );
            }
        }
        let peaks: Vec<String> = r
            .points
            .iter()
            .map(|pt| format!("{:.2}", pt.ledger_peak as f64 / p))
            .collect();
        out.push(format!("{} peak/P [{}]", spec.name, peaks.join(" ")));
    }
    Ok(out.join("; "))
}

fn c4_shaping_fidelity() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for name in REGION_PROFILES {
        let p = lookup(name).unwrap().with_scale(SCALE);
        for mb in [1u64, 10, 100] {
            let size = (mb as f64 * 1e6 * SCALE) as u64;
            for conns in [1u32, 8] {
                // Eight channels each carrying `size`.
                let total = size * u64::from(conns);
                let want = model_transfer_time(total, &p, conns).as_secs_f64();
                let got = measure_transfer(&p, total, conns)
                    .map_err(|e| e.to_string())?
                    .as_secs_f64();
                let err = got / want - 1.0;
                worst = worst.max(err.abs());
                if err.abs() > 0.15 {
                    failures.push(format!(
                        "{name} {mb}MB x{conns}: {got:.4}s vs {want:.4}s ({:+.1}%)",
                        100.0 * err
                    ));
                }
            }
        }
    }
    ensure!(failures.is_empty(), "{}", failures.join("; "));
    Ok(format!("42 transfers, worst error {:.1}%", 100.0 * worst))
}

fn c5_concurrency_speedup() -> Outcome {
    let setup = |profile: LinkProfile| {
        BenchSetup::new(BackendSpec::grpc_like(), PayloadTier::Medium, profile).with_scale(SCALE)
    };
    let geo = run_concurrency_sweep(&setup(lookup("nc-bahrain").unwrap()), 10).map_err(|e| e.to_string())?;
    let flat = run_concurrency_sweep(&setup(LinkProfile::identity()), 10).map_err(|e| e.to_string())?;
    let detail = format!(
        "nc-bahrain {:.2}x (oracle {:.2}x), identity {:.2}x",
        geo.speedup, geo.predicted_speedup, flat.speedup
    );
    ensure!((5.0..=12.0).contains(&geo.speedup), "{detail}");
    ensure!(flat.speedup <= 1.5, "{detail}");
    Ok(detail)
}

fn geo_run(spec: BackendSpec, tier: PayloadTier) -> Result<E2EReport, String> {
    let mut cfg = RoundConfig::geo_distributed(spec, tier);
    cfg.n_rounds = 2;
    cfg.scale = SCALE;
    cfg.seed = 11;
    run_e2e(&cfg).map_err(|e| e.to_string())
}

fn closure_problems(r: &E2EReport) -> Vec<String> {
    let mut bad = Vec::new();
    if !r.failed_clients.is_empty() {
        bad.push(format!(
            "{}: failed clients {:?}",
            r.meta.backend.name, r.failed_clients
        ));
    }
    for (id, l) in r.ledgers() {
        let c = l.closure();
        if !(0.95..=1.05).contains(&c) {
            bad.push(format!("{} {id}: closure {c:.4}", r.meta.backend.name));
        }
        if l.get(State::Migration) != Duration::ZERO {
            bad.push(format!("{} {id}: migration nonzero", r.meta.backend.name));
        }
    }
    bad
}

#[derive(Clone)]
struct GeoRuns {
    big: [E2EReport; 2],
    small: [E2EReport; 2],
}

fn c6_inversion(runs: &GeoRuns) -> Outcome {
    let [g, h] = &runs.big;
    let ratio = h.total_wall_clock_s / g.total_wall_clock_s;
    let oracle = h.predicted_total_s / g.predicted_total_s;
    let [gs, hs] = &runs.small;
    let detail = format!(
        "Big: grpc {:.1}s (oracle {:.1}s), hybrid {:.2}s (oracle {:.2}s), ratio {:.4} vs oracle {:.4} ({:+.1}%); \
         Small: grpc {:.4}s, hybrid {:.4}s",
        g.total_wall_clock_s,
        g.predicted_total_s,
        h.total_wall_clock_s,
        h.predicted_total_s,
        ratio,
        oracle,
        100.0 * (ratio / oracle - 1.0),
        gs.total_wall_clock_s,
        hs.total_wall_clock_s,
    );
    ensure!(ratio <= 0.5, "hybrid not 2x faster on Big: {detail}");
    ensure!(
        (ratio / oracle - 1.0).abs() <= 0.25,
        "ratio outside 25% of oracle: {detail}"
    );
    ensure!(
        gs.total_wall_clock_s <= hs.total_wall_clock_s,
        "grpc slower than hybrid on Small: {detail}"
    );
    Ok(detail)
}

fn c7_fallback_threshold() -> Outcome {
    let spec = BackendSpec::hybrid();
    let store = Store::memory();
    let n = net(&spec, 1, &LinkProfile::identity(), &store);
    let mut got = Vec::new();
    for (mb, want) in [(2.37, false), (9.9, false), (10.1, true), (253.0, true)] {
        let bytes = (mb * 1e6_f64).round() as u64;
        let p = make_payload((bytes - 16) / 4, 7);
        ensure!(
            p.serialized_len() == bytes,
            "{mb} MB payload is {} bytes",
            p.serialized_len()
        );
        let m = msg(p);
        let r = n.sender.send(&n.links[0], &m).map_err(|e| e.to_string())?;
        let d = n.receivers[0].recv_timeout(RECV).map_err(|e| e.to_string())?;
        ensure!(d.message == m, "{mb} MB: message differs");
        ensure!(r.store_put == want, "{mb} MB: store_put {}", r.store_put);
        got.push(format!("{mb}MB={}", r.store_put));
    }
    Ok(got.join(" "))
}

fn c8_fault_tolerance() -> Outcome {
    let spec = BackendSpec::hybrid().with_scale(SCALE);
    let store = Store::memory();
    let n = net(&spec, 7, &LinkProfile::identity(), &store);
    let faulty = [2usize, 5];
    for &i in &faulty {
        n.receivers[i].store().unwrap().faults().abort_next_gets(1);
    }
    let p = make_scaled_tier_payload(PayloadTier::Big, SCALE, 8);
    let report = n
        .sender
        .broadcast(&n.links, &msg(p.clone()), BroadcastMode::Concurrent)
        .map_err(|e| e.to_string())?;
    ensure!(report.all_ok() && report.store_put, "broadcast failed or went inline");
    let mut retries = Vec::new();
    for (i, r) in n.receivers.iter().enumerate() {
        let d = r.recv_timeout(RECV).map_err(|e| format!("{}: {e}", r.id()))?;
        ensure!(d.message.payload() == &p, "{}: payload differs", r.id());
        if faulty.contains(&i) {
            ensure!(d.fetch_retries >= 1, "{}: no retry recorded", r.id());
        } else {
            ensure!(d.fetch_retries == 0, "{}: unexpected retries", r.id());
        }
        retries.push(d.fetch_retries);
    }
    let s = store.stats();
    ensure!(s.put_count == 1, "put_count {}", s.put_count);
    Ok(format!(
        "7 identical, put_count 1, retries {retries:?}, store retry_count {}",
        s.retry_count
    ))
}

fn c9_ledger_closure(runs: &GeoRuns) -> Outcome {
    let mut problems = Vec::new();
    for r in runs.big.iter().chain(&runs.small) {
        problems.extend(closure_problems(r));
    }
    // Every backend on the Small geo run.
    let mut digests = vec![(runs.small[0].meta.backend.name.clone(), runs.small[0].final_digest)];
    for spec in BackendSpec::all_presets() {
        if spec.name == runs.small[0].meta.backend.name {
            continue;
        }
        let r = geo_run(spec, PayloadTier::Small)?;
        problems.extend(closure_problems(&r));
        digests.push((r.meta.backend.name.clone(), r.final_digest));
    }
    let first = digests[0].1;
    for (name, d) in &digests {
        if *d != first {
            problems.push(format!("{name}: final payload differs"));
        }
    }
    if runs.big[0].final_digest != runs.big[1].final_digest {
        problems.push("Big: grpc and hybrid final payloads differ".into());
    }
    let worst = runs
        .big
        .iter()
        .chain(&runs.small)
        .flat_map(|r| r.ledgers().map(|(_, l)| (l.closure() - 1.0).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max);
    ensure!(problems.is_empty(), "{}", problems.join("; "));
    Ok(format!(
        "{} backends agree on the final payload, worst closure error {:.2}%",
        digests.len(),
        100.0 * worst
    ))
}

fn c10_fedavg_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE_0010);
    for case in 0..50 {
        let n = rng.random_range(1..=9usize);
        let len = rng.random_range(1..=4000usize);
        let magnitude = 10f32.powi(rng.random_range(-3..=6));
        let updates: Vec<Payload> = (0..n)
            .map(|_| Payload::new((0..len).map(|_| rng.random_range(-1.0f32..1.0) * magnitude).collect()))
            .collect();
        let got = fedavg(&updates).map_err(|e| e.to_string())?;
        for j in 0..len {
            let mut sum = 0.0f64;
            for u in &updates {
                sum += f64::from(u.params()[j]);
            }
            let want = (sum / n as f64) as f32;
            ensure!(
                got.params()[j].to_bits() == want.to_bits(),
                "case {case} index {j}: {} vs {want}",
                got.params()[j]
            );
        }
    }
    Ok("50 cases exact".into())
}

fn main() {
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |c: u32| only.is_empty() || only.contains(&c);
    let mut failed = Vec::new();
    let mut run = |num: u32, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(num) {
            return;
        }
        let t = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => say(&format!("acceptance {num:>2} {name}: PASS ({secs:.0}s) {d}")),
            Err(d) => {
                say(&format!("acceptance {num:>2} {name}: FAIL ({secs:.0}s) {d}"));
                failed.push(num);
            }
        }
    };

    run(1, "round-trip identity", &mut c1_round_trip_identity);
    run(2, "single upload, multi download", &mut c2_single_upload);
    run(3, "broadcast memory scaling", &mut c3_memory_scaling);
    run(4, "shaping fidelity", &mut c4_shaping_fidelity);
    run(5, "concurrency speedup", &mut c5_concurrency_speedup);

    let mut geo: Option<Result<GeoRuns, String>> = None;
    let mut geo_runs = || {
        geo.get_or_insert_with(|| {
            let t = Instant::now();
            let runs = (|| {
                Ok(GeoRuns {
                    big: [
                        geo_run(BackendSpec::grpc_like(), PayloadTier::Big)?,
                        geo_run(BackendSpec::hybrid(), PayloadTier::Big)?,
                    ],
                    small: [
                        geo_run(BackendSpec::grpc_like(), PayloadTier::Small)?,
                        geo_run(BackendSpec::hybrid(), PayloadTier::Small)?,
                    ],
                })
            })();
            say(&format!(
                "  (geo-distributed e2e runs took {:.0}s)",
                t.elapsed().as_secs_f64()
            ));
            runs
        })
        .clone()
    };
    if wanted(6) {
        let runs = geo_runs();
        run(6, "hybrid-vs-direct inversion", &mut || {
            c6_inversion(runs.as_ref().map_err(Clone::clone)?)
        });
    }
    run(7, "fallback threshold", &mut c7_fallback_threshold);
    run(8, "fault tolerance", &mut c8_fault_tolerance);
    if wanted(9) {
        let runs = geo_runs();
        run(9, "timing-ledger closure", &mut || {
            c9_ledger_closure(runs.as_ref().map_err(Clone::clone)?)
        });
    }
    run(10, "fedavg oracle", &mut c10_fedavg_oracle);

    if failed.is_empty() {
        say("acceptance: all selected criteria passed");
    } else {
        say(&format!("acceptance: FAILED criteria {failed:?}"));
        std::process::exit(1);
    }
}

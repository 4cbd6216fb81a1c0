//! End-to-end behaviour of the backends over loopback.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use silocomm::message::{make_payload, FlMessage, MsgType, ParticipantId, Payload};
use silocomm::netem::{LinkProfile, Shaper};
use silocomm::store::{Store, StoreError};
use silocomm::transport::{BackendSpec, BroadcastMode, Endpoint, EndpointConfig, Link, TransportError};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

struct Net {
    store: Store,
    sender: Endpoint,
    receivers: Vec<Endpoint>,
    links: Vec<Link>,
}

fn net(spec: &BackendSpec, n: usize, profile: LinkProfile) -> Net {
    let store = Store::memory();
    let cfg = || EndpointConfig::with_store(store.client(LinkProfile::identity()));
    let sender = Endpoint::bind(ParticipantId(0), spec.clone(), cfg()).unwrap();
    let shaper = Shaper::new(profile);
    let receivers: Vec<Endpoint> = (1..=n)
        .map(|i| Endpoint::bind(ParticipantId(i as u32), spec.clone(), cfg()).unwrap())
        .collect();
    let links = receivers
        .iter()
        .map(|r| sender.connect(r.id(), r.addr(), &shaper).unwrap())
        .collect();
    Net {
        store,
        sender,
        receivers,
        links,
    }
}

fn msg(p: Payload, to: u32) -> FlMessage {
    FlMessage::new(1, MsgType::GlobalModel, ParticipantId(0), ParticipantId(to), p)
}

#[test]
fn every_backend_delivers_bit_identical_messages() {
    let _g = serial();
    for spec in BackendSpec::all_presets() {
        let spec = spec.with_threshold(100_000);
        let n = net(&spec, 1, LinkProfile::identity());
        for (i, count) in [0u64, 1, 10_000, 50_000].into_iter().enumerate() {
            let m = msg(make_payload(count, i as u64), 1);
            let r = n.sender.send(&n.links[0], &m).unwrap();
            assert_eq!(r.store_put, spec.hybrid && m.header().payload_bytes > 100_000, "{spec}");
            let d = n.receivers[0].recv_timeout(Duration::from_secs(10)).unwrap();
            assert_eq!(d.message, m, "{spec} count {count}");
            assert_eq!(d.from, ParticipantId(0));
        }
    }
}

#[test]
fn bytes_on_wire_is_payload_plus_framing() {
    let _g = serial();
    let n = net(&BackendSpec::grpc_like(), 1, LinkProfile::identity());
    let m = msg(make_payload(5_000, 1), 1);
    let r = n.sender.send(&n.links[0], &m).unwrap();
    let d = n.receivers[0].recv().unwrap();
    assert_eq!(r.bytes_on_wire, d.bytes_on_wire);
    let framing = r.bytes_on_wire - m.header().payload_bytes;
    assert!(framing > 16 && framing < 128, "{framing}");
}

#[test]
fn messages_from_one_sender_arrive_in_order() {
    let _g = serial();
    for spec in [BackendSpec::grpc_like(), BackendSpec::torch_rpc_like()] {
        let n = net(&spec, 1, LinkProfile::identity());
        let sent: Vec<FlMessage> = (0..20).map(|i| msg(make_payload(1000 + i * 997, i), 1)).collect();
        for m in &sent {
            n.sender.send(&n.links[0], m).unwrap();
        }
        for m in &sent {
            assert_eq!(&n.receivers[0].recv().unwrap().message, m);
        }
    }
}

#[test]
fn hybrid_sends_large_payloads_through_the_store() {
    let _g = serial();
    let spec = BackendSpec::hybrid().with_threshold(1_000_000);
    let n = net(&spec, 3, LinkProfile::identity());
    let m = msg(make_payload(400_000, 9), 0);
    let report = n.sender.broadcast(&n.links, &m, BroadcastMode::Concurrent).unwrap();
    assert!(report.all_ok() && report.store_put);
    for r in report.receipts() {
        assert!(r.bytes_on_wire <= 1024, "{}", r.bytes_on_wire);
    }
    assert_eq!(report.receipts().filter(|r| r.uploaded).count(), 1);
    for rx in &n.receivers {
        let d = rx.recv().unwrap();
        assert!(d.via_store);
        assert_eq!(d.message.payload(), m.payload());
    }
    // Same payload again: the key cache prevents a second upload.
    n.sender.broadcast(&n.links, &m, BroadcastMode::Sequential).unwrap();
    for rx in &n.receivers {
        rx.recv().unwrap();
    }
    let s = n.store.stats();
    assert_eq!((s.put_count, s.get_count), (1, 6));
}

#[test]
fn deleted_object_surfaces_missing_object() {
    let _g = serial();
    let spec = BackendSpec::hybrid().with_threshold(1000);
    let store = Store::memory();
    let client = |s: &Store| {
        s.client(LinkProfile::identity())
            .with_retry(silocomm::store::RetryPolicy {
                max_attempts: 2,
                initial_backoff: Duration::from_millis(1),
                max_backoff: Duration::from_millis(1),
            })
    };
    let tx = Endpoint::bind(
        ParticipantId(0),
        spec.clone(),
        EndpointConfig::with_store(client(&store)),
    )
    .unwrap();
    let rx = Endpoint::bind(ParticipantId(1), spec, EndpointConfig::with_store(client(&store))).unwrap();
    let link = tx
        .connect(rx.id(), rx.addr(), &Shaper::new(LinkProfile::identity()))
        .unwrap();
    let m = msg(make_payload(2000, 1), 1);
    tx.send(&link, &m).unwrap();
    rx.recv().unwrap();
    let key = store.backend().get(&silocomm::store::key_for(m.payload(), "round-1"));
    assert!(key.is_ok());
    store
        .backend()
        .delete(&silocomm::store::key_for(m.payload(), "round-1"))
        .unwrap();
    tx.send(&link, &m).unwrap();
    match rx.recv() {
        Err(TransportError::Store(StoreError::MissingObject { attempts: 2, .. })) => {}
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn one_failing_peer_does_not_abort_the_broadcast() {
    let _g = serial();
    let spec = BackendSpec::mpi_membuff_like();
    let n = net(&spec, 4, LinkProfile::identity());
    n.receivers[2].close();
    let m = msg(make_payload(4_000_000, 3), 0);
    // The first write may land in the socket buffer; keep sending until
    // the dead peer is noticed.
    let mut failed = Vec::new();
    for _ in 0..5 {
        let report = n.sender.broadcast(&n.links, &m, BroadcastMode::Concurrent).unwrap();
        for (i, o) in report.outcomes.iter().enumerate() {
            if i != 2 {
                assert!(o.result.is_ok(), "peer {} failed: {:?}", o.peer, o.result);
            }
        }
        failed = report.failed_peers();
        if !failed.is_empty() {
            break;
        }
    }
    assert_eq!(failed, vec![ParticipantId(3)]);
    for (i, rx) in n.receivers.iter().enumerate() {
        if i != 2 {
            assert_eq!(rx.recv().unwrap().message.payload(), m.payload());
        }
    }
}

#[test]
fn copy_per_send_memory_grows_with_peers() {
    let _g = serial();
    let profile = LinkProfile::new("slow", 5.0, 50.0, 500.0).unwrap();
    let p = make_payload(100_000, 4);
    let size = p.serialized_len();
    for (spec, grows) in [
        (BackendSpec::grpc_like(), true),
        (BackendSpec::mpi_membuff_like(), false),
    ] {
        let n = net(&spec, 4, profile.clone());
        let r = n
            .sender
            .broadcast(&n.links, &msg(p.clone(), 0), BroadcastMode::Concurrent)
            .unwrap();
        if grows {
            assert!(r.ledger_peak as f64 >= 0.9 * 4.0 * size as f64, "{}", r.ledger_peak);
        } else {
            assert!(r.ledger_peak <= size + 4 * 1024, "{}", r.ledger_peak);
        }
        assert_eq!(n.sender.ledger().current(), 0);
        for rx in &n.receivers {
            rx.recv().unwrap();
        }
    }
}

#[test]
fn single_peer_modes_take_the_same_time() {
    let _g = serial();
    let profile = LinkProfile::new("t", 20.0, 10.0, 50.0).unwrap();
    let n = net(&BackendSpec::grpc_like(), 1, profile);
    let m = msg(make_payload(100_000, 5), 1);
    let mut walls = Vec::new();
    for mode in [BroadcastMode::Sequential, BroadcastMode::Concurrent] {
        let t = Instant::now();
        n.sender.broadcast(&n.links, &m, mode).unwrap();
        n.receivers[0].recv().unwrap();
        walls.push(t.elapsed().as_secs_f64());
    }
    assert!((walls[0] - walls[1]).abs() / walls[0] < 0.1, "{walls:?}");
}

#[test]
fn parallel_connections_multiply_throughput() {
    let _g = serial();
    let hk = silocomm::netem::lookup("nc-hongkong").unwrap().with_scale(0.02);
    let p = make_payload(100_000, 6);
    let mut times = Vec::new();
    for spec in [BackendSpec::mpi_membuff_like(), BackendSpec::torch_rpc_like()] {
        let n = net(&spec, 1, hk.clone());
        n.sender.send(&n.links[0], &msg(p.clone(), 1)).unwrap();
        let d = n.receivers[0].recv().unwrap();
        // The latency is paid before the first byte; what follows is
        // bandwidth-bound.
        times.push((d.completed_at - d.first_byte_at).as_secs_f64());
    }
    // min(8 x 16.3, 513) / 16.3
    let ratio = times[0] / times[1];
    assert!((ratio / 8.0 - 1.0).abs() < 0.2, "{times:?} ratio {ratio}");
}

#[test]
fn close_is_prompt_and_idempotent() {
    let _g = serial();
    let e = Endpoint::bind(ParticipantId(1), BackendSpec::grpc_like(), EndpointConfig::default()).unwrap();
    let t = Instant::now();
    e.close();
    e.close();
    assert!(t.elapsed() < Duration::from_secs(1));
    assert!(matches!(e.recv(), Err(TransportError::Closed)));
    assert!(matches!(
        Endpoint::bind(ParticipantId(1), BackendSpec::hybrid(), EndpointConfig::default()),
        Err(TransportError::NoStore)
    ));
}

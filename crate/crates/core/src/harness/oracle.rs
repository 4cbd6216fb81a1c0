//! Closed-form timing predictions for the benchmarks.
//!
//! These mirror what the transport does step by step, with every transfer
//! costed by [`model_transfer_time`]. Where transfers overlap on one shaped
//! link, they share its aggregate bandwidth max-min fairly ([`fluid`]).
//! Times are in seconds; payload sizes and profiles must already be scaled.

use crate::netem::{model_transfer_time, LinkProfile};
use crate::transport::{BackendSpec, BroadcastMode, Buffering};

/// A transfer competing for a shared link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Flow {
    /// When bytes start moving, after any latency.
    pub start: f64,
    pub bytes: f64,
    /// The flow's own rate limit in bytes/s.
    pub cap: f64,
}

/// Completion times of `flows` sharing `capacity` bytes/s.
///
/// Active flows get max-min fair shares, each bounded by its cap.
pub fn fluid(flows: &[Flow], capacity: f64) -> Vec<f64> {
    let n = flows.len();
    let mut done = vec![f64::NAN; n];
    let mut left: Vec<f64> = flows.iter().map(|f| f.bytes).collect();
    let mut t = flows.iter().map(|f| f.start).fold(f64::INFINITY, f64::min);
    while done.iter().any(|d| d.is_nan()) {
        let active: Vec<usize> = (0..n).filter(|&i| done[i].is_nan() && flows[i].start <= t).collect();
        let next_arrival = (0..n)
            .filter(|&i| flows[i].start > t)
            .map(|i| flows[i].start)
            .fold(f64::INFINITY, f64::min);
        if active.is_empty() {
            t = next_arrival;
            continue;
        }
        let rates = water_fill(&active.iter().map(|&i| flows[i].cap).collect::<Vec<_>>(), capacity);
        let mut finished_now = false;
        for (k, &i) in active.iter().enumerate() {
            if left[i] <= 0.0 || rates[k].is_infinite() {
                done[i] = t;
                finished_now = true;
            }
        }
        if finished_now {
            continue;
        }
        let next_finish = active
            .iter()
            .zip(&rates)
            .map(|(&i, &r)| left[i] / r)
            .fold(f64::INFINITY, f64::min);
        let dt = next_finish.min(next_arrival - t);
        for (&i, &r) in active.iter().zip(&rates) {
            // Snap flows finishing within rounding of `dt` to done.
            if left[i] / r <= dt * (1.0 + 1e-12) {
                left[i] = 0.0;
            } else {
                left[i] -= r * dt;
            }
        }
        t += dt;
    }
    done
}

fn water_fill(caps: &[f64], capacity: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..caps.len()).collect();
    order.sort_by(|&a, &b| caps[a].total_cmp(&caps[b]));
    let mut rates = vec![0.0; caps.len()];
    let mut remaining = capacity;
    for (k, &i) in order.iter().enumerate() {
        let share = remaining / (order.len() - k) as f64;
        let r = caps[i].min(share);
        rates[i] = r;
        if r.is_finite() {
            remaining -= r;
        }
    }
    rates
}

fn secs(profile: &LinkProfile, bytes: u64, conns: u32) -> f64 {
    model_transfer_time(bytes, profile, conns).as_secs_f64()
}

/// Time one serializer pass over `bytes` takes.
pub fn serialize_time(spec: &BackendSpec, bytes: u64) -> f64 {
    spec.serialize_rate().map_or(0.0, |r| bytes as f64 / r)
}

/// The network side of a point-to-point or broadcast run.
#[derive(Debug, Clone)]
pub struct Links {
    /// Sender to receiver.
    pub link: LinkProfile,
    /// Sender to the store.
    pub sender_store: LinkProfile,
    /// Each receiver to the store.
    pub receiver_store: LinkProfile,
}

/// One-way time from `send` to a deserialized payload.
pub fn p2p_latency(spec: &BackendSpec, bytes: u64, links: &Links) -> f64 {
    if spec.routes_to_store(bytes) {
        secs(&links.sender_store, bytes, 1) + links.link.latency().as_secs_f64() + secs(&links.receiver_store, bytes, 1)
    } else {
        let ip = spec.inline_path();
        2.0 * serialize_time(&ip, bytes) + secs(&links.link, bytes, ip.connections_per_peer)
    }
}

/// Time from the start of a broadcast to the last receiver holding the
/// payload bytes. All peers share one shaped link.
pub fn broadcast_completion(spec: &BackendSpec, bytes: u64, links: &Links, n: usize, mode: BroadcastMode) -> f64 {
    let lat = links.link.latency().as_secs_f64();
    if spec.routes_to_store(bytes) {
        let up = secs(&links.sender_store, bytes, 1);
        let fetch = secs(&links.receiver_store, bytes, 1);
        return match mode {
            BroadcastMode::Sequential => up + n as f64 * lat + fetch,
            BroadcastMode::Concurrent => up + lat + fetch,
        };
    }
    let ip = spec.inline_path();
    let ser = serialize_time(&ip, bytes);
    let k = ip.connections_per_peer;
    let per_copy = ip.buffering == Buffering::CopyPerSend;
    match mode {
        BroadcastMode::Sequential => {
            let serial = if per_copy { n as f64 * ser } else { ser };
            serial + n as f64 * secs(&links.link, bytes, k)
        }
        BroadcastMode::Concurrent => {
            let cap = k as f64 * links.link.single_conn_rate();
            let flows: Vec<Flow> = (0..n)
                .map(|i| Flow {
                    start: if per_copy { (i + 1) as f64 * ser } else { ser } + lat,
                    bytes: bytes as f64,
                    cap,
                })
                .collect();
            fluid(&flows, links.link.aggregate_rate())
                .into_iter()
                .fold(0.0, f64::max)
        }
    }
}

/// One federated round: concurrent broadcast, per-client train and reply,
/// server gathers. `clients[i]` is client `i`'s link, `client_store[i]` its
/// store link, `train[i]` its training time.
pub fn e2e_round(
    spec: &BackendSpec,
    bytes: u64,
    clients: &[LinkProfile],
    client_store: &[LinkProfile],
    server_store: &LinkProfile,
    train: &[f64],
) -> f64 {
    let n = clients.len();
    if spec.routes_to_store(bytes) {
        let up = secs(server_store, bytes, 1);
        let server_lat = server_store.latency().as_secs_f64();
        let flows: Vec<Flow> = (0..n)
            .map(|i| {
                let lat = clients[i].latency().as_secs_f64();
                let fetch = secs(&client_store[i], bytes, 1);
                // envelope, fetch, train, upload, envelope
                let posted = up + lat + fetch + train[i] + fetch + lat;
                Flow {
                    start: posted + server_lat,
                    bytes: bytes as f64,
                    cap: server_store.single_conn_rate(),
                }
            })
            .collect();
        return fluid(&flows, server_store.aggregate_rate())
            .into_iter()
            .fold(0.0, f64::max);
    }
    let ip = spec.inline_path();
    let ser = serialize_time(&ip, bytes);
    let k = ip.connections_per_peer;
    let per_copy = ip.buffering == Buffering::CopyPerSend;
    let mut arrivals: Vec<f64> = (0..n)
        .map(|i| {
            let prep = if per_copy { (i + 1) as f64 * ser } else { ser };
            let leg = secs(&clients[i], bytes, k);
            // down, deserialize, train, serialize, up
            prep + leg + ser + train[i] + ser + leg
        })
        .collect();
    arrivals.sort_by(f64::total_cmp);
    // The server deserializes updates one at a time.
    arrivals.into_iter().fold(0.0, |t, a| t.max(a) + ser)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netem::lookup;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-9 * b.abs().max(1.0)
    }

    #[test]
    fn lone_flow_runs_at_its_cap() {
        let f = Flow {
            start: 1.0,
            bytes: 100.0,
            cap: 10.0,
        };
        assert!(close(fluid(&[f], 1000.0)[0], 11.0));
        assert!(close(fluid(&[f], 5.0)[0], 21.0));
    }

    #[test]
    fn equal_flows_share_the_pool() {
        let f = Flow {
            start: 0.0,
            bytes: 100.0,
            cap: f64::INFINITY,
        };
        let done = fluid(&[f, f, f, f], 40.0);
        for d in done {
            assert!(close(d, 10.0), "{d}");
        }
    }

    #[test]
    fn late_flow_slows_the_first() {
        let a = Flow {
            start: 0.0,
            bytes: 100.0,
            cap: f64::INFINITY,
        };
        let b = Flow { start: 5.0, ..a };
        // a alone for 5 s at 10 B/s moves 50; then 5 B/s each: a needs 10 s
        // more, b has 50 left at t=15, alone again: 5 s.
        let done = fluid(&[a, b], 10.0);
        assert!(close(done[0], 15.0), "{done:?}");
        assert!(close(done[1], 20.0), "{done:?}");
    }

    #[test]
    fn zero_bytes_and_unshaped_are_instant() {
        let f = Flow {
            start: 2.0,
            bytes: 0.0,
            cap: 1.0,
        };
        assert_eq!(fluid(&[f], 1.0), vec![2.0]);
        let g = Flow {
            start: 1.0,
            bytes: 5.0,
            cap: f64::INFINITY,
        };
        assert_eq!(fluid(&[g], f64::INFINITY), vec![1.0]);
    }

    #[test]
    fn concurrent_grpc_broadcast_overlaps_copies() {
        let spec = BackendSpec::grpc_like().with_scale(0.02);
        let link = lookup("nc-bahrain").unwrap().with_scale(0.02);
        let links = Links {
            link: link.clone(),
            sender_store: link.store_link(),
            receiver_store: link.store_link(),
        };
        let bytes = 412_216;
        let seq = broadcast_completion(&spec, bytes, &links, 10, BroadcastMode::Sequential);
        let con = broadcast_completion(&spec, bytes, &links, 10, BroadcastMode::Concurrent);
        let ser = bytes as f64 / 6e6;
        let mtt = 0.111 + bytes as f64 / 0.138e6;
        assert!(close(seq, 10.0 * (ser + mtt)), "{seq}");
        assert!(close(con, 10.0 * ser + mtt), "{con}");
        assert!(seq / con > 8.0 && seq / con < 9.0);
    }

    #[test]
    fn hybrid_round_is_store_bound() {
        let spec = BackendSpec::hybrid().with_scale(0.02);
        let p = lookup("nc-bahrain").unwrap().with_scale(0.02);
        let server = lookup("nc-nc").unwrap().store_link().with_scale(0.02);
        let bytes = 5_000_000;
        let t = e2e_round(&spec, bytes, &[p.clone()], &[p.store_link()], &server, &[0.0]);
        let want = 5e6 / 58.92e6 + 0.00044 + 2.0 * (0.111 + 5e6 / 8.88e6) + 2.0 * 0.111 + 0.00044 + 5e6 / 58.92e6;
        assert!(close(t, want), "{t} vs {want}");
        // Small payloads fall back to the inline path.
        let small = e2e_round(&spec, 40_000, &[p.clone()], &[p.store_link()], &server, &[0.0]);
        let grpc = e2e_round(
            &BackendSpec::grpc_like().with_scale(0.02),
            40_000,
            &[p.clone()],
            &[p.store_link()],
            &server,
            &[0.0],
        );
        assert!(close(small, grpc));
    }
}

"""Smoke test for the silocomm_py extension module.

Build and install first, e.g. `maturin develop -m crates/py/Cargo.toml
--features extension-module`, then run `python python/smoke_test.py`.
"""

import silocomm_py as sc


def main():
    assert sc.tier_param_count("big") == 66_362_880

    rows = {name: (lat, single, agg) for name, lat, single, agg in sc.profiles()}
    assert rows["nc-bahrain"] == (111.0, 6.90, 444.0), rows["nc-bahrain"]

    a = sc.Payload([1.0, 3.0])
    b = sc.Payload([3.0, 5.0])
    assert sc.fedavg([a, b]).params() == [2.0, 4.0]

    p = sc.Payload.synthetic(1000, seed=7)
    assert sc.Payload.deserialize(p.serialize()) == p
    assert p.serialized_len() == 1000 * 4 + 16
    assert len(p.digest()) == 64

    assert "hybrid" in sc.backend_presets()
    assert sc.routes_to_store("hybrid", 10_100_000)
    assert not sc.routes_to_store("hybrid", 9_900_000)
    assert not sc.routes_to_store("grpc_like", 253_000_000)

    t = sc.model_transfer_time(10_000_000, "nc-bahrain", 1)
    assert abs(t - (0.111 + 10 / 6.90)) < 1e-6, t

    report = sc.run_p2p("grpc_like", "small", "identity", reps=2)
    assert len(report["samples"]) == 2
    report = sc.run_e2e("hybrid", "small", "identity", clients=2, rounds=1)
    assert report["n_clients"] == 2

    print("silocomm_py smoke test: ok")


if __name__ == "__main__":
    main()

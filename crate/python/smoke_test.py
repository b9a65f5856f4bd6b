"""Smoke test for the calibre_py extension.

Build first:
    cargo build -p calibre-py --release --features extension-module
then run `python3 python/smoke_test.py`. If `calibre_py` is not importable,
the freshly built shared library under target/release is loaded instead.
"""

import importlib.util
import math
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load_module():
    try:
        import calibre_py

        return calibre_py
    except ImportError:
        pass
    built = os.path.join(ROOT, "target", "release", "libcalibre_py.so")
    if not os.path.exists(built):
        sys.exit("calibre_py not found; build it with cargo first")
    staged = os.path.join(tempfile.mkdtemp(), "calibre_py.so")
    shutil.copy(built, staged)
    spec = importlib.util.spec_from_file_location("calibre_py", staged)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def main():
    cp = load_module()

    ds = cp.Dataset.synthetic(4, 6, 50, cluster_spread=0.05, seed=3)
    assert len(ds) == 200 and ds.dim == 6 and ds.class_counts() == [50] * 4

    parts = cp.partition_dirichlet(ds, 5, concentration=0.5, min_train=8, seed=1)
    seen = [i for p in parts for i in p.origin]
    assert len(seen) == len(set(seen)) == 200

    quantity = cp.partition_quantity(ds, 4, 2, 20, seed=1)
    assert all(p.train_size == 20 for p in quantity)

    # Identical views are the easy case; the loss must fall as τ shrinks.
    h = [[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]
    assert cp.ntxent(h, 0.1) < cp.ntxent(h, 1.0)

    clusters = cp.kmeans([[0, 0], [0, 0.1], [5, 5], [5, 5.1]], 2, seed=0)
    assert sorted(clusters.counts) == [2, 2]

    w = cp.divergence_weights([10, 10], [0.1, 0.4])
    assert abs(sum(w) - 1) < 1e-12 and w[0] > w[1]
    assert cp.divergence_weights([3, 1], [0.2, 0.2]) == cp.fedavg_weights([3, 1])

    mean, var, std = cp.fairness_stats([0.5, 1.0])
    assert math.isclose(mean, 0.75) and math.isclose(var, 0.0625) and math.isclose(std, 0.25)
    assert cp.fairness_stats([]) is None

    cfg = cp.Config.from_file(
        os.path.join(ROOT, "configs", "blobs.toml"),
        ["training.rounds=2", "training.num_clients=6", "training.clients_per_round=3"],
    )
    result = cp.run(cfg)
    rows = result.accuracies()
    assert len(rows) == 6 and all(0.0 <= a <= 1.0 for _, _, a in rows)
    assert len(result.round_losses()) == 2
    again = cp.run(cp.Config.from_toml(cfg.to_toml()))
    assert again.parameters() == result.parameters(), "runs are not reproducible"

    try:
        cp.Config.from_file(os.path.join(ROOT, "configs", "blobs.toml"), ["calibre.alpha=-1"])
    except ValueError:
        pass
    else:
        raise AssertionError("negative alpha accepted")

    print("smoke test ok: mean accuracy %.3f, variance %.4f" % result.summary())


if __name__ == "__main__":
    main()

"""End-to-end acceptance checks. Each test prints one PASS/FAIL line."""
import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from urllib.parse import quote
from urllib.request import urlopen

import numpy as np
import pytest
import scipy.sparse as sp

from oracles import dense_adjacency, gradcheck_instance, naive_knn, random_tree_forest, random_unit
from sgcn.ann import KnnIndex, recall_at_k
from sgcn.bench import PERTURB_KINDS, BenchConfig, render_table, run_comparison
from sgcn.cli import main as cli
from sgcn.gcn import embed_singleton, gcn_forward, init_params
from sgcn.graph import NodeRecord, normalized_adjacency, validate_graph
from sgcn.matcher import match_mention, save_bundle
from sgcn.service import create_server
from sgcn.siamese import TrainConfig, train

pytestmark = pytest.mark.slow


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        assert ok, detail
    return emit


def test_01_gradients(verdict):
    t0 = time.perf_counter()
    worst = {obj: max(gradcheck_instance(s, obj) for s in range(50)) for obj in ("siamese", "softmax")}
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and elapsed < 30
    verdict(1, ok, f"max rel err siamese {worst['siamese']:.2e}, softmax {worst['softmax']:.2e} "
                   f"(< 1e-4) in {elapsed:.1f}s (< 30s)")


def test_02_unit_norm(verdict):
    rng = np.random.default_rng(2)
    worst, rows, degenerate = 0.0, 0, 0
    for seed in range(200):
        n = int(rng.integers(1, 50))
        labels, edges = random_tree_forest(rng, n, int(rng.integers(1, n + 1)))
        dims = [int(rng.integers(2, 40)) for _ in range(int(rng.integers(2, 5)))]
        p = init_params(dims, seed)
        X = rng.normal(size=(n, dims[0])) * 10.0 ** rng.uniform(-3, 3)
        A = sp.csr_matrix(dense_adjacency(n, edges))
        Z, trace = gcn_forward(A, X, p)
        ok = trace.norms >= 1e-6  # all-zero rectified rows have no direction
        degenerate += int((~ok).sum())
        zs = np.array([embed_singleton(x, p) for x in X])
        singles = np.linalg.norm(zs, axis=1)
        worst = max(worst, np.abs(np.linalg.norm(Z[ok], axis=1) - 1).max(initial=0),
                    np.abs(singles[singles > 0] - 1).max(initial=0))
        rows += 2 * n
    verdict(2, worst <= 1e-6, f"max | |row| - 1 | = {worst:.1e} over {rows} rows "
                              f"({degenerate} all-zero rectified rows skipped)")


def test_03_adjacency_oracle(verdict):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 51))
        labels, edges = random_tree_forest(rng, n, int(rng.integers(1, n + 1)))
        g = validate_graph([NodeRecord(i, f"n{i}", int(labels[i])) for i in range(n)], edges)
        worst = max(worst, np.abs(normalized_adjacency(g).toarray() - dense_adjacency(n, g.edges)).max())
    verdict(3, worst <= 1e-12, f"max |sparse - dense| = {worst:.1e} on 100 graphs (<= 1e-12)")


def test_04_exact_knn(verdict):
    rng = np.random.default_rng(4)
    V = random_unit(rng, 1000, 32).astype(np.float32).astype(np.float64)
    ids = rng.permutation(10_000)[:1000]
    idx = KnnIndex(mode="exact").fit(V, ids)
    Q = random_unit(rng, 100, 32)
    mismatches = sum(idx.query(q, k).ids != naive_knn(V, ids, q, k) for q in Q for k in (1, 5, 10))
    verdict(4, mismatches == 0, f"{mismatches} of 300 id sequences differ from the naive scan")


def test_05_ann_recall(verdict):
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    idx = KnnIndex().fit(random_unit(rng, 10_000, 64))
    r = recall_at_k(idx, random_unit(rng, 1000, 64), 10)
    elapsed = time.perf_counter() - t0
    verdict(5, r >= 0.99 and elapsed < 120, f"recall@10 {r:.4f} (>= 0.99) in {elapsed:.1f}s (< 120s)")


@pytest.fixture(scope="module")
def benchmark():
    t0 = time.perf_counter()
    report = run_comparison(BenchConfig())
    return report, time.perf_counter() - t0


def test_06_benchmark_ordering(benchmark, verdict, capsys):
    report, elapsed = benchmark
    with capsys.disabled():
        print("\n" + render_table(report), end="")
    s = report["summary"]
    mean = {(v, a): s[v][a]["mean_accuracy"] for v in s for a in s[v]}
    order = all(mean[(v, "sgcn")] > max(mean[(v, "nn")], mean[(v, "gcn")]) for v in ("plain", "augmented"))
    uplift = mean[("augmented", "sgcn")] > mean[("plain", "sgcn")]
    ok = order and uplift and not report["failures"] and elapsed < 900
    verdict(6, ok, "S-GCN {:.3f}/{:.3f} vs NN {:.3f}/{:.3f}, GCN {:.3f}/{:.3f} (plain/augmented); "
                   "{:.0f}s (< 900s)".format(*(mean[(v, a)] for a in ("sgcn", "nn", "gcn")
                                              for v in ("plain", "augmented")), elapsed))


def test_07_perturbation_robustness(benchmark, verdict):
    report, _ = benchmark
    parts, ok = [], True
    for v in ("plain", "augmented"):
        pert = report["summary"][v]["sgcn"]["perturbation"]
        ratios = {k: pert[k] / pert["clean"] for k in PERTURB_KINDS}
        ok &= min(ratios.values()) >= 0.8
        parts.append(f"{v}: clean {pert['clean']:.3f}, " + ", ".join(f"{k} {r:.3f}" for k, r in ratios.items()))
    verdict(7, ok, "S-GCN accuracy ratio to clean (>= 0.8); " + "; ".join(parts))


def test_08_training_sanity(toy_inputs, verdict):
    g, A, X = toy_inputs
    _, hist = train(g.labels, A, X, TrainConfig(epochs=30, seed=0), layer_dims=[X.shape[1], 128, 64])
    ratio = hist[-1]["mean_loss"] / hist[0]["mean_loss"]
    p0 = init_params([X.shape[1], 128, 64], 0)
    p1, _ = train(g.labels, A, X, TrainConfig(learning_rate=0.0, epochs=30, momentum=0.9), params=p0)
    frozen = all(a.tobytes() == b.tobytes() for a, b in zip(p0.weights, p1.weights))
    verdict(8, ratio < 0.5 and frozen, f"final/initial loss {ratio:.3f} (< 0.5); lr=0 bit-identical: {frozen}")


def _pipeline(root, cfg_path):
    args = ["--seed", "11"]
    assert cli(["gen", "--entities", "30", "--mentions", "60", "--out", str(root / "kg"), *args]) == 0
    assert cli(["train", "--graph", str(root / "kg"), "--epochs", "5", "--out", str(root / "model.bin"), *args]) == 0
    assert cli(["index", "--graph", str(root / "kg"), "--model", str(root / "model.bin"),
                "--out", str(root / "bundle"), *args]) == 0
    assert cli(["eval", "--config", str(cfg_path), "--out", str(root / "report.json"), *args]) == 0
    report = json.loads((root / "report.json").read_text())
    report.pop("timings")
    return ((root / "model.bin").read_bytes(), (root / "bundle" / "index.bin").read_bytes(),
            json.dumps(report, sort_keys=True))


def test_09_determinism(tmp_path, verdict, capsys):
    cfg = tmp_path / "eval.json"
    cfg.write_text(json.dumps({"seeds": [0, 1], "synth": {"entity_count": 20, "mention_count": 40},
                               "sgcn": {"epochs": 5}, "baseline": {"epochs": 30}, "perturb_names": 20}))
    a = _pipeline(tmp_path / "a", cfg)
    b = _pipeline(tmp_path / "b", cfg)
    capsys.readouterr()
    same = [x == y for x, y in zip(a, b)]
    verdict(9, all(same), "byte-identical model {}, index {}, report data {}".format(*same))


def test_10_latency(verdict):
    rng = np.random.default_rng(10)
    V = random_unit(rng, 70_000, 128)
    Q = random_unit(rng, 300, 128)
    med = {}
    for mode in ("exact", "approximate"):
        idx = KnnIndex(mode=mode).fit(V)
        idx.query(Q[0], 10)  # warm-up (JIT)
        times = []
        for q in Q:
            t0 = time.perf_counter()
            idx.query(q, 10)
            times.append(time.perf_counter() - t0)
        med[mode] = 1e3 * float(np.median(times))
    ok = med["exact"] < 10 and med["approximate"] < 1
    verdict(10, ok, f"median per query: exact {med['exact']:.3f} ms (< 10), ANN {med['approximate']:.3f} ms (< 1)")


def test_11_service(small_bundle, small_kg, tmp_path, verdict):
    manifest = save_bundle(small_bundle, tmp_path)
    srv = create_server(tmp_path, "127.0.0.1:0")
    threading.Thread(target=srv.serve_forever, daemon=True).start()
    base = "http://%s:%d" % srv.server_address[:2]

    def get(path):
        try:
            with urlopen(base + path, timeout=30) as r:
                return r.status, r.read()
        except Exception as exc:  # HTTPError carries status and body
            return exc.code, exc.read()

    try:
        g, _ = small_kg
        checks = {"health": get("/health") == (200, b'{"status": "ok"}\n')}
        status, raw = get(f"/match?q={quote(g.names[0])}&k=3&rule=top1")
        body = json.loads(raw)
        body.pop("elapsed_us")
        want = match_mention(small_bundle, g.names[0], 3, "top1").to_dict()
        want.update(model_digest=manifest["files"]["model"]["sha256"], index_digest=manifest["files"]["index"]["sha256"])
        checks["match"] = status == 200 and body == want
        checks["bad request"] = get("/match?k=3")[0] == 400
        with ThreadPoolExecutor(max_workers=100) as pool:
            results = list(pool.map(lambda _: get("/match?q=Acme%20Zurich&k=5"), range(100)))
        bodies = [json.loads(r) for _, r in results]
        for b in bodies:
            b.pop("elapsed_us")
        checks["100 concurrent"] = all(s == 200 for s, _ in results) and all(b == bodies[0] for b in bodies)
    finally:
        srv.shutdown()
        srv.server_close()
    verdict(11, all(checks.values()), ", ".join(f"{k}: {'ok' if v else 'FAILED'}" for k, v in checks.items()))

"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Tolerances:
  gradients         relative error <= 1e-4 per tensor (float64, central differences, step 1e-6)
  retrieval oracle  exact ordering equality, recall@10 >= 0.9
  closed forms      softmax sums <= 1e-6, entropies/KL/alpha <= 1e-4, endpoints exact
  end to end        <= 1e-6 per entry of the fused distribution
  desk scale        read >= backbone - 0.5% relative (hard), +2% on HR@10 or ND@10 (expected)

The desk-scale criteria read a real interaction log from READREC_DESK_DATA
(format from READREC_DESK_FORMAT, default ml-1m). Without it they run on a
seeded synthetic stand-in and the real-data comparison is reported as BLOCKED.
"""

import csv
import filecmp
import json
import math
import os
import shutil
from pathlib import Path

import numpy as np
import pytest

from readrec.adapt import Adapter, FusionConfig, fuse_predictions, fusion_weight, truncated_entropy
from readrec.cli import run
from readrec.encoder import softmax_over_catalog
from readrec.memory import MemoryIndex, approx_retrieve_topk, cosine_similarity, retrieve_topk, retrieve_topk_batch
from readrec.metrics import metrics_from_ranks
from readrec.retrieval import ProjectionParams, alignment_loss, fuse_retrieved, masked_softmax
from readrec.synthetic import markov_log

from oracles import brute_force_topk, clustered_unit_vectors
from test_cli import run_chain, write_project
from test_encoder import backbone_gradient_errors
from test_retrieval import retrieval_gradient_errors
from toy import reference_online, toy_instance

HARD_DROP = -0.005
EXPECTED_GAIN = 0.02


def report(record_property, line):
    print(line)
    record_property("note", line)


# -- 1 ---------------------------------------------------------------------

@pytest.mark.criterion(1, "gradient oracles (backbone loss and retrieval loss vs finite differences)")
def test_criterion_1_gradients(record_property):
    bb = backbone_gradient_errors()
    rt = retrieval_gradient_errors()
    report(record_property, f"max rel. error backbone={max(bb.values()):.2e} retrieval={max(rt.values()):.2e} (tol 1e-4)")
    assert max(bb.values()) <= 1e-4, bb
    assert max(rt.values()) <= 1e-4, rt


# -- 2 ---------------------------------------------------------------------

@pytest.mark.criterion(2, "retrieval oracle (exact vs brute force, full-probe identity, recall@10)")
def test_criterion_2_retrieval(record_property):
    rng = np.random.default_rng(2024)
    d = 8
    base = rng.normal(size=(700, d))
    keys = base[rng.integers(700, size=1000)]  # repeated keys give exact ties
    users = rng.permutation(1000)
    index = MemoryIndex(keys, keys, users, np.arange(1000))
    stored = index.keys.astype(np.float64)
    queries = rng.normal(size=(1000, d))
    entries, _ = retrieve_topk_batch(index, queries, 10)
    mismatches = sum(list(entries[i]) != brute_force_topk(stored, users, q, 10)[0] for i, q in enumerate(queries))

    part = index.with_partition(16, seed=0)
    full_probe_diff = sum(list(approx_retrieve_topk(part, q, 10, nprobe=16).entries) != list(entries[i])
                          for i, q in enumerate(queries))

    ckeys, centers = clustered_unit_vectors(1000, 64, spread=0.2, seed=0)
    cq, _ = clustered_unit_vectors(100, 64, spread=0.2, seed=1, centers=centers)
    cidx = MemoryIndex(ckeys, ckeys, np.arange(1000), np.arange(1000)).with_partition(16, seed=0)
    recall = np.mean([len(set(retrieve_topk(cidx, q, 10).entries) & set(approx_retrieve_topk(cidx, q, 10, nprobe=4).entries)) / 10
                      for q in cq])
    iso = rng.normal(size=(1000, 64))
    iidx = MemoryIndex(iso, iso, np.arange(1000), np.arange(1000)).with_partition(16, seed=0)
    iso_recall = np.mean([len(set(retrieve_topk(iidx, q, 10).entries) & set(approx_retrieve_topk(iidx, q, 10, nprobe=4).entries)) / 10
                          for q in rng.normal(size=(100, 64))])
    report(record_property, f"brute-force mismatches={mismatches}/1000, full-probe mismatches={full_probe_diff}/1000, "
                            f"recall@10 clustered={recall:.3f} (isotropic d=64, for reference: {iso_recall:.3f})")
    assert mismatches == 0 and full_probe_diff == 0
    assert recall >= 0.9


# -- 3 ---------------------------------------------------------------------

@pytest.mark.criterion(3, "closed-form operation checks")
def test_criterion_3_closed_forms(record_property):
    rng = np.random.default_rng(3)
    sums = np.abs([softmax_over_catalog(rng.normal(scale=20, size=50)).sum() - 1 for _ in range(1000)]).max()
    wsum = np.abs([masked_softmax(rng.normal(scale=20, size=10)).sum() - 1 for _ in range(1000)]).max()
    a, b = rng.dirichlet(np.ones(8), size=1000), rng.dirichlet(np.ones(8), size=1000)
    kl_min = min(alignment_loss(x, y) for x, y in zip(a, b))
    checks = {
        "softmax sums": max(sums, wsum) <= 1e-6,
        "KL >= 0": kl_min >= 0,
        "KL([.5,.5]||[.9,.1])": abs(alignment_loss(np.array([0.5, 0.5]), np.array([0.9, 0.1])) - 0.5108) <= 1e-3,
        "H_top uniform": abs(truncated_entropy(np.full(4, 0.25), 1.0) - math.log(4)) <= 1e-6,
        "H_top one-hot": truncated_entropy(np.eye(4)[0], 0.5) <= 1e-6,
        "H_top [.5,.3,.1,.1]": abs(truncated_entropy(np.array([0.5, 0.3, 0.1, 0.1]), 0.5) - 0.70777) <= 1e-4,
        "alpha equal entropies": fusion_weight(1.3, 1.3) == 0.5,
        "alpha limit": abs(fusion_weight(0.0, math.inf) - 0.7311) <= 1e-4,
        "alpha(1,0)": abs(fusion_weight(1.0, 0.0) - 0.3775) <= 1e-4,
        "fusion endpoint 1": np.array_equal(fuse_predictions(a[0], b[0], 1.0), a[0]),
        "fusion endpoint 0": np.array_equal(fuse_predictions(a[0], b[0], 0.0), b[0]),
        "fusion midpoint": np.allclose(fuse_predictions(np.array([.8, .2]), np.array([.2, .8]), .5), [.5, .5]),
        "cosine 1/sqrt2": abs(cosine_similarity([1, 1], [1, 0]) - 0.70710678) <= 1e-7,
        "attention d=2": np.allclose(fuse_retrieved(ProjectionParams.identity(2), np.array([1.0, 0]), np.eye(2)).weights,
                                     [0.669762, 0.330238], atol=1e-4),
        "ND@5 ranks {1,4}": abs(metrics_from_ranks(np.array([1, 4]), (5,))["ND@5"] - 0.7153) <= 1e-4,
    }
    failed = [k for k, ok in checks.items() if not ok]
    report(record_property, f"{len(checks) - len(failed)}/{len(checks)} closed-form checks hold"
                            + (f"; failed: {failed}" if failed else ""))
    assert not failed


# -- 4 ---------------------------------------------------------------------

@pytest.mark.criterion(4, "end-to-end brute-force equivalence on the hand-set toy")
def test_criterion_4_end_to_end(record_property):
    model, index, params = toy_instance()
    adapter = Adapter(model, index, params, k=2, config=FusionConfig(rho=0.2))
    worst = 0.0
    for window in ([1, 2, 3], [4], [9, 0, 5, 5, 2], [7, 7]):
        ref = reference_online(model, index, params, window, rho=0.2)
        ranked, trace = adapter.adapt_and_rank(window)
        fused = adapter.adapt_batch([window]).p_fused[0]
        worst = max(worst, float(np.max(np.abs(fused - np.array(ref["fused"])))))
        assert list(ranked) == sorted(range(10), key=lambda i: (-ref["fused"][i], i))
        assert trace.entries == ref["entries"]
    report(record_property, f"max |fused - reference| = {worst:.2e} (tol 1e-6)")
    assert worst <= 1e-6


# -- desk-scale fixture -----------------------------------------------------

STANDIN = """\
artifact_dir: art
dataset: {path: log.tsv, min_count: 5, max_seq_len: 20}
backbone: {dim: 32, n_blocks: 2, epochs: 30, patience: 5, batch_size: 128}
retrieval: {k: 10, epochs: 15, patience: 5, batch_size: 128}
fusion: {rho: 0.01}
eval: {seeds: [0, 1, 2]}
"""

REAL = """\
artifact_dir: art
dataset: {{path: {path}, format: {fmt}, min_count: 5, max_seq_len: 50}}
eval: {{seeds: [0, 1, 2]}}
"""


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    real = os.environ.get("READREC_DESK_DATA")
    if real:
        fmt = os.environ.get("READREC_DESK_FORMAT", "ml-1m")
        (root / "run.yaml").write_text(REAL.format(path=Path(real).resolve(), fmt=fmt))
    else:
        lines = markov_log(n_users=600, n_items=150, n_clusters=8, min_len=8, max_len=30, shift_prob=0.1,
                           noise=0.25, seed=5)
        (root / "log.tsv").write_text("\n".join(lines) + "\n")
        (root / "run.yaml").write_text(STANDIN)
    cfg = str(root / "run.yaml")
    run_chain(cfg)
    return root, cfg, bool(real)


def summary(path):
    rows = list(csv.DictReader(open(path)))
    return {r["metric"]: float(r["value"]) for r in rows if r["seed"] == "mean"}


def sweep_rows(path):
    return list(csv.DictReader(open(path)))


def relative(new, old):
    return (new - old) / old if old else 0.0


# -- 5 ---------------------------------------------------------------------

@pytest.mark.criterion(5, "directional desk-scale reproduction (read vs backbone, 3 seeds)")
def test_criterion_5_directional(desk, record_property):
    root, cfg, real = desk
    assert run(["eval", "--config", cfg, "--mode", "backbone"]) == 0
    assert run(["eval", "--config", cfg, "--mode", "read"]) == 0
    b = summary(root / "art" / "reports" / "backbone.csv")
    r = summary(root / "art" / "reports" / "read.csv")
    gains = {m: relative(r[m], b[m]) for m in ("HR@10", "ND@10")}
    source = "real data" if real else "synthetic stand-in"
    report(record_property, f"{source}: backbone HR@10={b['HR@10']:.4f} ND@10={b['ND@10']:.4f}; "
                            f"read HR@10={r['HR@10']:.4f} ND@10={r['ND@10']:.4f}; "
                            f"relative {gains['HR@10']:+.2%} / {gains['ND@10']:+.2%}")
    assert min(gains.values()) >= HARD_DROP
    if not real:
        pytest.skip("BLOCKED: ML-1M / Amazon-Beauty are not reachable offline; set READREC_DESK_DATA to run "
                    "on a real log (hard no-degradation rule checked on the stand-in only)")
    expected = max(gains.values()) >= EXPECTED_GAIN
    report(record_property, f"expected +2% on one metric: {'met' if expected else 'NOT met'}")


# -- 6 ---------------------------------------------------------------------

@pytest.mark.criterion(6, "K sweep {1,3,5,10,20} completes with well-formed tables")
def test_criterion_6_k_sweep(desk, record_property):
    root, cfg, real = desk
    assert run(["eval", "--config", cfg, "--sweep", "K=1,3,5,10,20"]) == 0
    rows = sweep_rows(root / "art" / "reports" / "sweep_K.csv")
    assert [r["K"] for r in rows] == ["1", "3", "5", "10", "20"]
    assert all(math.isfinite(float(r["ND@10_mean"])) for r in rows)
    nd = [float(r["ND@10_mean"]) for r in rows]
    best = int(np.argmax(nd))
    shape = "interior peak" if 0 < best < len(nd) - 1 else "monotone exception (table attached)"
    report(record_property, f"{'real' if real else 'stand-in'} ND@10 by K: "
                            + ", ".join(f"{r['K']}:{v:.4f}" for r, v in zip(rows, nd)) + f" -> {shape}")
    assert (root / "art" / "reports" / "sweep_K.txt").read_text().startswith("sweep over K")


# -- 7 ---------------------------------------------------------------------

@pytest.mark.criterion(7, "rho sweep completes; truncated entropy monotone in rho")
def test_criterion_7_rho(desk, record_property):
    root, cfg, real = desk
    assert run(["eval", "--config", cfg, "--sweep", "rho=1.0,0.1,0.01,0.001"]) == 0
    rows = sweep_rows(root / "art" / "reports" / "sweep_rho.csv")
    nd = {float(r["rho"]): float(r["ND@10_mean"]) for r in rows}
    assert set(nd) == {1.0, 0.1, 0.01, 0.001}
    rng = np.random.default_rng(7)
    grid = [0.001, 0.01, 0.1, 0.5, 1.0]
    monotone = all(np.all(np.diff([truncated_entropy(p, g) for g in grid]) >= -1e-12)
                   for p in rng.dirichlet(np.full(300, 0.3), size=200))
    soft = nd[1.0] <= max(nd[0.1], nd[0.01], nd[0.001])
    report(record_property, f"{'real' if real else 'stand-in'} ND@10 by rho: "
                            + ", ".join(f"{k:g}:{v:.4f}" for k, v in sorted(nd.items(), reverse=True))
                            + f"; full-set <= best truncated: {'yes' if soft else 'NO (soft expectation)'}")
    assert monotone


# -- 8 ---------------------------------------------------------------------

def _tree(root):
    return {p.relative_to(root) for p in root.rglob("*") if p.is_file()}


REPRODUCIBLE = ("dataset/*", "seed_*/*", "reports/*")


@pytest.mark.criterion(8, "determinism: reruns give byte-identical artifacts and reports")
def test_criterion_8_determinism(tmp_path, record_property):
    dirs = []
    for name in ("a", "b"):
        cfg = write_project(tmp_path / name)
        run_chain(cfg)
        assert run(["eval", "--config", cfg, "--mode", "backbone"]) == 0
        assert run(["eval", "--config", cfg, "--mode", "read"]) == 0
        dirs.append((tmp_path / name / "art", cfg))
    (a, cfg_a), (b, _) = dirs
    files = sorted(f for pattern in REPRODUCIBLE for f in (p.relative_to(a) for p in a.glob(pattern)))
    assert files and {f for f in files} <= _tree(b)
    differing = [str(f) for f in files if not filecmp.cmp(a / f, b / f, shallow=False)]
    ma, mb = (json.loads((d / "manifest.json").read_text())["artifacts"] for d in (a, b))

    snapshot = {f: (a / f).read_bytes() for f in files}
    for stage in ("train", "build-memory", "train-retrieval"):
        assert run([stage, "--config", cfg_a, "--force"]) == 0
    assert run(["eval", "--config", cfg_a, "--mode", "read"]) == 0
    assert run(["eval", "--config", cfg_a, "--mode", "backbone"]) == 0
    rerun_diff = [str(f) for f in files if (a / f).read_bytes() != snapshot[f]]
    report(record_property, f"{len(files)} files compared across two directories and a --force rerun; "
                            f"differing: {differing + rerun_diff or 'none'}")
    assert not differing and not rerun_diff
    assert ma == mb


# -- 9 ---------------------------------------------------------------------

@pytest.mark.criterion(9, "ablation hooks (lambda=0, fixed alpha=0.5, cosine attention) run end to end")
def test_criterion_9_ablations(tmp_path, desk, record_property):
    base = tmp_path / "toy"
    cfg = write_project(base)
    run_chain(cfg)
    variants = {
        "w/o KL": ["--lambda", "0"],
        "w/o alpha": ["--fixed-alpha", "0.5"],
        "w/o Att": ["--attention", "cosine"],
    }
    outcomes = {}
    for name, flags in variants.items():
        work = tmp_path / name.replace("/", "").replace(" ", "_")
        shutil.copytree(base, work)
        vcfg = str(work / "run.yaml")
        if name == "w/o KL":
            assert run(["train-retrieval", "--config", vcfg, "--force", *flags]) == 0
            log = [json.loads(x) for x in (work / "art" / "seed_0" / "retrieval_log.jsonl").read_text().splitlines()]
            assert all(r["loss"] == r["rec_loss"] for r in log)
        assert run(["eval", "--config", vcfg, "--mode", "read", *flags]) == 0
        reports = list((work / "art" / "reports").glob("read*.csv"))
        assert len(reports) == 1
        outcomes[name] = summary(reports[0])["ND@10"]

    root, dcfg, real = desk
    assert run(["eval", "--config", dcfg, "--mode", "read"]) == 0
    assert run(["eval", "--config", dcfg, "--mode", "read", "--fixed-alpha", "0.5"]) == 0
    full = summary(root / "art" / "reports" / "read.csv")["ND@10"]
    fixed = summary(root / "art" / "reports" / "read_alpha0.5.csv")["ND@10"]
    report(record_property, "toy ND@10 " + ", ".join(f"{k}={v:.4f}" for k, v in outcomes.items())
                            + f"; {'real' if real else 'stand-in'} full={full:.4f} vs fixed-alpha={fixed:.4f}: "
                            + ("full >= fixed" if full >= fixed else "full < fixed (soft expectation not met)"))

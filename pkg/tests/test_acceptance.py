"""End-to-end acceptance checks on the default configs (3 seeds, depth-8 backbone).

Each criterion records one PASS/FAIL line, printed in the terminal summary.
The pipeline fixtures take a few minutes on a single core.
"""

import csv
import json
import time
from collections import defaultdict

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ilcprobe import analysis as an
from ilcprobe import backbone as bb
from ilcprobe import cli
from ilcprobe import evaluation as ev
from ilcprobe import pipeline as pl
from ilcprobe import probe_engine as pe
from ilcprobe.feature_store import read_store

pytestmark = pytest.mark.slow

TABLES = ["results.csv", "sweep.csv", "analysis.csv", "summary.csv"]
PIS = (0.03, 0.05, 1.0)


def rows_of(out, name="results.csv"):
    with open(out / name) as f:
        return list(csv.DictReader(f))


def mean_by(rows, method, protocol="zero-shot", pi=""):
    vals = [float(r["value"]) for r in rows if r["method"] == method and r["protocol"] == protocol and r["pi"] == pi]
    assert len(vals) == 3, (method, protocol, pi)
    return float(np.mean(vals))


def record(log, n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    log[n] = line
    print(line)
    assert ok, line


def _run(out, dataset, scenario):
    t0 = time.perf_counter()
    assert cli.main(["run", "--dataset", dataset, "--scenario", scenario, "--out", str(out)]) == 0
    return time.perf_counter() - t0


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    # keep every run's cache under its own output directory
    mp = pytest.MonkeyPatch()
    mp.delenv("ILC_CACHE_DIR", raising=False)
    yield tmp_path_factory.mktemp("acceptance")
    mp.undo()


@pytest.fixture(scope="module")
def cond_zero(workdir):
    out = workdir / "cond_zero"
    return out, _run(out, "conditional", "zero-shot")


@pytest.fixture(scope="module")
def cond_few(workdir):
    out = workdir / "cond_few"
    _run(out, "conditional", "few-shot")
    return out


@pytest.fixture(scope="module")
def sub_both(workdir):
    out = workdir / "sub"
    _run(out, "subpopulation", "both")
    return out


def test_criterion_1_conditional_zero_shot(cond_zero, acceptance_log):
    out, seconds = cond_zero
    rows = rows_of(out)
    best, last = mean_by(rows, "best_layer"), mean_by(rows, "last_layer")
    per_layer = defaultdict(list)
    for r in rows:
        if r["method"] == "ilc_id_holdout":
            per_layer[int(r["layer"])].append(float(r["value"]))
    id_acc = {l: float(np.mean(v)) for l, v in sorted(per_layer.items())}
    L = max(id_acc) + 1
    gap_ok = best - last >= 0.05
    id_ok = id_acc[L - 1] >= max(id_acc.values())
    ok = gap_ok and id_ok and seconds <= 300
    record(acceptance_log, 1, ok,
           f"best {best:.4f} - last {last:.4f} = {100 * (best - last):.2f} pts (need >= 5); "
           f"ID holdout acc by layer {', '.join(f'{l}:{a:.4f}' for l, a in id_acc.items())} "
           f"(max at L-1 required); runtime {seconds:.0f}s (<= 300s)")


def test_criterion_2_subpopulation_ordering(sub_both, acceptance_log):
    rows = rows_of(sub_both)
    base, last, best = (mean_by(rows, m) for m in ("base", "last_layer", "best_layer"))
    ok = base <= last <= best and best - last >= 0.03
    record(acceptance_log, 2, ok,
           f"WGA base {base:.4f} <= last {last:.4f} <= best {best:.4f}, best - last = {100 * (best - last):.2f} pts (need >= 3)")


def test_criterion_3_few_shot(cond_few, sub_both, acceptance_log):
    parts, ok = [], True
    for name, out in (("conditional", cond_few), ("subpopulation", sub_both)):
        rows = rows_of(out)
        for pi in PIS:
            best = mean_by(rows, "best_layer", "few-shot", repr(pi))
            last = mean_by(rows, "last_layer", "few-shot", repr(pi))
            need = last if pi == 1.0 else last - 0.01
            ok &= best >= need
            parts.append(f"{name} pi={pi:g} best {best:.4f} last {last:.4f}")
    record(acceptance_log, 3, ok, "; ".join(parts))


def test_criterion_4_grid_and_defaults(cond_zero, cond_few, acceptance_log):
    zs, fs = pe.HyperGrid.zero_shot(), pe.HyperGrid.few_shot()
    counts = {}
    for out, proto in ((cond_zero[0], "zero-shot"), (cond_few, "few-shot")):
        per = defaultdict(set)
        for r in rows_of(out, "sweep.csv"):
            if r["split"].startswith(proto) and r["split"].endswith("valid"):
                per[(r["split"], r["layer"], r["seed"])].add((r["eta"], r["lambda"]))
        counts[proto] = {len(v) for v in per.values()}
    cfg = pl.default_config("conditional")
    checks = {
        "zero-shot grid": len(zs.configs()) == 9 and counts["zero-shot"] == {9},
        "few-shot grid": len(fs.configs()) == 12 and counts["few-shot"] == {12},
        "epochs": pe.DEFAULT_EPOCHS == 100 and cfg["epochs"] == 100,
        "tvd bins": an.TVD_BINS == 40 and cfg["analysis"]["tvd_bins"] == 40,
    }
    record(acceptance_log, 4, all(checks.values()),
           f"configs/layer/seed zero-shot {sorted(counts['zero-shot'])}, few-shot {sorted(counts['few-shot'])}; "
           f"epochs {pe.DEFAULT_EPOCHS}; TVD bins {an.TVD_BINS}; " + ", ".join(f"{k}={v}" for k, v in checks.items()))


# ---- criterion 5: numerical properties -------------------------------------------------------------

def central_diff(f, a, eps=1e-6):
    g = np.zeros_like(a)
    for i in np.ndindex(a.shape):
        old = a[i]
        a[i] = old + eps
        hi = f()
        a[i] = old - eps
        lo = f()
        a[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)))


def brute_dist(A, B):
    return sum(float(np.sum((a - b) ** 2)) for a in A for b in B) / (len(A) * len(B))


def brute_cdnv(X, y):
    cl = sorted(set(y.tolist()))
    mu = {c: X[y == c].sum(0) / np.sum(y == c) for c in cl}
    var = {c: sum(float(np.sum((x - mu[c]) ** 2)) for x in X[y == c]) / np.sum(y == c) for c in cl}
    vals = [(var[i] + var[j]) / (2 * float(np.sum((mu[i] - mu[j]) ** 2))) for i in cl for j in cl if i < j]
    return sum(vals) / len(vals)


def brute_nc1(X, y):
    cl = sorted(set(y.tolist()))
    n, d = X.shape
    mg = X.mean(0)
    Sw, Sb = np.zeros((d, d)), np.zeros((d, d))
    for c in cl:
        mu = X[y == c].mean(0)
        for x in X[y == c]:
            Sw += np.outer(x - mu, x - mu)
        Sb += np.outer(mu - mg, mu - mg)
    Sw, Sb = Sw / n, Sb / len(cl)
    w, V = np.linalg.eigh(Sb)
    keep = w > w.max() * 1e-10
    return float(np.trace(Sw @ ((V[:, keep] / w[keep]) @ V[:, keep].T)) / len(cl))


def _rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


def numeric_suite():
    rng = np.random.default_rng(0)
    res = {}
    # probe gradient (with and without L1), backbone gradient with and without residual blocks
    X, y = rng.standard_normal((20, 4)), rng.integers(0, 3, 20)
    worst = 0.0
    for lam in (0.0, 1e-2):
        W, b = rng.standard_normal((3, 4)), rng.standard_normal(3)
        _, gW, gb = pe.ilc_objective(W, b, X, y, lam)
        f = lambda: pe.ilc_objective(W, b, X, y, lam)[0]
        worst = max(worst, rel_err(gW, central_diff(f, W)), rel_err(gb, central_diff(f, b)))
    res["probe grad"] = worst
    worst = 0.0
    for residual in ((), (2, 3)):
        net = bb.build_backbone(bb.default_spec(6, 3, width=8, depth=5, residual=residual, bottleneck=5), 5)
        worst = max(worst, bb.gradient_check(net, rng.standard_normal((16, 6)), rng.integers(0, 3, 16),
                                             epsilon=1e-6, n_coords=60))
    res["backbone grad"] = worst
    # brute-force oracles on <= 50 samples
    worst = 0.0
    for _ in range(10):
        A, B = rng.standard_normal((int(rng.integers(1, 26)), 5)), rng.standard_normal((int(rng.integers(1, 26)), 5)) * 2
        worst = max(worst, _rel(an.mean_pairwise_dist(A, B), brute_dist(A, B)))
        yk = np.repeat([0, 1, 2], [12, 15, 13])
        Xk = rng.standard_normal((40, 4)) + 2 * rng.standard_normal((3, 4))[yk]
        worst = max(worst, _rel(an.cdnv(Xk, yk), brute_cdnv(Xk, yk)), _rel(an.nc1(Xk, yk), brute_nc1(Xk, yk)))
    res["oracles"] = worst
    # TVD axioms on 1000 histogram pairs
    bad = 0
    for _ in range(1000):
        p, q = rng.random(40) * (rng.random(40) < 0.7), rng.random(40)
        p[rng.integers(40)] += 0.1
        t = an.histogram_tvd(p, q)
        bad += not (0 <= t <= 1 and t == an.histogram_tvd(q, p) and an.histogram_tvd(p, p) == 0.0)
    res["tvd violations"] = bad
    # PCA
    Xp = rng.standard_normal((50, 8)) @ rng.standard_normal((8, 8))
    p = an.fit_pca(Xp, 5)
    res["pca orth"] = float(np.max(np.abs(p.basis.T @ p.basis - np.eye(5))))
    Xs = rng.standard_normal((40, 3)) @ rng.standard_normal((3, 10)) + rng.standard_normal(10)
    ps = an.fit_pca(Xs, 3)
    res["pca recon"] = float(np.max(np.abs(an.reconstruct(ps, an.project(ps, Xs)) - Xs)))
    # sens(A, A), WGA, NC1 scaling
    res["sens self"] = max(an.sensitivity_score(A, A) for A in (rng.standard_normal((15, 4)) * 3 + 7 for _ in range(20)))
    wga_ok = True
    for _ in range(50):
        pr, lb, gr = rng.integers(0, 3, 40), rng.integers(0, 3, 40), rng.integers(0, 4, 40)
        r = ev.worst_group_accuracy(pr, lb, gr)
        wga_ok &= r.value == min(r.per_group.values())
    res["wga == min"] = wga_ok
    yn = np.repeat([0, 1, 2], 15)
    Xn = rng.standard_normal((45, 6)) + rng.standard_normal((3, 6))[yn]
    res["nc1 scale"] = max(_rel(an.nc1(c * Xn, yn), an.nc1(Xn, yn)) for c in (0.1, 10.0))
    return res


def test_criterion_5_numerical_suite(acceptance_log):
    r = numeric_suite()
    ok = (r["probe grad"] < 1e-4 and r["backbone grad"] < 1e-4 and r["oracles"] < 1e-8 and r["tvd violations"] == 0
          and r["pca orth"] <= 1e-5 and r["pca recon"] <= 1e-5 and r["sens self"] < 1e-12 and r["wga == min"]
          and r["nc1 scale"] <= 1e-6)
    record(acceptance_log, 5, ok, ", ".join(f"{k} {v:.2e}" if isinstance(v, float) else f"{k} {v}" for k, v in r.items()))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_criterion_5_wga_property(seed):
    rng = np.random.default_rng(seed)
    pr, lb, gr = rng.integers(0, 3, 30), rng.integers(0, 3, 30), rng.integers(0, 3, 30)
    r = ev.worst_group_accuracy(pr, lb, gr)
    assert r.value == min(r.per_group.values()) <= ev.accuracy(pr, lb)


def _sens_by(rows, seed):
    return {(int(r["layer"]), int(r["group"])): float(r["value"])
            for r in rows if r["seed"] == seed and r["metric"] == "sens"}


def test_criterion_6_sensitivity(sub_both, acceptance_log):
    rows = rows_of(sub_both, "analysis.csv")
    sel = json.loads((sub_both / "results.json").read_text())["selections"]
    cfg = json.loads((sub_both / "config.resolved.json").read_text())
    counts = cfg["dataset"]["n_per_group"]
    minority = [g for g, n in enumerate(counts) if n < max(counts)]
    majority = [g for g, n in enumerate(counts) if n == max(counts)]
    L = cfg["backbone"]["depth"]
    hits, parts = 0, []
    for rep in cfg["seeds"]:
        s = _sens_by(rows, str(rep))
        l_star = next(x["l_star"] for x in sel if x["rep"] == rep and x["scenario"] == "zero-shot")
        mino_last = np.mean([s[(L - 1, g)] for g in minority])
        majo_last = np.mean([s[(L - 1, g)] for g in majority])
        mino_best = np.mean([s[(l_star, g)] for g in minority])
        hit = mino_last > majo_last and mino_best < mino_last
        hits += hit
        parts.append(f"seed {rep}: minority@L-1 {mino_last:.3f} vs majority@L-1 {majo_last:.3f}, "
                     f"minority@l*={l_star} {mino_best:.3f}")
    record(acceptance_log, 6, hits >= 2, f"{hits}/3 seeds; " + "; ".join(parts))


def test_criterion_7_collapse(cond_zero, sub_both, acceptance_log):
    parts, ok = [], True
    for name, out in (("conditional", cond_zero[0]), ("subpopulation", sub_both)):
        rows = rows_of(out, "analysis.csv")
        argmins = []
        for seed in ("0", "1", "2"):
            c = {int(r["layer"]): float(r["value"]) for r in rows if r["seed"] == seed and r["metric"] == "cdnv"}
            argmins.append(min(c, key=c.get))
        L = max(c) + 1
        hits = sum(a == L - 1 for a in argmins)
        ok &= hits >= 2
        parts.append(f"{name} CDNV argmin per seed {argmins} (L-1={L - 1}, {hits}/3)")
    record(acceptance_log, 7, ok, "; ".join(parts))


def test_criterion_8_protocol_integrity(cond_zero, sub_both, acceptance_log):
    leaks, bad_sel, trunc_ok, n_checked = 0, 0, True, 0
    for out in (cond_zero[0], sub_both):
        cfg = json.loads((out / "config.resolved.json").read_text())
        art = pl.Artifacts(cfg, out)
        L = cfg["backbone"]["depth"]
        sel = json.loads((out / "results.json").read_text())["selections"]
        bad_sel += sum(s["l_star"] > L - 2 for s in sel)
        for rep in cfg["seeds"]:
            train = read_store(art.features(rep, "zero-shot", "train"))
            leaks += int(np.sum(train.dist_tags != 0))
            # truncated inference on the validation rows, in extraction order
            valid = read_store(art.features(rep, "zero-shot", "valid"))
            data = {}
            for which in ("id", "ood"):
                ds = pl.load_dataset(art.data(rep, which))
                data.update(zip(ds.ids.tolist(), ds.x))
            x = np.stack([data[i] for i in valid.sample_ids.tolist()])
            net = bb.load_backbone(art.ckpt(rep))
            ps = pe.load_probeset(art.probes(rep, "zero-shot"))
            s = next(v for v in sel if v["rep"] == rep and v["scenario"] == "zero-shot")
            for seed in ps.seeds:
                p = ps.get(s["l_star"], *s["config"], seed)
                calls = []
                logits = pe.infer_logits(s["l_star"], p, net, x, on_layer=calls.append)
                trunc_ok &= calls == list(range(1, s["l_star"] + 1))
                trunc_ok &= logits.tobytes() == pe.ilc_forward(p, valid.layer(s["l_star"])).tobytes()
                n_checked += 1
    ok = leaks == 0 and bad_sel == 0 and trunc_ok
    record(acceptance_log, 8, ok,
           f"OOD rows in zero-shot probe sets {leaks}; selections above L-2 {bad_sel}; "
           f"truncated inference exact-depth and bit-identical on {n_checked} probes: {trunc_ok}")


def test_criterion_9_reproducible(sub_both, cond_zero, workdir, acceptance_log):
    parts, ok = [], True
    for name, first, dataset, scenario in (("subpopulation", sub_both, "subpopulation", "both"),
                                           ("conditional", cond_zero[0], "conditional", "zero-shot")):
        again = workdir / f"{name}_again"
        _run(again, dataset, scenario)
        same = {n: (first / n).read_bytes() == (again / n).read_bytes() for n in TABLES}
        ok &= all(same.values())
        parts.append(f"{name}: " + ", ".join(f"{k} {v}" for k, v in same.items()))
    record(acceptance_log, 9, ok, "fresh reruns byte-identical; " + "; ".join(parts))

"""Intermediate layer classifiers: training sweeps, layer selection, inference.

Each ILC is a softmax-linear model ``W r_l(x) + b`` trained with Adam on
mean cross-entropy plus ``lam * |W|_1`` (bias excluded), starting from
``W = 0, b = 0``. The joint loss summed over layers decouples, so every
(layer, eta, lam, seed) job is trained independently; the mini-batch order
depends only on the seed.
"""

from __future__ import annotations

import itertools
import json
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import backbone as bb
from .errors import DivergenceError, EmptyValidation, FormatError, InvalidParam, MissingLayer, ShapeError
from .metrics import accuracy, worst_group_accuracy

ZERO_SHOT_ETAS = (1e-4, 1e-3, 1e-2)
ZERO_SHOT_LAMBDAS = (0.0, 1e-3, 1e-2)
FEW_SHOT_ETAS = (1e-4, 1e-3, 1e-2)
FEW_SHOT_LAMBDAS = (0.0, 1e-4, 1e-3, 1e-2)
DEFAULT_EPOCHS = 100
BATCH_SIZE = 128
MLP_HIDDEN = 512


@dataclass
class HyperGrid:
    etas: tuple
    lambdas: tuple
    scenario: str = "ZeroShot"

    @classmethod
    def zero_shot(cls) -> "HyperGrid":
        return cls(ZERO_SHOT_ETAS, ZERO_SHOT_LAMBDAS, "ZeroShot")

    @classmethod
    def few_shot(cls) -> "HyperGrid":
        return cls(FEW_SHOT_ETAS, FEW_SHOT_LAMBDAS, "FewShot")

    @classmethod
    def for_scenario(cls, scenario) -> "HyperGrid":
        return cls.few_shot() if str(getattr(scenario, "value", scenario)) == "FewShot" else cls.zero_shot()

    def configs(self) -> list[tuple[float, float]]:
        return [(float(e), float(l)) for e, l in itertools.product(self.etas, self.lambdas)]

    def __len__(self):
        return len(self.etas) * len(self.lambdas)


@dataclass
class ILC:
    layer: int
    W: np.ndarray
    b: np.ndarray
    eta: float
    lam: float
    seed: int
    losses: list[float] = field(default_factory=list)

    @property
    def key(self):
        return (self.eta, self.lam, self.seed)


@dataclass
class ProbeSet:
    probes: dict[int, dict[tuple, object]]
    epochs: int
    grid: HyperGrid
    seeds: list[int]
    val_scores: dict[int, float] = field(default_factory=dict)

    @property
    def layers(self) -> list[int]:
        return sorted(self.probes)

    def get(self, layer, eta, lam, seed):
        return self.probes[layer][(eta, lam, seed)]


def ilc_forward(p: ILC, features) -> np.ndarray:
    """Logits ``features @ W.T + b`` in float64."""
    f = np.asarray(features, dtype=np.float64)
    W = np.asarray(p.W, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] != W.shape[1]:
        raise ShapeError(f"feature width {f.shape[-1]} != probe width {W.shape[1]}")
    return f @ W.T + np.asarray(p.b, dtype=np.float64)


def ilc_predict(p: ILC, features) -> np.ndarray:
    return np.argmax(ilc_forward(p, features), axis=1)


def ilc_objective(W, b, X, y, lam):
    """CE + lam*|W|_1 and its (sub)gradient; sign(0) = 0 for the L1 term."""
    n = len(y)
    z = X @ W.T + b
    loss = bb.cross_entropy(z, y) + lam * np.abs(W).sum()
    d = bb.softmax(z)
    d[np.arange(n), y] -= 1.0
    d /= n
    return loss, d.T @ X + lam * np.sign(W), d.sum(axis=0)


def batch_orders(n: int, epochs: int, seed: int):
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 21]))
    for _ in range(epochs):
        yield rng.permutation(n)


def train_linear(X, y, num_classes: int, eta: float, lam: float, epochs: int, seed: int,
                 batch_size: int = BATCH_SIZE):
    """One softmax-linear probe from zero init; returns (W, b, per-epoch mean losses)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    W = np.zeros((num_classes, X.shape[1]))
    b = np.zeros(num_classes)
    opt = bb.Adam([W, b], eta)
    losses = []
    for order in batch_orders(len(y), epochs, seed):
        total = 0.0
        for s in range(0, len(y), batch_size):
            idx = order[s:s + batch_size]
            loss, gW, gb = ilc_objective(W, b, X[idx], y[idx], lam)
            if not np.isfinite(loss):
                raise DivergenceError(f"probe loss non-finite (eta={eta}, lam={lam})")
            opt.step([gW, gb])
            total += loss * len(idx)
        losses.append(total / len(y))
    return W.astype(np.float32), b.astype(np.float32), losses


def _check_store(store, layers):
    missing = [l for l in layers if l not in store.layers]
    if missing:
        raise MissingLayer(f"store lacks layers {missing}")
    present = np.unique(store.labels)
    if len(present) < store.num_classes:
        raise InvalidParam(f"probe labels cover only classes {present.tolist()}")


def _job(args):
    kind, X, y, K, layer, eta, lam, seed, epochs, extra = args
    if kind == "linear":
        W, b, losses = train_linear(X, y, K, eta, lam, epochs, seed)
        return ILC(layer, W, b, eta, lam, seed, losses)
    return train_mlp(X, y, K, eta, lam, epochs, seed, layer=layer, **extra)


def _run_jobs(jobs_args, jobs: int):
    if jobs > 1 and len(jobs_args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(_job, jobs_args, chunksize=max(1, len(jobs_args) // (4 * jobs))))
    return [_job(a) for a in jobs_args]


def _sweep(kind, store, grid, epochs, seeds, layers, jobs, extra=None) -> ProbeSet:
    if epochs <= 0:
        raise InvalidParam("epochs must be positive")
    layers = list(store.layers if layers is None else layers)
    _check_store(store, layers)
    args = []
    for l in layers:
        X = store.layer(l)
        for (eta, lam), seed in itertools.product(grid.configs(), seeds):
            args.append((kind, X, store.labels, store.num_classes, l, eta, lam, int(seed), epochs, extra or {}))
    results = _run_jobs(args, jobs)
    probes: dict[int, dict] = {l: {} for l in layers}
    for a, p in zip(args, results):
        probes[a[4]][(a[5], a[6], a[7])] = p
    return ProbeSet(probes, epochs, grid, [int(s) for s in seeds])


def train_ilcs(store, grid: HyperGrid, epochs: int = DEFAULT_EPOCHS, seeds: Sequence[int] = (0, 1, 2),
               layers: Sequence[int] | None = None, jobs: int = 1) -> ProbeSet:
    """Train one ILC per (layer, eta, lam, seed) on the probe store."""
    return _sweep("linear", store, grid, epochs, seeds, layers, jobs)


def last_layer_retrain(store, grid: HyperGrid, epochs: int = DEFAULT_EPOCHS, seeds: Sequence[int] = (0, 1, 2),
                       jobs: int = 1) -> ProbeSet:
    """ILC sweep restricted to the penultimate layer L-1 (the highest layer in the store)."""
    return train_ilcs(store, grid, epochs, seeds, layers=[max(store.layers)], jobs=jobs)


def score(pred, store, metric: str) -> float:
    if metric == "wga":
        return worst_group_accuracy(pred, store.labels, store.groups).value
    return accuracy(pred, store.labels)


def probe_predict(p, features) -> np.ndarray:
    if isinstance(p, NonLinearProbe):
        return mlp_predict(p, features)
    return ilc_predict(p, features)


@dataclass
class Selection:
    layer: int
    ilcs: list
    score: float
    config: tuple[float, float]
    layer_scores: dict[int, float]
    layer_configs: dict[int, tuple[float, float]]
    table: list[tuple] = field(default_factory=list)


def config_scores(ps: ProbeSet, valid_store, metric: str = "accuracy", layers=None):
    """Validation metric per (layer, eta, lam, seed)."""
    if valid_store.num_samples == 0:
        raise EmptyValidation("validation store is empty")
    out = {}
    for l in (ps.layers if layers is None else layers):
        X = valid_store.layer(l)
        for key, p in ps.probes[l].items():
            out[(l, *key)] = score(probe_predict(p, X), valid_store, metric)
    return out


def select_layer(ps: ProbeSet, valid_store, metric: str = "accuracy", max_layer: int | None = None,
                 min_layer: int = 1) -> Selection:
    """Pick l* <= max_layer by best mean-over-seeds validation metric.

    Per layer the best (eta, lam) is the first grid entry reaching the
    highest seed-averaged score; across layers ties go to the smaller index.
    ``max_layer`` defaults to L-2, i.e. one below the deepest probed layer.
    """
    if valid_store.num_samples == 0:
        raise EmptyValidation("validation store is empty")
    if max_layer is None:
        max_layer = max(ps.layers) - 1
    cands = [l for l in ps.layers if min_layer <= l <= max_layer]
    if not cands:
        raise MissingLayer(f"no probed layers in [{min_layer}, {max_layer}]")
    scores = config_scores(ps, valid_store, metric, cands)
    table = sorted(scores.items())
    best_layer, best_score, best_cfg = None, -np.inf, None
    layer_scores, layer_cfgs = {}, {}
    for l in cands:
        cfg_best, cfg_score = None, -np.inf
        for eta, lam in ps.grid.configs():
            s = float(np.mean([scores[(l, eta, lam, seed)] for seed in ps.seeds]))
            if s > cfg_score:
                cfg_best, cfg_score = (eta, lam), s
        layer_scores[l], layer_cfgs[l] = cfg_score, cfg_best
        if cfg_score > best_score:
            best_layer, best_score, best_cfg = l, cfg_score, cfg_best
    ps.val_scores.update(layer_scores)
    ilcs = [ps.probes[best_layer][(*best_cfg, seed)] for seed in ps.seeds]
    return Selection(best_layer, ilcs, best_score, best_cfg, layer_scores, layer_cfgs,
                     [(k, v) for k, v in table])


def infer(l_star: int, ilc: ILC, b: bb.Backbone, x, on_layer=None) -> np.ndarray:
    """Truncated inference: r_{l*} from layers 1..l* only, then argmax of the ILC logits."""
    if ilc.layer != l_star:
        raise ShapeError(f"probe belongs to layer {ilc.layer}, not {l_star}")
    return np.argmax(infer_logits(l_star, ilc, b, x, on_layer), axis=1)


def infer_logits(l_star: int, ilc: ILC, b: bb.Backbone, x, on_layer=None) -> np.ndarray:
    feats = bb.forward_truncated(b, x, l_star, on_layer).astype(np.float32)
    return ilc_forward(ilc, feats)


# ---------------------------------------------------------------- MLP probes

@dataclass
class NonLinearProbe:
    layer: int
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    eta: float
    lam: float
    seed: int
    losses: list[float] = field(default_factory=list)

    @property
    def num_params(self) -> int:
        return self.W1.size + self.b1.size + self.W2.size + self.b2.size


def mlp_logits(p: NonLinearProbe, features) -> np.ndarray:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] != p.W1.shape[1]:
        raise ShapeError(f"feature width {f.shape[-1]} != probe width {p.W1.shape[1]}")
    h = np.maximum(f @ np.asarray(p.W1, np.float64).T + p.b1, 0.0)
    return h @ np.asarray(p.W2, np.float64).T + p.b2


def mlp_predict(p: NonLinearProbe, features) -> np.ndarray:
    return np.argmax(mlp_logits(p, features), axis=1)


def mlp_objective(params, X, y, lam):
    W1, b1, W2, b2 = params
    n = len(y)
    a = X @ W1.T + b1
    h = np.maximum(a, 0.0)
    z = h @ W2.T + b2
    loss = bb.cross_entropy(z, y) + lam * (np.abs(W1).sum() + np.abs(W2).sum())
    d = bb.softmax(z)
    d[np.arange(n), y] -= 1.0
    d /= n
    gW2 = d.T @ h + lam * np.sign(W2)
    gb2 = d.sum(axis=0)
    dh = (d @ W2) * (a > 0)
    gW1 = dh.T @ X + lam * np.sign(W1)
    gb1 = dh.sum(axis=0)
    return loss, [gW1, gb1, gW2, gb2]


def train_mlp(X, y, num_classes, eta, lam, epochs, seed, layer=0, hidden=MLP_HIDDEN, init="uniform",
              batch_size=BATCH_SIZE) -> NonLinearProbe:
    """One-hidden-layer ReLU probe. ``init="zero"`` starts every parameter at 0."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    d = X.shape[1]
    if init == "zero":
        params = [np.zeros((hidden, d)), np.zeros(hidden), np.zeros((num_classes, hidden)), np.zeros(num_classes)]
    else:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 22]))
        b_in, b_out = 1 / np.sqrt(d), 1 / np.sqrt(hidden)
        params = [rng.uniform(-b_in, b_in, (hidden, d)), rng.uniform(-b_in, b_in, hidden),
                  rng.uniform(-b_out, b_out, (num_classes, hidden)), rng.uniform(-b_out, b_out, num_classes)]
    opt = bb.Adam(params, eta)
    losses = []
    for order in batch_orders(len(y), epochs, seed):
        total = 0.0
        for s in range(0, len(y), batch_size):
            idx = order[s:s + batch_size]
            loss, grads = mlp_objective(params, X[idx], y[idx], lam)
            if not np.isfinite(loss):
                raise DivergenceError(f"MLP probe loss non-finite (eta={eta}, lam={lam})")
            opt.step(grads)
            total += loss * len(idx)
        losses.append(total / len(y))
    W1, b1, W2, b2 = (p.astype(np.float32) for p in params)
    return NonLinearProbe(layer, W1, b1, W2, b2, eta, lam, int(seed), losses)


def train_nonlinear_probes(store, grid: HyperGrid, epochs: int = DEFAULT_EPOCHS, seeds: Sequence[int] = (0, 1, 2),
                           layers: Sequence[int] | None = None, jobs: int = 1, hidden: int = MLP_HIDDEN,
                           init: str = "uniform") -> ProbeSet:
    """Same sweep as ``train_ilcs`` with a 512-unit ReLU MLP probe."""
    return _sweep("mlp", store, grid, epochs, seeds, layers, jobs, dict(hidden=hidden, init=init))


# ---------------------------------------------------------------- checkpoints

PROBE_MAGIC = b"ILCP"


def _arrays(p):
    if isinstance(p, NonLinearProbe):
        return "mlp", [p.W1, p.b1, p.W2, p.b2]
    return "linear", [p.W, p.b]


def save_probeset(path, ps: ProbeSet) -> None:
    """Magic, u32 index length, JSON index, then little-endian float32 parameter blocks."""
    entries, blobs, offset = [], [], 0
    for l in ps.layers:
        for (eta, lam, seed), p in sorted(ps.probes[l].items()):
            kind, arrs = _arrays(p)
            shapes = [list(a.shape) for a in arrs]
            raw = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrs)
            entries.append(dict(layer=l, eta=eta, lam=lam, seed=seed, kind=kind, shapes=shapes,
                                offset=offset, nbytes=len(raw), losses=[float(x) for x in p.losses]))
            blobs.append(raw)
            offset += len(raw)
    index = dict(epochs=ps.epochs, seeds=ps.seeds, grid=dict(etas=list(ps.grid.etas), lambdas=list(ps.grid.lambdas),
                                                             scenario=ps.grid.scenario), entries=entries)
    head = json.dumps(index, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(PROBE_MAGIC)
        f.write(struct.pack("<I", len(head)))
        f.write(head)
        for raw in blobs:
            f.write(raw)


def load_probeset(path) -> ProbeSet:
    data = open(path, "rb").read()
    if data[:4] != PROBE_MAGIC:
        raise FormatError(f"{path}: not a probe checkpoint")
    (n,) = struct.unpack_from("<I", data, 4)
    index = json.loads(data[8:8 + n])
    base = 8 + n
    probes: dict[int, dict] = {}
    for e in index["entries"]:
        pos = base + e["offset"]
        arrs = []
        for shape in e["shapes"]:
            count = int(np.prod(shape))
            arrs.append(np.frombuffer(data, "<f4", count, pos).reshape(shape).astype(np.float32))
            pos += 4 * count
        if e["kind"] == "mlp":
            p = NonLinearProbe(e["layer"], *arrs, e["eta"], e["lam"], e["seed"], e["losses"])
        else:
            p = ILC(e["layer"], arrs[0], arrs[1], e["eta"], e["lam"], e["seed"], e["losses"])
        probes.setdefault(e["layer"], {})[(e["eta"], e["lam"], e["seed"])] = p
    g = index["grid"]
    return ProbeSet(probes, index["epochs"], HyperGrid(tuple(g["etas"]), tuple(g["lambdas"]), g["scenario"]),
                    index["seeds"])

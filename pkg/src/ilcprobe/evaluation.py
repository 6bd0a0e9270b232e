"""Evaluation protocols: zero-shot Base/Last/Best and the few-shot pi sweep."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import backbone as bb
from . import probe_engine as pe
from .errors import InvalidParam
from .feature_store import extract_store
from .metrics import EvalResult, accuracy, evaluate, group_accuracies, worst_group_accuracy  # noqa: F401
from .synth_data import ID, Scenario, SplitBundle

DEFAULT_PIS = (0.01, 0.03, 0.05, 0.1, 0.25, 0.5, 1.0)
METHOD_BEST = "best_layer"
METHOD_LAST = "last_layer"
METHOD_BASE = "base"


def default_metric(shift_kind) -> str:
    """WGA for subpopulation shifts, accuracy otherwise."""
    return "wga" if str(getattr(shift_kind, "value", shift_kind)) == "Subpopulation" else "accuracy"


def _eval_probes(ilcs, store, layer, metric, split) -> EvalResult:
    """Seed-averaged metric of a list of probes (one per seed) on ``store``."""
    results = [evaluate(pe.probe_predict(p, store.layer(layer)), store.labels, store.groups, metric, split)
               for p in ilcs]
    per_group = {g: float(np.mean([r.per_group.get(g, np.nan) for r in results])) for g in results[0].per_group}
    return EvalResult(split, metric, float(np.mean([r.value for r in results])), per_group, results[0].n)


@dataclass
class ZeroShotResult:
    base: EvalResult
    last: EvalResult
    best: EvalResult
    l_star: int
    selection: pe.Selection
    last_selection: pe.Selection
    probes: pe.ProbeSet
    audit: dict = field(default_factory=dict)

    def rows(self):
        L = self.last_selection.layer + 1
        return [
            (METHOD_BASE, L, self.base),
            (METHOD_LAST, L - 1, self.last),
            (METHOD_BEST, self.l_star, self.best),
        ]


def audit_probe_split(store) -> int:
    """Number of OOD rows in a probe-training store (must be 0 for zero-shot)."""
    tags = store.dist_tags
    if tags is None:
        raise InvalidParam("store carries no distribution tags; cannot audit")
    return int(np.sum(tags != ID))


def run_zero_shot(bundle: SplitBundle, backbone: bb.Backbone, grid: pe.HyperGrid | None = None,
                  seeds: Sequence[int] = (0, 1, 2), epochs: int = pe.DEFAULT_EPOCHS, metric: str | None = None,
                  max_layer: int | None = None, stores: dict | None = None, jobs: int = 1) -> ZeroShotResult:
    """Base head vs. last-layer retraining vs. best intermediate ILC, all on D_test.

    Probes train on the ID probe split only; D_valid (OOD) is used for
    hyperparameter and layer selection.
    """
    if Scenario(bundle.scenario) != Scenario.ZERO_SHOT:
        raise InvalidParam("run_zero_shot needs a zero-shot bundle")
    grid = grid or pe.HyperGrid.zero_shot()
    metric = metric or default_metric(bundle.test.shift_kind)
    if stores is None:
        stores = {name: extract_store(backbone, getattr(bundle, name), name) for name in ("probe", "valid", "test")}
    probe, valid, test = stores["probe"], stores["valid"], stores["test"]
    n_ood = audit_probe_split(probe)
    if n_ood:
        raise InvalidParam(f"zero-shot probe split contains {n_ood} OOD samples")

    L = backbone.depth
    ps = pe.train_ilcs(probe, grid, epochs, seeds, layers=list(range(1, L)), jobs=jobs)
    sel = pe.select_layer(ps, valid, metric, max_layer=L - 2 if max_layer is None else min(max_layer, L - 2))
    last_sel = pe.select_layer(ps, valid, metric, max_layer=L - 1, min_layer=L - 1)

    base_pred = bb.predict(backbone, bundle.test.x)
    base = evaluate(base_pred, bundle.test.y, bundle.test.g, metric, "test")
    last = _eval_probes(last_sel.ilcs, test, L - 1, metric, "test")
    best = _eval_probes(sel.ilcs, test, sel.layer, metric, "test")
    audit = {"probe_ood_samples": n_ood, "probe_rows": probe.num_samples}
    return ZeroShotResult(base, last, best, sel.layer, sel, last_sel, ps, audit)


@dataclass
class PiSweepResult:
    pis: list[float]
    per_pi: dict[float, tuple[EvalResult, EvalResult]]
    rows: list[dict] = field(default_factory=list)
    std: dict[float, tuple[float, float]] = field(default_factory=dict)


def run_few_shot(bundle: SplitBundle, backbone: bb.Backbone, grid: pe.HyperGrid | None = None,
                 seeds: Sequence[int] = (0,), epochs: int = pe.DEFAULT_EPOCHS, metric: str | None = None,
                 max_layer: int | None = None, jobs: int = 1):
    """Best ILC and last-layer retraining trained on an OOD probe split.

    Returns ``(best, last, selection, last_selection)``.
    """
    if Scenario(bundle.scenario) != Scenario.FEW_SHOT:
        raise InvalidParam("run_few_shot needs a few-shot bundle")
    grid = grid or pe.HyperGrid.few_shot()
    metric = metric or default_metric(bundle.test.shift_kind)
    stores = {name: extract_store(backbone, getattr(bundle, name), name) for name in ("probe", "valid", "test")}
    L = backbone.depth
    ps = pe.train_ilcs(stores["probe"], grid, epochs, seeds, layers=list(range(1, L)), jobs=jobs)
    sel = pe.select_layer(ps, stores["valid"], metric, max_layer=L - 2 if max_layer is None else min(max_layer, L - 2))
    last_sel = pe.select_layer(ps, stores["valid"], metric, max_layer=L - 1, min_layer=L - 1)
    best = _eval_probes(sel.ilcs, stores["test"], sel.layer, metric, "test")
    last = _eval_probes(last_sel.ilcs, stores["test"], L - 1, metric, "test")
    return best, last, sel, last_sel


def run_pi_sweep(bundle_factory: Callable[[float, int], SplitBundle], backbone: bb.Backbone | Callable,
                 pis: Sequence[float] = DEFAULT_PIS, grid: pe.HyperGrid | None = None,
                 seeds: Sequence[int] = (0, 1, 2), epochs: int = pe.DEFAULT_EPOCHS, metric: str | None = None,
                 jobs: int = 1) -> PiSweepResult:
    """Few-shot protocol for each pi and seed, aggregated as mean and sample std over seeds.

    ``bundle_factory(pi, seed)`` builds the few-shot splits; ``backbone`` is
    either a frozen model or a callable ``seed -> model``.
    """
    pis = [float(p) for p in pis]
    if any(b <= a for a, b in zip(pis, pis[1:])) or not all(0 < p <= 1 for p in pis):
        raise InvalidParam("pis must be strictly increasing in (0, 1]")
    rows, per_pi, std = [], {}, {}
    for pi in pis:
        best_r, last_r = [], []
        for seed in seeds:
            bundle = bundle_factory(pi, int(seed))
            model = backbone(int(seed)) if callable(backbone) else backbone
            best, last, sel, _ = run_few_shot(bundle, model, grid, [int(seed)], epochs, metric, jobs=jobs)
            best_r.append(best)
            last_r.append(last)
            rows.append(dict(pi=pi, method=METHOD_BEST, layer=sel.layer, seed=int(seed), metric=best.metric, value=best.value))
            rows.append(dict(pi=pi, method=METHOD_LAST, layer=model.depth - 1, seed=int(seed), metric=last.metric, value=last.value))
        per_pi[pi] = (_mean_result(best_r), _mean_result(last_r))
        std[pi] = (_sd([r.value for r in best_r]), _sd([r.value for r in last_r]))
    return PiSweepResult(pis, per_pi, rows, std)


def _sd(v):
    return float(np.std(v, ddof=1)) if len(v) > 1 else 0.0


def _mean_result(results: list[EvalResult]) -> EvalResult:
    groups = sorted({g for r in results for g in r.per_group})
    per = {g: float(np.mean([r.per_group[g] for r in results if g in r.per_group])) for g in groups}
    return EvalResult(results[0].split, results[0].metric, float(np.mean([r.value for r in results])), per, results[0].n)


def summarize(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation."""
    return float(np.mean(values)), _sd(list(values))

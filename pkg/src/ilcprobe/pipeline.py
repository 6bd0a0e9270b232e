"""Declarative experiment configs and the on-disk stage pipeline.

Stages: generate -> train-backbone -> extract -> probe -> evaluate ->
analyze -> report. Each stage reads its inputs from the artifact directory
and rewrites its outputs deterministically, so any stage can be rerun.
All randomness derives from ``root_seed`` through named substreams.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import os
import time
import warnings
import zlib
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import analysis as an
from . import backbone as bb
from . import probe_engine as pe
from . import synth_data as sd
from .errors import ConfigError, MissingArtifact, RankDeficiency
from .evaluation import _eval_probes, audit_probe_split, default_metric
from .feature_store import FeatureStore, extract_store, read_store, write_feature_store
from .metrics import evaluate

RESULT_COLUMNS = ["protocol", "dataset", "shift_kind", "pi", "method", "layer", "seed", "metric", "value", "config_hash"]
SWEEP_COLUMNS = ["layer", "eta", "lambda", "seed", "split", "metric", "value", "config_hash"]
ANALYSIS_COLUMNS = ["layer", "group", "metric", "value", "seed", "config_hash"]

DATASET_DEFAULTS = {
    "conditional": dict(generator="conditional", n_train=20000, n_test=2000, corr=0.9, label_noise=0.25,
                        n_holdout=20000, core_dim=24, color_dim=6, core_shift=0.5, core_noise=1.0, color_scale=2.0,
                        color_encoding="hue", hue_jitter=0.5),
    "subpopulation": dict(generator="subpopulation", n_per_group=[1000, 1000, 50, 50],
                          group_class_map={"0": 0, "1": 1, "2": 0, "3": 1}, n_test_per_group=500,
                          core_dim=16, nuisance_dim=4, class_shift=0.3, nuisance_shift=0.3, noise=1.0,
                          nuisance_spread=[0.3, 2.5]),
    "input_noise": dict(generator="input_noise", n_per_group=[500, 500], group_class_map={"0": 0, "1": 1},
                        n_test_per_group=1000, core_dim=24, nuisance_dim=8, class_shift=0.5,
                        nuisance_shift=0.0, noise=1.0, noise_kind="Gaussian", severity=1.0),
}

# backbone recipe and probe-set size per dataset; the large conditional train set
# with few epochs keeps the backbone from memorising the flipped labels
BACKBONE_DEFAULTS = {
    "conditional": dict(bottleneck=16, epochs=10),
    "subpopulation": dict(bottleneck=8, epochs=100),
    "input_noise": dict(bottleneck=8, epochs=100),
}
PROBE_SIZE_DEFAULTS = {"conditional": 2000}


def default_config(dataset: str = "conditional") -> dict:
    if dataset not in DATASET_DEFAULTS:
        raise ConfigError(f"unknown dataset {dataset!r}", "dataset.generator")
    return {
        "name": f"toy_{dataset}",
        "dataset": copy.deepcopy(DATASET_DEFAULTS[dataset]),
        "backbone": dict(width=64, depth=8, residual=[], lr=1e-3, batch_size=128, **BACKBONE_DEFAULTS[dataset]),
        "scenario": "zero-shot",
        "grid": None,
        "pis": [0.03, 0.05, 1.0],
        "seeds": [0, 1, 2],
        "root_seed": 0,
        "epochs": pe.DEFAULT_EPOCHS,
        "metric": None,
        "max_layer": None,
        "zero_shot_probe_size": PROBE_SIZE_DEFAULTS.get(dataset),
        "analysis": dict(tvd_bins=an.TVD_BINS, pca_dim=an.PCA_DIM),
    }


# ------------------------------------------------------------------ config


def set_dotted(cfg: dict, path: str, value):
    node = cfg
    keys = path.split(".")
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            node[k] = {}
        node = node[k]
    node[keys[-1]] = value


def parse_override(text: str):
    """``a.b=value`` with value parsed as JSON when possible."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value", text)
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _need(cond, msg, field):
    if not cond:
        raise ConfigError(msg, field)


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def validate_config(cfg: dict) -> dict:
    """Check every field against the preconditions of the stage that consumes it."""
    ds = cfg.get("dataset")
    _need(isinstance(ds, dict), "dataset section missing", "dataset")
    gen = ds.get("generator")
    _need(gen in DATASET_DEFAULTS, f"unknown generator {gen!r}", "dataset.generator")
    if gen == "conditional":
        for k in ("n_train", "n_test"):
            _need(_is_int(ds.get(k)) and ds[k] > 0, f"{k} must be a positive integer", f"dataset.{k}")
        _need(_is_int(ds.get("n_holdout", 0)) and ds.get("n_holdout", 0) >= 0,
              "n_holdout must be a non-negative integer", "dataset.n_holdout")
        _need(ds.get("color_encoding", "onehot") in sd.COLOR_ENCODINGS,
              f"color_encoding must be one of {list(sd.COLOR_ENCODINGS)}", "dataset.color_encoding")
        _need(_is_num(ds.get("hue_jitter", 0.5)) and 0 <= ds.get("hue_jitter", 0.5) <= 1,
              "hue_jitter must lie in [0, 1]", "dataset.hue_jitter")
        _need(_is_num(ds.get("corr")) and 0.5 < ds["corr"] <= 1, "corr must lie in (0.5, 1]", "dataset.corr")
        _need(_is_num(ds.get("label_noise")) and 0 <= ds["label_noise"] < 0.5,
              "label_noise must lie in [0, 0.5)", "dataset.label_noise")
    else:
        npg = ds.get("n_per_group")
        _need(isinstance(npg, list) and len(npg) >= 2 and all(_is_int(n) and n >= 1 for n in npg),
              "n_per_group must list >= 2 positive counts", "dataset.n_per_group")
        gcm = ds.get("group_class_map")
        _need(isinstance(gcm, dict) and sorted(int(k) for k in gcm) == list(range(len(npg))),
              "group_class_map must map every group index", "dataset.group_class_map")
        _need(len(set(gcm.values())) >= 2, "need at least two classes", "dataset.group_class_map")
        _need(_is_int(ds.get("n_test_per_group")) and ds["n_test_per_group"] >= 1,
              "n_test_per_group must be positive", "dataset.n_test_per_group")
        if gen == "input_noise":
            _need(ds.get("noise_kind") in sd.NOISE_KINDS, f"noise_kind must be one of {sd.NOISE_KINDS}",
                  "dataset.noise_kind")
            _need(_is_num(ds.get("severity")) and ds["severity"] >= 0, "severity must be >= 0", "dataset.severity")
    b = cfg.get("backbone")
    _need(isinstance(b, dict), "backbone section missing", "backbone")
    _need(_is_int(b.get("depth")) and b["depth"] >= 3, "depth must be >= 3", "backbone.depth")
    _need(_is_int(b.get("width")) and b["width"] > 0, "width must be positive", "backbone.width")
    _need(b.get("bottleneck") is None or (_is_int(b["bottleneck"]) and b["bottleneck"] > 0),
          "bottleneck must be positive or null", "backbone.bottleneck")
    _need(_is_int(b.get("epochs")) and b["epochs"] >= 0, "epochs must be >= 0", "backbone.epochs")
    _need(_is_num(b.get("lr")) and b["lr"] > 0, "lr must be positive", "backbone.lr")
    _need(_is_int(b.get("batch_size")) and b["batch_size"] > 0, "batch_size must be positive", "backbone.batch_size")
    _need(cfg.get("scenario") in ("zero-shot", "few-shot", "both"), "scenario must be zero-shot, few-shot or both",
          "scenario")
    pis = cfg.get("pis")
    _need(isinstance(pis, list) and pis and all(_is_num(p) and 0 < p <= 1 for p in pis),
          "pis must be a nonempty list in (0, 1]", "pis")
    _need(all(b2 > a for a, b2 in zip(pis, pis[1:])), "pis must be strictly increasing", "pis")
    seeds = cfg.get("seeds")
    _need(isinstance(seeds, list) and seeds and all(_is_int(s) for s in seeds), "seeds must be a list of ints", "seeds")
    _need(_is_int(cfg.get("root_seed")), "root_seed must be an int", "root_seed")
    _need(_is_int(cfg.get("epochs")) and cfg["epochs"] > 0, "epochs must be positive", "epochs")
    _need(cfg.get("metric") in (None, "accuracy", "wga"), "metric must be accuracy, wga or null", "metric")
    ml = cfg.get("max_layer")
    _need(ml is None or (_is_int(ml) and 1 <= ml <= b["depth"] - 2), "max_layer must lie in [1, L-2]", "max_layer")
    zp = cfg.get("zero_shot_probe_size")
    _need(zp is None or (_is_int(zp) and zp >= 2), "zero_shot_probe_size must be null or an int >= 2",
          "zero_shot_probe_size")
    grid = cfg.get("grid")
    if grid is not None:
        _need(isinstance(grid, dict) and grid.get("etas") and grid.get("lambdas") is not None,
              "grid needs etas and lambdas", "grid")
        _need(all(_is_num(e) and e > 0 for e in grid["etas"]), "etas must be positive", "grid.etas")
        _need(all(_is_num(v) and v >= 0 for v in grid["lambdas"]), "lambdas must be >= 0", "grid.lambdas")
    a = cfg.get("analysis", {})
    _need(_is_int(a.get("tvd_bins", an.TVD_BINS)) and a.get("tvd_bins", an.TVD_BINS) > 0, "tvd_bins must be positive",
          "analysis.tvd_bins")
    _need(_is_int(a.get("pca_dim", an.PCA_DIM)) and a.get("pca_dim", an.PCA_DIM) > 0, "pca_dim must be positive",
          "analysis.pca_dim")
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def derive_seed(root: int, stream: str, rep: int) -> int:
    """Independent 31-bit seed for a named substream of repetition ``rep``."""
    ss = np.random.SeedSequence([int(root), int(rep), zlib.crc32(stream.encode())])
    return int(ss.generate_state(1)[0] & 0x7FFFFFFF)


def grid_for(cfg: dict, scenario: str) -> pe.HyperGrid:
    if cfg.get("grid"):
        g = cfg["grid"]
        return pe.HyperGrid(tuple(g["etas"]), tuple(g["lambdas"]), "FewShot" if scenario == "few-shot" else "ZeroShot")
    return pe.HyperGrid.few_shot() if scenario == "few-shot" else pe.HyperGrid.zero_shot()


def scenarios(cfg: dict) -> list[str]:
    return ["zero-shot", "few-shot"] if cfg["scenario"] == "both" else [cfg["scenario"]]


def metric_for(cfg: dict) -> str:
    if cfg.get("metric"):
        return cfg["metric"]
    return "wga" if cfg["dataset"]["generator"] == "subpopulation" else "accuracy"


# ------------------------------------------------------------------ in-memory steps


def make_datasets(ds_cfg: dict, seed: int):
    p = {k: v for k, v in ds_cfg.items() if k != "generator"}
    gen = ds_cfg["generator"]
    if gen == "conditional":
        p.pop("n_holdout", None)
        return sd.gen_conditional_shift(seed=seed, **p)
    noise_kind, severity = p.pop("noise_kind", None), p.pop("severity", None)
    p["group_class_map"] = {int(k): int(v) for k, v in p["group_class_map"].items()}
    if "group_attr_map" in p:
        p["group_attr_map"] = {int(k): int(v) for k, v in p["group_attr_map"].items()}
    id_set, ood_set = sd.gen_subpopulation_shift(seed=seed, **p)
    if gen == "input_noise":
        ood_set = sd.gen_input_noise_shift(ood_set, noise_kind, severity, seed)
    return id_set, ood_set


def build_spec(cfg: dict, input_dim: int, num_classes: int):
    b = cfg["backbone"]
    return bb.default_spec(input_dim, num_classes, width=b["width"], depth=b["depth"],
                           residual=tuple(b.get("residual") or ()), bottleneck=b.get("bottleneck"))


def train_model(cfg: dict, id_set, rep: int) -> bb.Backbone:
    b = cfg["backbone"]
    model = bb.build_backbone(build_spec(cfg, id_set.input_dim, id_set.num_classes),
                              derive_seed(cfg["root_seed"], "backbone", rep))
    return bb.train_backbone(model, id_set, b["epochs"], b["lr"], b["batch_size"],
                             derive_seed(cfg["root_seed"], "backbone-train", rep))


def split_seed(cfg, rep):
    return derive_seed(cfg["root_seed"], "protocol", rep)


def probe_seed(cfg, rep):
    return derive_seed(cfg["root_seed"], "probe", rep)


# ------------------------------------------------------------------ disk layout


def make_holdout(ds_cfg: dict, seed: int):
    """Held-out ID sample for conditional configs, ``None`` otherwise."""
    if ds_cfg["generator"] != "conditional" or not ds_cfg.get("n_holdout"):
        return None
    p = {k: v for k, v in ds_cfg.items() if k not in ("generator", "n_holdout", "n_train", "n_test")}
    return sd.gen_conditional_holdout(ds_cfg["n_holdout"], ds_cfg["n_train"], ds_cfg["n_test"], seed=seed, **p)


class Artifacts:
    """Paths for one experiment. Stage artifacts live under ``$ILC_CACHE_DIR/<hash>``
    when the variable is set, otherwise under the output directory."""

    def __init__(self, cfg: dict, out: str | Path):
        self.cfg = cfg
        self.hash = config_hash(cfg)
        self.out = Path(out)
        cache = os.environ.get("ILC_CACHE_DIR")
        self.root = Path(cache) / self.hash if cache else self.out / "cache"

    def rep(self, rep: int) -> Path:
        return self.root / f"rep{rep}"

    def data(self, rep, which):
        return self.rep(rep) / "data" / f"{which}.ilcf"

    def ckpt(self, rep):
        return self.rep(rep) / "backbone.ckpt"

    def features(self, rep, scenario, split, pi=None):
        sub = scenario if pi is None else f"{scenario}/pi{pi:g}"
        return self.rep(rep) / "features" / sub / f"{split}.ilcf"

    def holdout_features(self, rep):
        return self.rep(rep) / "features" / "id_holdout.ilcf"

    def probes(self, rep, scenario, pi=None):
        name = scenario if pi is None else f"{scenario}-pi{pi:g}"
        return self.rep(rep) / "probes" / f"{name}.probes"

    def table(self, name):
        return self.out / name

    def timing(self, stage):
        return self.out / "timings" / f"{stage}.json"


def _require(path: Path):
    if not path.exists():
        raise MissingArtifact(f"missing artifact {path}")
    return path


def _settings(cfg):
    """(scenario, pi) combinations the config asks for."""
    out = []
    for sc in scenarios(cfg):
        if sc == "zero-shot":
            out.append((sc, None))
        else:
            out.extend((sc, float(p)) for p in cfg["pis"])
    return out


def _split_names(scenario):
    return ("train", "valid", "test") if scenario == "zero-shot" else ("probe", "valid", "test")


def dataset_store(ds, split_name, provenance) -> FeatureStore:
    prov = dict(provenance, sample_ids=[int(i) for i in ds.ids], dist_tags=[int(t) for t in ds.dist_tags],
                shift_kind=ds.shift_kind.value, seed=int(ds.seed))
    return FeatureStore.from_arrays({0: ds.x}, ds.y, ds.g, ds.num_classes, ds.num_groups, split_name, prov)


def load_dataset(path) -> sd.LabeledDataset:
    st = read_store(_require(Path(path)))
    prov = st.manifest.provenance
    return sd.LabeledDataset(
        x=st.layer(0).astype(np.float64), y=st.labels, g=st.groups,
        ids=np.asarray(prov["sample_ids"], dtype=np.int64), dist_tags=np.asarray(prov["dist_tags"], dtype=np.int8),
        num_classes=st.num_classes, num_groups=st.manifest.num_groups, seed=prov["seed"],
        shift_kind=sd.ShiftKind(prov["shift_kind"]), params=prov.get("generator", {}),
    )


def _timed(art: Artifacts, stage: str):
    class _T:
        def __enter__(self):
            self.t = time.perf_counter()

        def __exit__(self, *exc):
            if exc[0] is None:
                p = art.timing(stage)
                p.parent.mkdir(parents=True, exist_ok=True)
                p.write_text(json.dumps({"stage": stage, "seconds": time.perf_counter() - self.t}) + "\n")

    return _T()


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in columns])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return ""
    return str(v)


def write_csv(path: Path, columns, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_csv_text(columns, rows))


def read_csv(path: Path) -> list[dict]:
    with open(_require(path), newline="") as f:
        return list(csv.DictReader(f))


# ------------------------------------------------------------------ stages


def stage_generate(cfg, art: Artifacts):
    with _timed(art, "generate"):
        for rep in cfg["seeds"]:
            seed = derive_seed(cfg["root_seed"], "dataset", rep)
            id_set, ood_set = make_datasets(cfg["dataset"], seed)
            prov = {"generator": id_set.params, "config_hash": art.hash}
            art.data(rep, "id").parent.mkdir(parents=True, exist_ok=True)
            write_feature_store(art.data(rep, "id"), dataset_store(id_set, "id", prov))
            write_feature_store(art.data(rep, "ood"), dataset_store(ood_set, "ood", dict(prov, generator=ood_set.params)))
            files = ["id.ilcf", "ood.ilcf"]
            hold = make_holdout(cfg["dataset"], seed)
            if hold is not None:
                write_feature_store(art.data(rep, "id_holdout"),
                                    dataset_store(hold, "id_holdout", dict(prov, generator=hold.params)))
                files.append("id_holdout.ilcf")
            manifest = {"generator": cfg["dataset"]["generator"], "params": cfg["dataset"], "seed": seed,
                        "rep": rep, "config_hash": art.hash, "files": files}
            (art.rep(rep) / "data" / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def stage_train_backbone(cfg, art: Artifacts):
    with _timed(art, "train-backbone"):
        for rep in cfg["seeds"]:
            id_set = load_dataset(art.data(rep, "id"))
            model = train_model(cfg, id_set, rep)
            bb.save_backbone(art.ckpt(rep), model)


def make_bundle(cfg, id_set, ood_set, scenario, pi, rep):
    sc = sd.Scenario.ZERO_SHOT if scenario == "zero-shot" else sd.Scenario.FEW_SHOT
    return sd.make_splits(id_set, ood_set, sc, pi, split_seed(cfg, rep), n_id_probe=cfg.get("zero_shot_probe_size"))


def stage_extract(cfg, art: Artifacts):
    with _timed(art, "extract"):
        for rep in cfg["seeds"]:
            id_set, ood_set = load_dataset(art.data(rep, "id")), load_dataset(art.data(rep, "ood"))
            model = bb.load_backbone(_require(art.ckpt(rep)))
            ckpt_hash = hashlib.sha256(art.ckpt(rep).read_bytes()).hexdigest()[:16]
            for scenario, pi in _settings(cfg):
                bundle = make_bundle(cfg, id_set, ood_set, scenario, pi, rep)
                parts = dict(zip(_split_names(scenario), (bundle.probe, bundle.valid, bundle.test)))
                for name, ds in parts.items():
                    path = art.features(rep, scenario, name, pi)
                    path.parent.mkdir(parents=True, exist_ok=True)
                    prov = {"backbone_sha256": ckpt_hash, "config_hash": art.hash, "rep": rep,
                            "scenario": scenario, "pi": pi, "generator": cfg["dataset"]}
                    write_feature_store(path, extract_store(model, ds, name, prov))
            if _has_holdout(cfg):
                hold = load_dataset(_require(art.data(rep, "id_holdout")))
                prov = {"backbone_sha256": ckpt_hash, "config_hash": art.hash, "rep": rep, "generator": cfg["dataset"]}
                write_feature_store(art.holdout_features(rep), extract_store(model, hold, "id_holdout", prov))


def _has_holdout(cfg):
    return cfg["dataset"]["generator"] == "conditional" and bool(cfg["dataset"].get("n_holdout"))


def _load_split_stores(art, rep, scenario, pi):
    return {n: read_store(_require(art.features(rep, scenario, n, pi))) for n in _split_names(scenario)}


def stage_probe(cfg, art: Artifacts, jobs: int = 1):
    rows = []
    metric = metric_for(cfg)
    with _timed(art, "probe"):
        for rep in cfg["seeds"]:
            for scenario, pi in _settings(cfg):
                stores = _load_split_stores(art, rep, scenario, pi)
                probe = stores["train" if scenario == "zero-shot" else "probe"]
                if scenario == "zero-shot" and audit_probe_split(probe):
                    raise ConfigError("zero-shot probe split contains OOD samples", "scenario")
                ps = pe.train_ilcs(probe, grid_for(cfg, scenario), cfg["epochs"], [probe_seed(cfg, rep)], jobs=jobs)
                path = art.probes(rep, scenario, pi)
                path.parent.mkdir(parents=True, exist_ok=True)
                pe.save_probeset(path, ps)
                for l in ps.layers:
                    for (eta, lam, seed), p in sorted(ps.probes[l].items()):
                        for split, st in (("probe", probe), ("valid", stores["valid"]), ("test", stores["test"])):
                            pred = pe.probe_predict(p, st.layer(l))
                            rows.append(dict(layer=l, eta=eta, **{"lambda": lam}, seed=rep, split=_tag(scenario, pi, split),
                                             metric=metric, value=pe.score(pred, st, metric), config_hash=art.hash))
    write_csv(art.table("sweep.csv"), SWEEP_COLUMNS, rows)
    return rows


def _tag(scenario, pi, split):
    return f"{scenario}:{split}" if pi is None else f"{scenario}:pi={pi:g}:{split}"


def stage_evaluate(cfg, art: Artifacts):
    rows, selections = [], []
    metric = metric_for(cfg)
    ds_name = cfg.get("name", cfg["dataset"]["generator"])
    shift = {"conditional": "Conditional", "subpopulation": "Subpopulation",
             "input_noise": "InputNoise"}[cfg["dataset"]["generator"]]
    ml = cfg.get("max_layer")
    with _timed(art, "evaluate"):
        for rep in cfg["seeds"]:
            model = bb.load_backbone(_require(art.ckpt(rep)))
            L = model.depth
            hold = read_store(_require(art.holdout_features(rep))) if _has_holdout(cfg) else None
            for scenario, pi in _settings(cfg):
                stores = _load_split_stores(art, rep, scenario, pi)
                ps = pe.load_probeset(_require(art.probes(rep, scenario, pi)))
                sel = pe.select_layer(ps, stores["valid"], metric, max_layer=L - 2 if ml is None else ml)
                last = pe.select_layer(ps, stores["valid"], metric, max_layer=L - 1, min_layer=L - 1)
                test = stores["test"]
                base = {"protocol": scenario, "dataset": ds_name, "shift_kind": shift, "pi": pi, "seed": rep,
                        "config_hash": art.hash}
                res = [("best_layer", sel.layer, _eval_probes(sel.ilcs, test, sel.layer, metric, "test")),
                       ("last_layer", L - 1, _eval_probes(last.ilcs, test, L - 1, metric, "test"))]
                if scenario == "zero-shot":
                    ood = load_dataset(art.data(rep, "ood"))
                    test_ids = set(test.sample_ids.tolist())
                    mask = np.array([i in test_ids for i in ood.ids])
                    tds = ood.subset(np.flatnonzero(mask))
                    res.insert(0, ("base", L, evaluate(bb.predict(model, tds.x), tds.y, tds.g, metric, "test")))
                for method, layer, r in res:
                    rows.append(dict(base, method=method, layer=layer, metric=metric, value=r.value))
                for l in ps.layers:
                    rows.append(dict(base, method="ilc_valid", layer=l, metric=metric,
                                     value=sel.layer_scores.get(l, last.layer_scores.get(l))))
                    probe = stores["train" if scenario == "zero-shot" else "probe"]
                    best_probe_acc = max(pe.score(pe.probe_predict(p, probe.layer(l)), probe, "accuracy")
                                         for p in ps.probes[l].values())
                    rows.append(dict(base, method="ilc_probe_fit", layer=l, metric="accuracy", value=best_probe_acc))
                    if scenario == "zero-shot" and hold is not None:
                        # fresh ID rows: best config per layer, averaged over probe seeds
                        per_cfg = defaultdict(list)
                        for (eta, lam, _), p in ps.probes[l].items():
                            per_cfg[(eta, lam)].append(pe.score(pe.probe_predict(p, hold.layer(l)), hold, "accuracy"))
                        acc = max(float(np.mean(v)) for v in per_cfg.values())
                        rows.append(dict(base, method="ilc_id_holdout", layer=l, metric="accuracy", value=acc))
                selections.append(dict(rep=rep, scenario=scenario, pi=pi, l_star=sel.layer,
                                       config=list(sel.config), score=sel.score))
    write_csv(art.table("results.csv"), RESULT_COLUMNS, rows)
    art.table("results.json").write_text(json.dumps({"rows": rows, "selections": selections}, indent=1,
                                                    sort_keys=True, default=_json_default) + "\n")
    return rows, selections


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))


def stage_analyze(cfg, art: Artifacts):
    rows = []
    plot = {"config_hash": art.hash, "reps": {}}
    a = cfg.get("analysis", {})
    bins, k = a.get("tvd_bins", an.TVD_BINS), a.get("pca_dim", an.PCA_DIM)
    with _timed(art, "analyze"):
        for rep in cfg["seeds"]:
            stores = _load_split_stores(art, rep, "zero-shot", None) if "zero-shot" in scenarios(cfg) else None
            if stores is None:
                pi = float(cfg["pis"][-1])
                stores = _load_split_stores(art, rep, "few-shot", pi)
                stores["train"] = stores["probe"]
            train, test = stores["train"], stores["test"]
            sens = an.sensitivity_profile(train, test)
            tvd = an.tvd_profile(train, test, bins=bins, per_group=True, seed=derive_seed(cfg["root_seed"], "tvd", rep))
            coll = an.collapse_profile(train)
            rp = {"sens": {}, "tvd": {}, "cdnv": {}, "nc1": {}, "pca": {}}
            for l in train.layers:
                for g, v in sorted(sens.per_layer[l].items()):
                    rows.append(dict(layer=l, group=g, metric="sens", value=v, seed=rep, config_hash=art.hash))
                rows.append(dict(layer=l, group="all", metric="tvd", value=tvd.per_layer[l], seed=rep, config_hash=art.hash))
                for g, v in sorted(tvd.per_group[l].items()):
                    rows.append(dict(layer=l, group=g, metric="tvd", value=v, seed=rep, config_hash=art.hash))
                rows.append(dict(layer=l, group="all", metric="cdnv", value=coll.per_layer[l], seed=rep, config_hash=art.hash))
                rows.append(dict(layer=l, group="all", metric="nc1", value=coll.nc1[l], seed=rep, config_hash=art.hash))
                X = train.layer(l)
                kk = min(k, *X.shape)
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RankDeficiency)
                    proj = an.fit_pca(X, kk, layer=l)
                ev = proj.explained_variance
                rows.append(dict(layer=l, group="all", metric="pca_explained_ratio",
                                 value=float(ev.sum() / max(np.var(X.astype(np.float64), axis=0, ddof=1).sum(), 1e-300)),
                                 seed=rep, config_hash=art.hash))
                two = an.project(proj, test.layer(l))[:, :2]
                rp["sens"][l] = {str(g): v for g, v in sens.per_layer[l].items()}
                rp["tvd"][l] = tvd.per_layer[l]
                rp["cdnv"][l] = coll.per_layer[l]
                rp["nc1"][l] = coll.nc1[l]
                rp["pca"][l] = {"test_xy": np.round(two[:200], 6).tolist(), "test_group": test.groups[:200].tolist()}
            plot["reps"][str(rep)] = rp
    write_csv(art.table("analysis.csv"), ANALYSIS_COLUMNS, rows)
    art.table("plot_data.json").write_text(json.dumps(plot, sort_keys=True, default=_json_default) + "\n")
    return rows


def aggregate_l_star(selections: list[dict]) -> list[dict]:
    """One l* per (scenario, pi): most frequent across seeds, ties to the smaller layer."""
    out = []
    keys = sorted({(s["scenario"], -1.0 if s["pi"] is None else s["pi"]) for s in selections})
    for sc, pi in keys:
        pi_v = None if pi == -1.0 else pi
        ls = [s["l_star"] for s in selections if s["scenario"] == sc and s["pi"] == pi_v]
        vals, counts = np.unique(ls, return_counts=True)
        out.append(dict(scenario=sc, pi=pi_v, l_star=int(vals[np.argmax(counts)]), per_seed=ls))
    return out


def stage_report(cfg, art: Artifacts):
    results = read_csv(art.table("results.csv"))
    sel = json.loads(_require(art.table("results.json")).read_text())["selections"]
    analysis_rows = read_csv(art.table("analysis.csv")) if art.table("analysis.csv").exists() else []
    summary = []
    groups: dict[tuple, list[float]] = {}
    for r in results:
        if r["method"] in ("base", "last_layer", "best_layer"):
            groups.setdefault((r["protocol"], r["pi"], r["method"], r["metric"]), []).append(float(r["value"]))
    for (protocol, pi, method, metric), vals in sorted(groups.items()):
        m = float(np.mean(vals))
        s = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        summary.append(dict(protocol=protocol, pi=pi, method=method, metric=metric, mean=m, std=s, n=len(vals),
                            config_hash=art.hash))
    write_csv(art.table("summary.csv"), ["protocol", "pi", "method", "metric", "mean", "std", "n", "config_hash"], summary)
    zero = {}
    for row in summary:
        if row["protocol"] == "zero-shot":
            zero[{"base": "base", "last_layer": "last", "best_layer": "best"}[row["method"]]] = row["mean"]
    timings = {}
    for p in sorted((art.out / "timings").glob("*.json")):
        d = json.loads(p.read_text())
        timings[d["stage"]] = d["seconds"]
    report = {
        "config_hash": art.hash,
        "config": cfg,
        "l_star": aggregate_l_star(sel),
        "zero_shot": zero,
        "summary": summary,
        "n_result_rows": len(results),
        "n_analysis_rows": len(analysis_rows),
        "wall_clock_seconds": timings,
    }
    art.table("report.json").write_text(json.dumps(report, indent=1, sort_keys=True, default=_json_default) + "\n")
    # every report invocation is also appended to a history log
    with open(art.table("report_history.jsonl"), "a") as f:
        f.write(json.dumps(dict(report, config=None), sort_keys=True, default=_json_default) + "\n")
    return report


STAGES = ["generate", "train-backbone", "extract", "probe", "evaluate", "analyze", "report"]


def run_stage(name, cfg, art, jobs=1):
    if name == "generate":
        return stage_generate(cfg, art)
    if name == "train-backbone":
        return stage_train_backbone(cfg, art)
    if name == "extract":
        return stage_extract(cfg, art)
    if name == "probe":
        return stage_probe(cfg, art, jobs)
    if name == "evaluate":
        return stage_evaluate(cfg, art)
    if name == "analyze":
        return stage_analyze(cfg, art)
    if name == "report":
        return stage_report(cfg, art)
    raise ConfigError(f"unknown stage {name}", "stage")

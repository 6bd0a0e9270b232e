"""Synthetic ID/OOD dataset generators and split construction.

Three shift families are covered:

* conditional shift: a colored-digit analog where a one-hot "color" block
  agrees with the (noisy) label with probability ``corr`` in-distribution
  and with probability 0.5 out-of-distribution;
* subpopulation shift: Gaussian group clusters whose ID proportions are
  imbalanced and whose OOD proportions are uniform;
* input noise: Gaussian / uniform / masking perturbations of a base set.

Every generator is a pure function of its arguments and seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .errors import InvalidParam

ID, OOD = 0, 1


class ShiftKind(str, Enum):
    CONDITIONAL = "Conditional"
    SUBPOPULATION = "Subpopulation"
    INPUT_NOISE = "InputNoise"


class Scenario(str, Enum):
    ZERO_SHOT = "ZeroShot"
    FEW_SHOT = "FewShot"


@dataclass(frozen=True)
class Sample:
    x: np.ndarray
    y: int
    g: int
    dist_tag: str
    sample_id: int


@dataclass
class LabeledDataset:
    """Column-oriented labeled dataset.

    ``ids`` carries sample identity; two datasets share a sample iff they
    share an id. ``dist_tags`` holds ``ID`` (0) or ``OOD`` (1) per row.
    """

    x: np.ndarray
    y: np.ndarray
    g: np.ndarray
    ids: np.ndarray
    dist_tags: np.ndarray
    num_classes: int
    num_groups: int
    seed: int
    shift_kind: ShiftKind
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.x)
        if self.x.ndim != 2:
            raise InvalidParam("x must be a 2-D array")
        for name in ("y", "g", "ids", "dist_tags"):
            if len(getattr(self, name)) != n:
                raise InvalidParam(f"{name} length does not match x")
        if n and (self.y.max() >= self.num_classes or self.y.min() < 0):
            raise InvalidParam("label out of range")
        if n and (self.g.max() >= self.num_groups or self.g.min() < 0):
            raise InvalidParam("group out of range")
        if not np.all(np.isfinite(self.x)):
            raise InvalidParam("non-finite input features")

    def __len__(self):
        return len(self.y)

    def __getitem__(self, i) -> Sample:
        tag = "ID" if self.dist_tags[i] == ID else "OOD"
        return Sample(self.x[i], int(self.y[i]), int(self.g[i]), tag, int(self.ids[i]))

    @property
    def input_dim(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(
            self,
            x=self.x[idx],
            y=self.y[idx],
            g=self.g[idx],
            ids=self.ids[idx],
            dist_tags=self.dist_tags[idx],
        )

    def group_counts(self) -> np.ndarray:
        return np.bincount(self.g, minlength=self.num_groups)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)


@dataclass
class SplitBundle:
    train: LabeledDataset
    probe: LabeledDataset
    valid: LabeledDataset
    test: LabeledDataset
    scenario: Scenario
    pi: float | None = None

    def check(self):
        """Assert the scenario/identity invariants of the bundle."""
        if self.scenario == Scenario.ZERO_SHOT:
            assert np.all(self.probe.dist_tags == ID), "zero-shot probe contains OOD rows"
        else:
            assert np.all(self.probe.dist_tags == OOD), "few-shot probe contains ID rows"
        assert not np.intersect1d(self.probe.ids, self.test.ids).size
        if self.pi is None or self.pi < 1.0:
            assert not np.intersect1d(self.valid.ids, self.test.ids).size


def _check_prob(name, value, lo, hi, lo_open=False, hi_open=False):
    ok_lo = value > lo if lo_open else value >= lo
    ok_hi = value < hi if hi_open else value <= hi
    if not (ok_lo and ok_hi):
        raise InvalidParam(f"{name}={value} out of range")


def _rng(seed, *stream):
    return np.random.default_rng(np.random.SeedSequence([int(seed), *stream]))


COLOR_ENCODINGS = ("onehot", "hue")


def _conditional_sampler(corr, label_noise, seed, core_dim, color_dim, core_shift, core_noise, color_scale,
                         color_encoding, hue_jitter, params):
    _check_prob("corr", corr, 0.5, 1.0, lo_open=True)
    _check_prob("label_noise", label_noise, 0.0, 0.5, hi_open=True)
    if color_dim < 2 or color_dim % 2:
        raise InvalidParam("color_dim must be a positive even number")
    if color_encoding not in COLOR_ENCODINGS:
        raise InvalidParam(f"unknown color_encoding {color_encoding!r}")
    proto = _rng(seed, 0).standard_normal(core_dim)
    proto /= np.linalg.norm(proto) / np.sqrt(core_dim)

    def draw(n, agree_p, stream, tag, id_offset):
        rng = _rng(seed, stream)
        digit = rng.integers(0, 2, n)
        flip = rng.random(n) < label_noise
        y = digit ^ flip
        agree = rng.random(n) < agree_p
        colour_cls = np.where(agree, y, 1 - y)
        half = color_dim // 2
        colour = colour_cls * half + rng.integers(0, half, n)
        core = (2 * digit - 1)[:, None] * core_shift * proto + core_noise * rng.standard_normal((n, core_dim))
        if color_encoding == "onehot":
            block = np.zeros((n, color_dim))
            block[np.arange(n), colour] = color_scale
        else:
            # palette entry k sits on sector 2*(k % half) + k // half, so the two label halves interleave
            # around the hue circle and no single hyperplane separates them
            sector = 2 * (colour % half) + colour // half
            theta = 2 * np.pi * (sector + 0.5 + hue_jitter * rng.uniform(-0.5, 0.5, n)) / color_dim
            block = color_scale * np.stack([np.cos(theta), np.sin(theta)], axis=1)
        x = np.concatenate([core, block], axis=1)
        return LabeledDataset(
            x=x, y=y.astype(np.int64), g=(2 * y + agree).astype(np.int64),
            ids=np.arange(id_offset, id_offset + n, dtype=np.int64),
            dist_tags=np.full(n, tag, dtype=np.int8),
            num_classes=2, num_groups=4, seed=seed,
            shift_kind=ShiftKind.CONDITIONAL, params=params,
        )

    return draw


def gen_conditional_shift(
    n_train: int,
    n_test: int,
    corr: float = 0.9,
    label_noise: float = 0.25,
    seed: int = 0,
    core_dim: int = 24,
    color_dim: int = 8,
    core_shift: float = 0.5,
    core_noise: float = 1.0,
    color_scale: float = 1.0,
    color_encoding: str = "onehot",
    hue_jitter: float = 0.5,
) -> tuple[LabeledDataset, LabeledDataset]:
    """Colored-digit analog with a spurious color block.

    A latent "digit" bit picks the core cluster. The observed label is the
    digit flipped with probability ``label_noise``. The color is drawn from
    the half of the palette belonging to the label with probability ``corr``
    (ID) or 0.5 (OOD). Groups are ``2 * y + agree``.

    ``color_encoding="onehot"`` writes the palette entry as a one-hot block of
    width ``color_dim``. ``"hue"`` writes a 2-d point on a circle of radius
    ``color_scale``, with the palette spread over ``color_dim`` sectors and
    ``hue_jitter`` the fraction of a sector each entry may wander over.
    """
    if n_train <= 0 or n_test <= 0:
        raise InvalidParam("n_train and n_test must be positive")
    params = dict(
        generator="conditional",
        n_train=n_train, n_test=n_test, corr=corr, label_noise=label_noise, seed=seed,
        core_dim=core_dim, color_dim=color_dim, core_shift=core_shift,
        core_noise=core_noise, color_scale=color_scale, color_encoding=color_encoding, hue_jitter=hue_jitter,
    )
    draw = _conditional_sampler(corr, label_noise, seed, core_dim, color_dim, core_shift, core_noise, color_scale,
                                color_encoding, hue_jitter, params)
    return draw(n_train, corr, 1, ID, 0), draw(n_test, 0.5, 2, OOD, n_train)


def gen_conditional_holdout(n: int, n_train: int, n_test: int, seed: int = 0, **kwargs) -> LabeledDataset:
    """Extra ID sample from the same distribution as ``gen_conditional_shift``'s ID set.

    Drawn from its own stream, so the train and OOD draws are unaffected.
    Ids continue after the OOD ids.
    """
    if n <= 0:
        raise InvalidParam("holdout size must be positive")
    id_set, _ = gen_conditional_shift(1, 1, seed=seed, **kwargs)
    params = dict(id_set.params, n_train=n_train, n_test=n_test, n_holdout=n)
    p = {k: params[k] for k in ("corr", "label_noise", "seed", "core_dim", "color_dim", "core_shift",
                                "core_noise", "color_scale", "color_encoding", "hue_jitter")}
    draw = _conditional_sampler(**p, params=params)
    return draw(n, p["corr"], 3, ID, n_train + n_test)


def default_attributes(group_class_map: Mapping[int, int]) -> dict[int, int]:
    """Nuisance value per group.

    Within each class, groups are enumerated in ascending group order; the
    j-th group of class c gets nuisance ``(c + j) % n_attr``. The first group
    of each class therefore shares its nuisance value with the class index,
    which makes it the "aligned" group.
    """
    n_attr = int(max(np.bincount(list(group_class_map.values()))))
    seen: dict[int, int] = {}
    attrs = {}
    for g in sorted(group_class_map):
        c = group_class_map[g]
        j = seen.get(c, 0)
        seen[c] = j + 1
        attrs[g] = int((c + j) % n_attr)
    return attrs


def gen_subpopulation_shift(
    n_per_group: Sequence[int],
    group_class_map: Mapping[int, int],
    n_test_per_group: int,
    seed: int = 0,
    core_dim: int = 16,
    nuisance_dim: int = 8,
    class_shift: float = 0.5,
    nuisance_shift: float = 1.5,
    noise: float = 1.0,
    group_attr_map: Mapping[int, int] | None = None,
    nuisance_spread: Sequence[float] | None = None,
) -> tuple[LabeledDataset, LabeledDataset]:
    """Gaussian group clusters with imbalanced ID and balanced OOD proportions.

    The mean of group g is ``class_shift * u[class] + nuisance_shift * v[attr]``
    where ``u`` spans the core block and ``v`` the nuisance block; both use
    signed prototype vectors so that classes (resp. attributes) sit on
    opposite sides of the origin when there are two of them.

    ``nuisance_spread`` optionally gives one standard deviation per attribute
    for the nuisance block (the core block always uses ``noise``). With a
    small ``nuisance_shift`` and unequal spreads the attribute is mostly
    carried by the spread, which a linear read-out of the raw input barely
    sees but a trained network learns to linearize.
    """
    G = len(n_per_group)
    group_class_map = {int(k): int(v) for k, v in group_class_map.items()}
    if G < 2 or sorted(group_class_map) != list(range(G)):
        raise InvalidParam("group_class_map must cover groups 0..G-1 with G >= 2")
    K = max(group_class_map.values()) + 1
    if K < 2 or sorted(set(group_class_map.values())) != list(range(K)):
        raise InvalidParam("group_class_map must use classes 0..K-1 with K >= 2")
    if any(int(n) < 1 for n in n_per_group) or n_test_per_group < 1:
        raise InvalidParam("every group needs at least one sample")
    attrs = dict(group_attr_map) if group_attr_map is not None else default_attributes(group_class_map)
    if sorted(attrs) != list(range(G)):
        raise InvalidParam("group_attr_map must cover every group")
    if len({(group_class_map[g], attrs[g]) for g in range(G)}) != G:
        raise InvalidParam("two groups share the same (class, attribute) pair")
    n_attr = max(attrs.values()) + 1
    if nuisance_spread is None:
        spread = np.full(n_attr, float(noise))
    else:
        spread = np.asarray(nuisance_spread, dtype=np.float64)
        if spread.shape != (n_attr,) or np.any(spread <= 0):
            raise InvalidParam(f"nuisance_spread needs {n_attr} positive values")

    rng = _rng(seed, 0)
    u = _prototypes(rng, K, core_dim)
    v = _prototypes(rng, n_attr, nuisance_dim)
    means = np.stack([
        np.concatenate([class_shift * u[group_class_map[g]], nuisance_shift * v[attrs[g]]])
        for g in range(G)
    ])
    params = dict(
        generator="subpopulation",
        n_per_group=[int(n) for n in n_per_group],
        group_class_map={str(k): int(v_) for k, v_ in group_class_map.items()},
        group_attr_map={str(k): int(v_) for k, v_ in attrs.items()},
        n_test_per_group=int(n_test_per_group), seed=seed, core_dim=core_dim,
        nuisance_dim=nuisance_dim, class_shift=class_shift,
        nuisance_shift=nuisance_shift, noise=noise,
        nuisance_spread=[float(v_) for v_ in spread],
    )
    attr_of = np.array([attrs[g] for g in range(G)])

    def draw(counts, stream, tag, id_offset):
        r = _rng(seed, stream)
        g = np.repeat(np.arange(G), counts)
        r.shuffle(g)
        scale = np.concatenate([np.full((len(g), core_dim), float(noise)),
                                np.repeat(spread[attr_of[g]][:, None], nuisance_dim, axis=1)], axis=1)
        x = means[g] + scale * r.standard_normal((len(g), means.shape[1]))
        y = np.array([group_class_map[k] for k in g], dtype=np.int64)
        return LabeledDataset(
            x=x, y=y, g=g.astype(np.int64),
            ids=np.arange(id_offset, id_offset + len(g), dtype=np.int64),
            dist_tags=np.full(len(g), tag, dtype=np.int8),
            num_classes=K, num_groups=G, seed=seed,
            shift_kind=ShiftKind.SUBPOPULATION, params=params,
        )

    id_set = draw([int(n) for n in n_per_group], 1, ID, 0)
    ood_set = draw([int(n_test_per_group)] * G, 2, OOD, len(id_set))
    return id_set, ood_set


def _prototypes(rng, m, dim):
    if m == 2:
        p = rng.standard_normal(dim)
        p *= np.sqrt(dim) / np.linalg.norm(p)
        return np.stack([-p, p])
    p = rng.standard_normal((m, dim))
    return p * (np.sqrt(dim) / np.linalg.norm(p, axis=1, keepdims=True))


NOISE_KINDS = ("Gaussian", "Uniform", "Mask")


def gen_input_noise_shift(base: LabeledDataset, noise_kind: str, severity: float, seed: int = 0) -> LabeledDataset:
    """Perturbed OOD copy of ``base``.

    Gaussian adds N(0, severity^2); Uniform adds U(-severity, severity);
    Mask zeroes each coordinate independently with probability ``severity``.
    """
    if noise_kind not in NOISE_KINDS:
        raise InvalidParam(f"unknown noise_kind {noise_kind!r}")
    if not severity >= 0:
        raise InvalidParam("severity must be nonnegative")
    if noise_kind == "Mask" and severity > 1:
        raise InvalidParam("mask severity is a probability")
    if len(base) == 0:
        raise InvalidParam("base dataset is empty")
    x = base.x.copy()
    if severity > 0:
        rng = _rng(seed, 3)
        if noise_kind == "Gaussian":
            x = x + severity * rng.standard_normal(x.shape)
        elif noise_kind == "Uniform":
            x = x + rng.uniform(-severity, severity, x.shape)
        else:
            x[rng.random(x.shape) < severity] = 0.0
    params = dict(base.params, noise_kind=noise_kind, severity=severity, noise_seed=seed)
    return replace(
        base, x=x, y=base.y.copy(), g=base.g.copy(), ids=base.ids.copy(),
        dist_tags=np.full(len(base), OOD, dtype=np.int8),
        shift_kind=ShiftKind.INPUT_NOISE, params=params,
    )


def make_splits(
    id_set: LabeledDataset,
    ood_set: LabeledDataset,
    scenario: Scenario | str,
    pi: float | None = None,
    seed: int = 0,
    n_id_probe: int | None = None,
) -> SplitBundle:
    """Build train/probe/valid/test splits for a scenario.

    The OOD pool is shuffled and cut in half. Zero-shot: probe is the ID
    train set (or a random ``n_id_probe`` rows of it, kept in original
    order), the halves become valid and test. Few-shot: the first half
    is the probe candidate pool; ``floor(pi * |candidate|)`` rows become the
    probe set and the rest validate. ``pi == 1`` is oracle mode where the
    whole candidate half trains and validation reuses the test half.
    """
    scenario = Scenario(scenario)
    perm = _rng(seed, 4).permutation(len(ood_set))
    half = len(ood_set) // 2
    first, second = ood_set.subset(perm[:half]), ood_set.subset(perm[half:])
    if scenario == Scenario.ZERO_SHOT:
        if pi is not None:
            raise InvalidParam("pi must be absent for the zero-shot scenario")
        probe = id_set
        if n_id_probe is not None:
            if n_id_probe < id_set.num_classes:
                raise InvalidParam(f"n_id_probe={n_id_probe} cannot cover {id_set.num_classes} classes")
            if n_id_probe < len(id_set):
                probe = id_set.subset(np.sort(_rng(seed, 6).permutation(len(id_set))[:n_id_probe]))
        return SplitBundle(id_set, probe, first, second, scenario, None)

    if pi is None or not 0 < pi <= 1:
        raise InvalidParam("few-shot requires pi in (0, 1]")
    if pi == 1:
        return SplitBundle(id_set, first, second, second, scenario, 1.0)
    n_probe = int(np.floor(pi * len(first)))
    if n_probe < ood_set.num_classes:
        raise InvalidParam(f"floor(pi * {len(first)}) = {n_probe} cannot cover {ood_set.num_classes} classes")
    order = _rng(seed, 5).permutation(len(first))
    probe = first.subset(np.sort(order[:n_probe]))
    valid = first.subset(np.sort(order[n_probe:]))
    return SplitBundle(id_set, probe, valid, second, scenario, float(pi))


def balance_groups(ds: LabeledDataset, seed: int = 0) -> LabeledDataset:
    """Subsample every group down to the smallest group's size.

    Selected rows keep their original relative order.
    """
    counts = ds.group_counts()
    present = counts[counts > 0]
    if len(present) < len(counts):
        raise InvalidParam("every group must be nonempty")
    m = int(present.min())
    rng = _rng(seed, 6)
    keep = [rng.choice(np.flatnonzero(ds.g == g), size=m, replace=False) for g in range(ds.num_groups)]
    return ds.subset(np.sort(np.concatenate(keep)))

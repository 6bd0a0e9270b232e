"""Numpy MLP backbone with optional residual blocks.

Layers are ``AffineRelu`` (relu(W h + b)), ``AffineResidualRelu``
(relu(h + W h + b)) and a final ``LinearHead``. Parameters live in float64
while training and are rounded to float32 when the model is frozen, so a
frozen backbone round-trips bit-exactly through its checkpoint.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import DivergenceError, FormatError, FrozenError, InvalidSpec, ShapeError

AFFINE_RELU = "AffineRelu"
RESIDUAL = "AffineResidualRelu"
HEAD = "LinearHead"
KINDS = (AFFINE_RELU, RESIDUAL, HEAD)

CKPT_MAGIC = b"ILCB"
CKPT_VERSION = 1

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int
    out_dim: int


@dataclass
class RepresentationBatch:
    layer: int
    matrix: np.ndarray
    sample_ids: np.ndarray


@dataclass
class Backbone:
    layers: list[LayerSpec]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    num_classes: int
    init_seed: int
    frozen: bool = False
    train_seed: int | None = None
    train_config: dict = field(default_factory=dict)
    history: list[float] = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def layer_dims(self) -> list[int]:
        """Output widths of layers 1..L-1."""
        return [s.out_dim for s in self.layers[:-1]]

    def params(self):
        for w, b in zip(self.weights, self.biases):
            yield w
            yield b

    def freeze(self) -> "Backbone":
        if not self.frozen:
            self.weights = [_readonly(w) for w in self.weights]
            self.biases = [_readonly(b) for b in self.biases]
            self.frozen = True
        return self

    def set_params(self, weights, biases):
        if self.frozen:
            raise FrozenError("backbone is frozen")
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]

    def spec_dict(self) -> list[dict]:
        return [asdict(s) for s in self.layers]


def _readonly(a):
    a = np.array(a, dtype=np.float32)
    a.setflags(write=False)
    return a


def parse_spec(spec: Sequence) -> list[LayerSpec]:
    out = []
    for s in spec:
        if isinstance(s, LayerSpec):
            out.append(s)
        elif isinstance(s, dict):
            out.append(LayerSpec(s["kind"], int(s["in_dim"]), int(s["out_dim"])))
        else:
            out.append(LayerSpec(s[0], int(s[1]), int(s[2])))
    return out


def default_spec(input_dim: int, num_classes: int, width: int = 64, depth: int = 8,
                 residual: Sequence[int] = (), bottleneck: int | None = 32) -> list[LayerSpec]:
    """An L-layer MLP: width-wide hidden layers, optional narrower last hidden layer."""
    if depth < 3:
        raise InvalidSpec("need at least 3 layers")
    spec = [LayerSpec(AFFINE_RELU, input_dim, width)]
    for l in range(2, depth - 1):
        kind = RESIDUAL if l in residual else AFFINE_RELU
        spec.append(LayerSpec(kind, width, width))
    last = bottleneck or width
    spec.append(LayerSpec(AFFINE_RELU, width, last))
    spec.append(LayerSpec(HEAD, last, num_classes))
    return spec


def validate_spec(spec: Sequence[LayerSpec]):
    if len(spec) < 3:
        raise InvalidSpec("a backbone needs at least 3 layers")
    for i, s in enumerate(spec):
        if s.kind not in KINDS:
            raise InvalidSpec(f"layer {i + 1}: unknown kind {s.kind!r}")
        if s.in_dim <= 0 or s.out_dim <= 0:
            raise InvalidSpec(f"layer {i + 1}: dimensions must be positive")
        if s.kind == RESIDUAL and s.in_dim != s.out_dim:
            raise InvalidSpec(f"layer {i + 1}: residual layer needs in_dim == out_dim")
        if i and spec[i - 1].out_dim != s.in_dim:
            raise InvalidSpec(f"layer {i + 1}: in_dim {s.in_dim} != previous out_dim {spec[i - 1].out_dim}")
    heads = [i for i, s in enumerate(spec) if s.kind == HEAD]
    if heads != [len(spec) - 1]:
        raise InvalidSpec("exactly one LinearHead is required, as the last layer")


def build_backbone(spec: Sequence, init_seed: int = 0) -> Backbone:
    """Fan-in scaled uniform initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).

    Initial values are float32-representable so that freezing an untrained
    model does not change it.
    """
    spec = parse_spec(spec)
    validate_spec(spec)
    rng = np.random.default_rng(np.random.SeedSequence([int(init_seed), 11]))
    weights, biases = [], []
    for s in spec:
        bound = 1.0 / np.sqrt(s.in_dim)
        weights.append(rng.uniform(-bound, bound, (s.out_dim, s.in_dim)).astype(np.float32).astype(np.float64))
        biases.append(rng.uniform(-bound, bound, s.out_dim).astype(np.float32).astype(np.float64))
    return Backbone(spec, weights, biases, num_classes=spec[-1].out_dim, init_seed=int(init_seed))


def apply_layer(b: Backbone, l: int, h: np.ndarray) -> np.ndarray:
    """Evaluate layer ``l`` (1-based) on a batch of row vectors."""
    s = b.layers[l - 1]
    w = np.asarray(b.weights[l - 1], dtype=np.float64)
    z = h @ w.T + np.asarray(b.biases[l - 1], dtype=np.float64)
    if s.kind == HEAD:
        return z
    if s.kind == RESIDUAL:
        z = z + h
    return np.maximum(z, 0.0)


def _as_input(b: Backbone, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != b.layers[0].in_dim:
        raise ShapeError(f"input width {x.shape[-1]} != {b.layers[0].in_dim}")
    return x


def forward_truncated(b: Backbone, x, upto: int, on_layer: Callable[[int], None] | None = None) -> np.ndarray:
    """Representation r_upto(x); evaluates layers 1..upto only."""
    if not 0 <= upto <= b.depth:
        raise ShapeError(f"layer index {upto} out of range")
    h = _as_input(b, x)
    for l in range(1, upto + 1):
        h = apply_layer(b, l, h)
        if on_layer is not None:
            on_layer(l)
    return h


def forward_collect(b: Backbone, x, sample_ids=None) -> tuple[list[RepresentationBatch], np.ndarray]:
    """All hidden representations r_1..r_{L-1} plus the head logits."""
    h = _as_input(b, x)
    ids = np.arange(len(h)) if sample_ids is None else np.asarray(sample_ids)
    reps = []
    for l in range(1, b.depth):
        h = apply_layer(b, l, h)
        reps.append(RepresentationBatch(l, h, ids))
    return reps, apply_layer(b, b.depth, h)


def predict(b: Backbone, x) -> np.ndarray:
    return np.argmax(forward_truncated(b, x, b.depth), axis=1)


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits, y):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(y)), y].mean()


def loss_and_grads(b: Backbone, x, y):
    """Mean cross-entropy and its gradients w.r.t. every weight and bias."""
    x = _as_input(b, x)
    y = np.asarray(y)
    ws = [np.asarray(w, dtype=np.float64) for w in b.weights]
    acts = [x]
    pre = []
    h = x
    for l, s in enumerate(b.layers):
        z = h @ ws[l].T + b.biases[l]
        if s.kind == RESIDUAL:
            z = z + h
        pre.append(z)
        h = z if s.kind == HEAD else np.maximum(z, 0.0)
        acts.append(h)
    n = len(y)
    p = softmax(h)
    loss = cross_entropy(h, y)
    delta = p
    delta[np.arange(n), y] -= 1.0
    delta /= n
    gw, gb = [None] * b.depth, [None] * b.depth
    for l in range(b.depth - 1, -1, -1):
        s = b.layers[l]
        if s.kind != HEAD:
            delta = delta * (pre[l] > 0)
        gw[l] = delta.T @ acts[l]
        gb[l] = delta.sum(axis=0)
        if l:
            up = delta @ ws[l]
            if s.kind == RESIDUAL:
                up = up + delta
            delta = up
    return loss, gw, gb


class Adam:
    """Plain Adam over a list of arrays, updated in place."""

    def __init__(self, params, lr, betas=ADAM_BETAS, eps=ADAM_EPS):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train_backbone(b: Backbone, ds, epochs: int, lr: float = 1e-3, batch_size: int = 128,
                   seed: int = 0) -> Backbone:
    """Train with Adam on mean cross-entropy, then freeze.

    Returns a new frozen backbone; ``b`` is left untouched. The per-epoch
    mean loss ends up in ``history`` and the final training accuracy in
    ``train_config["train_accuracy"]``.
    """
    if b.frozen:
        raise FrozenError("cannot train a frozen backbone")
    if ds.num_classes != b.num_classes:
        raise ShapeError(f"dataset has {ds.num_classes} classes, backbone {b.num_classes}")
    x = _as_input(b, ds.x)
    y = np.asarray(ds.y)
    weights = [w.copy() for w in b.weights]
    biases = [v.copy() for v in b.biases]
    work = Backbone(list(b.layers), weights, biases, b.num_classes, b.init_seed)
    opt = Adam(weights + biases, lr)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 12]))
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(y))
        total = 0.0
        for start in range(0, len(y), batch_size):
            idx = order[start:start + batch_size]
            loss, gw, gb = loss_and_grads(work, x[idx], y[idx])
            if not np.isfinite(loss):
                raise DivergenceError("backbone loss became non-finite")
            opt.step(gw + gb)
            total += loss * len(idx)
        history.append(total / len(y))
    if not all(np.all(np.isfinite(p)) for p in weights + biases):
        raise DivergenceError("backbone parameters became non-finite")
    out = Backbone(
        list(b.layers), weights, biases, b.num_classes, b.init_seed,
        train_seed=int(seed),
        train_config=dict(epochs=epochs, lr=lr, batch_size=batch_size, seed=int(seed),
                          optimizer="adam", betas=list(ADAM_BETAS), eps=ADAM_EPS),
        history=history,
    ).freeze()
    out.train_config["train_accuracy"] = float(np.mean(predict(out, x) == y))
    return out


def gradient_check(b: Backbone, x, y, epsilon: float = 1e-6, n_coords: int = 20, seed: int = 0) -> float:
    """Max relative error between backprop and central differences.

    ``n_coords`` parameter coordinates are sampled uniformly over all
    weights and biases; everything runs in float64.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    work = Backbone(list(b.layers), [np.array(w, dtype=np.float64) for w in b.weights],
                    [np.array(v, dtype=np.float64) for v in b.biases], b.num_classes, b.init_seed)
    _, gw, gb = loss_and_grads(work, x, y)
    params = list(work.params())
    grads = [g for pair in zip(gw, gb) for g in pair]
    sizes = np.array([p.size for p in params])
    rng = np.random.default_rng(seed)
    flat = rng.choice(sizes.sum(), size=min(n_coords, sizes.sum()), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for f in flat:
        k = int(np.searchsorted(offsets, f, side="right") - 1)
        j = int(f - offsets[k])
        p = params[k].reshape(-1)
        old = p[j]
        p[j] = old + epsilon
        lp, _, _ = loss_and_grads(work, x, y)
        p[j] = old - epsilon
        lm, _, _ = loss_and_grads(work, x, y)
        p[j] = old
        numeric = (lp - lm) / (2 * epsilon)
        analytic = grads[k].reshape(-1)[j]
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
        worst = max(worst, err)
    return float(worst)


def save_backbone(path, b: Backbone) -> None:
    """Checkpoint: magic, u32 header length, JSON header, little-endian f32 blocks (W then b per layer)."""
    header = dict(
        format_version=CKPT_VERSION,
        spec=b.spec_dict(),
        num_classes=b.num_classes,
        init_seed=b.init_seed,
        train_seed=b.train_seed,
        train_config=b.train_config,
        history=[float(h) for h in b.history],
    )
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for p in b.params():
            f.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_backbone(path) -> Backbone:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise FormatError("not a backbone checkpoint")
    (n,) = struct.unpack_from("<I", data, 4)
    header = json.loads(data[8:8 + n])
    if header.get("format_version") != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {header.get('format_version')}")
    spec = parse_spec(header["spec"])
    validate_spec(spec)
    pos = 8 + n
    weights, biases = [], []
    for s in spec:
        for shape, dest in (((s.out_dim, s.in_dim), weights), ((s.out_dim,), biases)):
            count = int(np.prod(shape))
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape)
            dest.append(arr.astype(np.float32))
            pos += 4 * count
    if pos != len(data):
        raise FormatError("trailing bytes in checkpoint")
    b = Backbone(spec, weights, biases, header["num_classes"], header["init_seed"],
                 train_seed=header["train_seed"], train_config=header["train_config"],
                 history=header["history"])
    return b.freeze()

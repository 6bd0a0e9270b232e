"""ILCF container: per-layer float32 feature blocks with labels and groups.

Layout (all integers little-endian)::

    b"ILCF"
    u32 manifest length, manifest JSON (utf-8)
    labels  int32[num_samples]
    groups  int32[num_samples]
    layer blocks, float32 row-major, ascending layer order
    u32 CRC32 of every preceding byte

The manifest carries a ``payload_crc32`` over labels, groups and blocks so
the checksum is visible in the JSON mirror written next to the file.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ChecksumError, FormatError, LayerNotFound, ShapeMismatch

MAGIC = b"ILCF"
FORMAT_VERSION = 1
_CHUNK = 1 << 20


@dataclass
class StoreManifest:
    split_name: str
    layers: list[int]
    layer_dims: list[int]
    num_samples: int
    num_classes: int
    num_groups: int
    provenance: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION
    payload_crc32: int | None = None

    def to_json(self) -> dict:
        return dict(
            format_version=self.format_version, split_name=self.split_name,
            layers=list(self.layers), layer_dims=list(self.layer_dims),
            num_samples=self.num_samples, num_classes=self.num_classes,
            num_groups=self.num_groups, provenance=self.provenance,
            payload_crc32=self.payload_crc32,
        )

    @classmethod
    def from_json(cls, d: dict) -> "StoreManifest":
        return cls(
            split_name=d["split_name"], layers=list(d["layers"]), layer_dims=list(d["layer_dims"]),
            num_samples=d["num_samples"], num_classes=d["num_classes"], num_groups=d["num_groups"],
            provenance=d.get("provenance", {}), format_version=d["format_version"],
            payload_crc32=d.get("payload_crc32"),
        )


@dataclass
class LayerBlock:
    layer: int
    data: np.ndarray


class FeatureStore:
    """Per-layer features for one split.

    Either backed by in-memory arrays or by an ILCF file, in which case
    ``layer(l)`` reads exactly that block's byte range on first access.
    ``bytes_read`` counts payload bytes pulled from disk by layer loads.
    """

    def __init__(self, manifest: StoreManifest, labels, groups, blocks=None, path=None, offsets=None):
        self.manifest = manifest
        self.labels = np.asarray(labels, dtype=np.int64)
        self.groups = np.asarray(groups, dtype=np.int64)
        self.path = path
        self._offsets = offsets or {}
        self._cache: dict[int, np.ndarray] = dict(blocks or {})
        self.bytes_read = 0

    @classmethod
    def from_arrays(cls, features: Mapping[int, np.ndarray], labels, groups, num_classes: int,
                    num_groups: int | None = None, split_name: str = "memory",
                    provenance: dict | None = None) -> "FeatureStore":
        layers = sorted(features)
        blocks = {l: np.asarray(features[l], dtype=np.float32) for l in layers}
        groups = np.zeros(len(labels), dtype=np.int64) if groups is None else groups
        manifest = StoreManifest(
            split_name=split_name, layers=layers,
            layer_dims=[blocks[l].shape[1] for l in layers],
            num_samples=len(labels), num_classes=int(num_classes),
            num_groups=int(num_groups if num_groups is not None else int(np.max(groups)) + 1),
            provenance=provenance or {},
        )
        return cls(manifest, labels, groups, blocks=blocks)

    @property
    def layers(self) -> list[int]:
        return list(self.manifest.layers)

    @property
    def num_samples(self) -> int:
        return self.manifest.num_samples

    @property
    def num_classes(self) -> int:
        return self.manifest.num_classes

    @property
    def sample_ids(self) -> np.ndarray:
        ids = self.manifest.provenance.get("sample_ids")
        return np.arange(self.num_samples) if ids is None else np.asarray(ids, dtype=np.int64)

    @property
    def dist_tags(self) -> np.ndarray | None:
        tags = self.manifest.provenance.get("dist_tags")
        return None if tags is None else np.asarray(tags, dtype=np.int8)

    def dim(self, layer: int) -> int:
        if layer not in self.manifest.layers:
            raise LayerNotFound(layer)
        return self.manifest.layer_dims[self.manifest.layers.index(layer)]

    def layer(self, layer: int) -> np.ndarray:
        if layer not in self.manifest.layers:
            raise LayerNotFound(f"layer {layer} not in store (have {self.manifest.layers})")
        if layer not in self._cache:
            offset, nbytes = self._offsets[layer]
            with open(self.path, "rb") as f:
                f.seek(offset)
                raw = f.read(nbytes)
            self.bytes_read += len(raw)
            d = self.dim(layer)
            self._cache[layer] = np.frombuffer(raw, dtype="<f4").reshape(self.num_samples, d).astype(np.float32)
        return self._cache[layer]

    def blocks(self) -> list[LayerBlock]:
        return [LayerBlock(l, self.layer(l)) for l in self.layers]

    def subset(self, idx, split_name: str | None = None) -> "FeatureStore":
        """In-memory store restricted to rows ``idx`` (provenance lists are sliced too)."""
        idx = np.asarray(idx, dtype=np.int64)
        prov = dict(self.manifest.provenance)
        for key in ("sample_ids", "dist_tags"):
            if key in prov:
                prov[key] = [prov[key][i] for i in idx]
        return FeatureStore.from_arrays(
            {l: self.layer(l)[idx] for l in self.layers}, self.labels[idx], self.groups[idx],
            self.num_classes, self.manifest.num_groups, split_name or self.manifest.split_name, prov,
        )


def _payload(manifest: StoreManifest, blocks: Sequence[LayerBlock], labels, groups) -> list[bytes]:
    n = manifest.num_samples
    labels = np.asarray(labels)
    groups = np.asarray(groups)
    if labels.shape != (n,) or groups.shape != (n,):
        raise ShapeMismatch("labels/groups length must equal num_samples")
    blocks = sorted(blocks, key=lambda b: b.layer)
    if [b.layer for b in blocks] != sorted(manifest.layers):
        raise ShapeMismatch("blocks do not match manifest layers")
    dims = dict(zip(manifest.layers, manifest.layer_dims))
    parts = [np.ascontiguousarray(labels, dtype="<i4").tobytes(), np.ascontiguousarray(groups, dtype="<i4").tobytes()]
    for b in blocks:
        data = np.asarray(b.data)
        if data.shape != (n, dims[b.layer]):
            raise ShapeMismatch(f"layer {b.layer}: shape {data.shape} != {(n, dims[b.layer])}")
        data = np.ascontiguousarray(data, dtype="<f4")
        if not np.all(np.isfinite(data)):
            raise ShapeMismatch(f"layer {b.layer}: non-finite features")
        parts.append(data.tobytes())
    return parts


def write_store(path, manifest: StoreManifest, blocks: Sequence[LayerBlock], labels, groups) -> int:
    """Write an ILCF file plus its ``.manifest.json`` mirror; returns the trailing CRC32."""
    if not manifest.layers or manifest.num_samples <= 0:
        raise ShapeMismatch("store needs at least one layer and one sample")
    order = np.argsort(manifest.layers)
    manifest.layers = [manifest.layers[i] for i in order]
    manifest.layer_dims = [manifest.layer_dims[i] for i in order]
    parts = _payload(manifest, blocks, labels, groups)
    crc = 0
    for p in parts:
        crc = zlib.crc32(p, crc)
    manifest.payload_crc32 = crc
    head = json.dumps(manifest.to_json(), sort_keys=True).encode()
    body = [MAGIC, struct.pack("<I", len(head)), head, *parts]
    total = 0
    for p in body:
        total = zlib.crc32(p, total)
    path = Path(path)
    with open(path, "wb") as f:
        for p in body:
            f.write(p)
        f.write(struct.pack("<I", total))
    Path(str(path) + ".manifest.json").write_text(json.dumps(manifest.to_json(), indent=2, sort_keys=True) + "\n")
    return total


def write_feature_store(path, store: FeatureStore) -> int:
    return write_store(path, store.manifest, store.blocks(), store.labels, store.groups)


def read_store(path, verify: bool = True) -> FeatureStore:
    """Open an ILCF file; verifies the CRC by streaming, then loads layers lazily."""
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise FormatError(f"{path}: bad magic")
        (n,) = struct.unpack("<I", f.read(4))
        head = f.read(n)
        try:
            manifest = StoreManifest.from_json(json.loads(head))
        except (ValueError, KeyError) as exc:
            raise FormatError(f"{path}: unreadable manifest") from exc
        if manifest.format_version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported version {manifest.format_version}")
        ns = manifest.num_samples
        labels = np.frombuffer(f.read(4 * ns), dtype="<i4")
        groups = np.frombuffer(f.read(4 * ns), dtype="<i4")
        if len(labels) != ns or len(groups) != ns:
            raise FormatError(f"{path}: truncated label/group blocks")
    offsets = {}
    pos = 8 + n + 8 * ns
    for layer, d in zip(manifest.layers, manifest.layer_dims):
        offsets[layer] = (pos, 4 * ns * d)
        pos += 4 * ns * d
    if pos + 4 != size:
        raise FormatError(f"{path}: size {size} does not match manifest (expected {pos + 4})")
    if verify:
        crc = 0
        with open(path, "rb") as f:
            remaining = size - 4
            while remaining:
                chunk = f.read(min(_CHUNK, remaining))
                crc = zlib.crc32(chunk, crc)
                remaining -= len(chunk)
            (stored,) = struct.unpack("<I", f.read(4))
        if crc != stored:
            raise ChecksumError(f"{path}: CRC mismatch ({crc:#010x} != {stored:#010x})")
    return FeatureStore(manifest, labels.astype(np.int64), groups.astype(np.int64), path=path, offsets=offsets)


def file_crc(path) -> int:
    """Trailing CRC32 recorded in an ILCF file."""
    with open(path, "rb") as f:
        f.seek(-4, 2)
        return struct.unpack("<I", f.read(4))[0]


def extract_store(b, ds, split_name: str, provenance: dict | None = None) -> FeatureStore:
    """Run the frozen backbone over ``ds`` and keep r_1..r_{L-1} as float32 blocks.

    Sample ids and ID/OOD tags travel in the provenance so split audits can
    be done from the store alone.
    """
    from .backbone import forward_collect

    reps, _ = forward_collect(b, ds.x, ds.ids)
    prov = dict(provenance or {})
    prov["sample_ids"] = [int(i) for i in ds.ids]
    prov["dist_tags"] = [int(t) for t in ds.dist_tags]
    return FeatureStore.from_arrays(
        {r.layer: r.matrix for r in reps}, ds.y, ds.g, ds.num_classes, ds.num_groups, split_name, prov,
    )

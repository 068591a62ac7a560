"""Feature files, tensor containers, manifests and the planted-artefact corpus.

Feature file layout (little-endian)::

    offset 0   8 bytes   magic  b"HIERCON1"
    offset 8   u32       L (layers)
    offset 12  u32       T (frames)
    offset 16  u32       D (feature dims)
    offset 20  4*L*T*D   float32 payload, layer-major then frame-major

Values are held as float64 in memory and narrowed to float32 on write, so a
round trip is exact only for values already representable in float32.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

FEATURE_MAGIC = b"HIERCON1"
HEADER_SIZE = 8 + 3 * 4
# 2**31 payload bytes is far past any per-utterance stack; larger claims are corrupt headers
MAX_PAYLOAD_BYTES = 2**31

CONTAINER_MAGIC = b"HCTENSR1"

LABELS = {"real": 0, "fake": 1}
LABEL_NAMES = {v: k for k, v in LABELS.items()}


class FeatureFileError(ValueError):
    """Base class for feature-file parse failures; carries the byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class BadMagicError(FeatureFileError):
    pass


class TruncatedHeaderError(FeatureFileError):
    pass


class TruncatedPayloadError(FeatureFileError):
    pass


class DimensionOverflowError(FeatureFileError):
    pass


class TrailingBytesError(FeatureFileError):
    pass


class ContainerError(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass
class FeatureStack:
    values: np.ndarray
    utterance_id: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or 0 in self.values.shape:
            raise ValueError(f"feature stack must be [L x T x D] with positive extents, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"feature stack {self.utterance_id!r} holds non-finite values")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape


def encode_feature_stack(stack: FeatureStack) -> bytes:
    n_layers, n_frames, dim = stack.shape
    header = FEATURE_MAGIC + struct.pack("<III", n_layers, n_frames, dim)
    return header + stack.values.astype("<f4").tobytes(order="C")


def decode_feature_stack(buf: bytes, utterance_id: str = "") -> FeatureStack:
    if len(buf) < len(FEATURE_MAGIC) or buf[: len(FEATURE_MAGIC)] != FEATURE_MAGIC:
        raise BadMagicError(f"bad magic: expected {FEATURE_MAGIC!r}, found {bytes(buf[:8])!r}", 0)
    if len(buf) < HEADER_SIZE:
        raise TruncatedHeaderError(
            f"truncated header: need {HEADER_SIZE} bytes, file has {len(buf)}", len(buf)
        )
    n_layers, n_frames, dim = struct.unpack_from("<III", buf, len(FEATURE_MAGIC))
    if 0 in (n_layers, n_frames, dim):
        raise DimensionOverflowError(f"zero extent in header L={n_layers} T={n_frames} D={dim}", 8)
    expected = 4 * n_layers * n_frames * dim
    if expected > MAX_PAYLOAD_BYTES:
        raise DimensionOverflowError(
            f"dimension overflow: L*T*D = {n_layers}*{n_frames}*{dim} needs {expected} payload bytes", 8
        )
    actual = len(buf) - HEADER_SIZE
    if actual < expected:
        raise TruncatedPayloadError(
            f"truncated payload: expected {expected} bytes, found {actual}", len(buf)
        )
    if actual > expected:
        raise TrailingBytesError(
            f"{actual - expected} trailing bytes after a {expected}-byte payload", HEADER_SIZE + expected
        )
    values = np.frombuffer(buf, dtype="<f4", offset=HEADER_SIZE).reshape(n_layers, n_frames, dim)
    return FeatureStack(values.astype(np.float64), utterance_id)


def write_feature_file(stack: FeatureStack, path) -> None:
    Path(path).write_bytes(encode_feature_stack(stack))


def read_feature_file(path, utterance_id: str | None = None) -> FeatureStack:
    path = Path(path)
    return decode_feature_stack(path.read_bytes(), path.stem if utterance_id is None else utterance_id)


# tensor container (checkpoints) ---------------------------------------------

def write_tensor_container(path, meta: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
    """Write named float64 tensors plus a JSON metadata block.

    Layout: magic, u32 header length, UTF-8 JSON header, then each tensor's
    little-endian float64 bytes in header order. Output bytes depend only on
    the inputs.
    """
    entries = []
    payload = []
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape)})
        payload.append(arr.astype("<f8").tobytes(order="C"))
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CONTAINER_MAGIC + struct.pack("<I", len(header)) + header)
        for chunk in payload:
            fh.write(chunk)


def read_tensor_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:8] != CONTAINER_MAGIC:
        raise ContainerError(f"{path}: not a tensor container (bad magic)")
    if len(buf) < 12:
        raise ContainerError(f"{path}: truncated container header")
    (hlen,) = struct.unpack_from("<I", buf, 8)
    try:
        header = json.loads(buf[12 : 12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: corrupt container header: {exc}") from None
    offset = 12 + hlen
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        nbytes = 8 * math.prod(shape)
        if offset + nbytes > len(buf):
            raise ContainerError(f"{path}: tensor {entry['name']!r} truncated at byte {offset}")
        tensors[entry["name"]] = np.frombuffer(buf, dtype="<f8", count=math.prod(shape), offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(buf):
        raise ContainerError(f"{path}: {len(buf) - offset} unexpected trailing bytes")
    return header["meta"], tensors


# manifests -------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestRow:
    utterance_id: str
    path: str
    label: int
    domain: str | None = None


@dataclass
class Manifest:
    rows: list[ManifestRow]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        if not self.rows:
            raise ManifestError("manifest is empty")
        seen = set()
        for row in self.rows:
            if row.utterance_id in seen:
                raise ManifestError(f"duplicate utterance id {row.utterance_id!r}")
            seen.add(row.utterance_id)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.rows], dtype=np.int64)

    def resolve(self, row: ManifestRow) -> Path:
        p = Path(row.path)
        return p if p.is_absolute() else self.root / p

    def load_stack(self, row: ManifestRow) -> FeatureStack:
        return read_feature_file(self.resolve(row), row.utterance_id)

    def load_all(self) -> np.ndarray:
        """All feature stacks as one [N x L x T x D] float64 array."""
        stacks = [self.load_stack(r) for r in self.rows]
        shapes = {s.shape for s in stacks}
        if len(shapes) != 1:
            raise ValueError(f"manifest mixes feature shapes: {sorted(shapes)}")
        return np.stack([s.values for s in stacks])

    def to_text(self) -> str:
        lines = []
        for r in self.rows:
            parts = [r.utterance_id, r.path, LABEL_NAMES[r.label]]
            if r.domain is not None:
                parts.append(r.domain)
            lines.append(" ".join(parts))
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())


def parse_manifest_text(text: str, root=".") -> Manifest:
    rows = []
    first_line: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) not in (3, 4):
            raise ManifestError(f"line {lineno}: expected 'id path label [domain]', got {len(fields)} fields")
        uid, path, label = fields[:3]
        if label not in LABELS:
            raise ManifestError(
                f"line {lineno}: unknown label {label!r}; accepted tokens: {', '.join(sorted(LABELS))}"
            )
        if uid in first_line:
            raise ManifestError(f"line {lineno}: duplicate utterance id {uid!r} (first seen on line {first_line[uid]})")
        first_line[uid] = lineno
        rows.append(ManifestRow(uid, path, LABELS[label], fields[3] if len(fields) == 4 else None))
    if not rows:
        raise ManifestError("manifest is empty")
    return Manifest(rows, Path(root))


def parse_manifest(path) -> Manifest:
    path = Path(path)
    return parse_manifest_text(path.read_text(), root=path.parent)


# synthetic planted-artefact corpus -------------------------------------------

SPLIT_STREAMS = {"train": 1, "val": 2, "test": 3}


@dataclass
class SyntheticSpec:
    num_layers: int = 6
    frames: int = 20
    feature_dim: int = 16
    group_size: int = 3
    planted_group: int = 1
    planted_window: tuple[float, float] = (0.4, 0.7)
    signal_scale: float = 2.0
    noise_scale: float = 1.0
    n_real: int = 64
    n_fake: int = 64
    n_val_real: int = 0
    n_val_fake: int = 0
    seed: int = 7

    def __post_init__(self):
        self.planted_window = tuple(float(x) for x in self.planted_window)
        self.validate()

    def validate(self) -> None:
        for name in ("num_layers", "frames", "feature_dim", "group_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.num_layers % self.group_size:
            raise ValueError(f"num_layers={self.num_layers} is not divisible by group_size={self.group_size}")
        if not 0 <= self.planted_group < self.num_layers // self.group_size:
            raise ValueError(f"planted_group {self.planted_group} outside [0, {self.num_layers // self.group_size})")
        start, end = self.planted_window
        if len(self.planted_window) != 2 or not 0.0 <= start < end <= 1.0:
            raise ValueError(f"planted_window must satisfy 0 <= start < end <= 1, got {self.planted_window}")
        if self.signal_scale < 0 or self.noise_scale <= 0:
            raise ValueError("signal_scale must be >= 0 and noise_scale > 0")
        if min(self.n_real, self.n_fake, self.n_val_real, self.n_val_fake) < 0:
            raise ValueError("utterance counts must be non-negative")

    @property
    def planted_layers(self) -> range:
        return range(self.planted_group * self.group_size, (self.planted_group + 1) * self.group_size)

    @property
    def planted_frames(self) -> range:
        start, end = self.planted_window
        lo = math.floor(start * self.frames + 1e-9)
        hi = max(lo + 1, math.ceil(end * self.frames - 1e-9))
        return range(lo, min(hi, self.frames))

    def direction(self) -> np.ndarray:
        """The per-seed artefact direction, scaled to ``signal_scale``."""
        v = np.random.default_rng([self.seed, 0]).standard_normal(self.feature_dim)
        return v / np.linalg.norm(v) * self.signal_scale

    def counts(self, split: str) -> tuple[int, int]:
        return (self.n_real, self.n_fake) if split == "train" else (self.n_val_real, self.n_val_fake)


def synthetic_stacks(spec: SyntheticSpec, split: str = "train") -> list[tuple[str, int, np.ndarray]]:
    """Generate ``(utterance_id, label, values)`` in manifest order.

    Real and fake utterances alternate while both remain so that any prefix of
    the manifest is close to class-balanced.
    """
    if split not in SPLIT_STREAMS:
        raise ValueError(f"unknown split {split!r}")
    n_real, n_fake = spec.counts(split)
    rng = np.random.default_rng([spec.seed, SPLIT_STREAMS[split]])
    direction = spec.direction()
    layers = list(spec.planted_layers)
    frames = spec.planted_frames
    shape = (spec.num_layers, spec.frames, spec.feature_dim)

    order = []
    i_real = i_fake = 0
    while i_real < n_real or i_fake < n_fake:
        if i_real < n_real:
            order.append(("real", i_real))
            i_real += 1
        if i_fake < n_fake:
            order.append(("fake", i_fake))
            i_fake += 1

    out = []
    for label_name, idx in order:
        values = rng.standard_normal(shape) * spec.noise_scale
        if label_name == "fake":
            values[layers[0] : layers[-1] + 1, frames.start : frames.stop, :] += direction
        # narrow now so in-memory stacks equal what the files hold
        values = values.astype(np.float32).astype(np.float64)
        out.append((f"{split}_{label_name}_{idx:04d}", LABELS[label_name], values))
    return out


def generate_synthetic(spec: SyntheticSpec, out_dir, split: str = "train", manifest_name: str | None = None) -> Manifest:
    """Write one split of the planted-artefact corpus and its manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for uid, label, values in synthetic_stacks(spec, split):
        fname = f"{uid}.hc"
        write_feature_file(FeatureStack(values, uid), out_dir / fname)
        rows.append(ManifestRow(uid, fname, label, "synthetic"))
    manifest = Manifest(rows, out_dir)
    manifest.write(out_dir / (manifest_name or f"{split}.txt"))
    return manifest

"""File formats: feature tensors, dataset manifests, checkpoints, score files.

Feature files ("AVF1"): 4-byte magic, then little-endian u32 version, T, N, D,
then T*N*D little-endian float32 values in row-major (t, i, j) order.

Manifests: text lines "path<TAB>label<TAB>split" or, with a paired second
stream, "path<TAB>path_b<TAB>label<TAB>split". Paths resolve relative to the
manifest's directory. Labels must be contiguous integers starting at 0.

Checkpoints ("AVC1"): magic, u32 version, u64-length JSON metadata blob,
a named-array section (float64 payloads), and a trailing SHA-256 over all
preceding bytes. Round-trips are bitwise.

Score files: text lines "video_id<TAB>s_1,...,s_C".
"""

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .codebook import Codebook
from .errors import (
    BadMagicError,
    BadVersionError,
    CheckpointError,
    ChecksumError,
    FileAccessError,
    ManifestError,
    NonFiniteInputError,
    SizeMismatchError,
)
from .features import FeatureMap
from .training import AdamState, ClassifierModel, TrainConfig

FEATURE_MAGIC = b"AVF1"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sIIII")

CHECKPOINT_MAGIC = b"AVC1"
CHECKPOINT_VERSION = 1

SPLITS = ("train", "val", "test")


def write_feature_file(features: FeatureMap, path):
    payload = np.ascontiguousarray(features.data, dtype="<f4")
    header = _FEATURE_HEADER.pack(
        FEATURE_MAGIC,
        FEATURE_VERSION,
        features.frames,
        features.locations,
        features.dim,
    )
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload.tobytes())
    except OSError as exc:
        raise FileAccessError(f"cannot write feature file {path}: {exc}") from exc


def read_feature_file(path) -> FeatureMap:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FileAccessError(f"cannot read feature file {path}: {exc}") from exc
    if len(blob) < _FEATURE_HEADER.size:
        raise SizeMismatchError(
            f"{path}: file shorter than the {_FEATURE_HEADER.size}-byte header"
        )
    magic, version, t, n, d = _FEATURE_HEADER.unpack_from(blob)
    if magic != FEATURE_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise BadVersionError(f"{path}: unsupported version {version}")
    count = t * n * d
    expected = _FEATURE_HEADER.size + 4 * count
    if len(blob) != expected:
        raise SizeMismatchError(
            f"{path}: header promises {count} floats ({expected} bytes) "
            f"but file has {len(blob)} bytes"
        )
    values = np.frombuffer(blob, dtype="<f4", offset=_FEATURE_HEADER.size)
    data = values.astype(np.float64).reshape(t, n, d)
    try:
        return FeatureMap(data)
    except NonFiniteInputError as exc:
        raise NonFiniteInputError(f"{path}: {exc}") from exc


@dataclass
class ManifestEntry:
    path: Path
    label: int
    split: str
    path_b: Path = None

    def load(self, stream: str = "a") -> FeatureMap:
        if stream == "a":
            return read_feature_file(self.path)
        if stream == "b":
            if self.path_b is None:
                raise ManifestError(f"{self.path}: manifest has no second stream")
            return read_feature_file(self.path_b)
        raise ManifestError(f"unknown stream {stream!r}")


@dataclass
class Manifest:
    entries: list
    num_classes: int

    def split(self, name: str):
        return [e for e in self.entries if e.split == name]

    @property
    def has_second_stream(self) -> bool:
        return all(e.path_b is not None for e in self.entries)


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FileAccessError(f"cannot read manifest {path}: {exc}") from exc
    base = path.parent
    entries = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) == 3:
            feat, feat_b, label_s, split = cols[0], None, cols[1], cols[2]
        elif len(cols) == 4:
            feat, feat_b, label_s, split = cols
        else:
            raise ManifestError(
                f"{path}:{lineno}: expected 3 or 4 tab-separated columns, got {len(cols)}"
            )
        try:
            label = int(label_s)
        except ValueError:
            raise ManifestError(f"{path}:{lineno}: label {label_s!r} is not an integer")
        if label < 0:
            raise ManifestError(f"{path}:{lineno}: label must be non-negative")
        if split not in SPLITS:
            raise ManifestError(
                f"{path}:{lineno}: split {split!r} not one of {SPLITS}"
            )
        entry = ManifestEntry(
            path=base / feat,
            label=label,
            split=split,
            path_b=(base / feat_b) if feat_b else None,
        )
        if not entry.path.is_file():
            raise ManifestError(f"{path}:{lineno}: missing feature file {entry.path}")
        if entry.path_b is not None and not entry.path_b.is_file():
            raise ManifestError(f"{path}:{lineno}: missing feature file {entry.path_b}")
        entries.append(entry)
    if not entries:
        raise ManifestError(f"{path}: manifest has no entries")
    labels = sorted({e.label for e in entries})
    if labels != list(range(len(labels))):
        raise ManifestError(
            f"{path}: labels must be contiguous from 0, got {labels}"
        )
    return Manifest(entries=entries, num_classes=len(labels))


def write_manifest(entries, path):
    """Write manifest lines; entries hold relative path strings."""
    lines = []
    for entry in entries:
        if len(entry) == 3:
            lines.append(f"{entry[0]}\t{entry[1]}\t{entry[2]}")
        else:
            lines.append(f"{entry[0]}\t{entry[1]}\t{entry[2]}\t{entry[3]}")
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class Checkpoint:
    config: TrainConfig
    codebook: Codebook
    model: ClassifierModel = None
    adam_state: AdamState = None


def _pack_array(name: str, array: np.ndarray) -> bytes:
    data = np.ascontiguousarray(array, dtype="<f8")
    name_bytes = name.encode("utf-8")
    parts = [struct.pack("<H", len(name_bytes)), name_bytes]
    parts.append(struct.pack("<B", data.ndim))
    for extent in data.shape:
        parts.append(struct.pack("<Q", extent))
    raw = data.tobytes()
    parts.append(struct.pack("<Q", len(raw)))
    parts.append(raw)
    return b"".join(parts)


class _Cursor:
    def __init__(self, blob, offset):
        self.blob = blob
        self.offset = offset

    def take(self, count: int) -> bytes:
        if self.offset + count > len(self.blob):
            raise CheckpointError("checkpoint truncated mid-record")
        out = self.blob[self.offset : self.offset + count]
        self.offset += count
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))


def _unpack_array(cursor: "_Cursor"):
    (name_len,) = cursor.unpack("<H")
    name = cursor.take(name_len).decode("utf-8")
    (ndim,) = cursor.unpack("<B")
    shape = tuple(cursor.unpack("<Q")[0] for _ in range(ndim))
    (nbytes,) = cursor.unpack("<Q")
    expected = 8 * int(np.prod(shape, dtype=np.int64)) if ndim else 8
    if nbytes != expected:
        raise CheckpointError(
            f"array {name!r}: payload length {nbytes} does not match shape {shape}"
        )
    raw = cursor.take(nbytes)
    return name, np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def save_checkpoint(path, config: TrainConfig, codebook: Codebook, model=None, adam_state=None):
    arrays = {
        "codebook/residual_anchors": codebook.residual_anchors,
        "codebook/assign_anchors": codebook.assign_anchors,
    }
    meta = {
        "config": asdict(config),
        "alpha": codebook.alpha,
        "has_model": model is not None,
        "has_adam": adam_state is not None,
    }
    if model is not None:
        arrays["model/weights"] = model.weights
        arrays["model/bias"] = model.bias
        meta["dropout_rate"] = model.dropout_rate
    if adam_state is not None:
        meta["adam_step"] = adam_state.step
        meta["adam_names"] = sorted(adam_state.first_moment.keys())
        for name in meta["adam_names"]:
            arrays[f"adam/m/{name}"] = adam_state.first_moment[name]
            arrays[f"adam/v/{name}"] = adam_state.second_moment[name]

    meta_blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", CHECKPOINT_VERSION),
        struct.pack("<Q", len(meta_blob)),
        meta_blob,
        struct.pack("<I", len(arrays)),
    ]
    for name in sorted(arrays):
        body.append(_pack_array(name, arrays[name]))
    payload = b"".join(body)
    digest = hashlib.sha256(payload).digest()
    try:
        Path(path).write_bytes(payload + digest)
    except OSError as exc:
        raise FileAccessError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FileAccessError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < 4 + 4 + 32:
        raise SizeMismatchError(f"{path}: too short to be a checkpoint")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:4]!r}")
    payload, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise ChecksumError(f"{path}: checksum mismatch; file is corrupted")
    cursor = _Cursor(payload, 4)
    (version,) = cursor.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise BadVersionError(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = cursor.unpack("<Q")
    try:
        meta = json.loads(cursor.take(meta_len).decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: invalid metadata block: {exc}") from exc
    (n_arrays,) = cursor.unpack("<I")
    arrays = {}
    for _ in range(n_arrays):
        name, value = _unpack_array(cursor)
        arrays[name] = value
    try:
        config = TrainConfig(**meta["config"])
        codebook = Codebook(
            arrays["codebook/residual_anchors"],
            arrays["codebook/assign_anchors"],
            float(meta["alpha"]),
        )
        model = None
        if meta["has_model"]:
            model = ClassifierModel(
                arrays["model/weights"],
                arrays["model/bias"],
                float(meta["dropout_rate"]),
            )
        adam = None
        if meta["has_adam"]:
            adam = AdamState(
                {n: arrays[f"adam/m/{n}"] for n in meta["adam_names"]},
                {n: arrays[f"adam/v/{n}"] for n in meta["adam_names"]},
                int(meta["adam_step"]),
            )
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: incomplete checkpoint contents: {exc}") from exc
    return Checkpoint(config=config, codebook=codebook, model=model, adam_state=adam)


def read_score_file(path):
    """Read per-video score lines "video_id<TAB>s_1,...,s_C" into an ordered dict."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FileAccessError(f"cannot read score file {path}: {exc}") from exc
    scores = {}
    width = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ManifestError(f"{path}:{lineno}: expected 'id<TAB>s1,...,sC'")
        try:
            values = np.array([float(v) for v in parts[1].split(",")], dtype=np.float64)
        except ValueError:
            raise ManifestError(f"{path}:{lineno}: scores are not all numeric")
        if not np.all(np.isfinite(values)):
            raise NonFiniteInputError(f"{path}:{lineno}: scores contain NaN or Inf")
        if width is None:
            width = values.shape[0]
        elif values.shape[0] != width:
            raise ManifestError(
                f"{path}:{lineno}: expected {width} scores, got {values.shape[0]}"
            )
        scores[parts[0]] = values
    if not scores:
        raise ManifestError(f"{path}: score file has no entries")
    return scores


def write_score_file(scores, path):
    lines = [
        vid + "\t" + ",".join(repr(float(v)) for v in values)
        for vid, values in scores.items()
    ]
    Path(path).write_text("\n".join(lines) + "\n")

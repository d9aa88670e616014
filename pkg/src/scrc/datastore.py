"""Ingestion and persistence.

Binary formats (little-endian throughout):

feature store   magic "SCRCFEAT", u32 version=1, u32 dim, u32 count, then
                per entry: u16 key byte-length, key bytes (UTF-8), dim*f32.

checkpoint      magic "SCRCCKPT", u32 version=1, u32 header length, header
                as JSON text (config dict, vocabulary array, format
                version), u32 tensor count, then per tensor: u16 name
                length, name bytes, u8 rank, rank*u32 dims, f32 data.

Dataset files are JSON lines, one record per line:

annotations  {"image_id":str, "width":num, "height":num,
              "box":[x1,y1,x2,y2], "region_key":str, "descriptions":[str,...]}
proposals    {"image_id":str, "boxes":[[x1,y1,x2,y2],...], "region_keys":[str,...]}
captions     {"image_id":str, "captions":[str,...]}
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import FormatError, InputError
from .geometry import BoundingBox, ImageSize, encode_spatial
from .model import ScrcConfig, ScrcParams
from .textproc import TokenSequence, Vocabulary, encode

FEATURE_MAGIC = b"SCRCFEAT"
CHECKPOINT_MAGIC = b"SCRCCKPT"
FORMAT_VERSION = 1

DEFAULT_MAX_PROPOSALS = 100


class FeatureStore:
    """Map from UTF-8 keys to fixed-dimension float32 feature vectors."""

    def __init__(self, dim: int):
        if dim <= 0:
            raise InputError(f"feature dimension must be positive, got {dim}")
        self.dim = dim
        self.entries: dict[str, np.ndarray] = {}

    def add(self, key: str, vec):
        if key in self.entries:
            raise InputError(f"duplicate feature key: {key!r}")
        vec = np.asarray(vec, dtype=np.float32)
        if vec.shape != (self.dim,):
            raise InputError(f"feature {key!r}: expected dim {self.dim}, got shape {vec.shape}")
        if not np.all(np.isfinite(vec)):
            raise InputError(f"feature {key!r} contains non-finite values")
        self.entries[key] = vec

    def get(self, key: str) -> np.ndarray:
        try:
            return self.entries[key]
        except KeyError:
            raise InputError(f"feature key not found: {key!r}") from None

    def __contains__(self, key: str) -> bool:
        return key in self.entries

    def __len__(self) -> int:
        return len(self.entries)


def save_feature_store(store: FeatureStore, path):
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<III", FORMAT_VERSION, store.dim, len(store.entries)))
        for key, vec in store.entries.items():
            kb = key.encode("utf-8")
            if len(kb) > 0xFFFF:
                raise InputError(f"feature key too long ({len(kb)} bytes)")
            f.write(struct.pack("<H", len(kb)))
            f.write(kb)
            f.write(vec.astype("<f4", copy=False).tobytes())


class _Cursor:
    """Byte cursor that reports the offset of any truncation."""

    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.off = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise FormatError(
                f"{self.what}: truncated at byte {self.off} "
                f"(needed {n} more, have {len(self.buf) - self.off})")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def done(self):
        if self.off != len(self.buf):
            raise FormatError(
                f"{self.what}: {len(self.buf) - self.off} trailing bytes at byte {self.off}")


def load_feature_store(path) -> FeatureStore:
    with open(path, "rb") as f:
        cur = _Cursor(f.read(), "feature store")
    magic = cur.take(len(FEATURE_MAGIC))
    if magic != FEATURE_MAGIC:
        raise FormatError(f"feature store: bad magic {magic!r} at byte 0")
    version, dim, count = cur.unpack("<III")
    if version != FORMAT_VERSION:
        raise FormatError(f"feature store: unsupported version {version}")
    if dim == 0:
        raise FormatError("feature store: zero feature dimension")
    store = FeatureStore(dim)
    for _ in range(count):
        key_off = cur.off
        (klen,) = cur.unpack("<H")
        key = cur.take(klen).decode("utf-8")
        vec = np.frombuffer(cur.take(4 * dim), dtype="<f4").copy()
        if key in store.entries:
            raise FormatError(f"feature store: duplicate key {key!r} at byte {key_off}")
        if not np.all(np.isfinite(vec)):
            raise FormatError(f"feature store: non-finite values for key {key!r}")
        store.entries[key] = vec
    cur.done()
    return store


@dataclass
class AnnotationRecord:
    image_id: str
    width: float
    height: float
    box: BoundingBox
    region_key: str
    descriptions: list[str]


@dataclass
class ProposalSet:
    image_id: str
    boxes: list[BoundingBox]
    region_keys: list[str]


@dataclass
class CaptionRecord:
    image_id: str
    captions: list[str]


def _iter_jsonl(path):
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}: line {lineno}: invalid JSON: {e}") from None
            if not isinstance(obj, dict):
                raise FormatError(f"{path}: line {lineno}: expected a JSON object")
            yield lineno, obj


def _field(obj, name, kind, path, lineno):
    if name not in obj:
        raise FormatError(f"{path}: line {lineno}: missing field {name!r}")
    v = obj[name]
    if kind is float:
        if not isinstance(v, (int, float)) or isinstance(v, bool):
            raise FormatError(f"{path}: line {lineno}: field {name!r} must be a number")
        return float(v)
    if not isinstance(v, kind):
        raise FormatError(f"{path}: line {lineno}: field {name!r} must be {kind.__name__}")
    return v


def _parse_box(raw, path, lineno):
    if (not isinstance(raw, list) or len(raw) != 4
            or any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in raw)):
        raise FormatError(f"{path}: line {lineno}: box must be [x1, y1, x2, y2]")
    try:
        return BoundingBox(*(float(v) for v in raw))
    except InputError as e:
        raise FormatError(f"{path}: line {lineno}: {e}") from None


def load_annotations(path) -> list[AnnotationRecord]:
    records = []
    for lineno, obj in _iter_jsonl(path):
        image_id = _field(obj, "image_id", str, path, lineno)
        width = _field(obj, "width", float, path, lineno)
        height = _field(obj, "height", float, path, lineno)
        box = _parse_box(_field(obj, "box", list, path, lineno), path, lineno)
        region_key = _field(obj, "region_key", str, path, lineno)
        descriptions = _field(obj, "descriptions", list, path, lineno)
        if not descriptions or not all(isinstance(d, str) for d in descriptions):
            raise FormatError(
                f"{path}: line {lineno}: descriptions must be a non-empty list of strings")
        try:
            img = ImageSize(width, height)
            if not img.contains(box):
                raise InputError(f"box {box.as_list()} exceeds the {width}x{height} image")
        except InputError as e:
            raise FormatError(f"{path}: line {lineno}: {e}") from None
        records.append(AnnotationRecord(image_id, width, height, box, region_key,
                                        list(descriptions)))
    return records


def load_proposals(path, max_boxes: int = DEFAULT_MAX_PROPOSALS) -> list[ProposalSet]:
    sets = []
    for lineno, obj in _iter_jsonl(path):
        image_id = _field(obj, "image_id", str, path, lineno)
        raw_boxes = _field(obj, "boxes", list, path, lineno)
        keys = _field(obj, "region_keys", list, path, lineno)
        if len(raw_boxes) != len(keys):
            raise FormatError(
                f"{path}: line {lineno}: boxes ({len(raw_boxes)}) and region_keys "
                f"({len(keys)}) differ in length")
        if not all(isinstance(k, str) for k in keys):
            raise FormatError(f"{path}: line {lineno}: region_keys must be strings")
        boxes = [_parse_box(b, path, lineno) for b in raw_boxes]
        # proposal files are ranked; keep the top max_boxes
        sets.append(ProposalSet(image_id, boxes[:max_boxes], list(keys[:max_boxes])))
    return sets


def load_captions(path) -> list[CaptionRecord]:
    records = []
    for lineno, obj in _iter_jsonl(path):
        image_id = _field(obj, "image_id", str, path, lineno)
        captions = _field(obj, "captions", list, path, lineno)
        if not captions or not all(isinstance(c, str) for c in captions):
            raise FormatError(
                f"{path}: line {lineno}: captions must be a non-empty list of strings")
        records.append(CaptionRecord(image_id, list(captions)))
    return records


@dataclass
class TrainingTuple:
    """One (object, description) training instance."""

    region_key: str
    image_id: str
    spatial: np.ndarray
    tokens: TokenSequence


def build_training_tuples(records: Sequence[AnnotationRecord], region_store: FeatureStore,
                          context_store: FeatureStore, vocab: Vocabulary) -> list[TrainingTuple]:
    """Expand records into one tuple per (object, description) pair."""
    tuples = []
    for rec in records:
        if rec.region_key not in region_store:
            raise InputError(f"region feature key not found: {rec.region_key!r}")
        if rec.image_id not in context_store:
            raise InputError(f"context feature key not found: {rec.image_id!r}")
        spatial = encode_spatial(rec.box, ImageSize(rec.width, rec.height))
        for desc in rec.descriptions:
            ids = encode(vocab, desc)
            if not ids:
                raise InputError(f"description tokenizes to nothing: {desc!r}")
            tuples.append(TrainingTuple(rec.region_key, rec.image_id, spatial, ids))
    return tuples


def save_checkpoint(params: ScrcParams, config: ScrcConfig, vocab: Vocabulary, path):
    params.check_config(config)
    if len(vocab) != config.vocab_size:
        raise InputError(f"vocabulary size {len(vocab)} != config vocab_size {config.vocab_size}")
    header = {"format_version": FORMAT_VERSION,
              "config": config.to_dict(),
              "vocab": list(vocab.tokens)}
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tensors = params.tensors()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(hb)))
        f.write(hb)
        f.write(struct.pack("<I", len(tensors)))
        for t in tensors:
            nb = t.name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", t.value.ndim))
            f.write(struct.pack(f"<{t.value.ndim}I", *t.value.shape))
            f.write(np.ascontiguousarray(t.value, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Returns (params, config, vocab); tensors come back bit-exact."""
    with open(path, "rb") as f:
        cur = _Cursor(f.read(), "checkpoint")
    magic = cur.take(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"checkpoint: bad magic {magic!r} at byte 0")
    version, hlen = cur.unpack("<II")
    if version != FORMAT_VERSION:
        raise FormatError(f"checkpoint: unsupported version {version}")
    try:
        header = json.loads(cur.take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"checkpoint: invalid header JSON: {e}") from None
    for key in ("format_version", "config", "vocab"):
        if key not in header:
            raise FormatError(f"checkpoint: header missing {key!r}")
    if header["format_version"] != FORMAT_VERSION:
        raise FormatError(f"checkpoint: unsupported format_version {header['format_version']}")
    try:
        config = ScrcConfig.from_dict(header["config"])
        vocab = Vocabulary(header["vocab"])
    except (TypeError, InputError) as e:
        raise FormatError(f"checkpoint: invalid header: {e}") from None

    (count,) = cur.unpack("<I")
    loaded: dict[str, np.ndarray] = {}
    for _ in range(count):
        rec_off = cur.off
        (nlen,) = cur.unpack("<H")
        name = cur.take(nlen).decode("utf-8")
        if name in loaded:
            raise FormatError(f"checkpoint: duplicate tensor {name!r} at byte {rec_off}")
        (rank,) = cur.unpack("<B")
        dims = cur.unpack(f"<{rank}I")
        n = 1
        for d in dims:
            n *= d
        data = np.frombuffer(cur.take(4 * n), dtype="<f4").reshape(dims).copy()
        loaded[name] = data
    cur.done()

    params = ScrcParams.zeros(config, dtype=np.float32)
    expected = {t.name: t for t in params.tensors()}
    missing = set(expected) - set(loaded)
    extra = set(loaded) - set(expected)
    if missing or extra:
        raise FormatError(
            f"checkpoint: tensor names do not match (missing {sorted(missing)}, "
            f"unexpected {sorted(extra)})")
    for name, data in loaded.items():
        t = expected[name]
        if data.shape != t.value.shape:
            raise FormatError(
                f"checkpoint: tensor {name!r} has shape {data.shape}, expected {t.value.shape}")
        t.value[...] = data
    return params, config, vocab

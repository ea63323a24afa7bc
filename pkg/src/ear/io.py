"""Bit-exact tensor container files, corpus manifests and label bundles.

Tensor files are a small binary format (magic ``EART``); manifests and label
bundles are JSON so metadata stays inspectable while payloads stay exact.
The manifest schema is documented in docs/formats.md.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, IngestionError

MAGIC = b"EART"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def write_tensor(path: str | Path, arr: np.ndarray) -> None:
    """Write an array as a tensor file; float32 stays float32, everything else float64."""
    arr = np.asarray(arr)
    if arr.dtype not in _CODES:
        arr = arr.astype(np.float64)
    code = _CODES[arr.dtype]
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    header = MAGIC + struct.pack("<HBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + payload)


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a tensor file back, bit-identical to what was written."""
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes) at byte offset 0")
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r} at byte offset 0")
    version, code, ndim = struct.unpack_from("<HBB", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte offset 4")
    if code not in _DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code} at byte offset 6")
    dims_end = 8 + 4 * ndim
    if len(raw) < dims_end:
        raise FormatError(f"{path}: truncated dims at byte offset 8")
    dims = struct.unpack_from(f"<{ndim}I", raw, 8)
    dtype = _DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    actual = len(raw) - dims_end
    if actual != expected:
        raise FormatError(
            f"{path}: payload has {actual} bytes, expected {expected} for dims {list(dims)}"
        )
    return np.frombuffer(raw[dims_end:], dtype=dtype).reshape(dims).copy()


# ---------------------------------------------------------------------------
# corpus manifests


@dataclass
class VideoRecord:
    video_id: str
    num_segments: int
    audio: np.ndarray            # (T, D_a)
    visual: np.ndarray           # (T, D_v)
    label: np.ndarray            # (C,) video-level weak label
    gt_audio: np.ndarray | None = None   # (T, C)
    gt_visual: np.ndarray | None = None  # (T, C)
    pseudo_audio: np.ndarray | None = None
    pseudo_visual: np.ndarray | None = None

    @property
    def gt_av(self) -> np.ndarray:
        if self.gt_audio is None or self.gt_visual is None:
            raise IngestionError(f"video {self.video_id} has no segment ground truth")
        return np.minimum(self.gt_audio, self.gt_visual)


@dataclass
class Corpus:
    categories: list[str]
    videos: list[VideoRecord]
    dim_audio: int
    dim_visual: int
    text_audio: np.ndarray | None = None   # (C, D_a)
    text_visual: np.ndarray | None = None  # (C, D_v)
    text_templates: dict[str, str] = field(default_factory=dict)
    path: Path | None = None

    @property
    def num_classes(self) -> int:
        return len(self.categories)

    def by_id(self) -> dict[str, VideoRecord]:
        return {v.video_id: v for v in self.videos}

    def gt_planes(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        return {v.video_id: (v.gt_audio, v.gt_visual) for v in self.videos}


def _load_plane(base: Path, rel: str, vid: str, shape: tuple[int, ...], what: str) -> np.ndarray:
    path = base / rel
    if not path.exists():
        raise IngestionError(f"video {vid}: missing {what} file {path}")
    arr = read_tensor(path).astype(np.float64)
    if arr.shape != shape:
        raise IngestionError(f"video {vid}: {what} has dims {list(arr.shape)}, expected {list(shape)}")
    return arr


def load_corpus(manifest_path: str | Path) -> Corpus:
    """Load and validate a corpus manifest, failing fast on the offending video."""
    manifest_path = Path(manifest_path)
    try:
        spec = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{manifest_path}: not valid JSON ({e})") from e
    if spec.get("schema") != 1:
        raise FormatError(f"{manifest_path}: unsupported manifest schema {spec.get('schema')!r}")
    base = manifest_path.parent
    categories = list(spec["categories"])
    c = len(categories)
    dims = spec["feature_dims"]
    da, dv = int(dims["audio"]), int(dims["visual"])

    videos = []
    for entry in spec["videos"]:
        vid = entry["id"]
        t = int(entry["segments"])
        audio = _load_plane(base, entry["audio"], vid, (t, da), "audio features")
        visual = _load_plane(base, entry["visual"], vid, (t, dv), "visual features")
        label = np.asarray(entry["label"], dtype=np.float64)
        if label.shape != (c,):
            raise IngestionError(f"video {vid}: label has {label.shape[0]} entries, expected {c}")
        rec = VideoRecord(vid, t, audio, visual, label)
        if entry.get("gt_audio"):
            rec.gt_audio = _load_plane(base, entry["gt_audio"], vid, (t, c), "audio ground truth")
        if entry.get("gt_visual"):
            rec.gt_visual = _load_plane(base, entry["gt_visual"], vid, (t, c), "visual ground truth")
        if entry.get("pseudo_audio"):
            rec.pseudo_audio = _load_plane(base, entry["pseudo_audio"], vid, (t, c), "audio pseudo-labels")
        if entry.get("pseudo_visual"):
            rec.pseudo_visual = _load_plane(base, entry["pseudo_visual"], vid, (t, c), "visual pseudo-labels")
        videos.append(rec)

    corpus = Corpus(categories, videos, da, dv, path=manifest_path)
    text = spec.get("text_features") or {}
    if text.get("audio"):
        corpus.text_audio = _load_plane(base, text["audio"], "<text>", (c, da), "audio text features")
    if text.get("visual"):
        corpus.text_visual = _load_plane(base, text["visual"], "<text>", (c, dv), "visual text features")
    corpus.text_templates = dict(spec.get("text_templates") or {})
    return corpus


# ---------------------------------------------------------------------------
# label bundles (pseudo-labels and predictions)


def write_bundle(
    path: str | Path,
    kind: str,
    categories: list[str],
    planes: dict[str, tuple[np.ndarray, np.ndarray]],
) -> None:
    """Write per-video (audio, visual) planes as an index JSON plus tensor files."""
    path = Path(path)
    tensor_dir = path.parent / (path.stem + ".tensors")
    tensor_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for vid in sorted(planes):
        a, v = planes[vid]
        rel_a = f"{tensor_dir.name}/{vid}_a.eart"
        rel_v = f"{tensor_dir.name}/{vid}_v.eart"
        write_tensor(path.parent / rel_a, np.asarray(a, dtype=np.float64))
        write_tensor(path.parent / rel_v, np.asarray(v, dtype=np.float64))
        entries.append({"id": vid, "audio": rel_a, "visual": rel_v})
    doc = {"schema": 1, "kind": kind, "categories": categories, "videos": entries}
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def read_bundle(path: str | Path) -> tuple[str, list[str], dict[str, tuple[np.ndarray, np.ndarray]]]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: not valid JSON ({e})") from e
    if doc.get("schema") != 1 or "videos" not in doc:
        raise FormatError(f"{path}: not a label bundle")
    planes = {}
    for entry in doc["videos"]:
        a = read_tensor(path.parent / entry["audio"]).astype(np.float64)
        v = read_tensor(path.parent / entry["visual"]).astype(np.float64)
        if a.shape != v.shape:
            raise IngestionError(f"video {entry['id']}: audio/visual plane shapes differ: {a.shape} vs {v.shape}")
        planes[entry["id"]] = (a, v)
    return doc.get("kind", "unknown"), list(doc.get("categories", [])), planes

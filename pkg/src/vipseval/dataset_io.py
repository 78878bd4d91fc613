"""On-disk formats: panoptic PNG sequences, logit volumes and weight maps.

Panoptic frames are 8-bit RGB PNGs with ``id = R + 256*G + 65536*B``. Logit
and weight files share one envelope::

    8-byte magic | 4-byte big-endian header length | UTF-8 JSON header | payload

The payload is little-endian IEEE-754 binary32 in row-major order.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
from PIL import Image

from vipseval.core import (
    CategoryTable,
    IdRaster,
    VideoPanopticSequence,
    VipsEvalError,
    ValidationError,
)

LOGIT_MAGIC = b"VPSLGT01"
WEIGHT_MAGIC = b"VPSWGT01"
MAX_RGB_ID = 1 << 24

PathLike = Union[str, os.PathLike]


class FormatError(VipsEvalError):
    """Raised for malformed or inconsistent files."""


@dataclass
class VideoEntry:
    video_id: str
    frame_raster_paths: List[str]
    segments_sidecar_path: str
    root: Path = field(default_factory=Path)

    def frame_path(self, i: int) -> Path:
        return self.root / self.frame_raster_paths[i]

    @property
    def sidecar_path(self) -> Path:
        return self.root / self.segments_sidecar_path

    def to_json(self) -> dict:
        return {
            "video_id": self.video_id,
            "frame_raster_paths": list(self.frame_raster_paths),
            "segments_sidecar_path": self.segments_sidecar_path,
        }


@dataclass
class DatasetManifest:
    dataset_name: str
    category_file: str
    videos: List[VideoEntry]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        ids = [v.video_id for v in self.videos]
        dup = sorted({v for v in ids if ids.count(v) > 1})
        if dup:
            raise FormatError(f"duplicate video ids in manifest: {dup}")
        for v in self.videos:
            if not v.frame_raster_paths:
                raise FormatError(f"video {v.video_id!r} lists no frames")

    def categories(self) -> CategoryTable:
        return load_categories(self.root / self.category_file)

    def entry(self, video_id: str) -> VideoEntry:
        for v in self.videos:
            if v.video_id == video_id:
                return v
        raise KeyError(video_id)

    def to_json(self) -> dict:
        return {
            "dataset_name": self.dataset_name,
            "category_file": self.category_file,
            "videos": [v.to_json() for v in self.videos],
        }


def _read_json(path: PathLike):
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise FormatError(f"missing file: {path}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed JSON in {path}: {exc}") from None


def _write_json(obj, path: PathLike) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=False)
        f.write("\n")


def load_categories(path: PathLike) -> CategoryTable:
    try:
        return CategoryTable.from_json(_read_json(path))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed category file {path}: missing {exc}") from None


def save_categories(cats: CategoryTable, path: PathLike) -> None:
    _write_json(cats.to_json(), path)


def load_manifest(path: PathLike) -> DatasetManifest:
    path = Path(path)
    obj = _read_json(path)
    root = path.parent
    try:
        videos = [
            VideoEntry(str(v["video_id"]), [str(p) for p in v["frame_raster_paths"]],
                       str(v["segments_sidecar_path"]), root)
            for v in obj["videos"]
        ]
        return DatasetManifest(str(obj.get("dataset_name", "")), str(obj["category_file"]), videos, root)
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed manifest {path}: missing {exc}") from None


def save_manifest(manifest: DatasetManifest, path: PathLike) -> None:
    _write_json(manifest.to_json(), path)


# -- panoptic PNG ------------------------------------------------------------

def rgb_to_id(rgb: np.ndarray) -> np.ndarray:
    rgb = rgb.astype(np.uint32)
    return rgb[..., 0] + 256 * rgb[..., 1] + 65536 * rgb[..., 2]


def id_to_rgb(ids: np.ndarray) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.uint32)
    if ids.size and ids.max() >= MAX_RGB_ID:
        raise FormatError(f"id {int(ids.max())} exceeds 24-bit range")
    rgb = np.empty(ids.shape + (3,), dtype=np.uint8)
    rgb[..., 0] = ids & 0xFF
    rgb[..., 1] = (ids >> 8) & 0xFF
    rgb[..., 2] = (ids >> 16) & 0xFF
    return rgb


def read_id_png(path: PathLike) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode != "RGB":
                raise FormatError(f"{path}: expected 8-bit RGB PNG, got mode {im.mode}")
            if im.format != "PNG":
                raise FormatError(f"{path}: not a PNG file")
            rgb = np.asarray(im)
    except FileNotFoundError:
        raise FormatError(f"missing file: {path}") from None
    except (OSError, SyntaxError) as exc:
        raise FormatError(f"malformed PNG {path}: {exc}") from None
    return rgb_to_id(rgb)


def write_id_png(ids: np.ndarray, path: PathLike) -> None:
    Image.fromarray(id_to_rgb(ids), mode="RGB").save(path, format="PNG")


def load_sidecar(path: PathLike) -> Dict[int, int]:
    obj = _read_json(path)
    try:
        return {int(s["id"]): int(s["category_id"]) for s in obj["segments"]}
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed segments sidecar {path}: missing {exc}") from None


def load_sidecar_extra(path: PathLike, key: str, default=None) -> Dict[int, object]:
    """Per-segment optional field of a sidecar, e.g. instance ``confidence``."""
    obj = _read_json(path)
    return {int(s["id"]): s.get(key, default) for s in obj["segments"]}


def load_sequence(entry: VideoEntry, cats: CategoryTable) -> VideoPanopticSequence:
    segments = load_sidecar(entry.sidecar_path)
    frames = []
    shape = None
    for i in range(len(entry.frame_raster_paths)):
        p = entry.frame_path(i)
        ids = read_id_png(p)
        if shape is None:
            shape = ids.shape
        elif ids.shape != shape:
            raise FormatError(f"{p}: frame {i} has dimensions {ids.shape}, expected {shape}")
        frames.append(ids)
    if not frames:
        raise FormatError(f"video {entry.video_id!r} has no frames")
    try:
        return VideoPanopticSequence(entry.video_id, np.stack(frames), segments, cats)
    except ValidationError as exc:
        raise FormatError(f"{entry.sidecar_path}: {exc}") from None


def save_sequence(seq: VideoPanopticSequence, out_dir: PathLike,
                  relative_to: Optional[PathLike] = None,
                  extra: Optional[Mapping[int, Mapping]] = None) -> VideoEntry:
    """Write one video as PNG frames plus ``segments.json`` under ``out_dir/video_id``.

    Paths in the returned entry are relative to ``relative_to`` (default
    ``out_dir``), which is where the manifest is expected to live.
    """
    out_dir = Path(out_dir)
    root = Path(relative_to) if relative_to is not None else out_dir
    if seq.frames.size and int(seq.frames.max()) >= MAX_RGB_ID:
        raise FormatError(f"id {int(seq.frames.max())} exceeds 24-bit range")
    big = [s for s in seq.segments if s >= MAX_RGB_ID]
    if big:
        raise FormatError(f"id {big[0]} exceeds 24-bit range")
    vdir = out_dir / seq.video_id
    vdir.mkdir(parents=True, exist_ok=True)
    frame_paths = []
    for t in range(seq.num_frames):
        p = vdir / f"{t:06d}.png"
        write_id_png(seq.frames[t], p)
        frame_paths.append(os.path.relpath(p, root))
    sidecar = vdir / "segments.json"
    segs = []
    for sid, cid in seq.segments.items():
        rec = {"id": sid, "category_id": cid}
        if extra and sid in extra:
            rec.update(extra[sid])
        segs.append(rec)
    _write_json({"segments": segs}, sidecar)
    return VideoEntry(seq.video_id, frame_paths, os.path.relpath(sidecar, root), root)


def save_dataset(seqs: Sequence[VideoPanopticSequence], cats: CategoryTable, out_dir: PathLike,
                 dataset_name: str = "dataset",
                 extras: Optional[Mapping[str, Mapping[int, Mapping]]] = None) -> Path:
    """Write sequences, a category file and ``manifest.json``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_categories(cats, out_dir / "categories.json")
    entries = [save_sequence(s, out_dir, extra=(extras or {}).get(s.video_id)) for s in seqs]
    manifest = DatasetManifest(dataset_name, "categories.json", entries, out_dir)
    path = out_dir / "manifest.json"
    save_manifest(manifest, path)
    return path


def load_dataset(path: PathLike):
    """Load every video of a manifest; returns ``(sequences, categories)``."""
    manifest = load_manifest(path)
    cats = manifest.categories()
    return [load_sequence(v, cats) for v in manifest.videos], cats


# -- resizing ----------------------------------------------------------------

def short_side_size(height: int, width: int, target: int) -> tuple:
    if target < 1:
        raise ValueError("target must be >= 1")
    short = min(height, width)

    def scale(n):
        return max(1, int(np.floor(n * target / short + 0.5)))

    if height <= width:
        return target, scale(width)
    return scale(height), target


def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    idx = ((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.int64)
    return np.clip(idx, 0, n_in - 1)


def _resize_array(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = arr.shape[-2:]
    if (h, w) == (out_h, out_w):
        return arr
    rows = _nearest_index(h, out_h)
    cols = _nearest_index(w, out_w)
    return arr[..., rows[:, None], cols[None, :]]


def resize_short_side(obj, target: int):
    """Nearest-neighbour resize so the short side equals ``target``.

    Accepts an ``IdRaster``, a ``VideoPanopticSequence`` or a bare 2-D/3-D
    id array, and returns the same kind of value.
    """
    if isinstance(obj, VideoPanopticSequence):
        h, w = obj.shape
        oh, ow = short_side_size(h, w, target)
        return VideoPanopticSequence(obj.video_id, _resize_array(obj.frames, oh, ow),
                                     obj.segments, obj.categories)
    if isinstance(obj, IdRaster):
        oh, ow = short_side_size(obj.height, obj.width, target)
        return IdRaster(_resize_array(obj.ids, oh, ow))
    arr = np.asarray(obj)
    oh, ow = short_side_size(arr.shape[-2], arr.shape[-1], target)
    return _resize_array(arr, oh, ow)


# -- binary envelopes --------------------------------------------------------

def _write_envelope(path: PathLike, magic: bytes, header: dict, payload: bytes) -> None:
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack(">I", len(hdr)))
        f.write(hdr)
        f.write(payload)


def _read_envelope(path: PathLike, magic: bytes):
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise FormatError(f"missing file: {path}") from None
    if data[:8] != magic:
        raise FormatError(f"{path}: bad magic {data[:8]!r}, expected {magic!r}")
    if len(data) < 12:
        raise FormatError(f"{path}: truncated header")
    (n,) = struct.unpack(">I", data[8:12])
    if len(data) < 12 + n:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[12:12 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed header: {exc}") from None
    endian = header.get("endianness", "little")
    if endian != "little":
        raise FormatError(f"{path}: unsupported endianness {endian!r}")
    if header.get("dtype", "float32") != "float32":
        raise FormatError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    return header, data[12 + n:]


def _decode_f32(path, payload: bytes, count: int, what: str) -> np.ndarray:
    if len(payload) != 4 * count:
        raise FormatError(
            f"{path}: payload length mismatch: {len(payload)} bytes, expected {4 * count}")
    arr = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    if not np.all(np.isfinite(arr)):
        i = int(np.flatnonzero(~np.isfinite(arr))[0])
        raise FormatError(f"{path}: non-finite {what} at flat index {i}")
    return arr


@dataclass(eq=False)
class LogitVolume:
    """T x H x W x C class scores; ``class_index[c]`` is the category of channel c."""

    values: np.ndarray
    class_index: List[int]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 4:
            raise ValidationError(f"logit volume must be T x H x W x C, got shape {v.shape}")
        if v.shape[3] != len(self.class_index):
            raise ValidationError(
                f"class_index has {len(self.class_index)} entries for {v.shape[3]} channels")
        if len(set(self.class_index)) != len(self.class_index):
            raise ValidationError("class_index has duplicate categories")
        if not np.all(np.isfinite(v)):
            raise ValidationError("non-finite logit")
        v = np.array(v, copy=True)
        v.setflags(write=False)
        self.values = v
        self.class_index = [int(c) for c in self.class_index]

    @property
    def dims(self) -> tuple:
        return self.values.shape

    def select(self, category_ids: Sequence[int]) -> "LogitVolume":
        pos = [self.class_index.index(c) for c in category_ids]
        return LogitVolume(self.values[..., pos], list(category_ids))

    def __eq__(self, other) -> bool:
        return (isinstance(other, LogitVolume) and self.class_index == other.class_index
                and self.values.shape == other.values.shape
                and self.values.tobytes() == other.values.tobytes())


def write_logits(vol: LogitVolume, path: PathLike) -> None:
    header = {
        "dims": list(vol.values.shape),
        "class_index": vol.class_index,
        "endianness": "little",
        "dtype": "float32",
    }
    _write_envelope(path, LOGIT_MAGIC, header, vol.values.astype("<f4").tobytes(order="C"))


def read_logits(path: PathLike, cats: Optional[CategoryTable] = None) -> LogitVolume:
    header, payload = _read_envelope(path, LOGIT_MAGIC)
    try:
        dims = [int(d) for d in header["dims"]]
        class_index = [int(c) for c in header["class_index"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed header: {exc}") from None
    if len(dims) != 4 or min(dims) < 1:
        raise FormatError(f"{path}: dims must be four positive integers, got {dims}")
    if dims[3] != len(class_index):
        raise FormatError(f"{path}: class_index length {len(class_index)} != C = {dims[3]}")
    if cats is not None:
        unknown = [c for c in class_index if c not in cats]
        if unknown:
            raise FormatError(f"{path}: unknown class id {unknown[0]}")
    arr = _decode_f32(path, payload, int(np.prod(dims)), "logit")
    return LogitVolume(arr.reshape(dims), class_index)


class WeightMap(dict):
    """Name -> float32 array mapping kept in ascending name order."""

    def __init__(self, tensors: Optional[Mapping[str, np.ndarray]] = None,
                 attrs: Optional[dict] = None):
        super().__init__()
        for name in sorted(tensors or {}):
            arr = np.array(tensors[name], dtype=np.float32)
            if any(d < 1 for d in arr.shape):
                raise ValidationError(f"tensor {name!r} has a non-positive dimension {arr.shape}")
            self[name] = arr
        self.attrs = dict(attrs or {})

    def __eq__(self, other) -> bool:
        if not isinstance(other, Mapping) or list(self) != list(other):
            return False
        return all(self[k].shape == np.shape(other[k])
                   and self[k].tobytes() == np.asarray(other[k], dtype=np.float32).tobytes()
                   for k in self)

    def __ne__(self, other) -> bool:
        return not self == other

    __hash__ = None


def write_weights(wm: Mapping[str, np.ndarray], path: PathLike) -> None:
    names = sorted(wm)
    header = {
        "tensors": [{"name": n, "shape": list(np.shape(wm[n]))} for n in names],
        "endianness": "little",
        "dtype": "float32",
    }
    attrs = getattr(wm, "attrs", None)
    if attrs:
        header["attrs"] = attrs
    payload = b"".join(np.asarray(wm[n], dtype="<f4").tobytes(order="C") for n in names)
    _write_envelope(path, WEIGHT_MAGIC, header, payload)


def read_weights(path: PathLike) -> WeightMap:
    header, payload = _read_envelope(path, WEIGHT_MAGIC)
    try:
        specs = [(str(t["name"]), [int(d) for d in t["shape"]]) for t in header["tensors"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed header: {exc}") from None
    names = [n for n, _ in specs]
    if len(set(names)) != len(names):
        dup = sorted({n for n in names if names.count(n) > 1})
        raise FormatError(f"{path}: duplicate tensor name {dup[0]!r}")
    if names != sorted(names):
        raise FormatError(f"{path}: tensor names are not in ascending order")
    for n, shape in specs:
        if any(d < 1 for d in shape):
            raise FormatError(f"{path}: tensor {n!r} has non-positive shape {shape}")
    total = sum(int(np.prod(s)) for _, s in specs)
    flat = _decode_f32(path, payload, total, "weight")
    tensors = {}
    off = 0
    for n, shape in specs:
        size = int(np.prod(shape))
        tensors[n] = flat[off:off + size].reshape(shape)
        off += size
    return WeightMap(tensors, header.get("attrs"))

"""Frozen per-image feature extractors, per-timestep pairing and an on-disk cache.

``TINY_PATCH_STATS`` is a deterministic stand-in for a pretrained CNN: per
cell of a ``G x G`` grid it records the mean and standard deviation of each
RGB channel. The VGG/Inception adapters need torchvision and are optional.

Cache layout::

    <cache_root>/<backbone>/<format>/<modality>/<trial_id>_<offset>.fvec
    <cache_root>/<backbone>/<format>/<modality>/<trial_id>_<offset>.sha256

An ``.fvec`` file is a 16-byte header (``b"FVEC"``, u16 version, u16 L,
u32 dim, u32 reserved; little endian) followed by ``L * dim`` float32.
"""

from __future__ import annotations

import enum
import hashlib
import logging
import os
import struct
import tempfile
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image

from .dataset import (
    DatasetManifest,
    Format,
    SequenceSample,
    WindowPattern,
    frame_paths,
    load_trial,
    make_samples,
    window_indices,
    WINDOW_OFFSETS,
)

log = logging.getLogger(__name__)

FVEC_MAGIC = b"FVEC"
FVEC_VERSION = 1
_HEADER = struct.Struct("<4sHHII")


class Backbone(enum.Enum):
    VGG16_FC7 = "VGG16_FC7"
    VGG19_FC7 = "VGG19_FC7"
    INCEPTION_V3_POOL3 = "INCEPTION_V3_POOL3"
    TINY_PATCH_STATS = "TINY_PATCH_STATS"

    @classmethod
    def parse(cls, value: "str | Backbone") -> "Backbone":
        if isinstance(value, Backbone):
            return value
        aliases = {
            "tiny": cls.TINY_PATCH_STATS,
            "vgg16": cls.VGG16_FC7,
            "vgg19": cls.VGG19_FC7,
            "inception": cls.INCEPTION_V3_POOL3,
            "inception_v3": cls.INCEPTION_V3_POOL3,
        }
        v = str(value)
        return aliases.get(v.lower()) or cls[v.upper()]


class Modality(enum.Enum):
    TACTILE = "tactile"
    VISION = "vision"
    TACTILE_VISION = "tactile_vision"
    FUSED_PAIR = "tactile_vision"  # alias

    @classmethod
    def parse(cls, value: "str | Modality") -> "Modality":
        if isinstance(value, Modality):
            return value
        return cls(str(value).lower().replace("-", "_"))


class FeatureError(Exception):
    pass


class UnsupportedImage(FeatureError):
    pass


class BackendUnavailable(FeatureError):
    pass


class CacheCorrupt(FeatureError):
    pass


_PRETRAINED_DIMS = {
    Backbone.VGG16_FC7: (4096, (224, 224)),
    Backbone.VGG19_FC7: (4096, (224, 224)),
    Backbone.INCEPTION_V3_POOL3: (2048, (299, 299)),
}


@dataclass(frozen=True)
class FeatureExtractorSpec:
    name: Backbone = Backbone.TINY_PATCH_STATS
    grid: int = 8
    # None keeps the native size (TINY only; pretrained adapters always resize)
    input_size: tuple[int, int] | None = None
    # False builds the pretrained architectures with random weights (shape checks only)
    pretrained: bool = True
    frozen: bool = field(default=True, init=False)

    def __post_init__(self):
        object.__setattr__(self, "name", Backbone.parse(self.name))
        if self.name is Backbone.TINY_PATCH_STATS and self.grid < 1:
            raise ValueError("grid must be >= 1")

    @property
    def output_dim(self) -> int:
        if self.name is Backbone.TINY_PATCH_STATS:
            return 6 * self.grid * self.grid
        return _PRETRAINED_DIMS[self.name][0]

    @property
    def resolved_input_size(self) -> tuple[int, int] | None:
        if self.name is Backbone.TINY_PATCH_STATS:
            return self.input_size
        return _PRETRAINED_DIMS[self.name][1]


@dataclass
class FeatureSequence:
    vectors: np.ndarray  # (L, dim) float32
    modality: Modality

    @property
    def dims(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.vectors.shape[0]


# ---------------------------------------------------------------------------
# extractors


def _check_image(image) -> np.ndarray:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3 or 0 in image.shape:
        raise UnsupportedImage(f"expected non-empty HxWx3 uint8 image, got {image.dtype} {image.shape}")
    return image


def _resize(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = size
    if image.shape[:2] == (h, w):
        return image
    return np.asarray(Image.fromarray(image).resize((w, h), Image.BILINEAR))


def tiny_patch_stats(image: np.ndarray, grid: int = 8) -> np.ndarray:
    """Per-cell, per-channel (mean, std), flattened in (cell, channel, stat) order.

    Cells split rows and columns as evenly as possible when the image size
    is not a multiple of ``grid``.
    """
    h, w, _ = image.shape
    if h < grid or w < grid:
        raise UnsupportedImage(f"image {h}x{w} smaller than a {grid}x{grid} grid")
    img = image.astype(np.float64)
    if h % grid == 0 and w % grid == 0:
        cells = img.reshape(grid, h // grid, grid, w // grid, 3).transpose(0, 2, 1, 3, 4)
        cells = cells.reshape(grid * grid, -1, 3)
        stats = np.stack([cells.mean(axis=1), cells.std(axis=1)], axis=-1)
        return stats.reshape(-1).astype(np.float32)
    ys = np.linspace(0, h, grid + 1).astype(int)
    xs = np.linspace(0, w, grid + 1).astype(int)
    out = np.empty((grid, grid, 3, 2))
    for i in range(grid):
        for j in range(grid):
            cell = img[ys[i]:ys[i + 1], xs[j]:xs[j + 1]].reshape(-1, 3)
            out[i, j, :, 0] = cell.mean(axis=0)
            out[i, j, :, 1] = cell.std(axis=0)
    return out.reshape(-1).astype(np.float32)


class _TorchAdapter:
    """torchvision backbone truncated at the layer the features come from.

    Preprocessing is each model's published ImageNet recipe: direct resize of
    the whole frame to the input size, scale to [0, 1], then per-channel
    mean/std normalisation.
    """

    MEAN = (0.485, 0.456, 0.406)
    STD = (0.229, 0.224, 0.225)

    def __init__(self, name: Backbone, pretrained: bool):
        try:
            import torch
            import torchvision.models as tvm
        except ImportError as e:  # pragma: no cover - depends on environment
            raise BackendUnavailable(f"{name.value} needs torch and torchvision ({e})") from e
        self.torch = torch
        try:
            if name is Backbone.INCEPTION_V3_POOL3:
                weights = tvm.Inception_V3_Weights.IMAGENET1K_V1 if pretrained else None
                net = tvm.inception_v3(weights=weights, aux_logits=True, init_weights=not pretrained)
                net.fc = torch.nn.Identity()
            else:
                ctor, wcls = (
                    (tvm.vgg16, tvm.VGG16_Weights) if name is Backbone.VGG16_FC7 else (tvm.vgg19, tvm.VGG19_Weights)
                )
                net = ctor(weights=wcls.IMAGENET1K_V1 if pretrained else None)
                # classifier = [fc6, relu, dropout, fc7, relu, dropout, fc8]; keep through fc7's relu
                net.classifier = net.classifier[:5]
        except Exception as e:  # weights download failure, missing cache, ...
            raise BackendUnavailable(f"could not build {name.value}: {e}") from e
        net.eval()
        for p in net.parameters():
            p.requires_grad_(False)
        self.net = net
        self.size = _PRETRAINED_DIMS[name][1]
        self.lock = threading.Lock()

    def __call__(self, image: np.ndarray) -> np.ndarray:
        torch = self.torch
        x = _resize(image, self.size).astype(np.float32) / 255.0
        x = (x - np.array(self.MEAN, np.float32)) / np.array(self.STD, np.float32)
        t = torch.from_numpy(x.transpose(2, 0, 1).copy())[None]
        with self.lock, torch.no_grad():
            out = self.net(t)
        return out[0].numpy().astype(np.float32)


_ADAPTERS: dict[tuple[Backbone, bool], _TorchAdapter] = {}
_ADAPTER_LOCK = threading.Lock()


def _adapter(spec: FeatureExtractorSpec) -> _TorchAdapter:
    key = (spec.name, spec.pretrained)
    with _ADAPTER_LOCK:
        if key not in _ADAPTERS:
            _ADAPTERS[key] = _TorchAdapter(spec.name, spec.pretrained)
        return _ADAPTERS[key]


def extract(image, spec: FeatureExtractorSpec) -> np.ndarray:
    """Feature vector (float32, ``spec.output_dim``) of one RGB image."""
    image = _check_image(image)
    if spec.name is Backbone.TINY_PATCH_STATS:
        if spec.input_size is not None:
            image = _resize(image, spec.input_size)
        return tiny_patch_stats(image, spec.grid)
    return _adapter(spec)(image)


def extract_sequence(
    sample: SequenceSample,
    spec: FeatureExtractorSpec,
    modality: Modality | str,
    extractor: Callable[[np.ndarray, FeatureExtractorSpec], np.ndarray] | None = None,
) -> FeatureSequence:
    """Per-timestep features; the fused pair is tactile first, vision second."""
    modality = Modality.parse(modality)
    fn = extractor or extract
    rows = []
    for t in range(sample.length):
        parts = []
        try:
            if modality in (Modality.TACTILE, Modality.TACTILE_VISION):
                parts.append(fn(sample.gelsight_seq[t], spec))
            if modality in (Modality.VISION, Modality.TACTILE_VISION):
                parts.append(fn(sample.external_seq[t], spec))
        except FeatureError as e:
            raise type(e)(f"timestep {t} of {sample.trial_id}/{sample.window_start_offset:+d}: {e}") from e
        rows.append(np.concatenate(parts))
    return FeatureSequence(np.stack(rows).astype(np.float32), modality)


# ---------------------------------------------------------------------------
# cache


def fvec_path(cache_root: Path, spec: FeatureExtractorSpec, fmt: Format, modality: Modality,
              trial_id: str, offset: int) -> Path:
    return (Path(cache_root) / spec.name.value / Format.parse(fmt).value / Modality.parse(modality).value
            / f"{trial_id}_{offset:+d}.fvec")


def write_fvec(path: Path, vectors: np.ndarray, source_hash: str) -> None:
    """Atomically write an ``.fvec`` and its ``.sha256`` sidecar."""
    vectors = np.ascontiguousarray(vectors, dtype="<f4")
    L, dim = vectors.shape
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = _HEADER.pack(FVEC_MAGIC, FVEC_VERSION, L, dim, 0) + vectors.tobytes()
    for target, data in ((path.with_suffix(".sha256"), (source_hash + "\n").encode()), (path, payload)):
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=target.name, suffix=".tmp")
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, target)


def read_fvec(path: Path, expect_L: int | None = None, expect_dim: int | None = None) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CacheCorrupt(f"{path}: truncated header")
    magic, version, L, dim, _ = _HEADER.unpack_from(data)
    if magic != FVEC_MAGIC or version != FVEC_VERSION:
        raise CacheCorrupt(f"{path}: bad magic/version")
    if len(data) != _HEADER.size + 4 * L * dim:
        raise CacheCorrupt(f"{path}: payload size does not match header")
    if (expect_L is not None and L != expect_L) or (expect_dim is not None and dim != expect_dim):
        raise CacheCorrupt(f"{path}: shape ({L}, {dim}) does not match expected ({expect_L}, {expect_dim})")
    return np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(L, dim).astype(np.float32)


def _spec_tag(spec: FeatureExtractorSpec, pattern: WindowPattern) -> bytes:
    # settings that change the vectors but not the cache path or shape
    return (f"{spec.name.value}|grid={spec.grid}|input={spec.input_size}|pretrained={spec.pretrained}"
            f"|pattern={pattern.value}").encode()


def _window_hash(paths_ext: Sequence[Path], paths_gel: Sequence[Path], idx: Sequence[int],
                 digests: dict[Path, bytes], tag: bytes = b"") -> str:
    h = hashlib.sha256(tag)
    for paths in (paths_gel, paths_ext):
        for i in idx:
            p = paths[i]
            if p not in digests:
                digests[p] = hashlib.sha256(p.read_bytes()).digest()
            h.update(digests[p])
    return h.hexdigest()


def _modality_dim(spec: FeatureExtractorSpec, modality: Modality) -> int:
    return spec.output_dim * (2 if modality is Modality.TACTILE_VISION else 1)


def fetch_cached(cache_root: Path, spec: FeatureExtractorSpec, modality: Modality | str, fmt: Format | str,
                 trial_id: str, offset: int, L: int, source_hash: str | None = None) -> FeatureSequence:
    """Read one cached window. Raises :class:`CacheCorrupt` on any mismatch (including a stale hash)."""
    modality = Modality.parse(modality)
    path = fvec_path(cache_root, spec, fmt, modality, trial_id, offset)
    if not path.exists():
        raise FileNotFoundError(path)
    if source_hash is not None:
        side = path.with_suffix(".sha256")
        stored = side.read_text().strip() if side.exists() else ""
        if stored != source_hash:
            raise CacheCorrupt(f"{path}: source frames changed")
    return FeatureSequence(read_fvec(path, L, _modality_dim(spec, modality)), modality)


@dataclass
class CacheStats:
    hits: int = 0
    misses: int = 0
    recomputed_trials: list[str] = field(default_factory=list)


def cache_features(
    manifest: DatasetManifest,
    spec: FeatureExtractorSpec,
    modality: Modality | str,
    L: int,
    fmt: Format | str,
    cache_root: str | Path,
    trial_ids: Sequence[str] | None = None,
    pattern: WindowPattern = WindowPattern.GAP,
    workers: int = 1,
    extractor: Callable[[np.ndarray, FeatureExtractorSpec], np.ndarray] | None = None,
    stats: CacheStats | None = None,
) -> dict[tuple[str, int], Path]:
    """Make sure every window of every trial is cached; return ``{(trial_id, offset): path}``.

    A window is recomputed when its file is missing, unreadable, of the wrong
    shape, or its sidecar hash no longer matches the source frames.
    """
    modality, fmt = Modality.parse(modality), Format.parse(fmt)
    root = Path(manifest.root_path)
    ids = list(trial_ids) if trial_ids is not None else manifest.trial_ids
    stats = stats if stats is not None else CacheStats()
    lock = threading.Lock()
    tag = _spec_tag(spec, pattern)

    def one(tid: str) -> dict[tuple[str, int], Path]:
        entry = manifest.entry(tid)
        p_ext, p_gel = frame_paths(root, entry, "external"), frame_paths(root, entry, "gelsight")
        digests: dict[Path, bytes] = {}
        stale = {}
        out = {}
        for s in WINDOW_OFFSETS:
            idx = window_indices(entry.lift_frame_index, s, L, pattern)
            src = _window_hash(p_ext, p_gel, idx, digests, tag)
            path = fvec_path(cache_root, spec, fmt, modality, tid, s)
            out[(tid, s)] = path
            try:
                fetch_cached(cache_root, spec, modality, fmt, tid, s, L, src)
            except (FileNotFoundError, CacheCorrupt) as e:
                if isinstance(e, CacheCorrupt):
                    log.info("recomputing %s: %s", path.name, e)
                stale[s] = src
        with lock:
            stats.hits += len(WINDOW_OFFSETS) - len(stale)
            stats.misses += len(stale)
            if stale:
                stats.recomputed_trials.append(tid)
        if stale:
            trial = load_trial(manifest, tid)
            for sample in make_samples(trial, L, fmt, pattern):
                if sample.window_start_offset in stale:
                    seq = extract_sequence(sample, spec, modality, extractor)
                    write_fvec(out[(tid, sample.window_start_offset)], seq.vectors, stale[sample.window_start_offset])
        return out

    index: dict[tuple[str, int], Path] = {}
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            for part in pool.map(one, ids):
                index.update(part)
    else:
        for tid in ids:
            index.update(one(tid))
    return index


# ---------------------------------------------------------------------------
# model-ready arrays


@dataclass
class FeatureSet:
    """Stacked windows: ``X`` is ``(N, L, dim)`` float32, ``y`` is ``(N,)`` int64 (1 = slip)."""

    X: np.ndarray
    y: np.ndarray
    trial_ids: list[str]
    offsets: list[int]

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, mask) -> "FeatureSet":
        mask = np.asarray(mask)
        if mask.dtype == bool:
            mask = np.flatnonzero(mask)
        return FeatureSet(self.X[mask], self.y[mask], [self.trial_ids[i] for i in mask],
                          [self.offsets[i] for i in mask])

    def select_trials(self, trial_ids) -> "FeatureSet":
        keep = set(trial_ids)
        return self.subset(np.array([t in keep for t in self.trial_ids], dtype=bool))


@dataclass
class StreamFeatures:
    """Tactile and vision features of the same windows, kept apart so any modality can be assembled."""

    tactile: np.ndarray
    vision: np.ndarray
    y: np.ndarray
    trial_ids: list[str]
    offsets: list[int]

    def select(self, modality: Modality | str) -> FeatureSet:
        modality = Modality.parse(modality)
        if modality is Modality.TACTILE:
            X = self.tactile
        elif modality is Modality.VISION:
            X = self.vision
        else:
            X = np.concatenate([self.tactile, self.vision], axis=2)
        return FeatureSet(X, self.y, list(self.trial_ids), list(self.offsets))


def _trial_stream_features(trial, spec, L, fmt, pattern, extractor):
    fn = extractor or extract
    fmt = Format.parse(fmt)
    tact, vis, offsets = [], [], []
    memo: dict[tuple[str, int], np.ndarray] = {}
    for sample in make_samples(trial, L, fmt, pattern):
        rows_t, rows_v = [], []
        for t, fi in enumerate(sample.frame_indices):
            if fmt is Format.RAW:
                # raw frames are shared between overlapping windows
                for stream, seq, rows in (("g", sample.gelsight_seq, rows_t), ("e", sample.external_seq, rows_v)):
                    if (stream, fi) not in memo:
                        memo[(stream, fi)] = fn(seq[t], spec)
                    rows.append(memo[(stream, fi)])
            else:
                rows_t.append(fn(sample.gelsight_seq[t], spec))
                rows_v.append(fn(sample.external_seq[t], spec))
        tact.append(np.stack(rows_t))
        vis.append(np.stack(rows_v))
        offsets.append(sample.window_start_offset)
    return tact, vis, offsets


def build_stream_features(
    manifest: DatasetManifest,
    spec: FeatureExtractorSpec,
    L: int,
    fmt: Format | str,
    trial_ids: Sequence[str] | None = None,
    cache_root: str | Path | None = None,
    pattern: WindowPattern = WindowPattern.GAP,
    workers: int = 1,
    trials: dict | None = None,
) -> StreamFeatures:
    """Features of all five windows of each trial, both streams.

    With ``cache_root`` the per-stream features go through the ``.fvec``
    cache. ``trials`` may supply already-loaded :class:`GraspTrial` objects
    by id (skips disk reads when no cache is used).
    """
    fmt = Format.parse(fmt)
    ids = list(trial_ids) if trial_ids is not None else manifest.trial_ids

    def one(tid):
        if cache_root is not None:
            per = {}
            for m in (Modality.TACTILE, Modality.VISION):
                idx = cache_features(manifest, spec, m, L, fmt, cache_root, [tid], pattern)
                per[m] = [read_fvec(idx[(tid, s)], L, spec.output_dim) for s in WINDOW_OFFSETS]
            return per[Modality.TACTILE], per[Modality.VISION], list(WINDOW_OFFSETS)
        trial = trials[tid] if trials is not None and tid in trials else load_trial(manifest, tid)
        return _trial_stream_features(trial, spec, L, fmt, pattern, None)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(one, ids))
    else:
        parts = [one(t) for t in ids]

    tact, vis, y, tids, offs = [], [], [], [], []
    for tid, (t_rows, v_rows, offsets) in zip(ids, parts):
        label = int(manifest.entry(tid).label)
        tact.extend(t_rows)
        vis.extend(v_rows)
        offs.extend(offsets)
        tids.extend([tid] * len(offsets))
        y.extend([label] * len(offsets))
    dim = spec.output_dim
    return StreamFeatures(
        tactile=np.stack(tact).astype(np.float32) if tact else np.zeros((0, L, dim), np.float32),
        vision=np.stack(vis).astype(np.float32) if vis else np.zeros((0, L, dim), np.float32),
        y=np.array(y, dtype=np.int64),
        trial_ids=tids,
        offsets=offs,
    )


def build_feature_set(
    manifest: DatasetManifest,
    spec: FeatureExtractorSpec,
    modality: Modality | str,
    L: int,
    fmt: Format | str,
    trial_ids: Sequence[str] | None = None,
    cache_root: str | Path | None = None,
    pattern: WindowPattern = WindowPattern.GAP,
    workers: int = 1,
) -> FeatureSet:
    return build_stream_features(manifest, spec, L, fmt, trial_ids, cache_root, pattern, workers).select(modality)

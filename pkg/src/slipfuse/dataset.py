"""Grasp-trial recordings on disk, sequence windowing and difference images.

A dataset root looks like::

    <root>/manifest.json
    <root>/trials/<id>/external/frame_00000.png
    <root>/trials/<id>/gelsight/frame_00000.png

Trials are listed in the manifest and only read from disk on demand.
"""

from __future__ import annotations

import enum
import json
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

SCHEMA_VERSION = "1"
MANIFEST_NAME = "manifest.json"
FRAME_PATTERN = "frame_{:05d}.png"
STREAMS = ("external", "gelsight")

SEQUENCE_LENGTHS = (6, 7, 8, 9)
WINDOW_OFFSETS = (-2, -1, 1, 2, 3)
DIFF_OFFSET = 128

# frames needed after the lift frame for the latest window (s=+3, L=9) to fit
_TAIL_FRAMES = max(WINDOW_OFFSETS) + max(SEQUENCE_LENGTHS) + 1
_HEAD_FRAMES = -min(WINDOW_OFFSETS)


class Label(enum.IntEnum):
    STABLE = 0
    SLIP = 1

    @classmethod
    def parse(cls, value: "str | int | Label") -> "Label":
        if isinstance(value, Label):
            return value
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        try:
            return cls[str(value).upper()]
        except KeyError:
            raise ValueError(f"unknown label {value!r}") from None

    @property
    def text(self) -> str:
        return self.name.lower()


class Format(enum.Enum):
    RAW = "raw"
    DIFFERENCE = "diff"

    @classmethod
    def parse(cls, value: "str | Format") -> "Format":
        if isinstance(value, Format):
            return value
        v = str(value).lower()
        if v in ("difference", "diff"):
            return cls.DIFFERENCE
        if v == "raw":
            return cls.RAW
        raise ValueError(f"unknown input format {value!r}")


class WindowPattern(enum.Enum):
    GAP = "gap"
    CONSECUTIVE = "consecutive"


class SplitMode(enum.Enum):
    BY_TRIAL = "by_trial"
    BY_SAMPLE = "by_sample"


class DatasetError(Exception):
    pass


class MissingManifest(DatasetError):
    pass


class SchemaMismatch(DatasetError):
    pass


class TrialValidationError(DatasetError):
    def __init__(self, failures: dict[str, str]):
        self.failures = dict(failures)
        lines = [f"{tid}: {why}" for tid, why in self.failures.items()]
        super().__init__("invalid trials:\n  " + "\n  ".join(lines))


class InsufficientFrames(DatasetError):
    pass


class AlreadyDifference(DatasetError):
    pass


class EmptyDataset(DatasetError):
    pass


@dataclass
class GraspTrial:
    trial_id: str
    object_id: str
    label: Label
    external_frames: list[np.ndarray]
    gelsight_frames: list[np.ndarray]
    lift_frame_index: int
    frame_rate_hz: float = 20.0
    meta: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.external_frames)

    def problems(self) -> list[str]:
        """Return every invariant this trial violates (empty when valid)."""
        out = []
        n_ext, n_gel = len(self.external_frames), len(self.gelsight_frames)
        if n_ext != n_gel:
            out.append(f"stream lengths differ ({n_ext} external, {n_gel} gelsight)")
        if self.lift_frame_index < _HEAD_FRAMES:
            out.append(f"lift_frame_index {self.lift_frame_index} < {_HEAD_FRAMES}")
        need = self.lift_frame_index + _TAIL_FRAMES
        if min(n_ext, n_gel) < need:
            out.append(f"{min(n_ext, n_gel)} frames, need at least {need}")
        for name, frames in (("external", self.external_frames), ("gelsight", self.gelsight_frames)):
            shapes = {f.shape for f in frames}
            if len(shapes) > 1:
                out.append(f"{name} frames have mixed shapes {sorted(shapes)}")
            for f in frames[:1]:
                if f.dtype != np.uint8 or f.ndim != 3 or f.shape[2] != 3:
                    out.append(f"{name} frames must be HxWx3 uint8, got {f.dtype} {f.shape}")
        return out

    def validate(self) -> "GraspTrial":
        problems = self.problems()
        if problems:
            raise TrialValidationError({self.trial_id: "; ".join(problems)})
        return self


@dataclass(frozen=True)
class SequenceSample:
    trial_id: str
    window_start_offset: int
    frame_indices: tuple[int, ...]
    external_seq: tuple[np.ndarray, ...]
    gelsight_seq: tuple[np.ndarray, ...]
    format: Format
    label: Label

    @property
    def length(self) -> int:
        return len(self.frame_indices)


@dataclass(frozen=True)
class TrialEntry:
    trial_id: str
    path: str
    label: Label
    lift_frame_index: int
    object_id: str
    frame_rate_hz: float = 20.0

    def to_json(self) -> dict:
        return {
            "trial_id": self.trial_id,
            "object_id": self.object_id,
            "label": self.label.text,
            "lift_frame_index": self.lift_frame_index,
            "frame_rate_hz": self.frame_rate_hz,
            "path": self.path,
        }


@dataclass
class DatasetManifest:
    root_path: Path
    trials: list[TrialEntry]
    schema_version: str = SCHEMA_VERSION

    def __len__(self) -> int:
        return len(self.trials)

    @property
    def trial_ids(self) -> list[str]:
        return [t.trial_id for t in self.trials]

    def entry(self, trial_id: str) -> TrialEntry:
        for t in self.trials:
            if t.trial_id == trial_id:
                return t
        raise KeyError(trial_id)

    def subset(self, trial_ids: Iterable[str]) -> "DatasetManifest":
        keep = set(trial_ids)
        return replace(self, trials=[t for t in self.trials if t.trial_id in keep])

    def to_json(self) -> dict:
        return {"schema_version": self.schema_version, "trials": [t.to_json() for t in self.trials]}

    def write(self) -> Path:
        path = Path(self.root_path) / MANIFEST_NAME
        path.write_text(json.dumps(self.to_json(), indent=2) + "\n")
        return path


# ---------------------------------------------------------------------------
# disk I/O


def frame_paths(root: Path, entry: TrialEntry, stream: str) -> list[Path]:
    d = Path(root) / entry.path / stream
    paths = []
    i = 0
    while (p := d / FRAME_PATTERN.format(i)).exists():
        paths.append(p)
        i += 1
    return paths


def read_frame(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_frame(path: Path, image: np.ndarray, compress_level: int = 1) -> None:
    # PNG is lossless at every level; 1 is several times faster than the default 6
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8)).save(path, format="PNG", compress_level=compress_level)


def write_trial(root: Path, trial: GraspTrial, rel_path: str | None = None) -> TrialEntry:
    """Write ``trial``'s frames below ``root`` and return its manifest entry."""
    rel_path = rel_path or f"trials/{trial.trial_id}"
    for stream, frames in (("external", trial.external_frames), ("gelsight", trial.gelsight_frames)):
        d = Path(root) / rel_path / stream
        d.mkdir(parents=True, exist_ok=True)
        for i, frame in enumerate(frames):
            write_frame(d / FRAME_PATTERN.format(i), frame)
    return TrialEntry(
        trial_id=trial.trial_id,
        path=rel_path,
        label=trial.label,
        lift_frame_index=trial.lift_frame_index,
        object_id=trial.object_id,
        frame_rate_hz=trial.frame_rate_hz,
    )


def _parse_entry(raw: dict) -> TrialEntry:
    return TrialEntry(
        trial_id=str(raw["trial_id"]),
        path=str(raw.get("path", f"trials/{raw['trial_id']}")),
        label=Label.parse(raw["label"]),
        lift_frame_index=int(raw["lift_frame_index"]),
        object_id=str(raw.get("object_id", "")),
        frame_rate_hz=float(raw.get("frame_rate_hz", 20.0)),
    )


def _check_entry_on_disk(root: Path, entry: TrialEntry) -> list[str]:
    trial_dir = root / entry.path
    if not trial_dir.is_dir():
        return [f"trial directory {trial_dir} does not exist"]
    problems = []
    counts = {}
    for stream in STREAMS:
        paths = frame_paths(root, entry, stream)
        counts[stream] = len(paths)
        if not paths:
            problems.append(f"no {stream} frames")
            continue
        sizes = set()
        for p in paths:
            with Image.open(p) as im:
                sizes.add(im.size)
        if len(sizes) > 1:
            problems.append(f"{stream} frames have mixed sizes {sorted(sizes)}")
    if counts["external"] != counts["gelsight"]:
        problems.append(f"stream lengths differ ({counts['external']} external, {counts['gelsight']} gelsight)")
    if entry.lift_frame_index < _HEAD_FRAMES:
        problems.append(f"lift_frame_index {entry.lift_frame_index} < {_HEAD_FRAMES}")
    need = entry.lift_frame_index + _TAIL_FRAMES
    n = min(counts.values())
    if n and n < need:
        problems.append(f"{n} frames, need at least {need}")
    return problems


def load_dataset(root: str | Path, validate: bool = True) -> DatasetManifest:
    """Read and validate ``<root>/manifest.json``.

    Frames are not decoded beyond their headers; use :func:`load_trial` to
    materialise a trial. Raises :class:`TrialValidationError` naming every
    failing trial at once.
    """
    root = Path(root)
    path = root / MANIFEST_NAME
    if not path.is_file():
        raise MissingManifest(f"no {MANIFEST_NAME} in {root}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise SchemaMismatch(f"{path}: not valid JSON ({e})") from e
    version = str(raw.get("schema_version", ""))
    if version != SCHEMA_VERSION:
        raise SchemaMismatch(f"unknown schema_version {version!r} (expected {SCHEMA_VERSION!r})")

    entries = []
    failures: dict[str, str] = {}
    seen = set()
    for i, item in enumerate(raw.get("trials", [])):
        try:
            entry = _parse_entry(item)
        except (KeyError, ValueError, TypeError) as e:
            failures[str(item.get("trial_id", f"#{i}"))] = f"malformed manifest entry ({e})"
            continue
        if entry.trial_id in seen:
            failures[entry.trial_id] = "duplicate trial_id"
            continue
        seen.add(entry.trial_id)
        entries.append(entry)

    if validate:
        for entry in entries:
            problems = _check_entry_on_disk(root, entry)
            if problems:
                failures[entry.trial_id] = "; ".join(problems)
    if failures:
        raise TrialValidationError(failures)
    return DatasetManifest(root_path=root, trials=entries, schema_version=version)


def load_trial(manifest: DatasetManifest, trial_id: str) -> GraspTrial:
    entry = manifest.entry(trial_id)
    root = Path(manifest.root_path)
    streams = {s: [read_frame(p) for p in frame_paths(root, entry, s)] for s in STREAMS}
    trial = GraspTrial(
        trial_id=entry.trial_id,
        object_id=entry.object_id,
        label=entry.label,
        external_frames=streams["external"],
        gelsight_frames=streams["gelsight"],
        lift_frame_index=entry.lift_frame_index,
        frame_rate_hz=entry.frame_rate_hz,
    )
    return trial.validate()


# ---------------------------------------------------------------------------
# windowing


def window_indices(
    lift_frame_index: int, offset: int, length: int, pattern: WindowPattern = WindowPattern.GAP
) -> list[int]:
    """Absolute frame indices of one window.

    GAP: ``[f0+s, f0+s+2, f0+s+3, ..., f0+s+L]``, one skipped frame after the
    reference frame. CONSECUTIVE: ``[f0+s, ..., f0+s+L-1]``.
    """
    start = lift_frame_index + offset
    if pattern is WindowPattern.GAP:
        return [start] + list(range(start + 2, start + length + 1))
    return list(range(start, start + length))


def extract_windows(
    trial: GraspTrial, L: int, pattern: WindowPattern = WindowPattern.GAP
) -> list[SequenceSample]:
    if L not in SEQUENCE_LENGTHS:
        raise ValueError(f"sequence length must be one of {SEQUENCE_LENGTHS}, got {L}")
    n = min(len(trial.external_frames), len(trial.gelsight_frames))
    samples = []
    for s in WINDOW_OFFSETS:
        idx = window_indices(trial.lift_frame_index, s, L, pattern)
        if idx[0] < 0 or idx[-1] >= n:
            raise InsufficientFrames(
                f"trial {trial.trial_id}: window s={s:+d} needs frames {idx[0]}..{idx[-1]}, have 0..{n - 1}"
            )
        samples.append(
            SequenceSample(
                trial_id=trial.trial_id,
                window_start_offset=s,
                frame_indices=tuple(idx),
                external_seq=tuple(trial.external_frames[i] for i in idx),
                gelsight_seq=tuple(trial.gelsight_frames[i] for i in idx),
                format=Format.RAW,
                label=trial.label,
            )
        )
    return samples


def difference_image(image: np.ndarray, base: np.ndarray) -> np.ndarray:
    """``clip(128 + image - base, 0, 255)`` as uint8."""
    out = image.astype(np.int16) - base.astype(np.int16) + DIFF_OFFSET
    return np.clip(out, 0, 255).astype(np.uint8)


def to_difference(sample: SequenceSample) -> SequenceSample:
    if sample.format is Format.DIFFERENCE:
        raise AlreadyDifference(f"sample {sample.trial_id}/{sample.window_start_offset:+d} is already differenced")
    ext0, gel0 = sample.external_seq[0], sample.gelsight_seq[0]
    return replace(
        sample,
        external_seq=tuple(difference_image(im, ext0) for im in sample.external_seq),
        gelsight_seq=tuple(difference_image(im, gel0) for im in sample.gelsight_seq),
        format=Format.DIFFERENCE,
    )


def make_samples(
    trial: GraspTrial, L: int, fmt: Format = Format.RAW, pattern: WindowPattern = WindowPattern.GAP
) -> list[SequenceSample]:
    samples = extract_windows(trial, L, pattern)
    if Format.parse(fmt) is Format.DIFFERENCE:
        samples = [to_difference(s) for s in samples]
    return samples


# ---------------------------------------------------------------------------
# splits


def make_splits(
    manifest: DatasetManifest | Sequence[str],
    train_fraction: float = 0.85,
    seed: int = 0,
    mode: SplitMode = SplitMode.BY_TRIAL,
) -> tuple[list, list]:
    """Deterministic train/validation split.

    BY_TRIAL returns trial ids. BY_SAMPLE returns ``(trial_id, offset)``
    pairs over all five windows of every trial, so windows of one grasp
    may land on both sides.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    ids = manifest.trial_ids if isinstance(manifest, DatasetManifest) else list(manifest)
    if not ids:
        raise EmptyDataset("cannot split an empty dataset")
    mode = SplitMode(mode)
    if mode is SplitMode.BY_TRIAL:
        items: list = sorted(ids)
    else:
        items = [(tid, s) for tid in sorted(ids) for s in WINDOW_OFFSETS]
    random.Random(seed).shuffle(items)
    n_train = int(round(train_fraction * len(items)))
    n_train = min(max(n_train, 1), len(items) - 1) if len(items) > 1 else len(items)
    return items[:n_train], items[n_train:]

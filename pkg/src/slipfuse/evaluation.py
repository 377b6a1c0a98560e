"""Window-level accuracy, ablation grids and report tables."""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import DatasetManifest, Format, WindowPattern
from .features import Backbone, FeatureExtractorSpec, FeatureSet, Modality, StreamFeatures, build_stream_features
from .model import ModelConfig, ModelState, predict_proba
from .training import TrainConfig, train

log = logging.getLogger(__name__)

BASELINE_NAME = "THRESHOLD_BASELINE"

# Published accuracies (%), real-robot data, 10 unseen test objects.
# Rows: (input format, backbone) -> (tactile-vision, tactile, vision); L = 8.
TABLE_I_REFERENCE = {
    ("raw", "VGG16_FC7"): (82.11, 81.84, 55.13),
    ("raw", "VGG19_FC7"): (78.55, 75.39, 55.39),
    ("raw", "INCEPTION_V3_POOL3"): (88.03, 82.24, 53.68),
    ("diff", "VGG16_FC7"): (87.76, 74.87, 79.74),
    ("diff", "VGG19_FC7"): (85.53, 76.18, 77.37),
    ("diff", "INCEPTION_V3_POOL3"): (83.68, 78.82, 80.92),
}
# Rows: model -> {input length: accuracy}
TABLE_II_REFERENCE = {
    "raw image, Inception-V3": {6: 86.71, 7: 83.95, 8: 88.03, 9: 86.45},
    "image difference, VGG-16": {6: 84.08, 7: 85.79, 8: 87.76, 9: 86.58},
    "marker/texture threshold baseline": {6: 53.28, 7: 63.81, 8: 78.28, 9: 82.24},
}

MODALITY_COLUMNS = (Modality.TACTILE_VISION, Modality.TACTILE, Modality.VISION)
_MODALITY_TITLES = {Modality.TACTILE_VISION: "Tactile-vision", Modality.TACTILE: "Tactile", Modality.VISION: "Vision"}


class EvaluationError(Exception):
    pass


class LeakageError(EvaluationError):
    pass


class MissingCells(EvaluationError):
    def __init__(self, missing: Sequence[tuple]):
        self.missing = list(missing)
        super().__init__("report lacks cells: " + ", ".join("/".join(map(str, m)) for m in self.missing))


@dataclass
class EvalRow:
    format: str
    backbone: str
    modality: str
    L: int
    accuracy: float = float("nan")
    n: int = 0
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0
    # majority vote over each grasp's windows; not the headline metric
    grasp_accuracy: float = float("nan")
    n_grasps: int = 0
    error: str | None = None

    @property
    def key(self) -> tuple[str, str, str, int]:
        return (self.format, self.backbone, self.modality, self.L)

    @property
    def ok(self) -> bool:
        return self.error is None


def _same(a, b) -> bool:
    if isinstance(a, float) and isinstance(b, float) and np.isnan(a) and np.isnan(b):
        return True
    return a == b


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EvalReport) or len(self.rows) != len(other.rows):
            return False
        return all(_same(getattr(a, f.name), getattr(b, f.name))
                   for a, b in zip(self.rows, other.rows) for f in fields(EvalRow))

    def get(self, fmt, backbone, modality, L) -> EvalRow | None:
        key = (Format.parse(fmt).value, _backbone_name(backbone), Modality.parse(modality).value, int(L))
        for r in self.rows:
            if r.key == key:
                return r
        return None

    @property
    def errored(self) -> list[EvalRow]:
        return [r for r in self.rows if not r.ok]

    def to_json(self) -> str:
        return json.dumps({"rows": [asdict(r) for r in self.rows]}, indent=2, allow_nan=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls([EvalRow(**r) for r in json.loads(text)["rows"]])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        names = [f.name for f in fields(EvalRow)]
        w.writerow(names)
        for r in self.rows:
            w.writerow(["" if getattr(r, n) is None else repr(getattr(r, n)) if isinstance(getattr(r, n), float)
                        else getattr(r, n) for n in names])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EvalReport":
        types = {f.name: f.type for f in fields(EvalRow)}
        rows = []
        for rec in csv.DictReader(io.StringIO(text)):
            kw = {}
            for name, raw in rec.items():
                t = types[name]
                if name == "error":
                    kw[name] = raw or None
                elif t in ("int", int):
                    kw[name] = int(raw)
                elif t in ("float", float):
                    kw[name] = float(raw)
                else:
                    kw[name] = raw
            rows.append(EvalRow(**kw))
        return cls(rows)


def _backbone_name(b) -> str:
    if isinstance(b, Backbone):
        return b.value
    if str(b) == BASELINE_NAME:
        return BASELINE_NAME
    return Backbone.parse(b).value


# ---------------------------------------------------------------------------
# evaluation


def confusion(y_true: np.ndarray, y_pred: np.ndarray) -> dict[str, int]:
    """Counts with SLIP (1) as the positive class."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    return {
        "tp": int(np.sum((y_pred == 1) & (y_true == 1))),
        "fp": int(np.sum((y_pred == 1) & (y_true == 0))),
        "tn": int(np.sum((y_pred == 0) & (y_true == 0))),
        "fn": int(np.sum((y_pred == 0) & (y_true == 1))),
    }


def grasp_vote(trial_ids: Sequence[str], y_true: np.ndarray, y_pred: np.ndarray) -> tuple[float, int]:
    """Majority vote over each trial's windows (ties -> slip)."""
    votes: dict[str, list[int]] = {}
    truth: dict[str, int] = {}
    for tid, t, p in zip(trial_ids, y_true, y_pred):
        votes.setdefault(tid, []).append(int(p))
        truth[tid] = int(t)
    if not votes:
        return float("nan"), 0
    correct = sum(int(np.mean(v) >= 0.5) == truth[t] for t, v in votes.items())
    return correct / len(votes), len(votes)


def row_from_predictions(y_true, y_pred, trial_ids, fmt, backbone, modality, L) -> EvalRow:
    c = confusion(y_true, y_pred)
    n = len(y_true)
    ga, ng = grasp_vote(trial_ids, y_true, y_pred)
    return EvalRow(
        format=Format.parse(fmt).value,
        backbone=_backbone_name(backbone),
        modality=Modality.parse(modality).value,
        L=int(L),
        accuracy=(c["tp"] + c["tn"]) / n if n else float("nan"),
        n=n,
        grasp_accuracy=ga,
        n_grasps=ng,
        **c,
    )


def evaluate(
    state: ModelState,
    test_set: FeatureSet,
    spec: FeatureExtractorSpec | Backbone | str,
    modality: Modality | str,
    fmt: Format | str,
    train_trial_ids: Sequence[str] | None = None,
) -> EvalRow:
    """Window-level accuracy and confusion counts on ``test_set``.

    Raises :class:`LeakageError` if any test window comes from a training trial.
    """
    if train_trial_ids is not None:
        shared = sorted(set(train_trial_ids) & set(test_set.trial_ids))
        if shared:
            raise LeakageError(f"{len(shared)} trial(s) in both train and test: {shared[:5]}")
    backbone = spec.name if isinstance(spec, FeatureExtractorSpec) else spec
    y_pred = (predict_proba(state, test_set.X) >= 0.5).astype(int) if len(test_set) else np.zeros(0, int)
    return row_from_predictions(test_set.y, y_pred, test_set.trial_ids, fmt, backbone, modality,
                                state.config.seq_len)


# ---------------------------------------------------------------------------
# ablation


@dataclass(frozen=True)
class AblationGrid:
    formats: tuple[Format, ...] = (Format.RAW, Format.DIFFERENCE)
    backbones: tuple[Backbone, ...] = (Backbone.TINY_PATCH_STATS,)
    modalities: tuple[Modality, ...] = MODALITY_COLUMNS
    lengths: tuple[int, ...] = (8,)
    grid_size: int = 8
    pretrained: bool = True

    def cells(self) -> list[tuple[Format, Backbone, Modality, int]]:
        return list(itertools.product(self.formats, self.backbones, self.modalities, self.lengths))

    def spec(self, backbone: Backbone) -> FeatureExtractorSpec:
        return FeatureExtractorSpec(name=backbone, grid=self.grid_size, pretrained=self.pretrained)


def run_ablation(
    grid: AblationGrid,
    manifest: DatasetManifest,
    train_ids: Sequence[str],
    test_ids: Sequence[str],
    train_config: TrainConfig,
    cache_root: str | Path | None = None,
    out_dir: str | Path | None = None,
    pattern: WindowPattern = WindowPattern.GAP,
    workers: int = 1,
    model_overrides: dict | None = None,
) -> EvalReport:
    """Train and evaluate one head per grid cell on a shared split.

    Features are extracted once per (format, backbone, length) and reused
    across modalities. A failing cell becomes an errored row; the rest still
    run. Ctrl-C marks the running cell and everything after it as errored
    and returns what has been collected.
    """
    if set(train_ids) & set(test_ids):
        raise LeakageError("train and test trial ids overlap")
    model_overrides = model_overrides or {}
    cells = grid.cells()
    rows: dict[tuple, EvalRow] = {}
    banks: dict[tuple, tuple[StreamFeatures, StreamFeatures] | Exception] = {}

    def bank(fmt, backbone, L):
        key = (fmt, backbone, L)
        if key not in banks:
            try:
                spec = grid.spec(backbone)
                banks[key] = (
                    build_stream_features(manifest, spec, L, fmt, train_ids, cache_root, pattern, workers),
                    build_stream_features(manifest, spec, L, fmt, test_ids, cache_root, pattern, workers),
                )
            except Exception as e:  # recorded per cell
                log.warning("feature extraction failed for %s/%s/L=%d: %s", fmt.value, backbone.value, L, e)
                banks[key] = e
        return banks[key]

    def run_cell(cell):
        fmt, backbone, modality, L = cell
        label = f"{fmt.value}/{backbone.value}/{modality.value}/L={L}"
        b = bank(fmt, backbone, L)
        if isinstance(b, Exception):
            raise b
        tr, te = b[0].select(modality), b[1].select(modality)
        cfg = ModelConfig(input_dim=tr.X.shape[2], seq_len=L, **model_overrides)
        cell_dir = None
        if out_dir is not None:
            cell_dir = Path(out_dir) / "cells" / f"{fmt.value}_{backbone.value}_{modality.value}_L{L}"
        state, rep = train(cfg, train_config, tr, te, cell_dir)
        row = evaluate(state, te, backbone, modality, fmt, train_trial_ids=train_ids)
        log.info("cell %s: accuracy %.4f (best epoch %d)", label, row.accuracy, rep.best_epoch)
        return row

    def guarded(cell):
        fmt, backbone, modality, L = cell
        try:
            return run_cell(cell)
        except Exception as e:
            log.error("cell %s/%s/%s/L=%d failed: %s", fmt.value, backbone.value, modality.value, L, e)
            log.debug("%s", traceback.format_exc())
            return EvalRow(fmt.value, backbone.value, modality.value, L, error=f"{type(e).__name__}: {e}")

    interrupted = False
    if workers > 1:
        # features first (shared), then cells in parallel
        for fmt, backbone, _, L in cells:
            bank(fmt, backbone, L)
        with ThreadPoolExecutor(workers) as pool:
            for cell, row in zip(cells, pool.map(guarded, cells)):
                rows[cell] = row
    else:
        for cell in cells:
            if interrupted:
                fmt, backbone, modality, L = cell
                rows[cell] = EvalRow(fmt.value, backbone.value, modality.value, L, error="not run (interrupted)")
                continue
            try:
                rows[cell] = guarded(cell)
            except KeyboardInterrupt:
                fmt, backbone, modality, L = cell
                rows[cell] = EvalRow(fmt.value, backbone.value, modality.value, L, error="interrupted")
                interrupted = True
    return EvalReport([rows[c] for c in cells])


def baseline_rows(
    manifest: DatasetManifest,
    test_ids: Sequence[str],
    lengths: Sequence[int],
    config=None,
    pattern: WindowPattern = WindowPattern.GAP,
) -> list[EvalRow]:
    """Threshold-baseline rows (one verdict per grasp on its first window) for a length sweep."""
    from .baseline import BaselineConfig, run_baseline

    config = config or BaselineConfig()
    rows = []
    for L in lengths:
        res = run_baseline(manifest, config, L, test_ids, pattern)
        y_true = np.array([int(r.label) for r in res])
        # a failed trial is scored as the wrong answer
        y_pred = np.array([int(r.verdict) if r.verdict is not None else 1 - int(r.label) for r in res])
        rows.append(row_from_predictions(y_true, y_pred, [r.trial_id for r in res], Format.RAW, BASELINE_NAME,
                                         Modality.TACTILE, L))
    return rows


# ---------------------------------------------------------------------------
# formatting


def _pct(row: EvalRow | None) -> str:
    if row is None:
        return "-"
    if not row.ok:
        return "error"
    return f"{100 * row.accuracy:.2f}%"


def _table(header: Sequence[str], body: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(x)) for x in col) for col in zip(header, *body)]
    line = lambda cells: " | ".join(str(c).ljust(w) for c, w in zip(cells, widths))
    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([line(header), sep] + [line(r) for r in body])


def _table_i(report: EvalReport) -> str:
    model_rows = [r for r in report.rows if r.backbone != BASELINE_NAME]
    formats = [f for f in ("raw", "diff") if any(r.format == f for r in model_rows)]
    backbones = list(dict.fromkeys(r.backbone for r in model_rows))
    lengths = sorted({r.L for r in model_rows})
    L = 8 if 8 in lengths else (lengths[0] if lengths else 8)
    missing = []
    body = []
    for fmt in formats:
        for bb in backbones:
            cells = []
            for m in MODALITY_COLUMNS:
                row = report.get(fmt, bb, m, L)
                if row is None:
                    missing.append((fmt, bb, m.value))
                cells.append(_pct(row))
            body.append([{"raw": "raw image", "diff": "image difference"}[fmt], bb] + cells)
    if missing or not body:
        raise MissingCells(missing or [("any", "any", "any")])
    text = [f"Accuracy by input format, feature extractor and data source (L = {L})", ""]
    text.append(_table(["input", "feature"] + [_MODALITY_TITLES[m] for m in MODALITY_COLUMNS], body))
    ref_body = [[{"raw": "raw image", "diff": "image difference"}[f], bb] + [f"{v:.2f}%" for v in vals]
                for (f, bb), vals in TABLE_I_REFERENCE.items()]
    text += ["", "Reference (published; real-robot grasps, pretrained backbones, L = 8):", ""]
    text.append(_table(["input", "feature"] + [_MODALITY_TITLES[m] for m in MODALITY_COLUMNS], ref_body))
    return "\n".join(text) + "\n"


def _table_ii(report: EvalReport) -> str:
    lengths = sorted({r.L for r in report.rows})
    models = list(dict.fromkeys((r.format, r.backbone, r.modality) for r in report.rows))
    missing, body = [], []
    for fmt, bb, mod in models:
        cells = []
        for L in lengths:
            row = report.get(fmt, bb, mod, L)
            if row is None:
                missing.append((fmt, bb, mod, L))
            cells.append(_pct(row))
        name = "threshold baseline (tactile)" if bb == BASELINE_NAME else f"{fmt}, {bb}, {mod}"
        body.append([name] + cells)
    if missing or not body:
        raise MissingCells(missing or [("any", "any", "any", "any")])
    text = ["Accuracy by input sequence length", ""]
    text.append(_table(["model parameter"] + [str(L) for L in lengths], body))
    ref_lengths = (6, 7, 8, 9)
    ref_body = [[name] + [f"{vals[L]:.2f}%" for L in ref_lengths] for name, vals in TABLE_II_REFERENCE.items()]
    text += ["", "Reference (published; real-robot grasps, tactile + vision):", ""]
    text.append(_table(["model parameter"] + [str(L) for L in ref_lengths], ref_body))
    return "\n".join(text) + "\n"


def format_report(report: EvalReport, style: str = "TABLE_I") -> str:
    style = style.upper()
    if style == "TABLE_I":
        return _table_i(report)
    if style == "TABLE_II":
        return _table_ii(report)
    if style == "CSV":
        return report.to_csv()
    if style == "JSON":
        return report.to_json()
    raise ValueError(f"unknown report style {style!r}")


def write_report(report: EvalReport, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"json": out / "report.json", "csv": out / "report.csv"}
    paths["json"].write_text(report.to_json() + "\n")
    paths["csv"].write_text(report.to_csv())
    return paths

"""``slipfuse`` command line: synth, ingest, train, eval, ablate, baseline, predict.

Every subcommand resolves its settings as dataclass defaults, then the
``--config`` JSON file, then flags given on the command line, and writes the
result to ``<out>/resolved_config.json`` before doing any work. Feeding that
file back through ``--config`` reproduces the run.

Exit codes: 0 success, 1 domain error (invalid data, divergence, every
ablation cell failed), 2 usage or I/O error, 3 ablation finished with some
cells errored.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import re
import shutil
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .baseline import BaselineConfig, BaselineError, baseline_accuracy, run_baseline, write_results_csv
from .dataset import (
    FRAME_PATTERN,
    SCHEMA_VERSION,
    DatasetError,
    DatasetManifest,
    Format,
    Label,
    MissingManifest,
    SplitMode,
    TrialEntry,
    WindowPattern,
    load_dataset,
    make_splits,
)
from .evaluation import (
    AblationGrid,
    EvalReport,
    EvaluationError,
    MissingCells,
    baseline_rows,
    evaluate,
    format_report,
    run_ablation,
    write_report,
)
from .features import Backbone, BackendUnavailable, FeatureError, FeatureExtractorSpec, Modality, build_stream_features
from .model import ModelConfig, ModelError, decide, load_checkpoint, predict_proba
from .synthgrasp import InvalidParams, Scenario, SynthParams, generate_dataset
from .training import TrainConfig, TrainingError, train

log = logging.getLogger("slipfuse")

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE, EXIT_PARTIAL = 0, 1, 2, 3
RUN_FILE = "run.json"
CLI_BATCH_SIZE = 32


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    command: str = ""
    seed: int = 0
    workers: int = 1
    out: str | None = None
    dataset: str | None = None
    cache: str | None = None
    # synth
    scenarios: str = "all:100"
    synth: dict = field(default_factory=dict)
    # ingest
    source: str | None = None
    labels: str | None = None
    # features and windows
    backbone: str = "tiny"
    grid: int = 8
    pretrained: bool = True
    format: str = "raw"
    modality: str = "tactile_vision"
    length: int = 8
    pattern: str = "gap"
    # split, model, optimiser
    train_fraction: float = 0.85
    split_mode: str = "by_trial"
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    # ablation
    axes: list = field(default_factory=lambda: ["format", "modality"])
    formats: list = field(default_factory=lambda: ["raw", "diff"])
    backbones: list = field(default_factory=lambda: ["tiny"])
    modalities: list = field(default_factory=lambda: ["tactile_vision", "tactile", "vision"])
    lengths: list = field(default_factory=lambda: [6, 7, 8, 9])
    style: str | None = None
    with_baseline: bool = False
    # baseline, eval, predict
    baseline: dict = field(default_factory=dict)
    checkpoint: str | None = None
    trial: str | None = None
    json: bool = False

    def synth_params(self) -> SynthParams:
        d = dict(self.synth)
        d.setdefault("rng_seed", self.seed)
        return SynthParams.from_json(d)

    def train_config(self) -> TrainConfig:
        d = dict(self.train)
        d.setdefault("seed", self.seed)
        # the library keeps the large-batch default; desk-scale runs use 32
        d.setdefault("batch_size", CLI_BATCH_SIZE)
        return TrainConfig(**d)

    def feature_spec(self, backbone: str | None = None) -> FeatureExtractorSpec:
        return FeatureExtractorSpec(name=backbone or self.backbone, grid=self.grid, pretrained=self.pretrained)

    def to_json(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# config resolution


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _int_list(text: str) -> list[int]:
    return [int(t) for t in _csv_list(text)]


def parse_scenarios(text: str) -> list[tuple[str, int]]:
    """``stable:50,translational_slip:50`` or ``all:25`` into a generation plan."""
    plan = []
    for item in _csv_list(text):
        name, sep, count = item.partition(":")
        if not sep:
            raise UsageError(f"scenario entry {item!r} needs the form name:count")
        try:
            n = int(count)
        except ValueError:
            raise UsageError(f"bad count in {item!r}") from None
        name = name.strip().lower()
        if name != "all":
            try:
                Scenario.parse(name)
            except (KeyError, ValueError):
                raise UsageError(f"unknown scenario {name!r}") from None
        plan.append((name, n))
    if not plan:
        raise UsageError("empty scenario plan")
    return plan


# flag dest -> (RunConfig field or "section.key", converter)
_OVERRIDES = {
    "seed": ("seed", int),
    "workers": ("workers", int),
    "out": ("out", str),
    "dataset": ("dataset", str),
    "cache": ("cache", str),
    "scenarios": ("scenarios", str),
    "n_frames": ("synth.n_frames", int),
    "noise_std": ("synth.noise_std", float),
    "source": ("source", str),
    "labels": ("labels", str),
    "backbone": ("backbone", str),
    "grid": ("grid", int),
    "random_weights": ("pretrained", lambda v: not v),
    "format": ("format", str),
    "modality": ("modality", str),
    "length": ("length", int),
    "pattern": ("pattern", str),
    "train_fraction": ("train_fraction", float),
    "split_mode": ("split_mode", str),
    "epochs": ("train.max_epochs", int),
    "batch_size": ("train.batch_size", int),
    "lr": ("train.learning_rate", float),
    "patience": ("train.early_stop_patience", int),
    "axes": ("axes", _csv_list),
    "formats": ("formats", _csv_list),
    "backbones": ("backbones", _csv_list),
    "modalities": ("modalities", _csv_list),
    "lengths": ("lengths", _int_list),
    "style": ("style", str),
    "with_baseline": ("with_baseline", bool),
    "threshold": ("baseline.slip_threshold", float),
    "checkpoint": ("checkpoint", str),
    "trial": ("trial", str),
    "json": ("json", bool),
}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig(command=args.command)
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {path} is not valid JSON: {e}") from None
        known = {f.name for f in fields(RunConfig)}
        unknown = set(raw) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        raw.pop("command", None)
        cfg = replace(cfg, **raw)
    for dest, (target, conv) in _OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is None or value is False and conv is bool:
            continue
        value = conv(value)
        if "." in target:
            section, key = target.split(".")
            getattr(cfg, section)[key] = value
        else:
            setattr(cfg, target, value)
    return cfg


def _need(cfg: RunConfig, *names: str) -> None:
    missing = [n for n in names if getattr(cfg, n) in (None, "")]
    if missing:
        raise UsageError(f"{cfg.command} needs " + ", ".join("--" + n for n in missing))


def _start(cfg: RunConfig) -> Path | None:
    """Create the output directory and echo the resolved config into it."""
    if cfg.out is None:
        return None
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(json.dumps(cfg.to_json(), indent=2, sort_keys=True) + "\n")
    return out


def _open_dataset(cfg: RunConfig) -> DatasetManifest:
    _need(cfg, "dataset")
    return load_dataset(cfg.dataset)


def _split(cfg: RunConfig, manifest: DatasetManifest) -> tuple[list[str], list[str]]:
    mode = SplitMode(cfg.split_mode)
    if mode is not SplitMode.BY_TRIAL:
        raise UsageError("the CLI only trains on by_trial splits")
    return make_splits(manifest, cfg.train_fraction, cfg.seed, mode)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig) -> int:
    _need(cfg, "out")
    plan = parse_scenarios(cfg.scenarios)
    out = _start(cfg)
    manifest = generate_dataset(plan, cfg.synth_params(), out, workers=cfg.workers)
    print(f"wrote {len(manifest)} trials to {out}")
    return EXIT_OK


_NUM = re.compile(r"(\d+)")


def _natural_key(p: Path):
    return [int(t) if t.isdigit() else t for t in _NUM.split(p.name)]


def _read_labels(path: Path) -> dict[str, dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    need = {"trial_id", "label", "lift_frame_index"}
    if not rows or not need <= set(rows[0]):
        raise UsageError(f"{path} needs columns {sorted(need)}")
    return {r["trial_id"]: r for r in rows}


def cmd_ingest(cfg: RunConfig) -> int:
    """Copy ``<source>/<trial>/{external,gelsight}/*.png`` into the dataset layout.

    Frames are ordered by natural sort of their file names and renumbered
    from zero. Labels and lift frames come from a CSV with columns
    ``trial_id,label,lift_frame_index`` and optionally ``object_id`` and
    ``frame_rate_hz``. The written dataset is validated before returning.
    """
    _need(cfg, "source", "labels", "out")
    src = Path(cfg.source)
    if not src.is_dir():
        raise FileNotFoundError(f"source directory not found: {src}")
    labels = _read_labels(Path(cfg.labels))
    out = _start(cfg)
    entries = []
    for tid in sorted(labels):
        row = labels[tid]
        rel = f"trials/{tid}"
        for stream in ("external", "gelsight"):
            files = sorted((src / tid / stream).glob("*.png"), key=_natural_key)
            if not files:
                raise DatasetError(f"{tid}: no PNG frames under {src / tid / stream}")
            dst = out / rel / stream
            dst.mkdir(parents=True, exist_ok=True)
            for i, f in enumerate(files):
                shutil.copyfile(f, dst / FRAME_PATTERN.format(i))
        entries.append(TrialEntry(
            trial_id=tid,
            path=rel,
            label=Label.parse(row["label"]),
            lift_frame_index=int(row["lift_frame_index"]),
            object_id=row.get("object_id") or tid,
            frame_rate_hz=float(row.get("frame_rate_hz") or 20.0),
        ))
    DatasetManifest(out, entries, SCHEMA_VERSION).write()
    manifest = load_dataset(out)
    print(f"ingested {len(manifest)} trials into {out}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    _need(cfg, "out")
    manifest = _open_dataset(cfg)
    out = _start(cfg)
    train_ids, val_ids = _split(cfg, manifest)
    spec = cfg.feature_spec()
    fmt, modality = Format.parse(cfg.format), Modality.parse(cfg.modality)
    pattern = WindowPattern(cfg.pattern)
    cache = Path(cfg.cache) if cfg.cache else out / "feature_cache"
    feats = build_stream_features(manifest, spec, cfg.length, fmt, manifest.trial_ids, cache, pattern, cfg.workers)
    tr = feats.select(modality).select_trials(train_ids)
    va = feats.select(modality).select_trials(val_ids)
    model_cfg = ModelConfig(input_dim=tr.X.shape[2], seq_len=cfg.length, **cfg.model)
    state, report = train(model_cfg, cfg.train_config(), tr, va, out)
    row = evaluate(state, va, spec, modality, fmt, train_trial_ids=train_ids)
    run = {
        "dataset": str(Path(cfg.dataset).resolve()),
        "backbone": spec.name.value,
        "grid": spec.grid,
        "pretrained": spec.pretrained,
        "format": fmt.value,
        "modality": modality.value,
        "length": cfg.length,
        "pattern": pattern.value,
        "train_ids": sorted(train_ids),
        "val_ids": sorted(val_ids),
    }
    (out / RUN_FILE).write_text(json.dumps(run, indent=2) + "\n")
    summary = {**report.summary(), "validation": asdict(row)}
    (out / "train_report.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"best epoch {report.best_epoch}: validation accuracy {row.accuracy:.4f} on {row.n} windows")
    print(f"checkpoint: {report.best_checkpoint}")
    return EXIT_OK


def _run_info(cfg: RunConfig) -> dict:
    """Training-run metadata stored next to the checkpoint, if any."""
    path = Path(cfg.checkpoint).parent / RUN_FILE
    return json.loads(path.read_text()) if path.is_file() else {}


def _apply_run_info(cfg: RunConfig, run: dict, args: argparse.Namespace) -> RunConfig:
    # the checkpoint's own feature settings win unless given explicitly
    for key, flag in (("backbone", "backbone"), ("grid", "grid"), ("format", "format"),
                      ("modality", "modality"), ("length", "length"), ("pattern", "pattern")):
        if key in run and getattr(args, flag, None) is None:
            setattr(cfg, key, run[key])
    if "pretrained" in run and not getattr(args, "random_weights", False):
        cfg.pretrained = run["pretrained"]
    return cfg


def _load_state(cfg: RunConfig):
    _need(cfg, "checkpoint")
    return load_checkpoint(cfg.checkpoint)


def cmd_eval(cfg: RunConfig, args: argparse.Namespace) -> int:
    state = _load_state(cfg)
    run = _run_info(cfg)
    cfg = _apply_run_info(cfg, run, args)
    manifest = _open_dataset(cfg)
    out = _start(cfg)
    same = run.get("dataset") == str(Path(cfg.dataset).resolve())
    test_ids = run["val_ids"] if same else manifest.trial_ids
    train_ids = run.get("train_ids") if same else None
    spec, fmt, modality = cfg.feature_spec(), Format.parse(cfg.format), Modality.parse(cfg.modality)
    if state.config.seq_len != cfg.length:
        raise UsageError(f"checkpoint expects L={state.config.seq_len}, got --len {cfg.length}")
    feats = build_stream_features(manifest, spec, cfg.length, fmt, test_ids, cfg.cache, WindowPattern(cfg.pattern),
                                  cfg.workers)
    row = evaluate(state, feats.select(modality), spec, modality, fmt, train_trial_ids=train_ids)
    report = EvalReport([row])
    if out is not None:
        write_report(report, out)
    if cfg.json:
        print(report.to_json())
    else:
        print(f"accuracy {row.accuracy:.4f} on {row.n} windows "
              f"(TP {row.tp} FP {row.fp} TN {row.tn} FN {row.fn}); "
              f"grasp vote {row.grasp_accuracy:.4f} on {row.n_grasps} grasps")
    return EXIT_OK


def _pick_style(cfg: RunConfig) -> str:
    if cfg.style:
        return cfg.style.upper()
    return "TABLE_II" if "length" in cfg.axes else "TABLE_I"


def cmd_ablate(cfg: RunConfig) -> int:
    _need(cfg, "out")
    manifest = _open_dataset(cfg)
    out = _start(cfg)
    axes = set(cfg.axes)
    unknown = axes - {"format", "backbone", "modality", "length"}
    if unknown:
        raise UsageError(f"unknown ablation axes: {sorted(unknown)}")
    grid = AblationGrid(
        formats=tuple(Format.parse(f) for f in (cfg.formats if "format" in axes else [cfg.format])),
        backbones=tuple(Backbone.parse(b) for b in (cfg.backbones if "backbone" in axes else [cfg.backbone])),
        modalities=tuple(Modality.parse(m) for m in (cfg.modalities if "modality" in axes else [cfg.modality])),
        lengths=tuple(cfg.lengths if "length" in axes else [cfg.length]),
        grid_size=cfg.grid,
        pretrained=cfg.pretrained,
    )
    train_ids, test_ids = _split(cfg, manifest)
    cache = Path(cfg.cache) if cfg.cache else out / "feature_cache"
    report = run_ablation(grid, manifest, train_ids, test_ids, cfg.train_config(), cache, out,
                          WindowPattern(cfg.pattern), cfg.workers, cfg.model)
    if cfg.with_baseline:
        report.rows.extend(baseline_rows(manifest, test_ids, grid.lengths, BaselineConfig(**cfg.baseline),
                                         WindowPattern(cfg.pattern)))
    write_report(report, out)
    style = _pick_style(cfg)
    try:
        text = format_report(report, style)
    except MissingCells as e:
        log.warning("%s layout not possible (%s); printing CSV", style, e)
        text = format_report(report, "CSV")
    (out / "report.txt").write_text(text)
    print(text, end="")
    bad = report.errored
    if bad:
        for r in bad:
            print(f"errored cell {r.format}/{r.backbone}/{r.modality}/L={r.L}: {r.error}", file=sys.stderr)
        return EXIT_DOMAIN if len(bad) == len(report.rows) else EXIT_PARTIAL
    return EXIT_OK


def cmd_baseline(cfg: RunConfig) -> int:
    _need(cfg, "out")
    manifest = _open_dataset(cfg)
    out = _start(cfg)
    bcfg = BaselineConfig(**cfg.baseline).validate()
    results = run_baseline(manifest, bcfg, cfg.length, None, WindowPattern(cfg.pattern))
    path = write_results_csv(results, out / "baseline.csv")
    acc = baseline_accuracy(results)
    failed = sum(r.verdict is None for r in results)
    print(f"baseline accuracy {acc:.4f} on {len(results)} grasps ({failed} failed); results in {path}")
    return EXIT_OK


def cmd_predict(cfg: RunConfig, args: argparse.Namespace) -> int:
    state = _load_state(cfg)
    cfg = _apply_run_info(cfg, _run_info(cfg), args)
    _need(cfg, "trial")
    manifest = _open_dataset(cfg)
    if cfg.trial not in manifest.trial_ids:
        raise UsageError(f"trial {cfg.trial!r} not in {cfg.dataset}")
    _start(cfg)
    spec, fmt, modality = cfg.feature_spec(), Format.parse(cfg.format), Modality.parse(cfg.modality)
    feats = build_stream_features(manifest, spec, state.config.seq_len, fmt, [cfg.trial], cfg.cache,
                                  WindowPattern(cfg.pattern)).select(modality)
    probs = predict_proba(state, feats.X)
    preds = (probs >= 0.5).astype(int)
    slip_votes = int(preds.sum())
    verdict = Label.SLIP if slip_votes * 2 > len(preds) else Label.STABLE
    windows = [{"offset": int(s), "p_slip": float(p), "label": decide(float(p)).text}
               for s, p in zip(feats.offsets, probs)]
    if cfg.json:
        print(json.dumps({"trial_id": cfg.trial, "windows": windows, "verdict": verdict.text,
                          "slip_votes": slip_votes}, indent=2))
    else:
        for w in windows:
            print(f"window {w['offset']:+d}: P(slip) = {w['p_slip']:.4f}  {w['label']}")
        print(f"verdict: {verdict.text} ({slip_votes}/{len(windows)} windows slip)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; flags given here override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="count", default=0)

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--dataset", help="dataset root containing manifest.json")
    data.add_argument("--len", dest="length", type=int, help="window length (6-9)")
    data.add_argument("--pattern", choices=[p.value for p in WindowPattern])

    feat = argparse.ArgumentParser(add_help=False)
    feat.add_argument("--backbone", help="tiny, vgg16, vgg19 or inception")
    feat.add_argument("--grid", type=int, help="patch grid of the tiny extractor")
    feat.add_argument("--random-weights", action="store_true", default=None,
                      help="build pretrained backbones without downloading weights")
    feat.add_argument("--format", help="raw or diff")
    feat.add_argument("--modality", help="tactile, vision or tactile-vision")
    feat.add_argument("--cache", help="feature cache directory")

    fit = argparse.ArgumentParser(add_help=False)
    fit.add_argument("--epochs", type=int)
    fit.add_argument("--batch-size", type=int)
    fit.add_argument("--lr", type=float)
    fit.add_argument("--patience", type=int)
    fit.add_argument("--train-fraction", type=float)
    fit.add_argument("--split-mode", choices=[m.value for m in SplitMode])

    p = argparse.ArgumentParser(prog="slipfuse", description="Visuotactile slip detection toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="render a synthetic dataset")
    s.add_argument("--scenarios", help="e.g. stable:50,translational_slip:50 or all:25")
    s.add_argument("--n-frames", type=int)
    s.add_argument("--noise-std", type=float)

    s = sub.add_parser("ingest", parents=[common], help="convert loose image folders into a dataset")
    s.add_argument("--source", help="directory of <trial>/{external,gelsight}/*.png")
    s.add_argument("--labels", help="CSV with trial_id,label,lift_frame_index[,object_id,frame_rate_hz]")

    sub.add_parser("train", parents=[common, data, feat, fit], help="train one classifier head")

    s = sub.add_parser("eval", parents=[common, data, feat], help="evaluate a checkpoint")
    s.add_argument("--checkpoint")
    s.add_argument("--json", action="store_true", default=None)

    s = sub.add_parser("ablate", parents=[common, data, feat, fit], help="train and test a grid of cells")
    s.add_argument("--axes", help="comma list from format,backbone,modality,length")
    s.add_argument("--formats")
    s.add_argument("--backbones")
    s.add_argument("--modalities")
    s.add_argument("--lengths")
    s.add_argument("--style", choices=["TABLE_I", "TABLE_II", "CSV", "JSON"])
    s.add_argument("--with-baseline", action="store_true", default=None,
                   help="add threshold-baseline rows (length sweeps)")
    s.add_argument("--threshold", type=float, help="baseline slip threshold in pixels")

    s = sub.add_parser("baseline", parents=[common, data], help="run the marker/texture threshold detector")
    s.add_argument("--threshold", type=float, help="slip threshold in pixels")

    s = sub.add_parser("predict", parents=[common, data, feat], help="classify one trial")
    s.add_argument("--checkpoint")
    s.add_argument("--trial", help="trial id inside --dataset")
    s.add_argument("--json", action="store_true", default=None)
    return p


_DOMAIN_ERRORS = (DatasetError, InvalidParams, ModelError, TrainingError, EvaluationError, BaselineError,
                  FeatureError)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = resolve_config(args)
        if args.command == "eval":
            return cmd_eval(cfg, args)
        if args.command == "predict":
            return cmd_predict(cfg, args)
        return {
            "synth": cmd_synth,
            "ingest": cmd_ingest,
            "train": cmd_train,
            "ablate": cmd_ablate,
            "baseline": cmd_baseline,
        }[args.command](cfg)
    except (UsageError, OSError, BackendUnavailable, MissingManifest) as e:
        print(f"slipfuse {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (_DOMAIN_ERRORS + (ValueError, KeyError)) as e:
        print(f"slipfuse {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slipfuse.dataset import Format, make_splits
from slipfuse.evaluation import (
    BASELINE_NAME,
    AblationGrid,
    EvalReport,
    EvalRow,
    LeakageError,
    MissingCells,
    confusion,
    evaluate,
    format_report,
    grasp_vote,
    run_ablation,
    write_report,
)
from slipfuse.features import Backbone, FeatureSet, Modality
from slipfuse.model import ModelConfig, init_model
from slipfuse.training import TrainConfig


def constant_slip_model(dim=5, L=4):
    s = init_model(ModelConfig(input_dim=dim, seq_len=L), 0)
    s.params["cls.W"][:] = 0
    s.params["cls.b"][:] = [-10.0, 10.0]
    return s


def balanced_set(n=20, dim=5, L=4):
    X = np.random.default_rng(0).normal(size=(n, L, dim)).astype(np.float32)
    y = np.arange(n) % 2
    return FeatureSet(X, y, [f"t{i // 4}" for i in range(n)], [0] * n)


def test_constant_predictor_scores_half():
    row = evaluate(constant_slip_model(), balanced_set(), "tiny", "tactile", "raw")
    assert row.accuracy == 0.5 and row.fn == 0 and row.tn == 0
    assert row.tp == row.fp == 10 and row.n == 20
    assert (row.format, row.backbone, row.modality, row.L) == ("raw", "TINY_PATCH_STATS", "tactile", 4)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=60))
def test_confusion_invariants(pairs):
    y, p = np.array(pairs).T
    c = confusion(y, p)
    assert sum(c.values()) == len(y)
    assert c["tp"] + c["fn"] == y.sum()
    assert c["tp"] + c["fp"] == p.sum()
    assert (c["tp"] + c["tn"]) / len(y) == pytest.approx(np.mean(y == p))


def test_grasp_vote_majority():
    acc, n = grasp_vote(["a", "a", "a", "b", "b"], np.array([1, 1, 1, 0, 0]), np.array([1, 0, 1, 1, 1]))
    assert (acc, n) == (0.5, 2)
    # ties go to slip
    assert grasp_vote(["c", "c"], np.array([1, 1]), np.array([0, 1])) == (1.0, 1)


def test_leakage_detected():
    test = balanced_set()
    with pytest.raises(LeakageError, match="t0"):
        evaluate(constant_slip_model(), test, "tiny", "tactile", "raw", train_trial_ids=["t0", "zz"])


def sample_report():
    rows = []
    for fmt in ("raw", "diff"):
        for i, mod in enumerate(("tactile_vision", "tactile", "vision")):
            rows.append(EvalRow(fmt, "TINY_PATCH_STATS", mod, 8, accuracy=0.9 - 0.1 * i, n=40,
                                tp=10, fp=2, tn=20, fn=8, grasp_accuracy=1.0, n_grasps=8))
    rows[-1] = EvalRow("diff", "TINY_PATCH_STATS", "vision", 8, error="RuntimeError: boom")
    return EvalReport(rows)


def test_json_and_csv_roundtrip():
    rep = sample_report()
    assert EvalReport.from_json(rep.to_json()) == rep
    assert EvalReport.from_csv(rep.to_csv()) == rep
    assert [r.key for r in rep.errored] == [("diff", "TINY_PATCH_STATS", "vision", 8)]


def test_table_i_layout():
    text = format_report(sample_report(), "TABLE_I")
    head, ref = text.split("Reference")
    lines = [ln for ln in head.splitlines() if " | " in ln]
    assert [c.strip() for c in lines[0].split(" | ")[2:]] == ["Tactile-vision", "Tactile", "Vision"]
    body = lines[1:]
    assert len(body) == 2 and all(len(ln.split(" | ")) == 5 for ln in body)
    assert "90.00%" in body[0] and body[1].rstrip().endswith("error")
    assert "L = 8" in head
    # six published rows, three data-source columns each
    ref_rows = [ln for ln in ref.splitlines() if " | " in ln][1:]
    assert len(ref_rows) == 6 and all(len(ln.split(" | ")) == 5 for ln in ref_rows)


def test_table_i_names_missing_cells():
    rep = sample_report()
    rep.rows = [r for r in rep.rows if not (r.format == "raw" and r.modality == "vision")]
    with pytest.raises(MissingCells) as e:
        format_report(rep, "TABLE_I")
    assert e.value.missing == [("raw", "TINY_PATCH_STATS", "vision")]
    assert "raw/TINY_PATCH_STATS/vision" in str(e.value)


def test_table_ii_layout():
    rows = [EvalRow("raw", "TINY_PATCH_STATS", "tactile_vision", L, accuracy=0.8 + 0.01 * L, n=10)
            for L in (6, 7, 8, 9)]
    rows += [EvalRow("raw", BASELINE_NAME, "tactile", L, accuracy=0.5, n=10) for L in (6, 7, 8, 9)]
    text = format_report(EvalReport(rows), "TABLE_II")
    own = text.split("Reference")[0]
    lines = [ln for ln in own.splitlines() if " | " in ln]
    assert [c.strip() for c in lines[0].split(" | ")] == ["model parameter", "6", "7", "8", "9"]
    assert len(lines) == 3
    assert "86.00%" in lines[1] and "threshold baseline" in lines[2]
    with pytest.raises(MissingCells) as e:
        format_report(EvalReport(rows[:-1]), "TABLE_II")
    assert e.value.missing == [("raw", BASELINE_NAME, "tactile", 9)]


def test_unknown_style():
    with pytest.raises(ValueError):
        format_report(sample_report(), "TABLE_III")


def test_write_report(tmp_path):
    paths = write_report(sample_report(), tmp_path)
    assert EvalReport.from_json(paths["json"].read_text()) == sample_report()


def test_small_ablation_grid(small_dataset, tmp_path):
    train_ids, test_ids = make_splits(small_dataset, 0.75, seed=0)
    grid = AblationGrid(backbones=(Backbone.TINY_PATCH_STATS,), grid_size=4)
    rep = run_ablation(grid, small_dataset, train_ids, test_ids, TrainConfig(max_epochs=2, batch_size=16),
                       cache_root=tmp_path / "cache", out_dir=tmp_path / "out")
    assert len(rep.rows) == 6 and not rep.errored
    assert {r.n for r in rep.rows} == {5 * len(test_ids)}
    assert rep.get(Format.DIFFERENCE, "tiny", Modality.VISION, 8) is not None
    assert len(list((tmp_path / "out" / "cells").iterdir())) == 6
    format_report(rep, "TABLE_I")


def test_ablation_rejects_overlap(small_dataset):
    ids = small_dataset.trial_ids
    with pytest.raises(LeakageError):
        run_ablation(AblationGrid(), small_dataset, ids[:10], ids[5:], TrainConfig(max_epochs=1))


def test_failing_cell_is_recorded(small_dataset):
    train_ids, test_ids = make_splits(small_dataset, 0.75, seed=0)
    grid = AblationGrid(formats=(Format.RAW,), modalities=(Modality.TACTILE,), lengths=(8, 30), grid_size=2)
    rep = run_ablation(grid, small_dataset, train_ids, test_ids, TrainConfig(max_epochs=1))
    assert [r.ok for r in rep.rows] == [True, False]
    assert rep.rows[1].error.startswith("ValueError") and "30" in rep.rows[1].error

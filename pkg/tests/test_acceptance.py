"""Acceptance criteria 1-9, each at its stated tolerance and time budget.

Criteria 5, 6 and 8 share one 600-trial synthetic dataset (100 grasps per
scenario, 128 x 128 frames) written to a temporary directory, so the
module takes several minutes.
"""

import time
import warnings

import numpy as np
import pytest

from conftest import grad_check, random_trial, record_criterion
from slipfuse.baseline import BaselineConfig, baseline_verdict, track_relative_displacement
from slipfuse.dataset import (
    Format,
    GraspTrial,
    Label,
    extract_windows,
    make_splits,
    to_difference,
)
from slipfuse.evaluation import (
    TABLE_I_REFERENCE,
    TABLE_II_REFERENCE,
    AblationGrid,
    baseline_rows,
    evaluate,
    format_report,
    run_ablation,
)
from slipfuse.features import FeatureExtractorSpec, Modality, build_stream_features, extract_sequence
from slipfuse.model import ModelConfig, init_model, predict_proba
from slipfuse.synthgrasp import Scenario, SynthParams, TextureType, generate_dataset, generate_trial
from slipfuse.training import Adam, TrainConfig, fit_normalization, train, train_step
from test_model import TINY_CFG

pytestmark = pytest.mark.slow


def saturating(image, base):
    """Scalar reference for the difference image, one channel value at a time."""
    out = np.empty(image.shape, np.uint8)
    for idx in np.ndindex(image.shape):
        v = 128 + int(image[idx]) - int(base[idx])
        out[idx] = min(max(v, 0), 255)
    return out


def gap_indices(f0, s, L):
    """Window frames as written out: the base frame, one skipped, then L - 1 consecutive."""
    return [f0 + s] + [f0 + s + k for k in range(2, L + 1)]


# ---------------------------------------------------------------------------
# 1-4: exactness and optimisation sanity


def test_c1_difference_exactness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    exact, lo, hi = True, False, False
    for _ in range(100):
        h, w = rng.integers(4, 12, 2)
        base = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
        cur = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
        trial = GraspTrial("p", "o", Label.SLIP, [base] * 2 + [cur] * 12, [base] * 2 + [cur] * 12, 2)
        d = to_difference(extract_windows(trial, 6)[0])
        ref = saturating(cur, base)
        exact &= all(np.array_equal(f, ref) for f in d.external_seq[1:] + d.gelsight_seq[1:])
        exact &= bool((d.external_seq[0] == 128).all() and (d.gelsight_seq[0] == 128).all())
        lo |= bool((ref == 0).any())
        hi |= bool((ref == 255).any())
    dt = time.perf_counter() - t0
    ok = exact and lo and hi and dt < 5
    record_criterion(1, ok, f"100 pairs bit-exact={exact}, clamp 0 hit={lo}, clamp 255 hit={hi}", dt)
    assert ok


def test_c2_windowing_exactness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    ok = True
    for k in range(50):
        f0 = int(rng.integers(2, 10))
        trial = random_trial(rng, f0, f0 + 13 + int(rng.integers(0, 6)), size=(2, 2), trial_id=f"t{k}")
        for L in (6, 7, 8, 9):
            wins = extract_windows(trial, L)
            ok &= len(wins) == 5
            ok &= all(list(w.frame_indices) == gap_indices(f0, s, L) for w, s in zip(wins, (-2, -1, 1, 2, 3)))
            ok &= all(len(w.gelsight_seq) == L for w in wins)
    n = sum(len(extract_windows(random_trial(rng, 4, 17, size=(1, 1), trial_id=f"c{i}"), 8)) for i in range(1102))
    dt = time.perf_counter() - t0
    ok = ok and n == 5510 and dt < 5
    record_criterion(2, ok, f"50 trials x 4 lengths exact; 1102 trials -> {n} windows", dt)
    assert ok


def test_c3_gradient_check():
    t0 = time.perf_counter()
    s = init_model(TINY_CFG, 0).astype(np.float64)
    X = np.random.default_rng(0).normal(size=(3, TINY_CFG.seq_len, TINY_CFG.input_dim))
    worst = grad_check(s, X, np.array([0, 1, 1]), training=False)
    worst_drop = grad_check(s, X, np.array([0, 1, 1]), training=True, seed=5)
    err = max(max(worst.values()), max(worst_drop.values()))
    groups = {"fc", "lstm0", "lstm1", "cls"} == {k.split(".")[0] for k in worst}
    dt = time.perf_counter() - t0
    ok = err < 1e-3 and groups and dt < 30
    record_criterion(3, ok, f"max relative error {err:.2e} over fusion FC, both LSTM layers, classifier", dt)
    assert ok


def overfit_ten(seed=0):
    """Ten balanced synthetic windows; full-batch Adam at lr 5e-4 until all are right."""
    spec = FeatureExtractorSpec("tiny", grid=8)
    X, y = [], []
    # every scenario appears; stable and gel-stretch make up the five negatives
    slips = [Scenario.TRANSLATIONAL_SLIP, Scenario.ROTATIONAL_SLIP, Scenario.SMOOTH_SLIP_VISION_ONLY,
             Scenario.OCCLUDED_SLIP_TACTILE_ONLY, Scenario.TRANSLATIONAL_SLIP]
    stables = [Scenario.STABLE, Scenario.GEL_STRETCH_STABLE] * 2 + [Scenario.GEL_STRETCH_STABLE]
    for k, (a, b) in enumerate(zip(slips, stables)):
        for sc in (a, b):
            trial = generate_trial(sc, SynthParams(image_size=(64, 64), marker_grid=(5, 5), rng_seed=100 + k))
            seq = extract_sequence(extract_windows(trial, 8)[k], spec, "tactile_vision")
            X.append(seq.vectors)
            y.append(int(trial.label))
    X, y = np.stack(X), np.array(y)
    state = init_model(ModelConfig(input_dim=X.shape[2]), seed)
    state.set_normalization(*fit_normalization(X))
    opt = Adam(state.parameter_names(), TrainConfig(learning_rate=5e-4, seed=seed))
    losses, reached = [], None
    for step in range(1, 201):
        losses.append(train_step(state, opt, X, y))
        if reached is None and np.all((predict_proba(state, X) >= 0.5) == y):
            reached = step
            break
    return reached, losses, state


def test_c4_overfit_ten_samples():
    t0 = time.perf_counter()
    reached, _, _ = overfit_ten()
    dt = time.perf_counter() - t0
    ok = reached is not None and dt < 60
    record_criterion(4, ok, f"100% training accuracy after {reached} steps (limit 200)", dt)
    assert ok


# ---------------------------------------------------------------------------
# 5, 6, 8: the 600-trial synthetic run


@pytest.fixture(scope="module")
def synthetic_600(tmp_path_factory):
    t0 = time.perf_counter()
    root = tmp_path_factory.mktemp("synth600")
    manifest = generate_dataset([(sc, 100) for sc in Scenario], SynthParams(rng_seed=0), root / "data")
    train_ids, val_ids = make_splits(manifest, 0.85, seed=0)
    spec = FeatureExtractorSpec("tiny", grid=8)
    feats = build_stream_features(manifest, spec, 8, Format.RAW, cache_root=root / "cache")
    return dict(manifest=manifest, spec=spec, feats=feats, train_ids=train_ids, val_ids=val_ids,
                prep_s=time.perf_counter() - t0)


TRAIN_600 = TrainConfig(batch_size=32, max_epochs=30, seed=0)


def train_cell(data, modality, feats=None):
    t0 = time.perf_counter()
    fs = (feats or data["feats"]).select(modality)
    tr, va = fs.select_trials(data["train_ids"]), fs.select_trials(data["val_ids"])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # 4:2 slip:stable ratio is by design
        state, rep = train(ModelConfig(input_dim=tr.X.shape[2], seq_len=8), TRAIN_600, tr, va)
    row = evaluate(state, va, data["spec"], modality, Format.RAW, train_trial_ids=data["train_ids"])
    return row, rep, time.perf_counter() - t0


@pytest.fixture(scope="module")
def cells_600(synthetic_600):
    return {m: train_cell(synthetic_600, m) for m in (Modality.TACTILE_VISION, Modality.TACTILE, Modality.VISION)}


def test_c5_end_to_end_accuracy(synthetic_600, cells_600):
    row, rep, dt = cells_600[Modality.TACTILE_VISION]
    total = synthetic_600["prep_s"] + dt
    ok = row.accuracy >= 0.90 and len(rep.epochs) <= 30 and total < 600
    record_criterion(5, ok, f"tactile-vision validation accuracy {row.accuracy:.4f} on {row.n} windows "
                            f"(best epoch {rep.best_epoch}; synth+features {synthetic_600['prep_s']:.0f} s)", total)
    assert ok


def test_c6_modality_complementarity(synthetic_600, cells_600):
    fused, tact, vis = (cells_600[m][0].accuracy for m in
                        (Modality.TACTILE_VISION, Modality.TACTILE, Modality.VISION))
    total = synthetic_600["prep_s"] + sum(c[2] for c in cells_600.values())
    ok = fused >= tact + 0.05 and fused >= vis + 0.05 and total < 1800
    record_criterion(6, ok, f"tactile-vision {fused:.4f}, tactile {tact:.4f}, vision {vis:.4f}", total)
    assert ok


def test_c8_determinism(synthetic_600, cells_600):
    t0 = time.perf_counter()
    # criterion 4 again, same seed
    r1, l1, s1 = overfit_ten()
    r2, l2, s2 = overfit_ten()
    same4 = r1 == r2 and l1 == l2 and all(np.array_equal(s1.params[k], s2.params[k]) for k in s1.params)
    # criterion 5 again, features re-extracted from the frames without the cache
    fresh = build_stream_features(synthetic_600["manifest"], synthetic_600["spec"], 8, Format.RAW)
    row_a, rep_a, _ = cells_600[Modality.TACTILE_VISION]
    row_b, rep_b, _ = train_cell(synthetic_600, Modality.TACTILE_VISION, fresh)
    same5 = rep_a.losses == rep_b.losses and rep_a.epochs == rep_b.epochs and row_a == row_b
    dt = time.perf_counter() - t0
    ok = same4 and same5
    record_criterion(8, ok, f"rerun identical: overfit run {same4}, 600-trial run {same5} "
                            f"({len(rep_b.epochs)} epochs compared)", dt)
    assert ok


# ---------------------------------------------------------------------------
# 7: baseline against generator ground truth


def test_c7_baseline_oracle_agreement():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(4):
        for tex in (TextureType.DOTS, TextureType.STRIPES):
            trial = generate_trial(Scenario.TRANSLATIONAL_SLIP, SynthParams(rng_seed=seed, texture_type=tex))
            f0 = trial.lift_frame_index
            sl = slice(f0 - 2, f0 + 8)
            gt = np.asarray(trial.meta["texture_offset"])[sl] - np.asarray(trial.meta["marker_offset"])[sl]
            gt = np.linalg.norm(gt - gt[0], axis=1)
            worst = max(worst, float(np.abs(track_relative_displacement(trial.gelsight_frames[sl]) - gt).max()))
    expect = {Scenario.TRANSLATIONAL_SLIP: Label.SLIP, Scenario.GEL_STRETCH_STABLE: Label.STABLE,
              Scenario.SMOOTH_SLIP_VISION_ONLY: Label.STABLE}
    wrong = []
    for sc, want in expect.items():
        for seed in range(3):
            trial = generate_trial(sc, SynthParams(rng_seed=seed))
            f0 = trial.lift_frame_index
            frames = trial.gelsight_frames[f0 - 2: f0 + 8]
            for th in (1.0, 2.0, 3.0, 4.0, 5.0):
                got, _ = baseline_verdict(frames, BaselineConfig(slip_threshold=th))
                if got is not want:
                    wrong.append((sc.value, seed, th))
    dt = time.perf_counter() - t0
    ok = worst < 1.0 and not wrong and dt < 60
    record_criterion(7, ok, f"worst trace error {worst:.3f} px; verdict mismatches {len(wrong)} of 45", dt)
    assert ok, wrong


# ---------------------------------------------------------------------------
# 9: report layout


def test_c9_report_fidelity(small_dataset):
    t0 = time.perf_counter()
    train_ids, test_ids = make_splits(small_dataset, 0.75, seed=0)
    quick = TrainConfig(batch_size=32, max_epochs=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep1 = run_ablation(AblationGrid(formats=(Format.RAW, Format.DIFFERENCE), grid_size=4), small_dataset,
                            train_ids, test_ids, quick)
        grid2 = AblationGrid(formats=(Format.RAW,), modalities=(Modality.TACTILE_VISION,), lengths=(6, 7, 8, 9),
                             grid_size=4)
        rep2 = run_ablation(grid2, small_dataset, train_ids, test_ids, quick)
    rep2.rows += baseline_rows(small_dataset, test_ids, (6, 7, 8, 9))
    t1, t2 = format_report(rep1, "TABLE_I"), format_report(rep2, "TABLE_II")

    own1, ref1 = t1.split("Reference")
    rows1 = [ln for ln in own1.splitlines() if " | " in ln]
    refrows1 = [ln for ln in ref1.splitlines() if " | " in ln]
    ok1 = len(rows1) == 3 and all(len(r.split(" | ")) == 5 for r in rows1)
    ok1 &= all(f"{v:.2f}%" in ref1 for vals in TABLE_I_REFERENCE.values() for v in vals)
    ok1 &= len(refrows1) == 7
    own2, ref2 = t2.split("Reference")
    rows2 = [ln for ln in own2.splitlines() if " | " in ln]
    ok2 = [c.strip() for c in rows2[0].split(" | ")] == ["model parameter", "6", "7", "8", "9"]
    ok2 &= len(rows2) == 3 and "threshold baseline" in rows2[2]
    ok2 &= all(f"{v:.2f}%" in ref2 for vals in TABLE_II_REFERENCE.values() for v in vals.values())
    dt = time.perf_counter() - t0
    ok = ok1 and ok2
    record_criterion(9, ok, f"TABLE_I layout {ok1} (2x3 grid + published footer), TABLE_II layout {ok2}", dt)
    assert ok

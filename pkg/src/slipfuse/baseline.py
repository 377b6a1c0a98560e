"""Hand-tuned slip detector on GelSight frames.

Markers are found as dark blobs and tracked frame to frame; the object
texture is located by cross-correlating the marker-free part of each frame
against the first one. Slip is declared when the texture has moved away
from the markers by more than a threshold.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage, signal

from .dataset import (
    DatasetManifest,
    Label,
    WindowPattern,
    load_trial,
    window_indices,
)

log = logging.getLogger(__name__)


class BaselineError(Exception):
    pass


class NoMarkersFound(BaselineError):
    pass


class TrackingLost(BaselineError):
    def __init__(self, frame: int, fraction: float):
        self.frame = frame
        self.fraction = fraction
        super().__init__(f"only {fraction:.0%} of markers matched at frame {frame}")


@dataclass(frozen=True)
class BaselineConfig:
    marker_intensity_threshold: int = 90
    min_marker_area: float = 4.0
    max_marker_area: float = 400.0
    match_radius: float = 6.0
    slip_threshold: float = 2.0
    # disabled unless set: SLIP when centre-marker motion exceeds this multiple of the rim's
    central_vs_peripheral_ratio: float | None = None
    texture_min_std: float = 4.0
    max_shift: int = 48
    refine_radius: int = 3
    envelope_sigma: float = 3.0
    mask_dilation: int = 2

    def validate(self) -> "BaselineConfig":
        if self.slip_threshold <= 0:
            raise ValueError("slip_threshold must be > 0")
        if self.match_radius <= 0:
            raise ValueError("match_radius must be > 0")
        if self.min_marker_area > self.max_marker_area:
            raise ValueError("min_marker_area exceeds max_marker_area")
        return self


def _gray(image: np.ndarray) -> np.ndarray:
    return np.asarray(image, dtype=np.float64).mean(axis=2)


def _components(gray: np.ndarray, cfg: BaselineConfig):
    mask = gray < cfg.marker_intensity_threshold
    labels, n = ndimage.label(mask)
    if n == 0:
        return labels, []
    areas = ndimage.sum_labels(mask, labels, index=np.arange(1, n + 1))
    keep = [i + 1 for i, a in enumerate(areas) if cfg.min_marker_area <= a <= cfg.max_marker_area]
    return labels, keep


def _row_major(centroids: np.ndarray, gap: float) -> np.ndarray:
    if len(centroids) == 0:
        return centroids
    order = np.argsort(centroids[:, 1], kind="stable")
    rows, current = [], [order[0]]
    for a, b in zip(order[:-1], order[1:]):
        if centroids[b, 1] - centroids[a, 1] > gap:
            rows.append(current)
            current = []
        current.append(b)
    rows.append(current)
    out = [centroids[sorted(r, key=lambda i: centroids[i, 0])] for r in rows]
    return np.concatenate(out)


def detect_markers(image: np.ndarray, config: BaselineConfig = BaselineConfig()) -> np.ndarray:
    """Sub-pixel marker centroids ``(N, 2)`` as ``(x, y)``, sorted row-major.

    Centroids are weighted by how far each pixel falls below the intensity
    threshold, which keeps anti-aliased edges from biasing them.
    """
    gray = _gray(image)
    labels, keep = _components(gray, config)
    if not keep:
        raise NoMarkersFound("no dark blobs within the marker area bounds")
    weight = np.clip(config.marker_intensity_threshold - gray, 0.0, None)
    cy_cx = ndimage.center_of_mass(weight, labels, keep)
    cents = np.array([(x, y) for y, x in cy_cx], dtype=float)
    areas = ndimage.sum_labels(np.ones_like(gray), labels, keep)
    radius = float(np.median(np.sqrt(np.asarray(areas) / np.pi)))
    return _row_major(cents, max(3.0, 2.0 * radius))


def _cluster_1d(values: np.ndarray, gap: float) -> np.ndarray:
    order = np.sort(values)
    centers, group = [], [order[0]]
    for a, b in zip(order[:-1], order[1:]):
        if b - a > gap:
            centers.append(np.mean(group))
            group = []
        group.append(b)
    centers.append(np.mean(group))
    return np.array(centers)


def find_missing_markers(centroids: np.ndarray, grid_shape: tuple[int, int], gap: float = 6.0) -> list[tuple[int, int]]:
    """Grid cells ``(row, col)`` with no detected marker, assuming a regular lattice.

    Row and column coordinates are read off the detections themselves, so at
    least one marker must survive in every row and every column.
    """
    rows_c = _cluster_1d(centroids[:, 1], gap)
    cols_c = _cluster_1d(centroids[:, 0], gap)
    if (len(rows_c), len(cols_c)) != tuple(grid_shape):
        raise BaselineError(f"detected lattice {len(rows_c)}x{len(cols_c)} does not match {grid_shape}")
    occupied = set()
    for x, y in centroids:
        occupied.add((int(np.argmin(np.abs(rows_c - y))), int(np.argmin(np.abs(cols_c - x)))))
    return [(r, c) for r in range(grid_shape[0]) for c in range(grid_shape[1]) if (r, c) not in occupied]


@dataclass
class MarkerTrack:
    """Markers of the first frame followed through the sequence.

    ``positions[t, k]`` is marker ``k``'s centroid at frame ``t`` (NaN once
    lost); ``matched[t, k]`` says whether it was matched at frame ``t``.
    """

    positions: np.ndarray
    matched: np.ndarray
    detections: list[np.ndarray] = field(repr=False, default_factory=list)

    @property
    def displacement(self) -> np.ndarray:
        return self.positions - self.positions[0]

    def mean_displacement(self) -> np.ndarray:
        """``(T, 2)`` mean displacement over markers matched at each frame."""
        d = self.displacement
        out = np.zeros((len(d), 2))
        for t in range(len(d)):
            m = self.matched[t]
            if m.any():
                out[t] = d[t, m].mean(axis=0)
        return out

    @property
    def unmatched(self) -> list[tuple[int, int]]:
        return [(int(t), int(k)) for t, k in zip(*np.nonzero(~self.matched))]


def _greedy_match(prev: np.ndarray, cur: np.ndarray, radius: float) -> dict[int, int]:
    if len(prev) == 0 or len(cur) == 0:
        return {}
    d = np.hypot(prev[:, None, 0] - cur[None, :, 0], prev[:, None, 1] - cur[None, :, 1])
    pairs = np.argwhere(d <= radius)
    pairs = pairs[np.argsort(d[pairs[:, 0], pairs[:, 1]], kind="stable")]
    used_p, used_c, out = set(), set(), {}
    for i, j in pairs:
        if i not in used_p and j not in used_c:
            out[int(i)] = int(j)
            used_p.add(i)
            used_c.add(j)
    return out


def track_markers(frames: Sequence[np.ndarray], config: BaselineConfig = BaselineConfig()) -> MarkerTrack:
    dets = [detect_markers(frames[0], config)]
    n = len(dets[0])
    pos = np.full((len(frames), n, 2), np.nan)
    matched = np.zeros((len(frames), n), dtype=bool)
    pos[0], matched[0] = dets[0], True
    last = dets[0].copy()
    for t in range(1, len(frames)):
        try:
            cur = detect_markers(frames[t], config)
        except NoMarkersFound:
            cur = np.zeros((0, 2))
        dets.append(cur)
        alive = np.flatnonzero(matched[t - 1])
        pairs = _greedy_match(last[alive], cur, config.match_radius)
        for a, j in pairs.items():
            k = alive[a]
            pos[t, k] = cur[j]
            matched[t, k] = True
            last[k] = cur[j]
        fraction = matched[t].sum() / n
        if fraction < 0.5:
            raise TrackingLost(t, fraction)
    return MarkerTrack(pos, matched, dets)


def _texture_signal(image: np.ndarray, config: BaselineConfig) -> tuple[np.ndarray, float, np.ndarray]:
    """Marker-free, background-removed channels, their strongest std, and the marker mask."""
    img = np.asarray(image, dtype=np.float64)
    mask = _gray(img) < config.marker_intensity_threshold
    if config.mask_dilation:
        mask = ndimage.binary_dilation(mask, iterations=config.mask_dilation)
    out = np.empty_like(img)
    spread = 0.0
    for ch in range(img.shape[2]):
        vals = img[..., ch][~mask]
        bg = np.median(vals) if vals.size else 0.0
        c = img[..., ch] - bg
        c[mask] = 0.0
        out[..., ch] = c
        if vals.size:
            spread = max(spread, float(vals.std()))
    return out, spread, mask


def _subpixel(c_m: float, c_0: float, c_p: float) -> float:
    denom = c_m - 2.0 * c_0 + c_p
    if denom >= 0:
        return 0.0
    return float(np.clip(0.5 * (c_m - c_p) / denom, -0.5, 0.5))


def _xcorr(cur: np.ndarray, template: np.ndarray) -> np.ndarray:
    if cur.ndim == 2:
        return signal.correlate(cur, template, mode="full", method="fft")
    return sum(signal.correlate(cur[..., c], template[..., c], mode="full", method="fft")
               for c in range(cur.shape[2]))


def _peak(corr: np.ndarray, center: tuple[int, int], radius: int) -> tuple[int, int]:
    cy, cx = center
    y0, y1 = max(cy - radius, 0), min(cy + radius + 1, corr.shape[0])
    x0, x1 = max(cx - radius, 0), min(cx + radius + 1, corr.shape[1])
    win = corr[y0:y1, x0:x1]
    iy, ix = np.unravel_index(np.argmax(win), win.shape)
    return int(iy + y0), int(ix + x0)


def _envelope(sig: np.ndarray, mask: np.ndarray, sigma: float) -> np.ndarray:
    # normalised convolution so the static marker holes leave no imprint
    valid = (~mask).astype(float)
    num = ndimage.gaussian_filter(np.abs(sig).sum(axis=2) * valid, sigma)
    den = ndimage.gaussian_filter(valid, sigma)
    env = np.where(den > 1e-3, num / np.maximum(den, 1e-3), 0.0)
    return env - np.median(env[~mask])


def _masked_ncc(cur: np.ndarray, mask: np.ndarray, template: np.ndarray, mask0: np.ndarray) -> np.ndarray:
    # each lag is normalised by the energy of the pixels both frames can see,
    # otherwise the static marker holes pull the peak to multiples of the grid pitch
    valid, valid0 = (~mask).astype(float), (~mask0).astype(float)
    num = _xcorr(cur, template)
    e_cur = signal.correlate((cur ** 2).sum(axis=2), valid0, mode="full", method="fft")
    e_tpl = signal.correlate(valid, (template ** 2).sum(axis=2), mode="full", method="fft")
    den = np.sqrt(np.maximum(e_cur, 0.0) * np.maximum(e_tpl, 0.0))
    return np.where(den > 1e-6 * den.max(), num / np.maximum(den, 1e-12), 0.0)


def texture_displacement(frames: Sequence[np.ndarray], config: BaselineConfig = BaselineConfig()) -> np.ndarray | None:
    """``(T, 2)`` texture shift of each frame relative to frame 0, or None when there is no texture.

    Coarse-to-fine: the blurred texture magnitude fixes the shift without
    the ambiguity of periodic patterns, then the full signal's integer-lag
    correlation peak is searched near it and refined by a three-point
    parabola along each axis.
    """
    template, spread, mask0 = _texture_signal(frames[0], config)
    if spread < config.texture_min_std:
        return None
    h, w, _ = template.shape
    zero = (h - 1, w - 1)  # index of lag (0, 0) in a full correlation
    env0 = _envelope(template, mask0, config.envelope_sigma)
    out = np.zeros((len(frames), 2))
    for t in range(1, len(frames)):
        cur, _, mask = _texture_signal(frames[t], config)
        coarse = _peak(_xcorr(_envelope(cur, mask, config.envelope_sigma), env0), zero, config.max_shift)
        corr = _masked_ncc(cur, mask, template, mask0)
        py, px = _peak(corr, coarse, config.refine_radius)
        fy = _subpixel(corr[py - 1, px], corr[py, px], corr[py + 1, px]) if 0 < py < corr.shape[0] - 1 else 0.0
        fx = _subpixel(corr[py, px - 1], corr[py, px], corr[py, px + 1]) if 0 < px < corr.shape[1] - 1 else 0.0
        out[t] = (px - zero[1] + fx, py - zero[0] + fy)
    return out


def track_relative_displacement(frames: Sequence[np.ndarray], config: BaselineConfig = BaselineConfig()) -> np.ndarray:
    """Per-frame ``|texture shift - mean marker shift|`` in pixels (0 at frame 0).

    A textureless contact has no measurable relative motion and yields zeros.
    """
    if len(frames) < 2:
        raise ValueError("need at least two frames")
    track = track_markers(frames, config)
    markers = track.mean_displacement()
    tex = texture_displacement(frames, config)
    if tex is None:
        return np.zeros(len(frames))
    return np.hypot(*(tex - markers).T)


def _central_peripheral_ratio(track: MarkerTrack) -> float:
    p0 = track.positions[0]
    center = p0.mean(axis=0)
    r = np.hypot(*(p0 - center).T)
    inner = np.argmin(r)
    rim = r >= np.percentile(r, 75)
    mag = np.hypot(*track.displacement[-1].T)
    ok = track.matched[-1]
    rim_mag = mag[rim & ok].mean() if (rim & ok).any() else 0.0
    if not ok[inner]:
        return 0.0
    return float(mag[inner] / max(rim_mag, 1e-6)) if mag[inner] > 0.5 else 0.0


def detect_slip_threshold(frames: Sequence[np.ndarray], config: BaselineConfig = BaselineConfig()) -> Label:
    return baseline_verdict(frames, config)[0]


def baseline_verdict(frames: Sequence[np.ndarray], config: BaselineConfig = BaselineConfig()) -> tuple[Label, float]:
    """Verdict plus the peak relative displacement it was based on."""
    config.validate()
    rel = track_relative_displacement(frames, config)
    peak = float(rel.max())
    slip = peak > config.slip_threshold
    if not slip and config.central_vs_peripheral_ratio is not None:
        slip = _central_peripheral_ratio(track_markers(frames, config)) > config.central_vs_peripheral_ratio
    return (Label.SLIP if slip else Label.STABLE), peak


@dataclass
class BaselineResult:
    trial_id: str
    label: Label
    verdict: Label | None
    peak_displacement: float | None
    error: str | None = None


def run_baseline(
    manifest: DatasetManifest,
    config: BaselineConfig = BaselineConfig(),
    L: int = 8,
    trial_ids: Sequence[str] | None = None,
    pattern: WindowPattern = WindowPattern.GAP,
) -> list[BaselineResult]:
    """Run on the GelSight frames of each trial's first (s = -2) window of length ``L``."""
    results = []
    for tid in trial_ids if trial_ids is not None else manifest.trial_ids:
        trial = load_trial(manifest, tid)
        idx = window_indices(trial.lift_frame_index, -2, L, pattern)
        frames = [trial.gelsight_frames[i] for i in idx]
        try:
            verdict, peak = baseline_verdict(frames, config)
            results.append(BaselineResult(tid, trial.label, verdict, peak))
        except BaselineError as e:
            log.warning("baseline failed on %s: %s", tid, e)
            results.append(BaselineResult(tid, trial.label, None, None, str(e)))
    return results


def baseline_accuracy(results: Sequence[BaselineResult]) -> float:
    """Accuracy over all trials; a failed trial counts as wrong."""
    if not results:
        return float("nan")
    return sum(r.verdict is r.label for r in results) / len(results)


def results_csv(results: Sequence[BaselineResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["trial_id", "label", "verdict", "peak_displacement_px", "correct", "error"])
    for r in results:
        w.writerow([
            r.trial_id,
            r.label.text,
            r.verdict.text if r.verdict is not None else "",
            "" if r.peak_displacement is None else f"{r.peak_displacement:.4f}",
            int(r.verdict is r.label),
            r.error or "",
        ])
    return buf.getvalue()


def write_results_csv(results: Sequence[BaselineResult], path: str | Path) -> Path:
    path = Path(path)
    path.write_text(results_csv(results))
    return path

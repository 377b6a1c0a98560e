"""Synthetic grasp-and-lift trials with paired GelSight-like and camera-like streams.

Rendering is deliberately flat: soft-edged disks and stripes plus Gaussian
pixel noise. The GelSight image is a bright gel with a grid of dark markers
and, optionally, an object texture drawn as a chroma shift (red down, blue
up) so that it leaves the luminance untouched. The external image shows an
object silhouette between two gripper fingers.

Kinematics, in frames ``u = t - lift_frame_index``:

* slip: texture (and silhouette) move ``slip_speed * max(u, 0)`` downward,
  markers stay put;
* gel stretch: markers, texture and silhouette all move together by an
  ease-out ramp that plateaus at ``stretch_amplitude_px``.

Nuisance factors are drawn per trial so that neither stream alone gives
the label away: stable grasps are often textureless (looking exactly like a
smooth-object slip to the tactile stream) and often occluded in the
external view (looking exactly like an occluded slip to the camera).
"""

from __future__ import annotations

import enum
import functools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import (
    SCHEMA_VERSION,
    DatasetManifest,
    GraspTrial,
    Label,
    _HEAD_FRAMES,
    _TAIL_FRAMES,
    write_trial,
)

log = logging.getLogger(__name__)

GEL_BASE = np.array([190.0, 185.0, 195.0])
MARKER_DELTA = np.array([-140.0, -140.0, -140.0])
TEXTURE_DELTA = np.array([-45.0, 0.0, 45.0])
CAMERA_BACKGROUND = np.array([100.0, 115.0, 130.0])
FINGER_COLOR = np.array([40.0, 40.0, 45.0])
OCCLUDER_COLOR = np.array([150.0, 150.0, 150.0])


class Scenario(enum.Enum):
    STABLE = "stable"
    TRANSLATIONAL_SLIP = "translational_slip"
    ROTATIONAL_SLIP = "rotational_slip"
    GEL_STRETCH_STABLE = "gel_stretch_stable"
    SMOOTH_SLIP_VISION_ONLY = "smooth_slip_vision_only"
    OCCLUDED_SLIP_TACTILE_ONLY = "occluded_slip_tactile_only"

    @property
    def label(self) -> Label:
        if self in (Scenario.STABLE, Scenario.GEL_STRETCH_STABLE):
            return Label.STABLE
        return Label.SLIP

    @property
    def is_slip(self) -> bool:
        return self.label is Label.SLIP

    @classmethod
    def parse(cls, value: "str | Scenario") -> "Scenario":
        if isinstance(value, Scenario):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            return cls[str(value).upper()]


class TextureType(enum.Enum):
    DOTS = "dots"
    STRIPES = "stripes"
    NONE = "none"


class InvalidParams(ValueError):
    pass


@dataclass(frozen=True)
class SynthParams:
    image_size: tuple[int, int] = (128, 128)
    marker_grid: tuple[int, int] = (7, 7)
    marker_radius_px: float = 3.0
    slip_speed_px_per_frame: float = 3.0
    stretch_amplitude_px: float = 4.0
    # None draws DOTS/STRIPES/NONE per trial
    texture_type: TextureType | None = None
    noise_std: float = 2.0
    n_frames: int = 20
    lift_frame_index: int = 4
    rng_seed: int = 0
    stretch_ramp_frames: int = 4
    textureless_fraction: float = 0.7
    occluder_fraction: float = 0.5
    frame_rate_hz: float = 20.0

    def to_json(self) -> dict:
        d = asdict(self)
        d["texture_type"] = None if self.texture_type is None else self.texture_type.value
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SynthParams":
        d = dict(d)
        if d.get("texture_type") is not None:
            d["texture_type"] = TextureType(d["texture_type"])
        for k in ("image_size", "marker_grid"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def validate_params(scenario: Scenario, params: SynthParams) -> None:
    h, w = params.image_size
    problems = []
    if h < 32 or w < 32:
        problems.append(f"image_size {params.image_size} too small (min 32x32)")
    if params.lift_frame_index < _HEAD_FRAMES:
        problems.append(f"lift_frame_index must be >= {_HEAD_FRAMES}")
    if params.n_frames < max(14, params.lift_frame_index + _TAIL_FRAMES):
        problems.append(
            f"n_frames {params.n_frames} < {max(14, params.lift_frame_index + _TAIL_FRAMES)} "
            "(every window length must fit after the lift frame)"
        )
    if min(params.marker_grid) < 2:
        problems.append("marker_grid needs at least 2x2 markers")
    if params.marker_radius_px <= 0:
        problems.append("marker_radius_px must be > 0")
    if params.noise_std < 0:
        problems.append("noise_std must be >= 0")
    if scenario.is_slip and params.slip_speed_px_per_frame <= 0:
        problems.append("slip_speed_px_per_frame must be > 0 for slip scenarios")
    if scenario is Scenario.GEL_STRETCH_STABLE and params.stretch_amplitude_px <= 0:
        problems.append("stretch_amplitude_px must be > 0 for gel stretch")
    if params.stretch_ramp_frames < 1:
        problems.append("stretch_ramp_frames must be >= 1")
    if scenario in (Scenario.TRANSLATIONAL_SLIP, Scenario.ROTATIONAL_SLIP, Scenario.OCCLUDED_SLIP_TACTILE_ONLY):
        if params.texture_type is TextureType.NONE:
            problems.append(f"{scenario.value} needs a textured object")
    for name in ("textureless_fraction", "occluder_fraction"):
        if not 0.0 <= getattr(params, name) <= 1.0:
            problems.append(f"{name} must be in [0, 1]")
    if problems:
        raise InvalidParams("; ".join(problems))


# ---------------------------------------------------------------------------
# kinematics


def slip_displacement(n_frames: int, lift: int, speed: float) -> np.ndarray:
    u = np.arange(n_frames) - lift
    return speed * np.maximum(u, 0).astype(float)


def stretch_displacement(n_frames: int, lift: int, amplitude: float, ramp: int) -> np.ndarray:
    u = np.clip((np.arange(n_frames) - lift) / ramp, 0.0, 1.0)
    return amplitude * (1.0 - (1.0 - u) ** 2)


def marker_positions(params: SynthParams) -> np.ndarray:
    """Rest positions of the marker grid as ``(rows*cols, 2)`` ``(x, y)``, row-major."""
    h, w = params.image_size
    rows, cols = params.marker_grid
    xs = (np.arange(cols) + 1) * w / (cols + 1)
    ys = (np.arange(rows) + 1) * h / (rows + 1)
    return np.array([(x, y) for y in ys for x in xs], dtype=float)


# ---------------------------------------------------------------------------
# rendering primitives


def _stamp_disk(alpha: np.ndarray, cx: float, cy: float, r: float) -> None:
    h, w = alpha.shape
    x0, x1 = max(int(np.floor(cx - r - 1)), 0), min(int(np.ceil(cx + r + 2)), w)
    y0, y1 = max(int(np.floor(cy - r - 1)), 0), min(int(np.ceil(cy + r + 2)), h)
    if x0 >= x1 or y0 >= y1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    cover = np.clip(r - np.hypot(xx - cx, yy - cy) + 0.5, 0.0, 1.0)
    np.maximum(alpha[y0:y1, x0:x1], cover, out=alpha[y0:y1, x0:x1])


def _stamp_ellipse(alpha: np.ndarray, cx: float, cy: float, rx: float, ry: float) -> None:
    h, w = alpha.shape
    x0, x1 = max(int(cx - rx - 2), 0), min(int(cx + rx + 3), w)
    y0, y1 = max(int(cy - ry - 2), 0), min(int(cy + ry + 3), h)
    if x0 >= x1 or y0 >= y1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    # signed distance approximation, scaled by the minor semi-axis
    d = np.hypot((xx - cx) / rx, (yy - cy) / ry)
    cover = np.clip((1.0 - d) * min(rx, ry) + 0.5, 0.0, 1.0)
    np.maximum(alpha[y0:y1, x0:x1], cover, out=alpha[y0:y1, x0:x1])


def _rect_alpha(shape: tuple[int, int], x0: float, y0: float, x1: float, y1: float) -> np.ndarray:
    h, w = shape
    xs = np.clip(np.minimum(np.arange(w) + 0.5, x1) - np.maximum(np.arange(w) - 0.5, x0), 0.0, 1.0)
    ys = np.clip(np.minimum(np.arange(h) + 0.5, y1) - np.maximum(np.arange(h) - 0.5, y0), 0.0, 1.0)
    return ys[:, None] * xs[None, :]


def _composite(base: np.ndarray, alpha: np.ndarray, color: np.ndarray) -> np.ndarray:
    a = alpha[..., None]
    return base * (1.0 - a) + color * a


def _finish(img: np.ndarray, noise_std: float, rng: np.random.Generator) -> np.ndarray:
    if noise_std > 0:
        img = img + rng.normal(0.0, noise_std, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class _Texture:
    kind: TextureType
    center: tuple[float, float]
    radius: float
    dots: np.ndarray  # (k, 3) x, y, r in patch coords
    stripe_angle: float
    stripe_period: float


def _draw_texture(rng: np.random.Generator, params: SynthParams, kind: TextureType) -> _Texture:
    h, w = params.image_size
    s = min(h, w)
    center = (w / 2 + rng.uniform(-0.06, 0.06) * w, 0.3 * h + rng.uniform(-0.03, 0.03) * h)
    radius = 0.22 * s
    dots = np.zeros((0, 3))
    if kind is TextureType.DOTS:
        k = int(rng.integers(10, 16))
        rr = radius * np.sqrt(rng.uniform(0, 1, k)) * 0.85
        th = rng.uniform(0, 2 * np.pi, k)
        dots = np.stack([rr * np.cos(th), rr * np.sin(th), rng.uniform(0.02, 0.04, k) * s], axis=1)
    return _Texture(
        kind=kind,
        center=center,
        radius=radius,
        dots=dots,
        stripe_angle=float(rng.uniform(0, np.pi)),
        stripe_period=float(rng.uniform(0.06, 0.09) * s),
    )


def _texture_alpha(tex: _Texture, shape: tuple[int, int], offset: tuple[float, float], angle: float) -> np.ndarray:
    alpha = np.zeros(shape)
    if tex.kind is TextureType.NONE:
        return alpha
    cx, cy = tex.center[0] + offset[0], tex.center[1] + offset[1]
    c, s = np.cos(angle), np.sin(angle)
    if tex.kind is TextureType.DOTS:
        for px, py, r in tex.dots:
            _stamp_disk(alpha, cx + c * px - s * py, cy + s * px + c * py, r)
        return alpha
    h, w = shape
    r = tex.radius
    x0, x1 = max(int(cx - r - 2), 0), min(int(cx + r + 3), w)
    y0, y1 = max(int(cy - r - 2), 0), min(int(cy + r + 3), h)
    if x0 >= x1 or y0 >= y1:  # slid out of view
        return alpha
    yy, xx = np.mgrid[y0:y1, x0:x1]
    # back-rotate pixel coordinates into the patch frame
    dx, dy = xx - cx, yy - cy
    u = c * dx + s * dy
    v = -s * dx + c * dy
    disk = np.clip(r - np.hypot(u, v) + 0.5, 0.0, 1.0)
    a = tex.stripe_angle
    phase = (np.cos(a) * u + np.sin(a) * v) / tex.stripe_period
    # triangle wave -> soft square wave, roughly one pixel of edge ramp
    tri = np.abs((phase % 1.0) - 0.5) * 2.0  # 0..1
    stripes = np.clip((tri - 0.5) * tex.stripe_period + 0.5, 0.0, 1.0)
    alpha[y0:y1, x0:x1] = disk * stripes
    return alpha


@functools.lru_cache(maxsize=256)
def marker_layer(params: SynthParams, offset: tuple[float, float], occluded: tuple[int, ...] = ()) -> np.ndarray:
    """Marker coverage in [0, 1]; cached because markers rarely move."""
    markers = np.zeros(params.image_size)
    skip = set(occluded)
    for i, (x, y) in enumerate(marker_positions(params)):
        if i not in skip:
            _stamp_disk(markers, x + offset[0], y + offset[1], params.marker_radius_px)
    markers.flags.writeable = False
    return markers


def render_gelsight(
    params: SynthParams,
    texture: _Texture,
    marker_offset: tuple[float, float],
    texture_offset: tuple[float, float],
    texture_angle: float,
    rng: np.random.Generator,
    occluded_markers: Sequence[int] = (),
) -> np.ndarray:
    """One GelSight-like frame. ``occluded_markers`` are row-major indices left undrawn."""
    shape = params.image_size
    img = np.broadcast_to(GEL_BASE, shape + (3,)).astype(float)
    tex = _texture_alpha(texture, shape, texture_offset, texture_angle)
    img = img + tex[..., None] * TEXTURE_DELTA
    markers = marker_layer(params, (float(marker_offset[0]), float(marker_offset[1])), tuple(occluded_markers))
    img = img + markers[..., None] * MARKER_DELTA
    return _finish(img, params.noise_std, rng)


@dataclass(frozen=True, eq=False)
class _Scene:
    object_center: tuple[float, float]
    object_axes: tuple[float, float]
    object_color: tuple[float, float, float]
    occluded: bool
    # static layers: clutter background, and occluder + fingers over the object
    background: np.ndarray
    front_alpha: np.ndarray
    front: np.ndarray


def _draw_scene(rng: np.random.Generator, params: SynthParams, occluded: bool) -> _Scene:
    shape = params.image_size
    h, w = shape
    background = np.broadcast_to(CAMERA_BACKGROUND, shape + (3,)).astype(float)
    for _ in range(3):
        x0, y0 = rng.uniform(0, w * 0.8), rng.uniform(0, h * 0.8)
        x1, y1 = x0 + rng.uniform(0.1, 0.3) * w, y0 + rng.uniform(0.1, 0.3) * h
        background = _composite(background, _rect_alpha(shape, x0, y0, x1, y1), rng.uniform(60, 160, 3))
    center = (w / 2 + rng.uniform(-0.03, 0.03) * w, 0.36 * h + rng.uniform(-0.02, 0.02) * h)
    axes = (rng.uniform(0.14, 0.2) * w, rng.uniform(0.16, 0.22) * h)
    color = tuple(rng.uniform(0, 255, 3))

    front = np.zeros(shape + (3,))
    front_alpha = np.zeros(shape)
    layers = []
    if occluded:
        layers.append((_rect_alpha(shape, 0.08 * w, 0.12 * h, 0.92 * w, h), OCCLUDER_COLOR))
    cx, rx = center[0], axes[0]
    for x0, x1 in ((cx - rx - 0.08 * w, cx - rx), (cx + rx, cx + rx + 0.08 * w)):
        layers.append((_rect_alpha(shape, x0, 0, x1, 0.6 * h), FINGER_COLOR))
    for a, c in layers:
        front = _composite(front, a, c)
        front_alpha = front_alpha * (1.0 - a) + a
    return _Scene(center, axes, color, occluded, background, front_alpha, front)


def render_external(params: SynthParams, scene: _Scene, object_offset: float, rng: np.random.Generator) -> np.ndarray:
    obj = np.zeros(params.image_size)
    cx, cy = scene.object_center
    _stamp_ellipse(obj, cx, cy + object_offset, *scene.object_axes)
    img = _composite(scene.background, obj, np.array(scene.object_color))
    # front layer is premultiplied by its own alpha
    img = img * (1.0 - scene.front_alpha[..., None]) + scene.front
    return _finish(img, params.noise_std, rng)


# ---------------------------------------------------------------------------
# trials and datasets


def _nuisance(scenario: Scenario, params: SynthParams, rng: np.random.Generator) -> tuple[TextureType, bool]:
    stable_kind = scenario in (Scenario.STABLE, Scenario.GEL_STRETCH_STABLE)
    if scenario is Scenario.SMOOTH_SLIP_VISION_ONLY:
        texture = TextureType.NONE
    elif params.texture_type is not None:
        texture = params.texture_type
    elif stable_kind and rng.uniform() < params.textureless_fraction:
        texture = TextureType.NONE
    else:
        texture = TextureType.DOTS if rng.uniform() < 0.5 else TextureType.STRIPES
    if scenario is Scenario.OCCLUDED_SLIP_TACTILE_ONLY:
        occluded = True
    elif stable_kind:
        occluded = bool(rng.uniform() < params.occluder_fraction)
    else:
        occluded = False
    return texture, occluded


def generate_trial(
    scenario: Scenario | str,
    params: SynthParams,
    trial_id: str | None = None,
    object_id: str | None = None,
) -> GraspTrial:
    """Render one labelled grasp trial; fully determined by ``(scenario, params)``.

    ``trial.meta`` carries the ground-truth kinematics: per-frame
    ``marker_offset`` and ``texture_offset`` as ``(n, 2)`` arrays of
    ``(dx, dy)``, ``texture_angle`` in radians, ``object_offset`` (external
    silhouette, px downward), plus the drawn ``texture_type`` and
    ``occluded`` flag.
    """
    scenario = Scenario.parse(scenario)
    validate_params(scenario, params)
    rng = np.random.default_rng(params.rng_seed)
    texture_kind, occluded = _nuisance(scenario, params, rng)
    texture = _draw_texture(rng, params, texture_kind)
    scene = _draw_scene(rng, params, occluded)

    n, f0 = params.n_frames, params.lift_frame_index
    zeros = np.zeros(n)
    slip = slip_displacement(n, f0, params.slip_speed_px_per_frame)
    stretch = stretch_displacement(n, f0, params.stretch_amplitude_px, params.stretch_ramp_frames)
    marker_dy, texture_dy, angle, object_dy = zeros, zeros, zeros, zeros
    if scenario in (Scenario.TRANSLATIONAL_SLIP, Scenario.OCCLUDED_SLIP_TACTILE_ONLY):
        texture_dy, object_dy = slip, slip
    elif scenario is Scenario.ROTATIONAL_SLIP:
        angle = slip / texture.radius
        object_dy = slip
    elif scenario is Scenario.SMOOTH_SLIP_VISION_ONLY:
        object_dy = slip
    elif scenario is Scenario.GEL_STRETCH_STABLE:
        marker_dy, texture_dy, object_dy = stretch, stretch, stretch

    gel_frames, ext_frames = [], []
    for t in range(n):
        gel_frames.append(
            render_gelsight(params, texture, (0.0, marker_dy[t]), (0.0, texture_dy[t]), angle[t], rng)
        )
        ext_frames.append(render_external(params, scene, object_dy[t], rng))

    trial_id = trial_id or f"{scenario.value}_{params.rng_seed}"
    meta = {
        "scenario": scenario.value,
        "texture_type": texture_kind.value,
        "occluded": occluded,
        "marker_offset": np.stack([zeros, marker_dy], axis=1),
        "texture_offset": np.stack([zeros, texture_dy], axis=1),
        "texture_angle": angle,
        "object_offset": object_dy,
        "texture_center": texture.center,
    }
    return GraspTrial(
        trial_id=trial_id,
        object_id=object_id or f"synth-{trial_id}",
        label=scenario.label,
        external_frames=ext_frames,
        gelsight_frames=gel_frames,
        lift_frame_index=f0,
        frame_rate_hz=params.frame_rate_hz,
        meta=meta,
    )


def expand_plan(plan: Sequence[tuple[Scenario | str, int]]) -> list[Scenario]:
    """Flatten ``[(scenario, count), ...]`` into one scenario per trial ordinal.

    The name ``"all"`` stands for every scenario in declaration order, each
    with the given count.
    """
    out = []
    for scenario, count in plan:
        if int(count) < 1:
            raise InvalidParams(f"count for {scenario} must be >= 1, got {count}")
        kinds = list(Scenario) if str(scenario).lower() == "all" else [Scenario.parse(scenario)]
        for sc in kinds:
            out.extend([sc] * int(count))
    return out


def generate_dataset(
    plan: Sequence[tuple[Scenario | str, int]],
    params: SynthParams,
    out_root: str | Path,
    workers: int = 1,
) -> DatasetManifest:
    """Write a dataset in the on-disk format read by :func:`slipfuse.dataset.load_dataset`.

    Trial ``k`` (0-based, in plan order) is rendered with seed
    ``params.rng_seed + k``.
    """
    scenarios = expand_plan(plan)
    for sc in set(scenarios):
        validate_params(sc, params)
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)

    def one(k: int):
        sc = scenarios[k]
        tid = f"trial_{k:05d}"
        trial = generate_trial(sc, replace(params, rng_seed=params.rng_seed + k), trial_id=tid,
                               object_id=f"synth_{sc.value}_{k:05d}")
        return write_trial(out_root, trial)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            entries = list(pool.map(one, range(len(scenarios))))
    else:
        entries = [one(k) for k in range(len(scenarios))]
    manifest = DatasetManifest(root_path=out_root, trials=entries, schema_version=SCHEMA_VERSION)
    manifest.write()
    log.info("wrote %d synthetic trials to %s", len(entries), out_root)
    return manifest

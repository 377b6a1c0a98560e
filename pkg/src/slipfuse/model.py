"""Trainable head: shared fusion FC -> 2-layer LSTM -> 2-way softmax classifier.

Everything is plain numpy with a hand-written backward pass. Arrays run in
whatever dtype the parameters carry (float32 for training and checkpoints,
float64 for gradient checking via :meth:`ModelState.astype`).

Parameter layout (gates ordered input, forget, cell, output)::

    fc.W     (input_dim, fused_dim)     fc.b     (fused_dim,)
    lstmK.Wx (in_K, 4*units)            lstmK.Wh (units, 4*units)
    lstmK.b  (4*units,)
    cls.W    (units, 2)                 cls.b    (2,)

Two non-trainable buffers standardise the input features:
``x -> (x - norm.shift) * norm.scale``.
"""

from __future__ import annotations

import copy
import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import Label

CKPT_MAGIC = b"SLPFCKPT"
CKPT_VERSION = 1


class ModelError(Exception):
    pass


class InvalidConfig(ModelError):
    pass


class ShapeMismatch(ModelError):
    pass


class CheckpointError(ModelError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    seq_len: int = 8
    fused_dim: int = 64
    lstm_layers: int = 2
    lstm_units: int = 64
    num_classes: int = 2
    fc_dropout_keep: float = 0.5
    lstm_dropout_keep: float = 0.8

    def validate(self) -> "ModelConfig":
        problems = []
        for name in ("input_dim", "seq_len", "fused_dim", "lstm_layers", "lstm_units"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.num_classes != 2:
            problems.append("num_classes must be 2")
        for name in ("fc_dropout_keep", "lstm_dropout_keep"):
            if not 0.0 < getattr(self, name) <= 1.0:
                problems.append(f"{name} must be in (0, 1]")
        if problems:
            raise InvalidConfig("; ".join(problems))
        return self

    def to_json(self) -> dict:
        return asdict(self)


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    H = cfg.lstm_units
    shapes = {"fc.W": (cfg.input_dim, cfg.fused_dim), "fc.b": (cfg.fused_dim,)}
    for k in range(cfg.lstm_layers):
        n_in = cfg.fused_dim if k == 0 else H
        shapes[f"lstm{k}.Wx"] = (n_in, 4 * H)
        shapes[f"lstm{k}.Wh"] = (H, 4 * H)
        shapes[f"lstm{k}.b"] = (4 * H,)
    shapes["cls.W"] = (H, cfg.num_classes)
    shapes["cls.b"] = (cfg.num_classes,)
    return shapes


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0), repr=False)
    training_mode: bool = False

    @property
    def dtype(self):
        return self.params["fc.W"].dtype

    def parameter_names(self) -> list[str]:
        return list(self.params)

    def copy(self) -> "ModelState":
        return ModelState(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            copy.deepcopy(self.rng),
            self.training_mode,
        )

    def astype(self, dtype) -> "ModelState":
        out = self.copy()
        out.params = {k: v.astype(dtype) for k, v in out.params.items()}
        out.buffers = {k: v.astype(dtype) for k, v in out.buffers.items()}
        return out

    def set_normalization(self, shift: np.ndarray, scale: np.ndarray) -> None:
        dt = self.dtype
        self.buffers["norm.shift"] = np.asarray(shift, dtype=dt).reshape(self.config.input_dim)
        self.buffers["norm.scale"] = np.asarray(scale, dtype=dt).reshape(self.config.input_dim)

    def check_shapes(self) -> None:
        for name, shape in _param_shapes(self.config).items():
            if name not in self.params or self.params[name].shape != shape:
                got = self.params.get(name, np.empty(0)).shape
                raise ShapeMismatch(f"parameter {name}: expected {shape}, got {got}")


def init_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelState:
    """Uniform fan-in init ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``; biases zero, forget-gate bias 1."""
    config.validate()
    rng = np.random.default_rng(seed)
    params = {}
    H = config.lstm_units
    for name, shape in _param_shapes(config).items():
        if name.endswith(".b"):
            b = np.zeros(shape)
            if name.startswith("lstm"):
                b[H:2 * H] = 1.0
            params[name] = b.astype(dtype)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    buffers = {
        "norm.shift": np.zeros(config.input_dim, dtype=dtype),
        "norm.scale": np.ones(config.input_dim, dtype=dtype),
    }
    return ModelState(config, params, buffers, np.random.default_rng([seed, 1]))


# ---------------------------------------------------------------------------
# forward / backward


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def _as_batch(state: ModelState, features) -> tuple[np.ndarray, bool]:
    X = getattr(features, "vectors", features)
    X = np.asarray(X)
    single = X.ndim == 2
    if single:
        X = X[None]
    cfg = state.config
    if X.ndim != 3 or X.shape[2] != cfg.input_dim:
        raise ShapeMismatch(f"features must be (L, {cfg.input_dim}) or (B, L, {cfg.input_dim}), got {X.shape}")
    if X.shape[1] != cfg.seq_len:
        raise ShapeMismatch(f"sequence length {X.shape[1]} != configured {cfg.seq_len}")
    return X, single


def _dropout_mask(rng: np.random.Generator, shape, keep: float, dtype) -> np.ndarray | None:
    if keep >= 1.0:
        return None
    return ((rng.random(shape) < keep) / keep).astype(dtype)


def forward_batch(state: ModelState, X: np.ndarray, training: bool = False,
                  rng: np.random.Generator | None = None) -> tuple[np.ndarray, dict]:
    """Class probabilities ``(B, 2)`` and the activations needed by :func:`backward`.

    Dropout (inverted, so inference needs no rescaling) is applied only when
    ``training``; masks are drawn from ``rng`` or, failing that, ``state.rng``.
    """
    cfg, P = state.config, state.params
    dt = state.dtype
    X = np.asarray(X, dtype=dt)
    B, L, _ = X.shape
    H = cfg.lstm_units
    rng = rng if rng is not None else state.rng

    Xn = (X - state.buffers["norm.shift"]) * state.buffers["norm.scale"]
    A = Xn @ P["fc.W"] + P["fc.b"]
    m_fc = _dropout_mask(rng, A.shape, cfg.fc_dropout_keep, dt) if training else None
    h_in = A * m_fc if m_fc is not None else A
    cache = {"Xn": Xn, "m_fc": m_fc, "layers": []}

    for k in range(cfg.lstm_layers):
        Wx, Wh, b = P[f"lstm{k}.Wx"], P[f"lstm{k}.Wh"], P[f"lstm{k}.b"]
        Zx = h_in @ Wx + b
        h = np.zeros((B, H), dtype=dt)
        c = np.zeros((B, H), dtype=dt)
        gates = np.empty((B, L, 4 * H), dtype=dt)
        cs = np.empty((B, L + 1, H), dtype=dt)
        hs = np.empty((B, L + 1, H), dtype=dt)
        tcs = np.empty((B, L, H), dtype=dt)
        cs[:, 0], hs[:, 0] = c, h
        for t in range(L):
            z = Zx[:, t] + h @ Wh
            i = _sigmoid(z[:, :H])
            f = _sigmoid(z[:, H:2 * H])
            g = np.tanh(z[:, 2 * H:3 * H])
            o = _sigmoid(z[:, 3 * H:])
            c = f * c + i * g
            tc = np.tanh(c)
            h = o * tc
            gates[:, t] = np.concatenate([i, f, g, o], axis=1)
            cs[:, t + 1], hs[:, t + 1], tcs[:, t] = c, h, tc
        out = hs[:, 1:]
        m = _dropout_mask(rng, out.shape, cfg.lstm_dropout_keep, dt) if training else None
        cache["layers"].append({"h_in": h_in, "gates": gates, "cs": cs, "hs": hs, "tcs": tcs, "mask": m})
        h_in = out * m if m is not None else out

    last = h_in[:, -1]
    logits = last @ P["cls.W"] + P["cls.b"]
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    probs = e / e.sum(axis=1, keepdims=True)
    cache["last"] = last
    return probs, cache


def backward(state: ModelState, cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter, given ``dloss/dlogits``."""
    cfg, P = state.config, state.params
    H = cfg.lstm_units
    grads = {"cls.W": cache["last"].T @ dlogits, "cls.b": dlogits.sum(axis=0)}
    top = cache["layers"][-1]["hs"]
    d_out = np.zeros(top[:, 1:].shape, dtype=dlogits.dtype)
    d_out[:, -1] = dlogits @ P["cls.W"].T

    for k in reversed(range(cfg.lstm_layers)):
        lc = cache["layers"][k]
        Wx, Wh = P[f"lstm{k}.Wx"], P[f"lstm{k}.Wh"]
        if lc["mask"] is not None:
            d_out = d_out * lc["mask"]
        B, L, _ = d_out.shape
        dZ = np.empty((B, L, 4 * H), dtype=d_out.dtype)
        dh_next = np.zeros((B, H), dtype=d_out.dtype)
        dc_next = np.zeros((B, H), dtype=d_out.dtype)
        dWh = np.zeros_like(Wh)
        for t in reversed(range(L)):
            gt = lc["gates"][:, t]
            i, f, g, o = gt[:, :H], gt[:, H:2 * H], gt[:, 2 * H:3 * H], gt[:, 3 * H:]
            tc, c_prev, h_prev = lc["tcs"][:, t], lc["cs"][:, t], lc["hs"][:, t]
            dh = d_out[:, t] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dz = np.concatenate([
                dc * g * i * (1.0 - i),
                dc * c_prev * f * (1.0 - f),
                dc * i * (1.0 - g * g),
                dh * tc * o * (1.0 - o),
            ], axis=1)
            dZ[:, t] = dz
            dWh += h_prev.T @ dz
            dh_next = dz @ Wh.T
            dc_next = dc * f
        h_in = lc["h_in"]
        grads[f"lstm{k}.Wx"] = np.einsum("bti,btj->ij", h_in, dZ)
        grads[f"lstm{k}.Wh"] = dWh
        grads[f"lstm{k}.b"] = dZ.sum(axis=(0, 1))
        d_out = dZ @ Wx.T

    if cache["m_fc"] is not None:
        d_out = d_out * cache["m_fc"]
    grads["fc.W"] = np.einsum("bti,btj->ij", cache["Xn"], d_out)
    grads["fc.b"] = d_out.sum(axis=(0, 1))
    return grads


def forward(state: ModelState, features, training: bool = False,
            rng: np.random.Generator | None = None) -> np.ndarray:
    """``[P(stable), P(slip)]`` for one sequence, or ``(B, 2)`` for a batch."""
    X, single = _as_batch(state, features)
    probs, _ = forward_batch(state, X, training, rng)
    return probs[0] if single else probs


def predict_label(state: ModelState, features) -> tuple[Label, float]:
    p = float(forward(state, features)[Label.SLIP])
    return decide(p), p


def decide(p_slip: float) -> Label:
    # exact ties go to SLIP: a false alarm costs less than a dropped object
    return Label.SLIP if p_slip >= 0.5 else Label.STABLE


def predict_proba(state: ModelState, X: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """P(slip) for every row of ``X`` (inference mode)."""
    X, _ = _as_batch(state, X)
    out = [forward_batch(state, X[i:i + batch_size])[0][:, 1] for i in range(0, len(X), batch_size)]
    return np.concatenate(out) if out else np.zeros(0)


# ---------------------------------------------------------------------------
# checkpoints


def _arrays(state: ModelState) -> dict[str, np.ndarray]:
    return {**state.params, **{f"buffer:{k}": v for k, v in state.buffers.items()}}


def checkpoint_bytes(state: ModelState) -> bytes:
    """Serialise to ``SLPFCKPT | u16 version | u32 len | config JSON | arrays | sha256``."""
    buf = io.BytesIO()
    meta = json.dumps({"config": state.config.to_json()}, sort_keys=True).encode()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<HI", CKPT_VERSION, len(meta)))
    buf.write(meta)
    arrays = _arrays(state)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        raw = name.encode()
        a = np.ascontiguousarray(arr, dtype="<f4")
        buf.write(struct.pack("<HB", len(raw), a.ndim))
        buf.write(raw)
        buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
        buf.write(a.tobytes())
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def save_checkpoint(state: ModelState, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(state))
    tmp.replace(path)
    return path


def state_from_bytes(data: bytes) -> ModelState:
    if len(data) < len(CKPT_MAGIC) + 32 or not data.startswith(CKPT_MAGIC):
        raise CheckpointError("not a slipfuse checkpoint")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch")
    pos = len(CKPT_MAGIC)
    version, n_meta = struct.unpack_from("<HI", body, pos)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos += 6
    meta = json.loads(body[pos:pos + n_meta])
    pos += n_meta
    (n_arrays,) = struct.unpack_from("<I", body, pos)
    pos += 4
    params, buffers = {}, {}
    for _ in range(n_arrays):
        n_name, ndim = struct.unpack_from("<HB", body, pos)
        pos += 3
        name = body[pos:pos + n_name].decode()
        pos += n_name
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * count
        if name.startswith("buffer:"):
            buffers[name[len("buffer:"):]] = arr
        else:
            params[name] = arr
    state = ModelState(ModelConfig(**meta["config"]), params, buffers)
    state.check_shapes()
    return state


def load_checkpoint(path: str | Path) -> ModelState:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return state_from_bytes(path.read_bytes())

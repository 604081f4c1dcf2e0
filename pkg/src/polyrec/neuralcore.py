"""Dense MLPs with hand-written backprop, AdamW, plateau LR decay, and
finite-difference gradient checks. Everything is float64 numpy."""
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels


@dataclass
class MLP:
    """ReLU on every hidden layer, linear output. ``weights[l]`` is (out, in)."""

    weights: list
    biases: list

    @property
    def dims(self):
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self):
        return MLP([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def _as_rng(rng):
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def mlp_init(layer_dims, seed=0):
    """Uniform(+-sqrt(6/fan_in)) weights, zero biases."""
    dims = list(layer_dims)
    if len(dims) < 2 or any(int(d) != d or d < 1 for d in dims):
        raise ValueError(f"layer dims must be >= 2 positive integers, got {dims}")
    rng = _as_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = math.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MLP(weights, biases)


@dataclass
class MLPCache:
    inputs: list  # input seen by each layer (post-dropout for hidden layers)
    preacts: list  # hidden pre-activations
    masks: list  # scaled dropout masks, None when dropout was off
    squeeze: bool


def mlp_forward(mlp, x, dropout=0.0, training=False, rng=None):
    """Return ``(output, cache)``. Inverted dropout follows each hidden ReLU in training."""
    if not 0.0 <= dropout < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {dropout}")
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != mlp.weights[0].shape[1]:
        raise ValueError(f"input has shape {x.shape}, expected (*, {mlp.weights[0].shape[1]})")
    use_dropout = training and dropout > 0.0
    if use_dropout and rng is None:
        raise ValueError("training with dropout needs an rng")
    inputs, preacts, masks = [], [], []
    h = x
    last = len(mlp.weights) - 1
    for l, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        inputs.append(h)
        z = h @ w.T + b
        if l == last:
            h = z
            break
        preacts.append(z)
        h = np.maximum(z, 0.0)
        if use_dropout:
            m = (rng.random(h.shape) >= dropout) / (1.0 - dropout)
            h = h * m
            masks.append(m)
        else:
            masks.append(None)
    cache = MLPCache(inputs, preacts, masks, squeeze)
    return (h[0] if squeeze else h), cache


def mlp_backward(mlp, cache, grad_output, need_input_grad=True):
    """Return ``(grads, grad_input)``; grads are ordered like ``mlp.params()``."""
    g = np.asarray(grad_output, dtype=np.float64)
    if cache.squeeze and g.ndim == 1:
        g = g[None, :]
    expected = (cache.inputs[0].shape[0], mlp.weights[-1].shape[0])
    if g.shape != expected:
        raise ValueError(f"grad_output has shape {g.shape}, expected {expected}")
    grads = [None] * (2 * len(mlp.weights))
    for l in range(len(mlp.weights) - 1, -1, -1):
        a = cache.inputs[l]
        grads[2 * l] = g.T @ a
        grads[2 * l + 1] = g.sum(axis=0)
        if l == 0 and not need_input_grad:
            return grads, None
        g = g @ mlp.weights[l]
        if l > 0:
            m = cache.masks[l - 1]
            if m is not None:
                g = g * m
            g = g * (cache.preacts[l - 1] > 0.0)
    return grads, (g[0] if cache.squeeze else g)


@dataclass
class AdamW:
    """Optimizer state; moments are created lazily on the first step."""

    lr: float = 1e-3
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adamw_step(params, grads, state):
    """In-place AdamW update with decoupled weight decay."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"grad shape {g.shape} does not match param shape {p.shape}")
        if not np.isfinite(g).all():
            raise FloatingPointError("non-finite gradient")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        kernels.adamw_update(p.reshape(-1), np.ascontiguousarray(g, dtype=np.float64).reshape(-1),
                             m.reshape(-1), v.reshape(-1), state.lr, state.beta1, state.beta2,
                             state.eps, state.weight_decay, c1, c2)
    return params, state


@dataclass
class PlateauScheduler:
    lr: float
    factor: float = 0.5
    patience: int = 5
    min_lr: float = 1e-7
    best: float = math.inf
    num_bad: int = 0

    def __post_init__(self):
        if not 0.0 < self.factor < 1.0:
            raise ValueError("factor must lie in (0, 1)")
        if not self.min_lr > 0:
            raise ValueError("min_lr must be positive")

    def step(self, val_loss):
        return plateau_step(self, val_loss)


def plateau_step(state, val_loss):
    """Reduce ``state.lr`` by ``factor`` after more than ``patience`` stale epochs.

    The rate never drops below ``min_lr``, and a rate already at or below it
    (including a deliberate zero) is left alone.
    """
    if not math.isfinite(val_loss):
        raise ValueError(f"validation loss must be finite, got {val_loss}")
    if val_loss < state.best - 1e-8:
        state.best = val_loss
        state.num_bad = 0
    else:
        state.num_bad += 1
        if state.num_bad > state.patience:
            if state.lr > state.min_lr:
                state.lr = max(state.lr * state.factor, state.min_lr)
            state.num_bad = 0
    return state


def gradient_check(loss_fn, params, analytic, eps=1e-5, n_samples=None, rng=None, floor=1e-6):
    """Max relative error between ``analytic`` and central differences of ``loss_fn``.

    ``loss_fn()`` is re-evaluated after perturbing each coordinate of ``params`` in
    place. Relative error is ``|a - n| / max(|n|, floor)``. With ``n_samples`` only
    that many coordinates per parameter array are checked.
    """
    rng = _as_rng(rng)
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.reshape(-1)
        aflat = np.asarray(a).reshape(-1)
        coords = np.arange(flat.size)
        if n_samples is not None and n_samples < flat.size:
            coords = rng.choice(flat.size, size=n_samples, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn()
            flat[i] = orig - eps
            down = loss_fn()
            flat[i] = orig
            num = (up - down) / (2.0 * eps)
            err = abs(aflat[i] - num) / max(abs(num), floor)
            worst = max(worst, err)
    return worst


# --- checkpoints ---------------------------------------------------------
#
#   4s  b"PWTS" | u32 version | u16 len + utf-8 architecture tag
#   u32 len + utf-8 JSON descriptor (sorted keys)
#   u32 net count, then per net: u16 len + name, u32 n_dims, u32 dims...,
#   then per layer: weight (out x in) and bias, row-major little-endian f64

CKPT_MAGIC = b"PWTS"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _pack_str(s, fmt):
    raw = s.encode("utf-8")
    return struct.pack(fmt, len(raw)) + raw


def save_checkpoint(path, arch_tag, nets, descriptor=None):
    """Write named MLPs plus a JSON descriptor. Output is byte-deterministic."""
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), _pack_str(arch_tag, "<H"),
             _pack_str(json.dumps(descriptor or {}, sort_keys=True), "<I"),
             struct.pack("<I", len(nets))]
    for name, mlp in nets.items():
        dims = mlp.dims
        parts.append(_pack_str(name, "<H"))
        parts.append(struct.pack(f"<I{len(dims)}I", len(dims), *dims))
        for w, b in zip(mlp.weights, mlp.biases):
            parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
            parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, buf, path):
        self.buf, self.off, self.path = buf, 0, path

    def take(self, n):
        if self.off + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def string(self, fmt):
        (n,) = self.unpack(fmt)
        return self.take(n).decode("utf-8")


def load_checkpoint(path):
    """Return ``(arch_tag, nets, descriptor)``."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), path)
    if r.take(4) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a PWTS checkpoint")
    (version,) = r.unpack("<I")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    arch = r.string("<H")
    descriptor = json.loads(r.string("<I"))
    (n_nets,) = r.unpack("<I")
    nets = {}
    for _ in range(n_nets):
        name = r.string("<H")
        (n_dims,) = r.unpack("<I")
        dims = r.unpack(f"<{n_dims}I")
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            w = np.frombuffer(r.take(8 * fan_in * fan_out), dtype="<f8").reshape(fan_out, fan_in)
            b = np.frombuffer(r.take(8 * fan_out), dtype="<f8")
            weights.append(w.astype(np.float64))
            biases.append(b.astype(np.float64))
        nets[name] = MLP(weights, biases)
    if r.off != len(r.buf):
        raise CheckpointError(f"{path}: {len(r.buf) - r.off} trailing bytes")
    return arch, nets, descriptor

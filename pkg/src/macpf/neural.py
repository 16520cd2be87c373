"""Small feedforward networks with hand-written reverse mode, Adam, and checkpoints."""

from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .numerics import RngStream

CHECKPOINT_MAGIC = "macpf-checkpoint"
CHECKPOINT_VERSION = 1

ACTIVATIONS = ("relu", "elu", "tanh", "identity")

# Multiplies every parameter gradient; only the verification harness changes it.
_BACKPROP_SIGN = 1.0


@contextmanager
def sign_flipped_backprop():
    """Deliberately break reverse mode (for checking that gradient checks catch faults)."""
    global _BACKPROP_SIGN
    _BACKPROP_SIGN = -1.0
    try:
        yield
    finally:
        _BACKPROP_SIGN = 1.0


@dataclass(frozen=True)
class MLPSpec:
    widths: tuple[int, ...]
    activation: str = "relu"
    output_activation: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2 or any(w <= 0 for w in self.widths):
            raise ValueError(f"need at least one layer with positive widths, got {self.widths}")
        for act in (self.activation, self.output_activation):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        out = []
        for l, (a, b) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            out.append((f"W{l}", (a, b)))
            out.append((f"b{l}", (b,)))
        return out

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.layout)


class ParameterArray:
    """Flat float64 vector carved into named, contiguous slices."""

    def __init__(self):
        self.slices: dict[str, tuple[int, tuple[int, ...]]] = {}
        self.size = 0
        self.data = np.zeros(0)

    def add(self, name: str, shape) -> None:
        if name in self.slices:
            raise ValueError(f"duplicate slice {name!r}")
        shape = tuple(int(s) for s in shape)
        self.slices[name] = (self.size, shape)
        self.size += int(np.prod(shape))
        self.data = np.concatenate([self.data, np.zeros(int(np.prod(shape)))])

    def span(self, name: str) -> slice:
        off, shape = self.slices[name]
        return slice(off, off + int(np.prod(shape)))

    def view(self, name: str, data: np.ndarray | None = None) -> np.ndarray:
        off, shape = self.slices[name]
        src = self.data if data is None else data
        return src[self.span(name)].reshape(shape)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.slices if n.startswith(prefix)]

    def mask(self, prefixes) -> np.ndarray:
        """Boolean mask over the flat vector selecting slices with any of ``prefixes``."""
        m = np.zeros(self.size, dtype=bool)
        for name in self.slices:
            if any(name.startswith(p) for p in prefixes):
                m[self.span(name)] = True
        return m

    def copy(self) -> "ParameterArray":
        out = ParameterArray()
        out.slices = dict(self.slices)
        out.size = self.size
        out.data = self.data.copy()
        return out

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(n, shape) for n, (_, shape) in self.slices.items()]


# --- activations ---------------------------------------------------------------

def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "elu":
        return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray | None:
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "elu":
        return np.where(z > 0, 1.0, a + 1.0)
    if name == "tanh":
        return 1.0 - a * a
    return None


# --- MLP -----------------------------------------------------------------------

def _unpack(spec: MLPSpec, params: np.ndarray):
    if params.shape != (spec.n_params,):
        raise ValueError(f"expected {spec.n_params} parameters, got shape {params.shape}")
    out, off = [], 0
    for a, b in zip(spec.widths[:-1], spec.widths[1:]):
        W = params[off:off + a * b].reshape(a, b)
        off += a * b
        out.append((W, params[off:off + b]))
        off += b
    return out


def init_mlp(spec: MLPSpec, rng: RngStream, zero_output: bool = False) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    chunks = []
    for l, (a, b) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        bound = 1.0 / np.sqrt(a)
        last = l == spec.n_layers - 1
        scale = 0.0 if (zero_output and last) else 1.0
        chunks.append(scale * rng.uniform(-bound, bound, size=a * b))
        chunks.append(scale * rng.uniform(-bound, bound, size=b))
    return np.concatenate(chunks)


@dataclass
class MLPCache:
    inputs: list[np.ndarray]  # input of each layer
    pre: list[np.ndarray]  # pre-activations
    post: list[np.ndarray]  # activations
    squeeze: bool


def mlp_forward(spec: MLPSpec, params: np.ndarray, x) -> tuple[np.ndarray, MLPCache]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.widths[0]:
        raise ValueError(f"input width {x.shape[-1]} != {spec.widths[0]}")
    layers = _unpack(spec, params)
    cache = MLPCache([], [], [], squeeze)
    h = x
    for l, (W, b) in enumerate(layers):
        cache.inputs.append(h)
        z = h @ W + b
        act = spec.output_activation if l == len(layers) - 1 else spec.activation
        h = _act(act, z)
        cache.pre.append(z)
        cache.post.append(h)
    return (h[0] if squeeze else h), cache


def mlp_backward(spec: MLPSpec, params: np.ndarray, cache: MLPCache, grad_out) -> tuple[np.ndarray, np.ndarray]:
    """Return (gradient w.r.t. the flat parameters, gradient w.r.t. the input)."""
    g = np.asarray(grad_out, dtype=np.float64)
    if cache.squeeze:
        g = g[None, :]
    if g.shape != cache.post[-1].shape:
        raise ValueError(f"upstream gradient shape {g.shape} != output shape {cache.post[-1].shape}")
    layers = _unpack(spec, params)
    grads = []
    for l in range(len(layers) - 1, -1, -1):
        W, _ = layers[l]
        act = spec.output_activation if l == len(layers) - 1 else spec.activation
        d = _act_grad(act, cache.pre[l], cache.post[l])
        if d is not None:
            g = g * d
        grads.append(g.sum(0))
        grads.append((cache.inputs[l].T @ g).ravel())
        g = g @ W.T
    grads.reverse()
    flat = np.concatenate(grads)
    if _BACKPROP_SIGN != 1.0:
        flat = _BACKPROP_SIGN * flat
    return flat, (g[0] if cache.squeeze else g)


# --- Adam ----------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, lr: float = 3e-4, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, lr, **kw)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """Bias-corrected Adam update. Updates ``params`` and ``state`` in place and returns both."""
    if grads.shape != params.shape or state.m.shape != params.shape:
        raise ValueError("params, grads and moments must share a shape")
    state.t += 1
    state.m *= state.beta1
    state.m += (1 - state.beta1) * grads
    state.v *= state.beta2
    state.v += (1 - state.beta2) * grads * grads
    m_hat = state.m / (1 - state.beta1**state.t)
    v_hat = state.v / (1 - state.beta2**state.t)
    params -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


# --- finite differences ----------------------------------------------------------

@dataclass
class GradientCheckReport:
    indices: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    rel_errors: np.ndarray
    tolerance: float
    worst: float = field(init=False)

    def __post_init__(self):
        self.worst = float(self.rel_errors.max()) if self.rel_errors.size else 0.0

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance


def relative_error(a, b, floor: float = 1e-6) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def finite_difference_check(loss_fn: Callable[[np.ndarray], float], params: np.ndarray,
                            analytic_grad: np.ndarray, sample_size: int = 32,
                            tolerance: float = 1e-4, rng: RngStream | None = None,
                            candidates: np.ndarray | None = None, h: float = 1e-5) -> GradientCheckReport:
    """Compare ``analytic_grad`` with central differences on sampled coordinates.

    ``candidates`` restricts the sampled coordinates (e.g. to the slices a
    loss is allowed to update).
    """
    params = np.array(params, dtype=np.float64)
    pool = np.arange(params.size) if candidates is None else np.asarray(candidates)
    if rng is None:
        rng = RngStream(0)
    k = min(sample_size, pool.size)
    idx = np.sort(pool[rng.choice(pool.size, size=k, replace=False)])
    numeric = np.empty(k)
    for j, i in enumerate(idx):
        old = params[i]
        params[i] = old + h
        f_plus = loss_fn(params)
        params[i] = old - h
        f_minus = loss_fn(params)
        params[i] = old
        numeric[j] = (f_plus - f_minus) / (2 * h)
    analytic = np.asarray(analytic_grad)[idx]
    return GradientCheckReport(idx, analytic, numeric, relative_error(analytic, numeric), tolerance)


# --- checkpoints -----------------------------------------------------------------

def save_checkpoint(path, params: ParameterArray, manifest: dict | None = None, extra: dict | None = None) -> None:
    """Text header (magic line + JSON layout) followed by little-endian float64 payloads.

    ``extra`` maps names to additional flat arrays of the same layout
    (e.g. target copies), stored after the main vector.
    """
    extra = extra or {}
    header = {
        "version": CHECKPOINT_VERSION,
        "slices": [[n, list(shape)] for n, shape in params.layout()],
        "size": params.size,
        "arrays": ["params", *extra.keys()],
        "manifest": manifest or {},
    }
    with open(path, "wb") as fh:
        fh.write(f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n".encode())
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        for arr in [params.data, *extra.values()]:
            arr = np.asarray(arr, dtype="<f8")
            if arr.shape != (params.size,):
                raise ValueError("extra arrays must match the parameter layout")
            fh.write(arr.tobytes())


def load_checkpoint(path, expected: ParameterArray | None = None) -> tuple[ParameterArray, dict, dict]:
    """Return (params, manifest, extra arrays); rejects version or layout mismatch."""
    raw = Path(path).read_bytes()
    first, rest = raw.split(b"\n", 1)
    magic, _, version = first.decode().partition(" ")
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    if version != str(CHECKPOINT_VERSION):
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header_line, payload = rest.split(b"\n", 1)
    header = json.loads(header_line)
    if header["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: header version mismatch")
    params = ParameterArray()
    for name, shape in header["slices"]:
        params.add(name, shape)
    if expected is not None and expected.layout() != params.layout():
        raise ValueError(f"{path}: parameter layout does not match")
    n = params.size
    names = header["arrays"]
    if len(payload) != 8 * n * len(names):
        raise ValueError(f"{path}: payload size mismatch")
    arrays = np.frombuffer(payload, dtype="<f8").reshape(len(names), n).astype(np.float64)
    params.data = arrays[0].copy()
    extra = {name: arrays[i].copy() for i, name in enumerate(names) if i > 0}
    return params, header["manifest"], extra

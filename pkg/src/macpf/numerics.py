"""Stable probability primitives and seedable random streams."""

from __future__ import annotations

import zlib

import numpy as np


class RngStream:
    """Counter-based (Philox) random stream.

    Streams are derived from a 64-bit seed plus a path of component names, so
    ``RngStream(7).split("env")`` yields the same draws no matter which other
    components have been split off the same root.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.path = tuple(path)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self.generator = np.random.Generator(np.random.Philox(seq))

    def split(self, name: str) -> "RngStream":
        return RngStream(self.seed, self.path + (zlib.crc32(name.encode("utf-8")),))

    def random(self, size=None):
        return self.generator.random(size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size=size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def exponential(self, scale=1.0, size=None):
        return self.generator.exponential(scale, size)

    def choice(self, n: int, size=None, replace=True):
        return self.generator.choice(n, size=size, replace=replace)


def _check_temperature(temperature: float) -> None:
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")


def log_sum_exp(values, temperature: float = 1.0, axis=None):
    """Return ``temperature * log(sum(exp(values / temperature)))``.

    With ``axis=None`` a 1-D input reduces to a float; otherwise the named
    axis is reduced.
    """
    _check_temperature(temperature)
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("log_sum_exp of an empty array")
    if axis is None:
        v = v.ravel()
        m = v.max()
        return float(m + temperature * np.log(np.exp((v - m) / temperature).sum()))
    m = v.max(axis=axis, keepdims=True)
    out = m + temperature * np.log(np.exp((v - m) / temperature).sum(axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def softmax(logits, temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    _check_temperature(temperature)
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise ValueError("softmax of an empty array")
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax logits must be finite")
    z = (z - z.max(axis=axis, keepdims=True)) / temperature
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    _check_temperature(temperature)
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def sample_categorical(dist, rng: RngStream) -> int:
    p = np.asarray(dist, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("distribution must be a nonempty vector")
    if np.any(p < 0) or not np.all(np.isfinite(p)) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"invalid distribution {p!r}")
    cdf = np.cumsum(p)
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(idx, int(np.flatnonzero(p)[-1]))


def sample_categorical_rows(probs: np.ndarray, rng: RngStream) -> np.ndarray:
    """Draw one index per row of a (B, K) probability matrix."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0])[:, None] * cdf[:, -1:]
    return np.minimum((cdf <= u).sum(axis=1), probs.shape[1] - 1)

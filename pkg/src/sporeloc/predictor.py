"""Graph-smoothed windowed-affine demand predictor.

Two stacked blocks, each ``neighborhood average -> affine map over the
time axis -> ReLU``.  The affine map sees both a grid's own features and
their neighborhood mean::

    H   = relu(W1 @ X + V1 @ (X S') + b1)      # (hidden, N)
    out = relu(w2 @ H + v2 @ (H S') + b2)      # (N,)

where ``X`` is the (m, N) history window and ``S`` the row-normalized
adjacency (self-loops included).  Weights are shared by all grids.  Inputs
are multiplied by a fixed ``input_scale`` and outputs divided by it, so the
trainable weights stay O(1) whatever the demand level.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LAYERS = ("W1", "V1", "b1", "w2", "v2", "b2")


class Adjacency:
    """Symmetric neighbor lists over ``N`` grids; every grid is its own neighbor."""

    def __init__(self, neighbors):
        nbrs = [sorted(set(int(j) for j in row)) for row in neighbors]
        n = len(nbrs)
        if n == 0:
            raise ValueError("adjacency needs at least one grid")
        for i, row in enumerate(nbrs):
            for j in row:
                if not 0 <= j < n:
                    raise ValueError(f"grid {i} lists neighbor {j} outside 0..{n - 1}")
                if i not in nbrs[j] and i != j:
                    raise ValueError(f"adjacency not symmetric: {i}->{j} but not {j}->{i}")
            if i not in row:
                row.append(i)
                row.sort()
        self.neighbors = tuple(tuple(r) for r in nbrs)
        self.n = n
        S = np.zeros((n, n))
        for i, row in enumerate(self.neighbors):
            S[i, list(row)] = 1.0 / len(row)
        self.matrix = S

    @classmethod
    def from_edges(cls, n: int, edges) -> "Adjacency":
        nbrs = [[i] for i in range(n)]
        for i, j in edges:
            nbrs[i].append(j)
            nbrs[j].append(i)
        return cls(nbrs)

    def to_list(self) -> list:
        return [list(r) for r in self.neighbors]


@dataclass
class PredictorWeights:
    """Trainable arrays keyed by layer name plus the fixed ``input_scale``."""

    params: dict
    input_scale: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        missing = [k for k in LAYERS if k not in self.params]
        if missing:
            raise ValueError(f"missing layers {missing}")
        self.params = {k: np.asarray(self.params[k], dtype=np.float64) for k in LAYERS}
        h, m = self.params["W1"].shape
        expect = {"V1": (h, m), "b1": (h,), "w2": (h,), "v2": (h,), "b2": ()}
        for k, shape in expect.items():
            if self.params[k].shape != shape:
                raise ValueError(f"{k} has shape {self.params[k].shape}, expected {shape}")
        if not self.input_scale > 0:
            raise ValueError("input_scale must be positive")
        self.check_finite()

    @property
    def hidden(self) -> int:
        return self.params["W1"].shape[0]

    @property
    def window(self) -> int:
        return self.params["W1"].shape[1]

    @property
    def size(self) -> int:
        return sum(v.size for v in self.params.values())

    def check_finite(self):
        for k, v in self.params.items():
            if not np.all(np.isfinite(v)):
                raise ValueError(f"non-finite entries in {k}")

    def copy(self) -> "PredictorWeights":
        return PredictorWeights({k: v.copy() for k, v in self.params.items()}, self.input_scale, dict(self.meta))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in LAYERS])

    def with_flat(self, vec) -> "PredictorWeights":
        vec = np.asarray(vec, dtype=np.float64)
        out, pos = {}, 0
        for k in LAYERS:
            shape = self.params[k].shape
            size = int(np.prod(shape))
            out[k] = vec[pos:pos + size].reshape(shape)
            pos += size
        if pos != vec.size:
            raise ValueError(f"flat vector has {vec.size} entries, expected {pos}")
        return PredictorWeights(out, self.input_scale, dict(self.meta))

    def to_dict(self) -> dict:
        return {
            "format": "sporeloc-predictor",
            "version": 1,
            "input_scale": self.input_scale,
            "meta": self.meta,
            "layers": {
                k: {"shape": list(self.params[k].shape), "data": self.params[k].ravel().tolist()}
                for k in LAYERS
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PredictorWeights":
        try:
            layers = data["layers"]
            params = {
                k: np.asarray(layers[k]["data"], dtype=np.float64).reshape(layers[k]["shape"])
                for k in LAYERS
            }
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed predictor checkpoint: {exc}") from exc
        return cls(params, float(data.get("input_scale", 1.0)), dict(data.get("meta", {})))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "PredictorWeights":
        return cls.from_dict(json.loads(Path(path).read_text()))


def init_weights(window: int = 12, hidden: int = 16, seed: int = 0, input_scale: float = 1.0) -> PredictorWeights:
    """Uniform init in ``[-r, r]`` with ``r = fan_in ** -0.5``."""
    if window < 1 or hidden < 1:
        raise ValueError("window and hidden must be >= 1")
    rng = np.random.default_rng(seed)
    r1, r2 = window ** -0.5, hidden ** -0.5
    params = {
        "W1": rng.uniform(-r1, r1, (hidden, window)),
        "V1": rng.uniform(-r1, r1, (hidden, window)),
        "b1": rng.uniform(-r1, r1, hidden),
        "w2": rng.uniform(-r2, r2, hidden),
        "v2": rng.uniform(-r2, r2, hidden),
        "b2": np.asarray(rng.uniform(-r2, r2)),
    }
    return PredictorWeights(params, input_scale, {"seed": int(seed)})


def _check_history(hist, adj: Adjacency, w: PredictorWeights) -> np.ndarray:
    X = np.asarray(hist, dtype=np.float64)
    single = X.ndim == 2
    if single:
        X = X[None]
    if X.ndim != 3:
        raise ValueError(f"history must be (m, N) or (B, m, N), got shape {np.shape(hist)}")
    if X.shape[1:] != (w.window, adj.n):
        raise ValueError(f"history window shape {X.shape[1:]}, expected {(w.window, adj.n)}")
    if not np.all(np.isfinite(X)):
        raise ValueError("history contains non-finite entries")
    return X, single


def _forward(X, adj: Adjacency, w: PredictorWeights):
    p, S = w.params, adj.matrix
    Xs = X * w.input_scale
    XS = Xs @ S.T
    Z1 = p["W1"] @ Xs + p["V1"] @ XS + p["b1"][None, :, None]
    H = np.maximum(Z1, 0.0)
    HS = H @ S.T
    Z2 = np.einsum("h,bhn->bn", p["w2"], H) + np.einsum("h,bhn->bn", p["v2"], HS) + p["b2"]
    return Xs, XS, H, HS, Z1, Z2


def predict(hist, adj: Adjacency, w: PredictorWeights) -> np.ndarray:
    """Next-interval free-vehicle forecast; batched if ``hist`` is (B, m, N)."""
    w.check_finite()
    X, single = _check_history(hist, adj, w)
    Z2 = _forward(X, adj, w)[-1]
    out = np.maximum(Z2, 0.0) / w.input_scale
    return out[0] if single else out


def predictor_vjp(hist, adj: Adjacency, w: PredictorWeights, upstream) -> dict:
    """Gradient of ``sum_b upstream_b . predict(hist_b)`` for every layer."""
    w.check_finite()
    X, single = _check_history(hist, adj, w)
    U = np.asarray(upstream, dtype=np.float64)
    if single:
        U = U[None]
    if U.shape != (X.shape[0], adj.n):
        raise ValueError(f"upstream has shape {np.shape(upstream)}, expected {(adj.n,)} per sample")
    S = adj.matrix
    p = w.params
    Xs, XS, H, HS, Z1, Z2 = _forward(X, adj, w)
    dZ2 = (U / w.input_scale) * (Z2 > 0)
    g = {
        "w2": np.einsum("bn,bhn->h", dZ2, H),
        "v2": np.einsum("bn,bhn->h", dZ2, HS),
        "b2": np.asarray(dZ2.sum()),
    }
    dZ2 = dZ2[:, None, :]
    dH = p["w2"][None, :, None] * dZ2 + (p["v2"][None, :, None] * dZ2) @ S
    dZ1 = dH * (Z1 > 0)
    g["W1"] = np.einsum("bhn,bmn->hm", dZ1, Xs)
    g["V1"] = np.einsum("bhn,bmn->hm", dZ1, XS)
    g["b1"] = dZ1.sum(axis=(0, 2))
    return g


def prediction_loss(pred, actual) -> float:
    """Sum of squared errors (no averaging)."""
    pred = np.asarray(pred, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if pred.shape != actual.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {actual.shape}")
    return float(np.sum((actual - pred) ** 2))


def persistence_predict(hist) -> np.ndarray:
    """Last observed row of the window."""
    X = np.asarray(hist, dtype=np.float64)
    if X.ndim < 2 or X.shape[-2] == 0:
        raise ValueError("history window is empty")
    return X[..., -1, :].copy()

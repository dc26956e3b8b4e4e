"""Reversible encoding of population rows for the tabular GAN.

Continuous columns use mode-specific normalisation: a 1-D Gaussian mixture
is fitted per column, each value is assigned to a mode and represented as a
scalar in [-1, 1] plus a one-hot mode indicator. Categorical columns are
one-hot encoded.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .schema import Categorical, RecordBatch, TabularSchema

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    history: tuple = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        for name in ("weights", "means", "stds"):
            arr = np.array(getattr(self, name), dtype=float).ravel()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (len(self.weights) == len(self.means) == len(self.stds)):
            raise ValueError("mixture parameter lengths differ")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be a probability vector")
        if np.any(self.stds <= 0):
            raise ValueError("mixture stds must be positive")

    @property
    def k(self) -> int:
        return len(self.weights)

    def log_component_densities(self, values) -> np.ndarray:
        """``log(w_c N(v; mu_c, sigma_c))`` with shape (n, k)."""
        v = np.asarray(values, dtype=float).reshape(-1, 1)
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        z = (v - self.means) / self.stds
        return logw - 0.5 * _LOG_2PI - np.log(self.stds) - 0.5 * z * z

    def responsibilities(self, values) -> np.ndarray:
        lp = self.log_component_densities(values)
        lp -= lp.max(axis=1, keepdims=True)
        p = np.exp(lp)
        return p / p.sum(axis=1, keepdims=True)

    def log_likelihood(self, values) -> float:
        lp = self.log_component_densities(values)
        m = lp.max(axis=1, keepdims=True)
        return float(np.sum(m[:, 0] + np.log(np.exp(lp - m).sum(axis=1))))

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "means": self.means.tolist(),
                "stds": self.stds.tolist()}

    @classmethod
    def from_dict(cls, d) -> "GaussianMixture":
        return cls(d["weights"], d["means"], d["stds"])


def std_floor(values) -> float:
    """Lower bound on component stds: 1e-4 of the data range (1e-4 if constant)."""
    v = np.asarray(values, dtype=float)
    rng = float(v.max() - v.min()) if v.size else 0.0
    return 1e-4 * (rng if rng > 0 else 1.0)


def fit_gmm(values, k: int, max_iter: int = 200, tol: float = 1e-6) -> GaussianMixture:
    """Fit a 1-D Gaussian mixture with ``k`` components by EM.

    Means start at evenly spaced quantiles of the distinct values, so the
    fit is deterministic. The returned mixture carries the log-likelihood
    after every iteration in ``history``.
    """
    x = np.asarray(values, dtype=float).ravel()
    if k < 1:
        raise ValueError("k must be >= 1")
    if not np.all(np.isfinite(x)):
        raise ValueError("values must be finite")
    uniq = np.unique(x)
    if k > uniq.size:
        raise ValueError(f"k={k} exceeds the number of distinct values ({uniq.size})")
    floor = std_floor(x)
    n = x.size

    means = np.quantile(uniq, (np.arange(k) + 0.5) / k)
    stds = np.full(k, max(x.std(), floor))
    weights = np.full(k, 1.0 / k)
    gm = GaussianMixture(weights, means, stds)
    history = [gm.log_likelihood(x)]

    for _ in range(max_iter):
        r = gm.responsibilities(x)
        nk = r.sum(axis=0)
        live = nk > 1e-12 * n
        new_means = gm.means.copy()
        new_stds = gm.stds.copy()
        new_means[live] = (r[:, live] * x[:, None]).sum(axis=0) / nk[live]
        var = (r[:, live] * (x[:, None] - new_means[live]) ** 2).sum(axis=0) / nk[live]
        new_stds[live] = np.maximum(np.sqrt(var), floor)
        w = nk / nk.sum()
        gm = GaussianMixture(w / w.sum(), new_means, new_stds)
        ll = gm.log_likelihood(x)
        gain = ll - history[-1]
        history.append(ll)
        if gain < tol:
            break
    return GaussianMixture(gm.weights, gm.means, gm.stds, history=tuple(history))


def gumbel_softmax(logits, tau: float, rng=None, noise=None):
    """Relaxed categorical sample ``softmax((logits + g) / tau)``.

    Works on the last axis. ``noise`` may supply the Gumbel draws directly,
    otherwise they come from ``rng``.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    logits = np.asarray(logits, dtype=float)
    if noise is None:
        rng = np.random.default_rng(rng)
        noise = rng.gumbel(size=logits.shape)
    y = (logits + noise) / tau
    y = y - y.max(axis=-1, keepdims=True)
    e = np.exp(y)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class Block:
    """A contiguous slice of the encoded vector."""
    column: int
    kind: str       # "scalar", "mode" or "category"
    start: int
    width: int

    @property
    def stop(self) -> int:
        return self.start + self.width

    @property
    def is_softmax(self) -> bool:
        return self.kind != "scalar"


class DataTransformer(TransformerMixin, BaseEstimator):
    """Encode ``RecordBatch`` rows into the GAN's numeric representation.

    Parameters
    ----------
    n_modes : int
        Mixture components per continuous column (reduced to the number of
        distinct values when a column has fewer).
    max_iter, tol : EM stopping rule.
    mode_sampling : {"sample", "argmax"}
        How ``transform`` picks each value's mode.
    random_state : int or None
        Seed for mode sampling.
    """

    def __init__(self, n_modes=10, max_iter=200, tol=1e-6, mode_sampling="sample",
                 random_state=None):
        self.n_modes = n_modes
        self.max_iter = max_iter
        self.tol = tol
        self.mode_sampling = mode_sampling
        self.random_state = random_state

    def fit(self, X, y=None, schema: TabularSchema | None = None):
        schema, rows = _rows_and_schema(X, schema)
        self.schema_ = schema
        self.mixtures_ = {}
        for j, (name, kind) in enumerate(schema.columns):
            if not isinstance(kind, Categorical):
                col = rows[:, j]
                k = min(self.n_modes, np.unique(col).size)
                self.mixtures_[name] = fit_gmm(col, k, self.max_iter, self.tol)
        self._layout()
        return self

    def _layout(self):
        blocks, pos = [], 0
        cond, cpos = [], 0
        for j, (name, kind) in enumerate(self.schema_.columns):
            if isinstance(kind, Categorical):
                width = len(kind.categories)
                blocks.append(Block(j, "category", pos, width))
                cond.append(Block(j, "category", cpos, width))
                pos += width
                cpos += width
            else:
                k = self.mixtures_[name].k
                blocks.append(Block(j, "scalar", pos, 1))
                blocks.append(Block(j, "mode", pos + 1, k))
                pos += 1 + k
        self.blocks_ = tuple(blocks)
        self.cond_blocks_ = tuple(cond)
        self.output_dim_ = pos
        self.cond_dim_ = cpos

    def category_block(self, column: int) -> Block:
        for b in self.blocks_:
            if b.column == column and b.kind == "category":
                return b
        raise KeyError(column)

    def transform(self, X, mode_sampling: str | None = None, rng=None):
        check_is_fitted(self, "blocks_")
        _, rows = _rows_and_schema(X, self.schema_)
        how = mode_sampling or self.mode_sampling
        if rng is None:
            rng = np.random.default_rng(self.random_state)
        out = np.zeros((rows.shape[0], self.output_dim_))
        for b in self.blocks_:
            col = rows[:, b.column]
            if b.kind == "category":
                out[np.arange(len(col)), b.start + col.astype(int)] = 1.0
            elif b.kind == "scalar":
                gm = self.mixtures_[self.schema_.columns[b.column][0]]
                r = gm.responsibilities(col)
                if how == "argmax":
                    m = np.argmax(r, axis=1)
                elif how == "sample":
                    u = rng.random(len(col))[:, None]
                    m = np.minimum((np.cumsum(r, axis=1) < u).sum(axis=1), gm.k - 1)
                else:
                    raise ValueError(f"unknown mode_sampling {how!r}")
                out[:, b.start] = np.clip((col - gm.means[m]) / (4.0 * gm.stds[m]), -1.0, 1.0)
                out[np.arange(len(col)), b.start + 1 + m] = 1.0
        return out

    def inverse_transform(self, X):
        """Decode encoded vectors back to schema rows (argmax per block)."""
        check_is_fitted(self, "blocks_")
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.output_dim_:
            raise ValueError(f"expected width {self.output_dim_}, got {X.shape[1]}")
        rows = np.zeros((X.shape[0], len(self.schema_.columns)))
        scalars = {}
        for b in self.blocks_:
            blk = X[:, b.start:b.stop]
            if b.kind == "category":
                rows[:, b.column] = np.argmax(blk, axis=1)
            elif b.kind == "scalar":
                scalars[b.column] = blk[:, 0]
            else:
                gm = self.mixtures_[self.schema_.columns[b.column][0]]
                m = np.argmax(blk, axis=1)
                s = np.clip(scalars[b.column], -1.0, 1.0)
                rows[:, b.column] = s * 4.0 * gm.stds[m] + gm.means[m]
        return rows

    # -- serialisation ---------------------------------------------------

    def to_dict(self) -> dict:
        check_is_fitted(self, "blocks_")
        return {
            "version": 1,
            "params": self.get_params(),
            "schema": self.schema_.to_dict(),
            "mixtures": {k: v.to_dict() for k, v in self.mixtures_.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    @classmethod
    def from_dict(cls, d) -> "DataTransformer":
        if d.get("version") != 1:
            raise ValueError("unsupported transformer document version")
        obj = cls(**d["params"])
        obj.schema_ = TabularSchema.from_dict(d["schema"])
        obj.mixtures_ = {k: GaussianMixture.from_dict(v) for k, v in d["mixtures"].items()}
        obj._layout()
        return obj

    @classmethod
    def from_json(cls, text: str) -> "DataTransformer":
        return cls.from_dict(json.loads(text))


def encode_row(row, encoder: DataTransformer, rng=None, deterministic: bool = False):
    """Encode a single schema row; see :meth:`DataTransformer.transform`."""
    how = "argmax" if deterministic else "sample"
    return encoder.transform(np.asarray(row, dtype=float)[None, :], how, rng)[0]


def decode_row(vector, encoder: DataTransformer):
    return encoder.inverse_transform(np.asarray(vector, dtype=float)[None, :])[0]


def _rows_and_schema(X, schema):
    if isinstance(X, RecordBatch):
        if schema is not None and schema != X.schema:
            raise ValueError("batch schema differs from the fitted schema")
        return X.schema, np.asarray(X.rows, dtype=float)
    if schema is None:
        raise ValueError("a schema is required when X is a plain array")
    rows = np.asarray(X, dtype=float)
    if rows.ndim != 2 or rows.shape[1] != len(schema.columns):
        raise ValueError(f"expected an (n, {len(schema.columns)}) array")
    if not np.all(np.isfinite(rows)):
        raise ValueError("input contains non-finite values")
    return schema, rows

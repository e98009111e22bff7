"""Lossy gradient compressors and the error-feedback update.

Every compressor here is a gamma-contraction: for every vector w,

    ||Q(w) - w||^2 <= gamma * ||w||^2        with 0 <= gamma < 1.

``top_k`` keeps the K largest-magnitude entries (gamma = (d-K)/d), ``one_bit``
replaces each sign class by its class mean (gamma = 1 - 1/d), and ``identity``
is the trivial gamma = 0 compressor.  ``ef_update`` is the single-node
error-feedback step used by the compressed distribution scheme: accumulate the
residual, compress the corrected step, carry the new residual forward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Compressor",
    "make_topk",
    "make_onebit",
    "make_identity",
    "parse_compressor",
    "ef_update",
]


def _topk_payload(w: np.ndarray, k: int) -> np.ndarray:
    # Stable sort on negated magnitudes: descending |w|, ties kept at the
    # lowest index.
    order = np.argsort(-np.abs(w), kind="stable")
    out = np.zeros_like(w)
    keep = order[:k]
    out[keep] = w[keep]
    return out


def _onebit_payload(w: np.ndarray) -> np.ndarray:
    out = np.empty_like(w)
    pos = w >= 0.0
    neg = ~pos
    if pos.any():
        out[pos] = w[pos].mean()
    if neg.any():
        out[neg] = w[neg].mean()
    return out


@dataclass(frozen=True)
class Compressor:
    """A gamma-contraction bound to a fixed dimension ``d``."""

    kind: str  # "topk" | "onebit" | "identity"
    d: int
    k: int = 0
    gamma: float = 0.0

    def compress(self, w: np.ndarray) -> np.ndarray:
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (self.d,):
            raise ValueError(f"expected vector of dim {self.d}, got shape {w.shape}")
        if self.kind == "identity":
            return w.copy()
        if self.kind == "topk":
            return _topk_payload(w, self.k)
        if self.kind == "onebit":
            return _onebit_payload(w)
        raise ValueError(f"unknown compressor kind {self.kind!r}")

    def compress_batch(self, rows: np.ndarray) -> np.ndarray:
        """Compress each row of a (n, d) matrix.

        Top-k and identity take vectorized paths that reproduce the
        per-vector results bit for bit (the row-wise stable argsort is the
        same computation); other kinds fall back to the per-row call.
        """
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[1] != self.d:
            raise ValueError(f"expected (n, {self.d}) rows, got shape {rows.shape}")
        if self.kind == "identity":
            return rows.copy()
        if self.kind == "topk":
            order = np.argsort(-np.abs(rows), axis=1, kind="stable")
            keep = order[:, : self.k]
            out = np.zeros_like(rows)
            np.put_along_axis(out, keep, np.take_along_axis(rows, keep, axis=1), axis=1)
            return out
        return np.stack([self.compress(row) for row in rows])

    def describe(self) -> str:
        if self.kind == "topk":
            return f"topk:{self.k}"
        return self.kind


def make_topk(k: int, d: int) -> Compressor:
    """Keep the K largest-magnitude entries; gamma = (d - K)/d."""
    if d < 1:
        raise ValueError("d must be >= 1")
    if k < 1:
        raise ValueError("K must be >= 1")
    k = min(k, d)
    return Compressor(kind="topk", d=d, k=k, gamma=(d - k) / d)


def make_onebit(d: int) -> Compressor:
    """Replace each sign class (w_i >= 0 vs w_i < 0) by its mean; gamma = 1 - 1/d."""
    if d < 1:
        raise ValueError("d must be >= 1")
    return Compressor(kind="onebit", d=d, gamma=1.0 - 1.0 / d)


def make_identity(d: int) -> Compressor:
    if d < 1:
        raise ValueError("d must be >= 1")
    return Compressor(kind="identity", d=d, gamma=0.0)


def parse_compressor(text: str, d: int) -> Compressor:
    """Parse the CLI/config syntax: ``topk:K``, ``onebit`` or ``identity``."""
    text = text.strip()
    if text == "onebit":
        return make_onebit(d)
    if text == "identity":
        return make_identity(d)
    if text.startswith("topk:"):
        try:
            k = int(text.split(":", 1)[1])
        except ValueError as exc:
            raise ValueError(f"bad topk parameter in {text!r}") from exc
        return make_topk(k, d)
    raise ValueError(f"unknown compressor spec {text!r}")


def ef_update(
    error_acc: np.ndarray,
    grad: np.ndarray,
    alpha: float,
    comp: Compressor,
) -> tuple[np.ndarray, np.ndarray]:
    """One error-feedback step: returns (payload, new_error).

    The corrected step is w = error_acc + alpha * grad; the payload is Q(w)
    and the residual w - Q(w) is carried to the next iteration.  For the kept
    coordinates of top-k the decomposition payload + new_error == w is exact
    in floating point; for mean-based payloads it holds to rounding error.
    """
    w = np.asarray(error_acc, dtype=np.float64) + alpha * np.asarray(grad, dtype=np.float64)
    payload = comp.compress(w)
    new_error = w - payload
    return payload, new_error

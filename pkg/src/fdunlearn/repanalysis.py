"""Layer-wise representation similarity: linear CKA and top-k PCA subspace overlap."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .model import ModelCheckpoint, forward
from .records import MetricRecord

DENOMINATORS = ("standard", "as-printed")


class UndefinedSimilarityError(ValueError):
    """Raised when a representation is identically zero after centering."""


class IllDefinedSubspaceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ProbeSet:
    images: np.ndarray
    source_domain: str

    def __post_init__(self):
        if len(self.images) < 2:
            raise ValueError("a probe set needs at least 2 samples")


def center_columns(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got shape {X.shape}")
    return X - X.mean(axis=0, keepdims=True)


def linear_cka(X, Y, denominator: str = "standard") -> float:
    """||Y^T X||_F^2 / (||X^T X||_F ||Y^T Y||_F) on column-centred inputs.

    ``denominator="as-printed"`` squares both norms in the denominator; that
    variant is not scale invariant and exists only for ablation.
    """
    if denominator not in DENOMINATORS:
        raise ValueError(f"denominator must be one of {DENOMINATORS}")
    X, Y = center_columns(X), center_columns(Y)
    if X.shape[0] != Y.shape[0]:
        raise ValueError(f"row counts differ: {X.shape[0]} vs {Y.shape[0]}")
    if not np.any(X) or not np.any(Y):
        raise UndefinedSimilarityError("CKA is undefined for a representation that is zero after centering")
    if denominator == "as-printed":
        num = np.linalg.norm(Y.T @ X) ** 2
        return float(num / (np.linalg.norm(X.T @ X) ** 2 * np.linalg.norm(Y.T @ Y) ** 2))
    # the standard form is scale invariant; rescaling keeps tiny inputs out of underflow
    X, Y = X / np.abs(X).max(), Y / np.abs(Y).max()
    num = np.linalg.norm(Y.T @ X) ** 2
    return float(num / (np.linalg.norm(X.T @ X) * np.linalg.norm(Y.T @ Y)))


@dataclass(frozen=True)
class SubspaceResult:
    value: float
    raw: float
    k: int
    ill_defined: bool


def top_k_directions(A, k: int) -> tuple[np.ndarray, bool]:
    """Top-k eigenvectors of A^T A (columns) and whether eigenvalue k ties k+1."""
    A = center_columns(A)
    evals, evecs = np.linalg.eigh(A.T @ A)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    tie = False
    if k < len(evals):
        tie = bool(abs(evals[k - 1] - evals[k]) <= 1e-10 * max(1.0, abs(evals[0])))
    return evecs[:, :k], tie


def subspace_similarity_detail(A, B, k: int, normalized: bool = True) -> SubspaceResult:
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"feature widths differ: {A.shape[1]} vs {B.shape[1]}")
    if A.shape[0] != B.shape[0]:
        raise ValueError("row counts differ")
    if not 1 <= k <= min(A.shape[0], A.shape[1]):
        raise ValueError(f"k={k} must lie in [1, min(n, m)]")
    E, tie_a = top_k_directions(A, k)
    G, tie_b = top_k_directions(B, k)
    raw = float(np.linalg.norm(G.T @ E) ** 2)
    ill = tie_a or tie_b
    if ill:
        warnings.warn(f"top-{k} subspace is ill-defined (eigenvalue tie)", IllDefinedSubspaceWarning, stacklevel=2)
    return SubspaceResult(value=raw / k if normalized else raw, raw=raw, k=k, ill_defined=ill)


def subspace_similarity(A, B, k: int, normalized: bool = True) -> float:
    return subspace_similarity_detail(A, B, k, normalized).value


def layerwise_report(
    ckpt_a: ModelCheckpoint,
    ckpt_b: ModelCheckpoint,
    probe: ProbeSet,
    k: int = 10,
    *,
    run_id: str = "",
    method: str = "",
    denominator: str = "standard",
) -> list[MetricRecord]:
    """CKA and subspace similarity for every layer, in layer order.

    k is clipped to the layer width when the layer is narrower; the clipped
    value is what the record carries.
    """
    _, ta = forward(ckpt_a, probe.images, capture=True)
    _, tb = forward(ckpt_b, probe.images, capture=True)
    out = []
    for name in ckpt_a.spec.layer_names:
        A, B = ta.layers[name], tb.layers[name]
        base = dict(run_id=run_id, method=method, domain=probe.source_domain, layer=name)
        try:
            cka, cka_flag = linear_cka(A, B, denominator), ""
        except UndefinedSimilarityError:
            cka, cka_flag = float("nan"), "undefined"
        out.append(MetricRecord("cka", cka, flags=";".join(f for f in (cka_flag, f"cka={denominator}") if f), **base))
        k_eff = min(k, A.shape[1], A.shape[0])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", IllDefinedSubspaceWarning)
            res = subspace_similarity_detail(A, B, k_eff)
        flags = ";".join(f for f in ("ill_defined" if res.ill_defined else "", "k_clipped" if k_eff < k else "") if f)
        out.append(MetricRecord("subspace_sim", res.value, k=k_eff, flags=flags, **base))
        out.append(MetricRecord("subspace_sim_raw", res.raw, k=k_eff, flags=flags, **base))
    return out

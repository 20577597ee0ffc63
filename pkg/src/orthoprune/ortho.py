"""Orthonormality regularization of convolutional filter banks.

Each conv-like layer's weights are viewed as a matrix with one row per
filter. The penalty is the entrywise L1 distance between the smaller of the
two Gram matrices and the identity:

- rows can be orthonormal when the layer has at most as many filters as
  weights per filter, so the M x M filter Gram is used;
- otherwise only the columns can be orthonormal and the penalty falls back
  to the q x q form.

Layer penalties are combined with coefficients proportional to the square
root of each layer's current filter count, normalized to sum to one, so a
freshly pruned layer immediately contributes less. The classifier head is
never regularized; projection shortcuts are.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as en
from .engine import Tensor

__all__ = [
    "OrthoError",
    "OrthoConfig",
    "default_lambda",
    "layer_coefficients",
    "gram_penalty",
    "penalty_value",
    "ortho_loss",
    "penalty_report",
    "singular_spectrum",
    "spectrum_stats",
    "filter_cosine_stats",
]

LAMBDA_MIN = 0.001
LAMBDA_MAX = 0.1


class OrthoError(RuntimeError):
    """Invalid regularization configuration."""


def default_lambda(family: str) -> float:
    """Depthwise separable models train with a gentler coefficient."""
    return 0.001 if family == "depthsep" else 0.01


@dataclass(frozen=True)
class OrthoConfig:
    lambda_coeff: float
    enabled: bool = True

    def __post_init__(self):
        if self.enabled and not (LAMBDA_MIN <= self.lambda_coeff <= LAMBDA_MAX):
            raise OrthoError(
                f"lambda_coeff {self.lambda_coeff} outside [{LAMBDA_MIN}, {LAMBDA_MAX}]"
            )


def resolve_lambda(value, family: str) -> float:
    if isinstance(value, str):
        if value != "auto":
            raise OrthoError(f"lambda_coeff must be a number or 'auto', got '{value}'")
        return default_lambda(family)
    return float(value)


def layer_coefficients(model) -> dict[str, float]:
    """Per-layer mixing weights: sqrt(filters) normalized over all layers."""
    layers = model.regularized_layers()
    roots = {name: np.sqrt(float(w.shape[0])) for name, w in layers}
    total = sum(roots.values())
    if total == 0.0:
        raise OrthoError("no regularized layers in model")
    return {name: r / total for name, r in roots.items()}


def _as_matrix(w: Tensor) -> Tensor:
    m = int(w.shape[0])
    q = int(np.prod(w.shape[1:]))
    return en.reshape(w, (m, q))


def gram_penalty(w: Tensor) -> Tensor:
    """Differentiable |Gram - I| penalty for one weight tensor."""
    mat = _as_matrix(w)
    m, q = mat.shape
    if m <= q:
        gram = en.matmul(mat, en.transpose(mat))
        n = m
    else:
        gram = en.matmul(en.transpose(mat), mat)
        n = q
    eye = Tensor(np.eye(n, dtype=w.data.dtype))
    return en.sum_all(en.absolute(en.sub(gram, eye)))


def penalty_value(w: np.ndarray) -> float:
    """Same penalty computed directly in float64; used for reporting."""
    mat = np.asarray(w, dtype=np.float64).reshape(w.shape[0], -1)
    m, q = mat.shape
    gram = mat @ mat.T if m <= q else mat.T @ mat
    gram[np.diag_indices_from(gram)] -= 1.0
    return float(np.abs(gram).sum())


def ortho_loss(model) -> Tensor:
    """Coefficient-weighted sum of layer penalties, ready for a tape."""
    alphas = layer_coefficients(model)
    total = None
    for name, w in model.regularized_layers():
        term = en.mul_scalar(gram_penalty(w), alphas[name])
        total = term if total is None else en.add(total, term)
    return total

def penalty_report(model) -> dict[str, float]:
    """Raw per-layer penalties (no coefficients), for diagnostics."""
    return {name: penalty_value(w.data) for name, w in model.regularized_layers()}


def singular_spectrum(w: np.ndarray) -> np.ndarray:
    """Descending singular values of the filters-as-rows matrix."""
    mat = np.asarray(w, dtype=np.float64).reshape(w.shape[0], -1)
    return np.linalg.svd(mat, compute_uv=False)


def spectrum_stats(model) -> dict[str, dict[str, float]]:
    out = {}
    for name, w in model.regularized_layers():
        s = singular_spectrum(w.data)
        out[name] = {
            "min": float(s.min()),
            "median": float(np.median(s)),
            "max": float(s.max()),
        }
    return out


def filter_cosine_stats(w: np.ndarray) -> tuple[float, float]:
    """Mean and max absolute cosine similarity between distinct filters."""
    mat = np.asarray(w, dtype=np.float64).reshape(w.shape[0], -1)
    if mat.shape[0] < 2:
        return 0.0, 0.0
    norms = np.linalg.norm(mat, axis=1)
    norms = np.where(norms == 0.0, 1.0, norms)
    unit = mat / norms[:, None]
    gram = unit @ unit.T
    iu = np.triu_indices(mat.shape[0], k=1)
    off = np.abs(gram[iu])
    return float(off.mean()), float(off.max())

"""Training-free merging of two checkpoints: Linear, TIES and SLERP."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, List, Optional, Tuple

import numpy as np

from .policy import ParameterSet, check_compatible

SLERP_COLINEAR_EPS = 1e-6


class MergeMethod(str, enum.Enum):
    LINEAR = "LINEAR"
    TIES = "TIES"
    SLERP = "SLERP"


@dataclass(frozen=True)
class MergeRecipe:
    method: MergeMethod = MergeMethod.LINEAR
    ratio: float = 0.5
    ties_density: float = 0.2
    base: Optional[str] = None

    def to_dict(self) -> dict:
        return {"method": MergeMethod(self.method).value, "ratio": self.ratio,
                "ties_density": self.ties_density, "base": self.base}


def _check_ratio(t: float) -> None:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"merge ratio {t} outside [0, 1]")


def _lerp(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    # endpoints returned exactly
    if t == 0.0:
        return a.copy()
    if t == 1.0:
        return b.copy()
    return ((1.0 - t) * a.astype(np.float64) + t * b.astype(np.float64)).astype(a.dtype)


def linear_merge(a: ParameterSet, b: ParameterSet, t: float) -> ParameterSet:
    check_compatible(a, b)
    _check_ratio(t)
    return {k: _lerp(a[k], b[k], t) for k in a}


def trim_top_fraction(x: np.ndarray, density: float) -> np.ndarray:
    """Keep the ``ceil(density * size)`` largest-magnitude entries of ``x``; zero the rest.

    Ties at the cut are broken by position (earlier entries kept).
    """
    if not 0.0 < density <= 1.0:
        raise ValueError("density must be in (0, 1]")
    flat = x.ravel()
    keep = int(np.ceil(density * flat.size - 1e-9))
    if keep >= flat.size:
        return x.copy()
    order = np.argsort(-np.abs(flat), kind="stable")
    out = np.zeros_like(flat)
    out[order[:keep]] = flat[order[:keep]]
    return out.reshape(x.shape)


def _ties_tensor(base, a, b, t, density):
    base64 = base.astype(np.float64)
    tau_a = trim_top_fraction(a.astype(np.float64) - base64, density)
    tau_b = trim_top_fraction(b.astype(np.float64) - base64, density)
    wa, wb = 1.0 - t, t
    elected = np.sign(wa * tau_a + wb * tau_b)
    in_a = (np.sign(tau_a) == elected) & (elected != 0) & (wa > 0)
    in_b = (np.sign(tau_b) == elected) & (elected != 0) & (wb > 0)
    num = np.where(in_a, wa * tau_a, 0.0) + np.where(in_b, wb * tau_b, 0.0)
    den = np.where(in_a, wa, 0.0) + np.where(in_b, wb, 0.0)
    merged = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return (base64 + merged).astype(a.dtype)


def ties_merge(base: ParameterSet, a: ParameterSet, b: ParameterSet, t: float, density: float = 0.2) -> ParameterSet:
    """TIES per tensor: trim each task vector, elect a sign per entry, average the agreeing entries.

    The elected sign is that of ``(1-t)*tau_a + t*tau_b``; agreeing entries are
    averaged with weights ``(1-t)`` and ``t`` renormalized over participants.
    """
    check_compatible(base, a)
    check_compatible(a, b)
    _check_ratio(t)
    if not 0.0 < density <= 1.0:
        raise ValueError("density must be in (0, 1]")
    return {k: _ties_tensor(base[k], a[k], b[k], t, density) for k in a}


def _slerp_tensor(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    if t == 0.0:
        return a.copy()
    if t == 1.0:
        return b.copy()
    va = a.astype(np.float64).ravel()
    vb = b.astype(np.float64).ravel()
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        return _lerp(a, b, t)
    cos = float(np.clip(va @ vb / (na * nb), -1.0, 1.0))
    omega = np.arccos(cos)
    sin = np.sin(omega)
    if abs(sin) < SLERP_COLINEAR_EPS:
        return _lerp(a, b, t)
    out = (np.sin((1 - t) * omega) / sin) * va + (np.sin(t * omega) / sin) * vb
    return out.reshape(a.shape).astype(a.dtype)


def slerp_merge(a: ParameterSet, b: ParameterSet, t: float) -> ParameterSet:
    """Spherical interpolation per named tensor on flattened values; linear fallback when colinear."""
    check_compatible(a, b)
    _check_ratio(t)
    return {k: _slerp_tensor(a[k], b[k], t) for k in a}


def merge(recipe: MergeRecipe, a: ParameterSet, b: ParameterSet, base: Optional[ParameterSet] = None) -> ParameterSet:
    method = MergeMethod(recipe.method)
    if method is MergeMethod.LINEAR:
        return linear_merge(a, b, recipe.ratio)
    if method is MergeMethod.SLERP:
        return slerp_merge(a, b, recipe.ratio)
    if base is None:
        raise ValueError("TIES merging requires a base checkpoint")
    return ties_merge(base, a, b, recipe.ratio, recipe.ties_density)


def ratio_sweep(
    method: MergeMethod | str,
    a: ParameterSet,
    b: ParameterSet,
    ratios: Iterable[float] = (0.0, 0.25, 0.5, 0.75, 1.0),
    base: Optional[ParameterSet] = None,
    density: float = 0.2,
) -> List[Tuple[float, ParameterSet]]:
    """One merged ParameterSet per distinct ratio, in ascending ratio order."""
    ratios = sorted(set(float(r) for r in ratios))
    for r in ratios:
        _check_ratio(r)
    return [(r, merge(MergeRecipe(MergeMethod(method), r, density), a, b, base)) for r in ratios]

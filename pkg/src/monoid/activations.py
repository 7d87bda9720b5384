"""Scalar activation functions and their C1 regularization.

The rectifier family is the one actually used for identification runs: the
exact rectifier ``relu`` and its quadratic blend ``smoothed_relu``, which is
continuously differentiable and converges uniformly to the rectifier as the
blending width ``epsilon`` shrinks (the sup gap is exactly ``epsilon / 4``).
``tanh`` and ``identity`` are carried along for tight gradient checks.
"""

from dataclasses import dataclass

import numpy as np

KINDS = ("relu", "smoothed_relu", "tanh", "identity")


@dataclass(frozen=True)
class ActivationSpec:
    """An activation function plus its regularization width.

    ``epsilon`` is only meaningful for ``smoothed_relu``, where it must be
    positive; the value is ignored for the other kinds.
    """

    kind: str
    epsilon: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown activation kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "smoothed_relu":
            if not np.isfinite(self.epsilon) or self.epsilon <= 0.0:
                raise ValueError("smoothed_relu requires epsilon > 0")

    @property
    def is_c1(self) -> bool:
        """Whether the function has a continuous derivative everywhere."""
        return self.kind != "relu"

    def rho_prime_min(self) -> float:
        return 1.0 if self.kind == "identity" else 0.0

    def rho_prime_max(self) -> float:
        return 1.0

    def lipschitz_constant(self) -> float:
        # All four kinds are monotone with bounded slope, so the Lipschitz
        # constant coincides with the derivative supremum.
        return self.rho_prime_max()


def _check_finite(x):
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError("activation input must be finite")
    return arr


def act_value(spec: ActivationSpec, x):
    """Evaluate the activation elementwise; scalars in, scalar out."""
    arr = _check_finite(x)
    if spec.kind == "relu":
        out = np.maximum(arr, 0.0)
    elif spec.kind == "smoothed_relu":
        eps = spec.epsilon
        # Branch-free: the clip freezes the quadratic at its endpoint values
        # (0 at -eps, eps at +eps) and the hinge restores the linear part.
        c = np.clip(arr, -eps, eps)
        out = (c + eps) ** 2 / (4.0 * eps) + np.maximum(arr - eps, 0.0)
    elif spec.kind == "tanh":
        out = np.tanh(arr)
    else:
        out = arr.copy()
    return float(out) if np.ndim(x) == 0 else out


def act_deriv(spec: ActivationSpec, x):
    """Derivative of :func:`act_value`; for exact relu the slope at 0 is 0."""
    arr = _check_finite(x)
    if spec.kind == "relu":
        out = (arr > 0.0).astype(float)
    elif spec.kind == "smoothed_relu":
        eps = spec.epsilon
        out = (np.clip(arr, -eps, eps) + eps) / (2.0 * eps)
    elif spec.kind == "tanh":
        t = np.tanh(arr)
        out = 1.0 - t * t
    else:
        out = np.ones_like(arr)
    return float(out) if np.ndim(x) == 0 else out


def regularization_gap(spec: ActivationSpec) -> float:
    """Sup-norm distance between the smoothed rectifier and the exact one.

    The gap ``sup_x |rho_eps(x) - rho(x)|`` is attained at x = 0 and equals
    ``epsilon / 4``.
    """
    if spec.kind != "smoothed_relu":
        raise ValueError("regularization_gap is defined for smoothed_relu only")
    return spec.epsilon / 4.0

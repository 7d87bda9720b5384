"""Feedforward network with per-layer affine maps and all of its derivatives.

The reaction term is a composition of affine layers with an elementwise
activation between them, input and output both two-dimensional.  Everything
downstream needs closed-form derivatives of that composition: the 2x2 state
Jacobian, per-weight sensitivities (as a vector-Jacobian product), a global
Lipschitz bound, and an entrywise interval enclosure of the Jacobian that is
valid for every activation slope between the derivative bounds.

All evaluation routines accept a trailing state dimension with arbitrary
leading batch axes, so a whole trajectory (or a bundle of trajectories) can
be pushed through in one call.
"""

import itertools
from dataclasses import dataclass

import numpy as np

from .activations import ActivationSpec, act_deriv, act_value


@dataclass(frozen=True)
class NetworkArchitecture:
    """Layer widths ``(n_0, ..., n_L)``; input and output widths must be 2."""

    layer_dims: tuple

    def __post_init__(self):
        dims = tuple(int(n) for n in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 3:
            raise ValueError("need at least two layers (three widths)")
        if any(n <= 0 for n in dims):
            raise ValueError("layer widths must be positive")
        if dims[0] != 2 or dims[-1] != 2:
            raise ValueError("input and output widths must both be 2")

    @property
    def depth(self) -> int:
        """Number of affine layers L."""
        return len(self.layer_dims) - 1

    @property
    def hidden_width_sum(self) -> int:
        """Sum of hidden widths; the exponent in the Lipschitz bound."""
        return sum(self.layer_dims[1:-1])


class _BlockStack:
    """Per-layer (matrix, vector) blocks with a flat vector view."""

    def __init__(self, layers):
        blocks = []
        for A, b in layers:
            A = np.array(A, dtype=float)
            b = np.array(b, dtype=float)
            if A.ndim != 2 or b.ndim != 1 or A.shape[0] != b.shape[0]:
                raise ValueError("each layer needs a matrix and a matching vector")
            A.setflags(write=False)
            b.setflags(write=False)
            blocks.append((A, b))
        if not blocks:
            raise ValueError("empty layer list")
        for (A_prev, _), (A_next, _) in zip(blocks, blocks[1:]):
            if A_next.shape[1] != A_prev.shape[0]:
                raise ValueError("consecutive layer shapes do not chain")
        if not all(np.all(np.isfinite(A)) and np.all(np.isfinite(b)) for A, b in blocks):
            raise ValueError("weight entries must be finite")
        self.layers = tuple(blocks)

    @property
    def arch(self) -> NetworkArchitecture:
        dims = (self.layers[0][0].shape[1],) + tuple(A.shape[0] for A, _ in self.layers)
        return NetworkArchitecture(dims)

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def n_params(self) -> int:
        return sum(A.size + b.size for A, b in self.layers)

    def flatten(self) -> np.ndarray:
        """Concatenate row-major matrix entries then vector entries, per layer."""
        parts = []
        for A, b in self.layers:
            parts.append(A.ravel())
            parts.append(b)
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, arch: NetworkArchitecture, vec):
        vec = np.asarray(vec, dtype=float)
        dims = arch.layer_dims
        expected = sum(dims[i + 1] * dims[i] + dims[i + 1] for i in range(len(dims) - 1))
        if vec.shape != (expected,):
            raise ValueError(f"expected flat vector of length {expected}, got {vec.shape}")
        layers = []
        pos = 0
        for n_in, n_out in zip(dims, dims[1:]):
            A = vec[pos:pos + n_out * n_in].reshape(n_out, n_in)
            pos += n_out * n_in
            b = vec[pos:pos + n_out]
            pos += n_out
            layers.append((A, b))
        return cls(layers)

    def __eq__(self, other):
        return (type(self) is type(other)
                and len(self.layers) == len(other.layers)
                and all(np.array_equal(A, A2) and np.array_equal(b, b2)
                        for (A, b), (A2, b2) in zip(self.layers, other.layers)))


class WeightStack(_BlockStack):
    """The control variable: one ``(A, b)`` pair per layer, immutable."""


class WeightGradient(_BlockStack):
    """Objective gradient blocks, shaped exactly like a :class:`WeightStack`."""


def _as_state(z, n_in):
    z = np.asarray(z, dtype=float)
    if z.shape[-1:] != (n_in,):
        raise ValueError(f"state must have trailing dimension {n_in}, got shape {z.shape}")
    return z


def forward_trace(z, weights: WeightStack, act: ActivationSpec):
    """Pre-activation outputs of every layer: ``[W_1(z), W_2(rho(.)), ...]``."""
    z = _as_state(z, weights.layers[0][0].shape[1])
    trace = []
    x = z
    for i, (A, b) in enumerate(weights.layers):
        if i > 0:
            x = act_value(act, x)
        x = x @ A.T + b
        trace.append(x)
    return trace


def nn_forward(z, weights: WeightStack, act: ActivationSpec):
    """Evaluate the full composition at ``z`` (activation between layers only)."""
    return forward_trace(z, weights, act)[-1]


def _require_c1(act: ActivationSpec):
    if not act.is_c1:
        raise ValueError("exact relu has no derivative at 0; regularize first "
                         "(use smoothed_relu with epsilon > 0)")


def nn_jacobian_z(z, weights: WeightStack, act: ActivationSpec, trace=None):
    """State Jacobian ``A_L diag(rho'(.)) A_{L-1} ... diag(rho'(.)) A_1``.

    Shape ``(..., 2, 2)`` for batched input.  A precomputed ``trace`` from
    :func:`forward_trace` is reused when given.
    """
    _require_c1(act)
    if trace is None:
        trace = forward_trace(z, weights, act)
    A1 = weights.layers[0][0]
    jac = np.broadcast_to(A1, trace[0].shape[:-1] + A1.shape).copy()
    for i in range(1, len(weights.layers)):
        slope = act_deriv(act, trace[i - 1])
        A = weights.layers[i][0]
        jac = A @ (slope[..., :, None] * jac)
    return jac


def nn_weight_grad(z, weights: WeightStack, act: ActivationSpec, cotangent) -> WeightGradient:
    """Gradient of ``cotangent . Phi(z, W)`` with respect to every layer block.

    Reverse-mode contraction of the weight sensitivities: the running
    cotangent is pulled back through each affine layer and pairs with that
    layer's input (the raw ``z`` for the first layer).
    """
    z = _as_state(z, weights.layers[0][0].shape[1])
    if z.ndim != 1:
        raise ValueError("nn_weight_grad takes a single state; batch via accumulate_weight_grad")
    cot = np.asarray(cotangent, dtype=float)
    if cot.shape != (weights.layers[-1][0].shape[0],):
        raise ValueError("cotangent shape must match the network output")
    blocks = accumulate_weight_grad(z[None, :], weights, act, cot[None, :],
                                    sample_weights=np.ones(1))
    return blocks


def accumulate_weight_grad(z, weights: WeightStack, act: ActivationSpec,
                           cotangents, sample_weights) -> WeightGradient:
    """Weighted sum over a batch of per-sample weight gradients.

    ``z`` and ``cotangents`` carry matching leading axes; ``sample_weights``
    scales each sample's contribution (quadrature weights in the adjoint
    assembly).  The reduction order is fixed by the array layout, so repeated
    calls give identical results.
    """
    _require_c1(act)
    trace = forward_trace(z, weights, act)
    z = np.asarray(z, dtype=float)
    w = np.asarray(sample_weights, dtype=float)
    cot = np.asarray(cotangents, dtype=float) * w[..., None]
    flat_batch = int(np.prod(cot.shape[:-1], dtype=int))
    cot = cot.reshape(flat_batch, cot.shape[-1])

    inputs = [z.reshape(flat_batch, z.shape[-1])]
    for phi in trace[:-1]:
        inputs.append(act_value(act, phi).reshape(flat_batch, phi.shape[-1]))
    slopes = [act_deriv(act, phi).reshape(flat_batch, phi.shape[-1]) for phi in trace[:-1]]

    out = [None] * weights.depth
    u = cot
    for i in range(weights.depth - 1, -1, -1):
        dA = u.T @ inputs[i]
        db = u.sum(axis=0)
        out[i] = (dA, db)
        if i > 0:
            u = (u @ weights.layers[i][0]) * slopes[i - 1]
    return WeightGradient(out)


def lipschitz_bound(weights: WeightStack, act: ActivationSpec) -> float:
    """Product of Frobenius norms times the activation slope bound raised to
    the total hidden width.  Frobenius dominates the operator norm, so this
    certifies ``|Phi(z1) - Phi(z2)| <= bound * |z1 - z2|`` for all pairs."""
    prod = 1.0
    for A, _ in weights.layers:
        prod *= np.linalg.norm(A)
    return prod * act.lipschitz_constant() ** weights.arch.hidden_width_sum


@dataclass(frozen=True)
class IntervalMatrix2x2:
    """Entrywise interval ``[lo, hi]`` around a 2x2 matrix family."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        if lo.shape != (2, 2) or hi.shape != (2, 2):
            raise ValueError("interval bounds must be 2x2")
        if np.any(lo > hi):
            raise ValueError("lower bounds exceed upper bounds")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def contains(self, mat, atol: float = 0.0) -> bool:
        mat = np.asarray(mat, dtype=float)
        return bool(np.all(mat >= self.lo - atol) and np.all(mat <= self.hi + atol))

    def transpose_matvec(self, p):
        """Interval for ``M^T p`` over all ``M`` in the enclosure."""
        p = np.asarray(p, dtype=float)
        cand_a = self.lo.T * p[None, :]
        cand_b = self.hi.T * p[None, :]
        lo = np.minimum(cand_a, cand_b).sum(axis=1)
        hi = np.maximum(cand_a, cand_b).sum(axis=1)
        return lo, hi


def jacobian_enclosure(weights: WeightStack, act: ActivationSpec) -> IntervalMatrix2x2:
    """Entrywise hull of every possible state Jacobian of the network.

    Each index path through the hidden layers contributes one monomial of
    weight entries scaled by the activation-slope product, which lies between
    ``rho'_min^(L-1)`` and ``rho'_max^(L-1)``; intervals accumulate with
    Minkowski addition per entry.  Exact enumeration is cheap at the widths
    used here.
    """
    L = weights.depth
    dims = weights.arch.layer_dims
    r_lo = act.rho_prime_min() ** (L - 1)
    r_hi = act.rho_prime_max() ** (L - 1)
    lo = np.zeros((2, 2))
    hi = np.zeros((2, 2))
    mats = [A for A, _ in weights.layers]
    hidden_ranges = [range(n) for n in dims[1:-1]]
    for i in range(2):
        for j in range(2):
            for path in itertools.product(*hidden_ranges):
                m = mats[-1][i, path[-1]]
                for layer in range(L - 2, 0, -1):
                    m *= mats[layer][path[layer], path[layer - 1]]
                m *= mats[0][path[0], j]
                lo[i, j] += min(m * r_lo, m * r_hi)
                hi[i, j] += max(m * r_lo, m * r_hi)
    return IntervalMatrix2x2(lo, hi)


def weight_norm_sq(weights) -> float:
    """Squared Euclidean norm over all matrix and vector entries."""
    return float(sum(np.sum(A * A) + np.sum(b * b) for A, b in weights.layers))


def project_ball(weights: WeightStack, C: float) -> WeightStack:
    """Project onto the ball ``{ |W|^2 <= C }``; idempotent and exact.

    A scaled stack can land an ulp outside the ball; the correction loop
    shaves it back so the feasibility defect is exactly zero.
    """
    if not np.isfinite(C) or C <= 0.0:
        raise ValueError("ball radius C must be positive")
    ns = weight_norm_sq(weights)
    if ns <= C:
        return weights
    vec = weights.flatten() * np.sqrt(C / ns)
    projected = WeightStack.from_flat(weights.arch, vec)
    while weight_norm_sq(projected) > C:
        vec = vec * np.nextafter(1.0, 0.0)
        projected = WeightStack.from_flat(weights.arch, vec)
    return projected

"""Chain of submodels with overlapping shared-quantity blocks.

A chain of M submodels shares M-1 blocks of quantities: submodel m and
submodel m+1 both place a prior on block m.  The melded model replaces the
individual prior marginals over the shared blocks with a single pooled
prior, and multiplies in each submodel's conditional given its shared
quantities.

Conventions used throughout the package:

- ``phi`` is a list of ``M - 1`` 1-D float arrays, one per shared block.
- ``psi`` is a list of ``M`` 1-D float arrays, one per submodel (may be
  empty arrays).
- A submodel's own shared quantities ``phi_m`` are the concatenation of
  its left and right block values, in chain order.
- Log-density evaluators return ``-inf`` exactly off-support and never
  NaN.  Prior-marginal evaluators must additionally accept arrays with
  leading batch dimensions, i.e. shape ``(..., d)`` mapping to ``(...)``;
  this is what makes vectorized grid evaluation of pooled priors cheap.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ModelInconsistencyError, StructureError

__all__ = [
    "Coord",
    "PhiBlock",
    "SubmodelSpec",
    "UnitFactorization",
    "ChainModel",
    "CallCounter",
    "real_coords",
    "positive_coords",
    "discrete_coords",
    "validate_chain",
    "log_melded_density",
    "markov_combination_density",
    "submodel_log_ratio",
    "unit_additivity_gap",
]

LogDensity = Callable[[np.ndarray], float]


@dataclass(frozen=True)
class Coord:
    """Support descriptor for a single coordinate."""

    kind: str  # "real" | "positive" | "discrete"
    cardinality: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("real", "positive", "discrete"):
            raise StructureError(f"unknown coordinate kind {self.kind!r}")
        if self.kind == "discrete":
            if self.cardinality is None or self.cardinality < 2:
                raise StructureError("discrete coordinates need cardinality >= 2")
        elif self.cardinality is not None:
            raise StructureError("cardinality only applies to discrete coordinates")


def real_coords(dim: int) -> tuple[Coord, ...]:
    return tuple(Coord("real") for _ in range(dim))


def positive_coords(dim: int) -> tuple[Coord, ...]:
    return tuple(Coord("positive") for _ in range(dim))


def discrete_coords(cardinalities: Sequence[int]) -> tuple[Coord, ...]:
    return tuple(Coord("discrete", int(c)) for c in cardinalities)


@dataclass(frozen=True)
class PhiBlock:
    """One shared-quantity block, common to two adjacent submodels."""

    label: str
    coords: tuple[Coord, ...]

    def __post_init__(self):
        if len(self.coords) < 1:
            raise StructureError(f"block {self.label!r} must have dim >= 1")

    @property
    def dim(self) -> int:
        return len(self.coords)


class CallCounter:
    """Mutable call counter attached to immutable specs."""

    __slots__ = ("count",)

    def __init__(self):
        self.count = 0

    def __repr__(self):
        return f"CallCounter({self.count})"


@dataclass(frozen=True)
class UnitFactorization:
    """Partition of a submodel's (phi_m, psi_m) into independent units.

    ``phi_indices[u]`` / ``psi_indices[u]`` give the coordinate positions
    within the submodel's shared-block vector / psi vector that belong to
    unit ``u``.  Together they must partition all coordinates, and the
    submodel's log densities must be sums of per-unit terms.
    """

    phi_indices: tuple[tuple[int, ...], ...]
    psi_indices: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if len(self.phi_indices) != len(self.psi_indices):
            raise StructureError("phi_indices and psi_indices must align per unit")
        if len(self.phi_indices) < 1:
            raise StructureError("unit factorization needs >= 1 unit")

    @property
    def n_units(self) -> int:
        return len(self.phi_indices)


@dataclass(frozen=True)
class SubmodelSpec:
    """One submodel with its data already bound into the evaluators.

    ``log_joint(phi_m, psi_m)`` evaluates log p_m(phi_m, psi_m, Y_m) and
    ``log_prior_marginal(phi_m)`` evaluates the prior marginal over the
    submodel's shared quantities.  Both are unnormalized for MCMC use.
    """

    index: int
    left_block: Optional[str]
    right_block: Optional[str]
    log_joint: Callable[[np.ndarray, np.ndarray], float]
    log_prior_marginal: LogDensity
    psi_coords: tuple[Coord, ...] = ()
    unit_factorization: Optional[UnitFactorization] = None
    joint_calls: CallCounter = field(default_factory=CallCounter, compare=False)
    marginal_calls: CallCounter = field(default_factory=CallCounter, compare=False)

    @property
    def psi_dim(self) -> int:
        return len(self.psi_coords)

    def eval_log_joint(self, phi_m: np.ndarray, psi_m: np.ndarray) -> float:
        self.joint_calls.count += 1
        value = float(self.log_joint(phi_m, psi_m))
        if math.isnan(value):
            raise ModelInconsistencyError(
                f"submodel {self.index}: log_joint returned NaN"
            )
        return value

    def eval_log_prior(self, phi_m: np.ndarray):
        """Prior marginal; passes batch shapes straight through."""
        self.marginal_calls.count += 1
        value = self.log_prior_marginal(phi_m)
        if isinstance(value, float):  # np.float64 included
            if math.isnan(value):
                raise ModelInconsistencyError(
                    f"submodel {self.index}: log_prior_marginal returned NaN"
                )
            return value
        arr = np.asarray(value, dtype=float)
        if np.isnan(arr).any():
            raise ModelInconsistencyError(
                f"submodel {self.index}: log_prior_marginal returned NaN"
            )
        return float(arr) if arr.ndim == 0 else arr


@dataclass(frozen=True)
class ChainModel:
    """An ordered chain of submodels and the blocks they share.

    Submodel m touches block m-1 on its left and block m on its right
    (where those exist).  M = 2 is permitted and degenerates to classic
    two-model melding with a single shared block.
    """

    submodels: tuple[SubmodelSpec, ...]
    phi_blocks: tuple[PhiBlock, ...]

    @property
    def n_submodels(self) -> int:
        return len(self.submodels)

    def blocks_of(self, m: int) -> tuple[int, ...]:
        """Indices of the blocks touched by submodel m, in chain order."""
        last = len(self.phi_blocks)
        touched = []
        if m - 1 >= 0 and m - 1 < last:
            touched.append(m - 1)
        if m < last:
            touched.append(m)
        return tuple(touched)

    def phi_m(self, m: int, phi: Sequence[np.ndarray]) -> np.ndarray:
        """Concatenated shared-block values seen by submodel m.

        Supports batched block values of shape ``(..., dim_b)``.
        """
        parts = [np.asarray(phi[b], dtype=float) for b in self.blocks_of(m)]
        return parts[0] if len(parts) == 1 else np.concatenate(parts, axis=-1)

    def check_dims(self, phi: Sequence[np.ndarray], psi: Sequence[np.ndarray]) -> None:
        if len(phi) != len(self.phi_blocks):
            raise StructureError(
                f"expected {len(self.phi_blocks)} phi blocks, got {len(phi)}"
            )
        for b, block in enumerate(self.phi_blocks):
            if np.shape(phi[b])[-1] != block.dim:
                raise StructureError(
                    f"block {block.label!r} expects dim {block.dim}, "
                    f"got {np.shape(phi[b])[-1]}"
                )
        if len(psi) != self.n_submodels:
            raise StructureError(
                f"expected {self.n_submodels} psi vectors, got {len(psi)}"
            )
        for m, spec in enumerate(self.submodels):
            if np.size(psi[m]) != spec.psi_dim:
                raise StructureError(
                    f"submodel {m}: psi dim {np.size(psi[m])} != declared {spec.psi_dim}"
                )

    def reset_counters(self) -> None:
        for spec in self.submodels:
            spec.joint_calls.count = 0
            spec.marginal_calls.count = 0


def validate_chain(model: ChainModel) -> list[str]:
    """Report-style validation; empty list iff the model is usable."""
    report: list[str] = []
    M = model.n_submodels
    if M < 2:
        report.append("chain requires M >= 2")
        return report
    if len(model.phi_blocks) != M - 1:
        report.append(
            f"chain with {M} submodels needs {M - 1} phi blocks, "
            f"got {len(model.phi_blocks)}"
        )
    labels = [b.label for b in model.phi_blocks]
    if len(set(labels)) != len(labels):
        report.append("phi block labels are not unique")
    for m, spec in enumerate(model.submodels):
        if spec.index != m:
            report.append(f"submodel at position {m} declares index {spec.index}")
        expect_left = labels[m - 1] if 0 < m <= len(labels) else None
        expect_right = labels[m] if m < len(labels) else None
        if spec.left_block != expect_left:
            report.append(
                f"submodel {m}: left block {spec.left_block!r}, expected {expect_left!r}"
            )
        if spec.right_block != expect_right:
            report.append(
                f"submodel {m}: right block {spec.right_block!r}, expected {expect_right!r}"
            )
        if not callable(spec.log_joint):
            report.append(f"submodel {m}: log_joint is not callable")
        if not callable(spec.log_prior_marginal):
            report.append(f"submodel {m}: log_prior_marginal is not callable")
        uf = spec.unit_factorization
        if uf is not None:
            phi_dim = sum(model.phi_blocks[b].dim for b in model.blocks_of(m))
            flat_phi = sorted(itertools.chain.from_iterable(uf.phi_indices))
            flat_psi = sorted(itertools.chain.from_iterable(uf.psi_indices))
            if flat_phi != list(range(phi_dim)):
                report.append(
                    f"submodel {m}: unit phi indices do not partition 0..{phi_dim - 1}"
                )
            if flat_psi != list(range(spec.psi_dim)):
                report.append(
                    f"submodel {m}: unit psi indices do not partition 0..{spec.psi_dim - 1}"
                )
    return report


def submodel_log_ratio(spec: SubmodelSpec, phi_m: np.ndarray, psi_m: np.ndarray) -> float:
    """log p_m(phi_m, psi_m, Y_m) - log p_m(phi_m) under the -inf policy.

    A -inf joint makes the whole term -inf regardless of the marginal.  A
    -inf marginal with a finite joint is a model inconsistency (a joint
    cannot have mass where its own marginal has none) and raises.
    """
    lj = spec.eval_log_joint(phi_m, psi_m)
    if lj == -math.inf:
        return -math.inf
    lm = spec.eval_log_prior(phi_m)
    if lm == -math.inf:
        raise ModelInconsistencyError(
            f"submodel {spec.index}: joint is finite but prior marginal is -inf "
            f"at phi_m={np.asarray(phi_m)}"
        )
    return lj - lm


def log_melded_density(model: ChainModel, pool, phi, psi) -> float:
    """Unnormalized log density of the chained melded model.

    ``pool`` is anything with a ``log_density(phi_blocks)`` method (a
    ``PooledPrior`` or ``PoolFactorization``-backed evaluator).
    """
    model.check_dims(phi, psi)
    total = float(pool.log_density(phi))
    if total == -math.inf:
        return -math.inf
    for m, spec in enumerate(model.submodels):
        term = submodel_log_ratio(spec, model.phi_m(m, phi), np.asarray(psi[m], dtype=float))
        if term == -math.inf:
            return -math.inf
        total += term
    return total


def markov_combination_density(
    model: ChainModel,
    boundary_priors: Sequence[LogDensity],
    phi,
    psi,
) -> float:
    """Log density of the chained Markov combination.

    Valid when all submodels sharing a block declare identical prior
    marginals for it; ``boundary_priors[b]`` is that common log marginal
    for block b.  Serves as the oracle for dictatorial-pooling
    equivalences:  sum_m log p_m - sum_b log p(phi_b).
    """
    model.check_dims(phi, psi)
    if len(boundary_priors) != len(model.phi_blocks):
        raise StructureError("need one shared prior per boundary")
    total = 0.0
    for m, spec in enumerate(model.submodels):
        lj = spec.eval_log_joint(model.phi_m(m, phi), np.asarray(psi[m], dtype=float))
        if lj == -math.inf:
            return -math.inf
        total += lj
    for b, prior in enumerate(boundary_priors):
        lp = float(prior(np.asarray(phi[b], dtype=float)))
        if lp == -math.inf:
            raise ModelInconsistencyError(
                f"shared prior at boundary {b} is -inf where submodel joints are finite"
            )
        total -= lp
    return total


def unit_additivity_gap(
    spec: SubmodelSpec,
    phi_a: np.ndarray,
    psi_a: np.ndarray,
    phi_b: np.ndarray,
    psi_b: np.ndarray,
) -> float:
    """How far log_joint is from being a sum of per-unit terms.

    For an additive evaluator, replacing unit u of state b with the
    corresponding slice of state a changes the value by a per-unit
    increment, so summing over u gives f(a) + (n-1) f(b).  Returns the
    absolute deviation from that identity (0 for true factorizations).
    """
    uf = spec.unit_factorization
    if uf is None:
        raise StructureError(f"submodel {spec.index} declares no unit factorization")
    f_a = spec.eval_log_joint(phi_a, psi_a)
    f_b = spec.eval_log_joint(phi_b, psi_b)
    mixed_sum = 0.0
    for u in range(uf.n_units):
        phi_mix = np.array(phi_b, dtype=float)
        psi_mix = np.array(psi_b, dtype=float)
        pi = list(uf.phi_indices[u])
        si = list(uf.psi_indices[u])
        phi_mix[pi] = np.asarray(phi_a, dtype=float)[pi]
        psi_mix[si] = np.asarray(psi_a, dtype=float)[si]
        mixed_sum += spec.eval_log_joint(phi_mix, psi_mix)
    return abs(mixed_sum - (f_a + (uf.n_units - 1) * f_b))

"""Pooled priors over the shared quantities of a chain.

Supports logarithmic pooling (with product-of-experts as the all-ones
special case), two-step linear pooling, and the partial and complete
dictatorial rules.  Linear and complete dictatorial pooling need
one-block marginals of the middle submodels, which cannot be derived from
the chain's two-block marginals numerically; callers supply them as
evaluators keyed by (submodel index, boundary index).

All evaluation is in log space and unnormalized: normalization constants
cancel in MCMC, and the grid oracle normalizes explicitly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .chain import ChainModel, LogDensity
from .errors import NumericalFailureError, PoolingConfigError, UnsupportedConfigError

__all__ = [
    "PooledPrior",
    "PoolFactorization",
    "GridSpec",
    "GridTable",
    "log_pooling",
    "poe_pooling",
    "linear_pooling",
    "dictatorial_partial",
    "dictatorial_complete",
    "log_pool_eval",
    "factorize_for_sampler",
    "grid_normalize",
]

METHODS = (
    "logarithmic",
    "poe",
    "linear",
    "dictatorial-partial",
    "dictatorial-complete",
)


@dataclass(frozen=True)
class PooledPrior:
    """Pooling method, weights, and the evaluators harvested from a chain."""

    method: str
    chain: ChainModel
    weights: Optional[np.ndarray] = None
    boundary_marginals: Mapping[tuple[int, int], LogDensity] = field(default_factory=dict)
    authoritative: Optional[int] = None
    choices: Optional[tuple[int, ...]] = None
    log_norm: float = 0.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise PoolingConfigError(f"unknown pooling method {self.method!r}")
        M = self.chain.n_submodels
        if self.method in ("logarithmic", "poe"):
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (M,) or (w < 0).any():
                raise PoolingConfigError(f"logarithmic pooling needs {M} nonnegative weights")
            if not (w > 0).any():
                raise PoolingConfigError("all-zero pooling weights")
            object.__setattr__(self, "weights", w)
        elif self.method == "linear":
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (M - 1, 2) or (w < 0).any():
                raise PoolingConfigError(
                    f"linear pooling needs ({M - 1}, 2) nonnegative weights"
                )
            if (w.sum(axis=1) == 0).any():
                raise PoolingConfigError("a boundary has all-zero linear weights")
            object.__setattr__(self, "weights", w)
            for b in range(M - 1):
                if w[b, 0] > 0:
                    self._one_block(b, b)
                if w[b, 1] > 0:
                    self._one_block(b + 1, b)
        elif self.method == "dictatorial-partial":
            if self.authoritative is None or not 0 <= self.authoritative < M:
                raise PoolingConfigError("partial dictatorial pooling needs a submodel index")
            if self.weights is None:
                object.__setattr__(self, "weights", np.ones(M))
        elif self.method == "dictatorial-complete":
            if self.choices is None or len(self.choices) != M - 1:
                raise PoolingConfigError(
                    f"complete dictatorial pooling needs {M - 1} per-boundary choices"
                )
            for b, c in enumerate(self.choices):
                if c not in (b, b + 1):
                    raise PoolingConfigError(
                        f"boundary {b} must be assigned to submodel {b} or {b + 1}, got {c}"
                    )
            # Trigger missing-marginal errors at construction time.
            for b, m, kind in self._complete_terms():
                if kind == "one-block":
                    self._one_block(m, b)

    def _one_block(self, m: int, b: int) -> LogDensity:
        """One-block marginal p_m(phi_b); native for end submodels."""
        touched = self.chain.blocks_of(m)
        if touched == (b,):
            spec = self.chain.submodels[m]
            return spec.eval_log_prior
        try:
            return self.boundary_marginals[(m, b)]
        except KeyError:
            raise PoolingConfigError(
                f"missing one-block marginal for submodel {m} over boundary {b}"
            ) from None

    def _complete_terms(self):
        """Expand complete-dictatorial choices into evaluation terms.

        Yields (boundary, submodel, kind) with kind "two-block" covering a
        consecutive pair owned by the same middle submodel (the dependence
        preservation rule) or "one-block" for a single boundary.
        """
        b = 0
        n_b = len(self.choices)
        while b < n_b:
            m = self.choices[b]
            if m == b + 1 and b + 1 < n_b and self.choices[b + 1] == m:
                yield b, m, "two-block"
                b += 2
            else:
                yield b, m, "one-block"
                b += 1

    # -- evaluation -----------------------------------------------------

    def log_density(self, phi: Sequence[np.ndarray]):
        """Unnormalized log pooled density; block values may be batched."""
        if self.method in ("logarithmic", "poe"):
            out = self._log_density_logarithmic(phi)
        elif self.method == "linear":
            out = self._log_density_linear(phi)
        elif self.method == "dictatorial-partial":
            out = self._log_density_partial(phi)
        else:
            out = self._log_density_complete(phi)
        return out - self.log_norm

    def _log_density_logarithmic(self, phi):
        total = 0.0
        for m, spec in enumerate(self.chain.submodels):
            w = self.weights[m]
            if w == 0:
                continue
            total = total + w * np.asarray(spec.eval_log_prior(self.chain.phi_m(m, phi)))
        return total

    def _log_density_linear(self, phi):
        total = 0.0
        for b in range(len(self.chain.phi_blocks)):
            x = np.asarray(phi[b], dtype=float)
            terms = []
            for slot, m in enumerate((b, b + 1)):
                w = self.weights[b, slot]
                if w > 0:
                    terms.append(math.log(w) + np.asarray(self._one_block(m, b)(x)))
            if len(terms) == 1:
                total = total + terms[0]
            else:
                total = total + np.logaddexp(terms[0], terms[1])
        return total

    def _log_density_partial(self, phi):
        m0 = self.authoritative
        chain = self.chain
        spec = chain.submodels[m0]
        total = np.asarray(spec.eval_log_prior(chain.phi_m(m0, phi)), dtype=float)
        covered = set(chain.blocks_of(m0))
        for m, other in enumerate(chain.submodels):
            if m == m0:
                continue
            free = [b for b in chain.blocks_of(m) if b not in covered]
            if not free:
                continue
            w = self.weights[m]
            if w == 0:
                continue
            if free == list(chain.blocks_of(m)):
                total = total + w * np.asarray(other.eval_log_prior(chain.phi_m(m, phi)))
            else:
                # Adjacent to the authoritative submodel: only the outer
                # block is free, so its one-block marginal is pooled.
                b = free[0]
                total = total + w * np.asarray(
                    self._one_block(m, b)(np.asarray(phi[b], dtype=float))
                )
        return total

    def _log_density_complete(self, phi):
        total = 0.0
        for b, m, kind in self._complete_terms():
            if kind == "two-block":
                spec = self.chain.submodels[m]
                total = total + np.asarray(spec.eval_log_prior(self.chain.phi_m(m, phi)))
            else:
                total = total + np.asarray(
                    self._one_block(m, b)(np.asarray(phi[b], dtype=float))
                )
        return total


def log_pooling(chain: ChainModel, lam: Sequence[float]) -> PooledPrior:
    return PooledPrior("logarithmic", chain, weights=np.asarray(lam, dtype=float))


def poe_pooling(chain: ChainModel) -> PooledPrior:
    return PooledPrior("poe", chain, weights=np.ones(chain.n_submodels))


def linear_pooling(
    chain: ChainModel,
    lam: Sequence[Sequence[float]],
    boundary_marginals: Optional[Mapping[tuple[int, int], LogDensity]] = None,
) -> PooledPrior:
    return PooledPrior(
        "linear",
        chain,
        weights=np.asarray(lam, dtype=float),
        boundary_marginals=dict(boundary_marginals or {}),
    )


def dictatorial_partial(
    chain: ChainModel,
    authoritative: int,
    side_weights: Optional[Sequence[float]] = None,
    boundary_marginals: Optional[Mapping[tuple[int, int], LogDensity]] = None,
) -> PooledPrior:
    w = None if side_weights is None else np.asarray(side_weights, dtype=float)
    return PooledPrior(
        "dictatorial-partial",
        chain,
        weights=w,
        boundary_marginals=dict(boundary_marginals or {}),
        authoritative=authoritative,
    )


def dictatorial_complete(
    chain: ChainModel,
    choices: Sequence[int],
    boundary_marginals: Optional[Mapping[tuple[int, int], LogDensity]] = None,
) -> PooledPrior:
    return PooledPrior(
        "dictatorial-complete",
        chain,
        boundary_marginals=dict(boundary_marginals or {}),
        choices=tuple(int(c) for c in choices),
    )


def log_pool_eval(pool: PooledPrior, phi: Sequence[np.ndarray]):
    """Functional wrapper around ``PooledPrior.log_density``."""
    out = pool.log_density(phi)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class PoolFactorization:
    """Three-factor split of a pooled prior for the multi-stage samplers.

    In log space, pool1(block 1) + pool2(block 1, block 2) + pool3(block 2)
    equals the pooled log density up to one additive constant.
    """

    pool1: LogDensity
    pool2: Callable[[np.ndarray, np.ndarray], float]
    pool3: LogDensity
    mode: str

    def log_density(self, phi: Sequence[np.ndarray]):
        x0 = np.asarray(phi[0], dtype=float)
        x1 = np.asarray(phi[1], dtype=float)
        return (
            np.asarray(self.pool1(x0))
            + np.asarray(self.pool2(x0, x1))
            + np.asarray(self.pool3(x1))
        )


def _zero(x: np.ndarray):
    x = np.asarray(x, dtype=float)
    return 0.0 if x.ndim <= 1 else np.zeros(x.shape[:-1])


def factorize_for_sampler(pool: PooledPrior, mode: str = "flat-ends") -> PoolFactorization:
    """Split a pooled prior for the two-stage samplers (M = 3 only).

    "flat-ends" puts the whole pooled density in the middle factor;
    "subprior-ends" uses each end submodel's own prior marginal as its end
    factor, so stage one targets the plain subposteriors.
    """
    chain = pool.chain
    if chain.n_submodels != 3:
        raise UnsupportedConfigError(
            f"sampler factorization supports M = 3 chains, got M = {chain.n_submodels}"
        )
    if mode == "flat-ends":
        return PoolFactorization(
            pool1=_zero,
            pool2=lambda x0, x1: pool.log_density([x0, x1]),
            pool3=_zero,
            mode=mode,
        )
    if mode == "subprior-ends":
        end1 = chain.submodels[0].eval_log_prior
        end3 = chain.submodels[2].eval_log_prior

        def pool2(x0, x1):
            full = pool.log_density([x0, x1])
            if np.ndim(full) == 0:
                full = float(full)
                if full == -math.inf:
                    return -math.inf
                e1 = float(end1(np.asarray(x0, dtype=float)))
                e3 = float(end3(np.asarray(x1, dtype=float)))
                if e1 == -math.inf or e3 == -math.inf:
                    raise NumericalFailureError(
                        "subprior-ends factorization: an end prior marginal is "
                        "-inf where the pooled prior is finite"
                    )
                return full - e1 - e3
            full = np.asarray(full, dtype=float)
            e1 = np.asarray(end1(np.asarray(x0, dtype=float)), dtype=float)
            e3 = np.asarray(end3(np.asarray(x1, dtype=float)), dtype=float)
            bad = np.isfinite(full) & (np.isneginf(e1) | np.isneginf(e3))
            if np.any(bad):
                raise NumericalFailureError(
                    "subprior-ends factorization: an end prior marginal is -inf "
                    "where the pooled prior is finite"
                )
            with np.errstate(invalid="ignore"):
                out = full - e1 - e3
            # -inf pooled density dominates regardless of the end terms.
            out = np.where(np.isneginf(full), -np.inf, out)
            return float(out) if out.ndim == 0 else out

        return PoolFactorization(pool1=end1, pool2=pool2, pool3=end3, mode=mode)
    raise UnsupportedConfigError(f"unknown factorization mode {mode!r}")


@dataclass(frozen=True)
class GridSpec:
    """Rectangular evaluation grid: (lo, hi, n) per continuous coordinate."""

    axes: tuple[tuple[float, float, int], ...]

    def centers(self) -> list[np.ndarray]:
        out = []
        for lo, hi, n in self.axes:
            step = (hi - lo) / n
            out.append(lo + step * (np.arange(n) + 0.5))
        return out

    @property
    def cell_volume(self) -> float:
        vol = 1.0
        for lo, hi, n in self.axes:
            vol *= (hi - lo) / n
        return vol

    @property
    def n_points(self) -> int:
        n = 1
        for _, _, k in self.axes:
            n *= k
        return n


@dataclass(frozen=True)
class GridTable:
    """Normalized density table over a rectangular grid of cell centers."""

    centers: tuple[np.ndarray, ...]
    density: np.ndarray
    cell_volume: float

    def total_mass(self) -> float:
        return float(self.density.sum() * self.cell_volume)

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        """Mean vector and covariance matrix of the grid distribution."""
        mesh = np.meshgrid(*self.centers, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        w = self.density.ravel() * self.cell_volume
        mean = w @ pts
        diff = pts - mean
        cov = (diff * w[:, None]).T @ diff
        return mean, cov

    def correlation(self, i: int = 0, j: int = 1) -> float:
        _, cov = self.moments()
        return float(cov[i, j] / math.sqrt(cov[i, i] * cov[j, j]))

    def rows(self):
        """Iterate (coordinates..., density) rows in C order."""
        mesh = np.meshgrid(*self.centers, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        dens = self.density.ravel()
        for k in range(pts.shape[0]):
            yield tuple(pts[k]) + (dens[k],)


def grid_normalize(pool: PooledPrior, grid: GridSpec) -> GridTable:
    """Exactly normalized pooled density on a grid (continuous blocks only)."""
    chain = pool.chain
    dims = [b.dim for b in chain.phi_blocks]
    for block in chain.phi_blocks:
        if any(c.kind == "discrete" for c in block.coords):
            raise UnsupportedConfigError(
                f"grid normalization supports continuous blocks only; "
                f"block {block.label!r} has discrete coordinates"
            )
    if len(grid.axes) != sum(dims):
        raise PoolingConfigError(
            f"grid needs {sum(dims)} axes, got {len(grid.axes)}"
        )
    if grid.n_points > 10**7:
        raise PoolingConfigError(f"grid has {grid.n_points} points, limit is 1e7")
    centers = grid.centers()
    mesh = np.meshgrid(*centers, indexing="ij")
    stacked = np.stack(mesh, axis=-1)  # (..., total_dim)
    blocks = []
    offset = 0
    for d in dims:
        blocks.append(stacked[..., offset : offset + d])
        offset += d
    logd = np.asarray(pool.log_density(blocks), dtype=float)
    if np.isnan(logd).any() or np.isposinf(logd).any():
        raise NumericalFailureError("pooled log density is non-finite on the grid")
    peak = logd.max()
    if not np.isfinite(peak):
        raise NumericalFailureError("pooled density has no mass on the grid")
    w = np.exp(logd - peak)
    total = w.sum() * grid.cell_volume
    if not np.isfinite(total) or total <= 0:
        raise NumericalFailureError("pooled density mass on the grid is not finite")
    return GridTable(tuple(centers), w / total, grid.cell_volume)

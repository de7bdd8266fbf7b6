"""Circulant-embedding sampling of a lognormal field on uniform grids.

The covariance matrix of a stationary Gaussian field on a uniform
rectilinear grid is (block-)Toeplitz and embeds into a (block-)circulant
matrix whose eigenvalues come out of one multidimensional FFT.  From the
real orthogonal eigen-factorization C = G Lambda G^T one gets exact field
samples Z = B Y + Zbar in O(s log s) per sample, where B is the first m
rows of G sqrt(Lambda) and s is the extended (padded) grid size.

Each conjugate frequency pair of the extension contributes two real
degrees of freedom (a cosine and a sine direction), each self-conjugate
frequency one, so s equals the extended grid size and every component of
Y drives one fixed spatial direction -- the property quasi-Monte Carlo
inputs need.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .covariance import MaternParams, MeanField, matern_cov

__all__ = [
    "UniformGrid",
    "CirculantEmbedding",
    "FieldRealization",
    "PaddingExhausted",
    "NestingViolation",
    "build_embedding",
    "factor_row",
    "sample_field",
    "eval_field",
    "restrict_to_coarse",
]


class PaddingExhausted(RuntimeError):
    """Padding attempts ran out before the extension became positive
    semidefinite; the kernel/grid combination needs a larger budget."""


class NestingViolation(ValueError):
    """Coarse grid points are not a subset of the fine grid points."""


@dataclass(frozen=True)
class UniformGrid:
    """Uniform rectilinear grid on the closed unit cube [0,1]^d.

    ``points_per_axis`` counts points including both boundaries, so the
    spacing is 1/(points_per_axis - 1).  Grids with points_per_axis of
    the form k*(m-1)+1 are nested refinements of the m-point grid.
    """

    dim: int
    points_per_axis: int

    def __post_init__(self):
        if self.dim not in (1, 2, 3):
            raise ValueError(f"dim must be 1, 2 or 3, got {self.dim}")
        if self.points_per_axis < 2:
            raise ValueError("need at least 2 points per axis")

    @property
    def spacing(self) -> float:
        return 1.0 / (self.points_per_axis - 1)

    @property
    def num_points(self) -> int:
        return self.points_per_axis**self.dim

    def points(self) -> np.ndarray:
        """All grid points as an (num_points, dim) array, C-ordered."""
        axes = [np.linspace(0.0, 1.0, self.points_per_axis)] * self.dim
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


@dataclass(frozen=True)
class CirculantEmbedding:
    """Eigen-factorization of the circulant extension of the covariance.

    ``s`` is the stochastic dimension: the number of real standard-normal
    inputs one sample consumes, equal to the extended grid size.
    ``importance_order[r]`` is the internal coordinate driven by input
    coordinate r; inputs are ranked by descending eigenvalue, ties broken
    by ascending frequency index (cosine before sine).
    """

    grid: UniformGrid
    ext_per_axis: int
    eigenvalues: np.ndarray          # per frequency, extended grid shape
    s: int
    importance_order: np.ndarray     # shape (s,), permutation of range(s)
    clamped: int                     # eigenvalues clamped to zero
    # internal coordinate bookkeeping (canonical order, see _coordinates)
    _coord_eigs: np.ndarray = field(repr=False)       # eigenvalue per coordinate
    _self_freq: np.ndarray = field(repr=False)        # flat freq of self-conjugate coords
    _pair_freq: np.ndarray = field(repr=False)        # flat freq of pair owners
    _pair_conj: np.ndarray = field(repr=False)        # flat freq of pair partners
    _coord_self: np.ndarray = field(repr=False)       # coord index of self coords
    _coord_cos: np.ndarray = field(repr=False)        # coord index of cosine coords
    _coord_sin: np.ndarray = field(repr=False)        # coord index of sine coords


@dataclass
class FieldRealization:
    """Lognormal field values on a uniform grid: a = exp(Z), node-exact."""

    level: int
    grid: UniformGrid
    log_values: np.ndarray   # shape (n,)*d
    values: np.ndarray       # exp(log_values), same shape


def _conjugate_index_maps(ext: int, dim: int):
    """Pair every frequency of the (ext,)*dim grid with its conjugate.

    Returns flat index arrays (self_idx, owner_idx, partner_idx) where a
    frequency k is self-conjugate when -k == k (mod ext) on every axis,
    and otherwise the smaller flat index of {k, -k} is the owner.
    """
    shape = (ext,) * dim
    idx = np.indices(shape).reshape(dim, -1)
    conj = (-idx) % ext
    flat = np.ravel_multi_index(idx, shape)
    conj_flat = np.ravel_multi_index(conj, shape)
    self_mask = conj_flat == flat
    owner_mask = flat < conj_flat
    return flat[self_mask], flat[owner_mask], conj_flat[owner_mask]


def _coordinates(eigs_flat: np.ndarray, ext: int, dim: int):
    """Enumerate the s real coordinates of the factorization.

    Canonical order: ascending owner frequency index, cosine before sine.
    Returns the per-coordinate eigenvalues plus the index arrays used to
    scatter a real input vector into a Hermitian spectrum.
    """
    self_idx, owner_idx, partner_idx = _conjugate_index_maps(ext, dim)
    n_self, n_pair = self_idx.size, owner_idx.size
    s = n_self + 2 * n_pair

    # canonical coordinate list: merge (freq, kind) sorted by freq then kind
    freq = np.concatenate([self_idx, owner_idx, owner_idx])
    kind = np.concatenate(
        [np.zeros(n_self, dtype=np.int8),
         np.zeros(n_pair, dtype=np.int8),
         np.ones(n_pair, dtype=np.int8)]
    )
    order = np.lexsort((kind, freq))
    coord_of = np.empty(s, dtype=np.int64)
    coord_of[order] = np.arange(s)

    coord_self = coord_of[:n_self]
    coord_cos = coord_of[n_self:n_self + n_pair]
    coord_sin = coord_of[n_self + n_pair:]

    coord_eigs = np.empty(s)
    coord_eigs[coord_self] = eigs_flat[self_idx]
    coord_eigs[coord_cos] = eigs_flat[owner_idx]
    coord_eigs[coord_sin] = eigs_flat[owner_idx]
    return coord_eigs, self_idx, owner_idx, partner_idx, coord_self, coord_cos, coord_sin


def _circulant_column(kernel, grid: UniformGrid, ext: int) -> np.ndarray:
    """First column of the nested circulant extension of the covariance."""
    h = grid.spacing
    lag = np.arange(ext)
    lag = np.minimum(lag, ext - lag) * h
    if grid.dim == 1:
        dist = lag
    else:
        mesh = np.meshgrid(*([lag] * grid.dim), indexing="ij")
        dist = np.sqrt(sum(m**2 for m in mesh))
    if callable(kernel):
        return np.asarray(kernel(dist), dtype=float)
    return matern_cov(kernel, dist)


def build_embedding(kernel, grid: UniformGrid, tol: float = 1e-13,
                    max_attempts: int = 12) -> CirculantEmbedding:
    """Build the circulant embedding of the covariance on ``grid``.

    ``kernel`` is MaternParams, or any callable mapping an array of
    distances to covariance values (homogeneous kernels only).

    Starts from the minimal extension 2*(n-1) per axis and doubles the
    extension until the spectrum is nonnegative up to ``tol`` (relative
    to the largest eigenvalue).  Eigenvalues in [-tol*max, 0) are clamped
    to zero; anything more negative triggers another doubling.

    Raises PaddingExhausted after ``max_attempts`` doublings.
    """
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    n = grid.points_per_axis
    ext = 2 * (n - 1)
    for _ in range(max_attempts + 1):
        col = _circulant_column(kernel, grid, ext)
        eigs = np.fft.fftn(col).real
        max_eig = eigs.max()
        min_eig = eigs.min()
        if min_eig >= -tol * max_eig:
            clamped = int(np.count_nonzero(eigs < 0))
            eigs = np.maximum(eigs, 0.0)
            eigs_flat = eigs.ravel()
            coords = _coordinates(eigs_flat, ext, grid.dim)
            coord_eigs = coords[0]
            s = coord_eigs.size
            # stable sort: canonical order already breaks ties by
            # ascending frequency with cosine first
            importance = np.argsort(-coord_eigs, kind="stable")
            return CirculantEmbedding(
                grid=grid,
                ext_per_axis=ext,
                eigenvalues=eigs,
                s=s,
                importance_order=importance,
                clamped=clamped,
                _coord_eigs=coord_eigs,
                _self_freq=coords[1],
                _pair_freq=coords[2],
                _pair_conj=coords[3],
                _coord_self=coords[4],
                _coord_cos=coords[5],
                _coord_sin=coords[6],
            )
        ext *= 2
    raise PaddingExhausted(
        f"no positive semidefinite extension within {max_attempts} doublings "
        f"(grid n={n}, dim={grid.dim}, kernel={kernel})"
    )


def _grid_flat_in_ext(e: CirculantEmbedding) -> np.ndarray:
    """Flat extended-grid indices of the physical grid points (C order)."""
    n, dim, ext = e.grid.points_per_axis, e.grid.dim, e.ext_per_axis
    idx = np.indices((n,) * dim).reshape(dim, -1)
    return np.ravel_multi_index(idx, (ext,) * dim)


def assign_inputs(e: CirculantEmbedding, y: np.ndarray) -> np.ndarray:
    """Scatter an importance-ordered input vector to canonical coordinates.

    Input coordinate r (the r-th QMC dimension) drives the internal
    coordinate ``importance_order[r]``, so coordinate 0 is attached to
    the largest eigenvalue of the extension.
    """
    y = np.asarray(y, dtype=float)
    if y.shape != (e.s,):
        raise ValueError(f"expected input of length s={e.s}, got {y.shape}")
    out = np.empty_like(y)
    out[e.importance_order] = y
    return out


def sample_field(e: CirculantEmbedding, zbar: MeanField, y: np.ndarray,
                 level: int = 0) -> FieldRealization:
    """Draw the lognormal field for one vector of standard normals.

    ``y`` is consumed in importance order (coordinate 0 drives the
    largest-eigenvalue direction).  Computes B y via one inverse FFT of
    the Hermitian spectrum built from y -- B is never materialized --
    then adds the mean and exponentiates.
    """
    y_canon = assign_inputs(e, y)
    dim, ext = e.grid.dim, e.ext_per_axis
    shape = (ext,) * dim
    spec = np.zeros(ext**dim, dtype=complex)
    spec[e._self_freq] = y_canon[e._coord_self]
    pair = (y_canon[e._coord_cos] + 1j * y_canon[e._coord_sin]) / np.sqrt(2.0)
    spec[e._pair_freq] = pair
    spec[e._pair_conj] = np.conj(pair)
    spec *= np.sqrt(e.eigenvalues.ravel())
    z_ext = np.sqrt(e.s) * np.fft.ifftn(spec.reshape(shape))
    z_flat = z_ext.real.ravel()[_grid_flat_in_ext(e)]

    n = e.grid.points_per_axis
    log_vals = z_flat + zbar.at(e.grid.points())
    log_vals = log_vals.reshape((n,) * dim)
    return FieldRealization(level=level, grid=e.grid,
                            log_values=log_vals, values=np.exp(log_vals))


def factor_row(e: CirculantEmbedding, i: int) -> np.ndarray:
    """Row i of the factor B (canonical coordinate order), i < m.

    B B^T reproduces the covariance matrix exactly up to FFT roundoff
    whenever no eigenvalue clamping occurred.
    """
    m = e.grid.num_points
    if not (0 <= i < m):
        raise IndexError(f"grid point index {i} out of range [0, {m})")
    dim, ext = e.grid.dim, e.ext_per_axis
    shape = (ext,) * dim
    pt = np.unravel_index(_grid_flat_in_ext(e)[i], shape)

    def angles(freq_flat: np.ndarray) -> np.ndarray:
        k = np.stack(np.unravel_index(freq_flat, shape), axis=0)
        return 2.0 * np.pi * sum(pt[ax] * k[ax] for ax in range(dim)) / ext

    eigs_flat = e.eigenvalues.ravel()
    row = np.empty(e.s)
    th_self = angles(e._self_freq)
    row[e._coord_self] = np.sqrt(eigs_flat[e._self_freq] / e.s) * np.cos(th_self)
    th_pair = angles(e._pair_freq)
    amp = np.sqrt(2.0 * eigs_flat[e._pair_freq] / e.s)
    row[e._coord_cos] = amp * np.cos(th_pair)
    row[e._coord_sin] = -amp * np.sin(th_pair)
    return row


def _check_in_domain(x: np.ndarray, dim: int):
    if x.shape[-1] != dim:
        raise ValueError(f"points must have {dim} components")
    if np.any(x < -1e-12) or np.any(x > 1.0 + 1e-12):
        raise ValueError("point outside the closed unit cube")


def eval_field(f: FieldRealization, x: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of the field at points in the unit cube.

    ``x`` is a point (shape (d,)) or an array of points (npts, d).  The
    interpolation is a convex combination of the 2^d surrounding vertex
    values, exact at grid nodes; values stay inside the nodal range.
    Cell choice at interior cell boundaries takes the lower cell index,
    clamped at the top boundary.
    """
    x_arr = np.atleast_2d(np.asarray(x, dtype=float))
    dim = f.grid.dim
    _check_in_domain(x_arr, dim)
    n = f.grid.points_per_axis
    h = f.grid.spacing
    t = np.clip(x_arr, 0.0, 1.0) / h
    i0 = np.minimum(t.astype(np.int64), n - 2)
    w = t - i0

    vals = f.values
    out = np.zeros(x_arr.shape[0])
    for corner in range(2**dim):
        bits = [(corner >> ax) & 1 for ax in range(dim)]
        weight = np.ones(x_arr.shape[0])
        idx = []
        for ax in range(dim):
            weight *= w[:, ax] if bits[ax] else (1.0 - w[:, ax])
            idx.append(i0[:, ax] + bits[ax])
        out += weight * vals[tuple(idx)]
    if np.asarray(x).ndim == 1:
        return float(out[0])
    return out


def restrict_to_coarse(f: FieldRealization, coarse: UniformGrid) -> FieldRealization:
    """Restrict a field to a nested coarser grid (exact at shared nodes).

    The restricted realization keeps the fine field's nodal values (both
    a and log a) at the coarse nodes bitwise; evaluation in between uses
    coarse-cell multilinear interpolation.
    """
    if coarse.dim != f.grid.dim:
        raise NestingViolation("coarse grid dimension differs")
    nf, nc = f.grid.points_per_axis, coarse.points_per_axis
    if (nf - 1) % (nc - 1) != 0:
        raise NestingViolation(
            f"coarse grid ({nc} per axis) is not nested in fine grid ({nf} per axis)"
        )
    stride = (nf - 1) // (nc - 1)
    sl = (slice(None, None, stride),) * f.grid.dim
    return FieldRealization(
        level=f.level - 1,
        grid=coarse,
        log_values=f.log_values[sl].copy(),
        values=f.values[sl].copy(),
    )

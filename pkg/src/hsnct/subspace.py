"""Spectral subspace extraction and expansion.

The normalized sinogram p (rows are pixels, columns are wavelength bins) is
factorized as p ~= V D^T with V >= 0 holding per-pixel channel coefficients
and D >= 0 holding spectral basis vectors.  Reconstruction then runs on the
few V channels instead of every wavelength bin, and ``expand`` maps
reconstructed channel volumes back to the full spectral grid through the
same basis.

The factorization is Frobenius-norm NMF solved by multiplicative updates:

    V <- V * (X D) / (V D^T D)        D <- D * (X^T V) / (D V^T V)

with a small epsilon in the denominators.  Each full sweep is monotone in
the objective ||X - V D^T||_F^2.  All iteration happens in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from hsnct.containers import (
    HyperspectralSinogram,
    SpectralBasis,
    SubspaceSinogram,
    ValidationError,
    VolumeStack,
)

__all__ = [
    "NmfOptions",
    "FactorizationReport",
    "nmf_factorize",
    "rank_scan",
    "subspace_residual",
    "project_onto_basis",
    "expand",
]

_EPS = 1e-12
_INITS = ("seeded-uniform", "nndsvd-style")
_UPDATE_RULES = ("multiplicative-frobenius",)


@dataclass(frozen=True)
class NmfOptions:
    rank: int
    seed: int
    max_iters: int = 500
    rel_tol: float = 1e-6
    init: str = "seeded-uniform"
    update_rule: str = "multiplicative-frobenius"

    def __post_init__(self):
        if self.rank < 1:
            raise ValidationError("rank must be >= 1")
        if self.max_iters < 1:
            raise ValidationError("max_iters must be >= 1")
        if not (self.rel_tol > 0):
            raise ValidationError("rel_tol must be > 0")
        if self.init not in _INITS:
            raise ValidationError(f"init must be one of {_INITS}, got {self.init!r}")
        if self.update_rule not in _UPDATE_RULES:
            raise ValidationError(f"update_rule must be one of {_UPDATE_RULES}")


@dataclass(frozen=True)
class FactorizationReport:
    """Convergence record of one factorization run.

    ``objective_trace[i]`` is ||X - V D^T||_F^2 after sweep i+1.
    ``residual_energy`` is the final objective over ||X||_F^2 (0 for an
    all-zero input).  ``reseeded_columns`` lists columns revived once from
    the residual after collapsing to zero; ``dead_columns`` lists columns
    that collapsed twice and were packaged as an inert unit vector with
    zero coefficients.
    """

    iterations_run: int
    objective_trace: np.ndarray
    residual_energy: float
    converged: bool
    reseeded_columns: tuple = ()
    dead_columns: tuple = ()

    def __post_init__(self):
        trace = np.ascontiguousarray(self.objective_trace, dtype=np.float64)
        trace.flags.writeable = False
        object.__setattr__(self, "objective_trace", trace)
        if trace.size != self.iterations_run:
            raise ValidationError("objective_trace length must equal iterations_run")
        if trace.size and (not np.all(np.isfinite(trace)) or float(trace.min()) < 0):
            raise ValidationError("objective_trace must be finite and >= 0")
        if not (0.0 <= self.residual_energy < np.inf):
            raise ValidationError("residual_energy must be finite and >= 0")


def _init_factors(X, rank, opts):
    n_p, n_k = X.shape
    if opts.init == "nndsvd-style":
        return _nndsvd_init(X, rank)
    rng = np.random.default_rng(opts.seed)
    mean = float(X.mean()) if X.size else 0.0
    scale = np.sqrt(mean / rank) if mean > 0 else 0.0
    # 1 - random() lies in (0, 1], keeping every entry strictly positive
    V = (1.0 - rng.random((n_p, rank))) * scale
    D = (1.0 - rng.random((n_k, rank))) * scale
    return V, D


def _nndsvd_init(X, rank):
    """Deterministic SVD-based non-negative init; zeros backfilled with the
    matrix mean so multiplicative updates can move them."""
    n_p, n_k = X.shape
    U, S, Vt = np.linalg.svd(X, full_matrices=False)
    V = np.zeros((n_p, rank))
    D = np.zeros((n_k, rank))
    if S[0] > 0:
        V[:, 0] = np.sqrt(S[0]) * np.abs(U[:, 0])
        D[:, 0] = np.sqrt(S[0]) * np.abs(Vt[0])
    for j in range(1, min(rank, S.size)):
        if S[j] <= 0:
            break
        u, w = U[:, j], Vt[j]
        up, un = np.maximum(u, 0), np.maximum(-u, 0)
        wp, wn = np.maximum(w, 0), np.maximum(-w, 0)
        n_up, n_un = np.linalg.norm(up), np.linalg.norm(un)
        n_wp, n_wn = np.linalg.norm(wp), np.linalg.norm(wn)
        termp, termn = n_up * n_wp, n_un * n_wn
        if termp >= termn and termp > 0:
            V[:, j] = np.sqrt(S[j] * termp) / n_up * up
            D[:, j] = np.sqrt(S[j] * termp) / n_wp * wp
        elif termn > 0:
            V[:, j] = np.sqrt(S[j] * termn) / n_un * un
            D[:, j] = np.sqrt(S[j] * termn) / n_wn * wn
    mean = float(X.mean()) if X.size else 0.0
    if mean > 0:
        V[V <= 0] = mean
        D[D <= 0] = mean
    return V, D


def _objective(X2, X, V, D):
    """||X - V D^T||_F^2 without forming the product, clamped at 0."""
    XD = X @ D
    cross = float(np.einsum("ij,ij->", XD, V))
    gram = float(np.einsum("ij,ij->", V.T @ V, D.T @ D))
    return max(X2 - 2.0 * cross + gram, 0.0)


def _revive_dead_columns(X, V, D, reseeded, dead):
    """Re-seed columns of D that collapsed to zero from the largest-residual
    spectrum; a column that collapses twice is retired to ``dead``.  The
    re-seed uses the per-row least-squares optimal coefficient, so the
    objective cannot increase."""
    collapsed = np.flatnonzero(D.max(axis=0) <= 0.0)
    if collapsed.size == 0:
        return
    R = None
    for j in collapsed:
        if j in dead:
            continue
        if j in reseeded:
            dead.add(int(j))
            V[:, j] = 0.0
            continue
        if R is None:
            R = X - V @ D.T
            row_energy = np.einsum("ij,ij->i", R, R)
        d_new = np.abs(R[int(np.argmax(row_energy))])
        if d_new.max() <= 0.0:
            dead.add(int(j))
            V[:, j] = 0.0
            continue
        d_new /= np.linalg.norm(d_new)
        D[:, j] = d_new
        V[:, j] = np.maximum(R @ d_new, 0.0)
        reseeded.add(int(j))


def _canonical_order(V, D):
    """Column order: descending L2 norm of the V column, exact ties broken
    by element-wise comparison of the V column then the D column."""
    norms = np.linalg.norm(V, axis=0)
    order = list(np.argsort(-norms, kind="stable"))
    i = 0
    while i < len(order) - 1:
        j = i + 1
        while j < len(order) and norms[order[j]] == norms[order[i]]:
            j += 1
        if j - i > 1:
            order[i:j] = sorted(order[i:j],
                                key=lambda c: (tuple(V[:, c]), tuple(D[:, c])))
        i = j
    return order


def nmf_factorize(p: HyperspectralSinogram, opts: NmfOptions):
    """Factorize p ~= V D^T; returns (SubspaceSinogram, SpectralBasis,
    FactorizationReport).

    Basis columns are normalized to unit L2 norm (coefficients absorb the
    scale) and put in canonical order; the result is bit-reproducible for a
    fixed seed.
    """
    X = p.values.astype(np.float64)
    if X.size and float(X.min()) < 0:
        raise ValidationError("factorization input must be non-negative; "
                              "normalize with clamping first")
    n_p, n_k = X.shape
    if opts.rank > min(n_p, n_k):
        raise ValidationError(
            f"rank {opts.rank} exceeds min(N_p, N_k) = {min(n_p, n_k)}")

    V, D = _init_factors(X, opts.rank, opts)
    X2 = float(np.einsum("ij,ij->", X, X))
    zero_floor = X2 * 1e-15  # objective below this is numerically an exact fit
    reseeded: set = set()
    dead: set = set()

    f_prev = _objective(X2, X, V, D)
    trace = []
    converged = False
    for _ in range(opts.max_iters):
        XD = X @ D
        V *= XD / (V @ (D.T @ D) + _EPS)
        XtV = X.T @ V
        D *= XtV / (D @ (V.T @ V) + _EPS)
        _revive_dead_columns(X, V, D, reseeded, dead)
        f = _objective(X2, X, V, D)
        trace.append(f)
        if f <= zero_floor or abs(f_prev - f) <= opts.rel_tol * max(f_prev, 1e-300):
            converged = True
            break
        f_prev = f

    # package: inert unit columns for the dead ones, unit-norm basis columns
    # elsewhere, canonical order everywhere
    norms = np.linalg.norm(D, axis=0)
    for j in range(opts.rank):
        if j in dead or norms[j] <= 0:
            dead.add(j)
            D[:, j] = 1.0 / np.sqrt(n_k)
            V[:, j] = 0.0
        else:
            V[:, j] *= norms[j]
            D[:, j] /= norms[j]
    order = _canonical_order(V, D)
    V, D = V[:, order], D[:, order]
    remap = {int(old): new for new, old in enumerate(order)}

    report = FactorizationReport(
        iterations_run=len(trace),
        objective_trace=np.asarray(trace),
        residual_energy=(trace[-1] / X2) if X2 > 0 else 0.0,
        converged=converged,
        reseeded_columns=tuple(sorted(remap[j] for j in reseeded)),
        dead_columns=tuple(sorted(remap[j] for j in dead)),
    )
    return SubspaceSinogram(V, p.geometry), SpectralBasis(D, p.axis), report


def rank_scan(p: HyperspectralSinogram, ranks, opts: NmfOptions):
    """Residual energy fraction per candidate rank: list of (rank, eps_frac)."""
    ranks = [int(r) for r in ranks]
    if not ranks:
        raise ValidationError("ranks must be non-empty")
    out = []
    for r in ranks:
        _, _, report = nmf_factorize(p, replace(opts, rank=r))
        out.append((r, report.residual_energy))
    return out


def subspace_residual(p: HyperspectralSinogram, v: SubspaceSinogram, d: SpectralBasis):
    """Residual p - V D^T (float64 array) and its relative Frobenius energy."""
    if v.coeffs.shape[0] != p.values.shape[0]:
        raise ValidationError(
            f"coefficient rows {v.coeffs.shape[0]} != sinogram rows {p.values.shape[0]}")
    if d.basis.shape[0] != p.axis.num_bins:
        raise ValidationError(
            f"basis bins {d.basis.shape[0]} != sinogram bins {p.axis.num_bins}")
    if v.rank != d.rank:
        raise ValidationError(f"coefficient rank {v.rank} != basis rank {d.rank}")
    X = p.values.astype(np.float64)
    R = X - v.coeffs.astype(np.float64) @ d.basis.astype(np.float64).T
    X2 = float(np.einsum("ij,ij->", X, X))
    R2 = float(np.einsum("ij,ij->", R, R))
    if X2 > 0:
        eps_frac = R2 / X2
    else:
        eps_frac = 0.0 if R2 == 0.0 else np.inf
    return R, eps_frac


def project_onto_basis(p: HyperspectralSinogram, d: SpectralBasis,
                       nonneg: bool = False) -> SubspaceSinogram:
    """Per-row coefficients against a fixed basis.

    Plain least squares by default (negative coefficients clamped to zero at
    packaging, since the coefficient container is non-negative); with
    ``nonneg`` the non-negativity constraint is enforced during the solve by
    multiplicative updates with D held fixed.
    """
    if d.basis.shape[0] != p.axis.num_bins:
        raise ValidationError(
            f"basis bins {d.basis.shape[0]} != sinogram bins {p.axis.num_bins}")
    P = p.values.astype(np.float64)
    D = d.basis.astype(np.float64)
    s = np.linalg.svd(D, compute_uv=False)
    if s[0] <= 0 or s[-1] <= s[0] * 1e-10:
        raise ValidationError("basis columns are linearly dependent")
    PD = P @ D
    DtD = D.T @ D
    C = np.linalg.solve(DtD, PD.T).T
    if nonneg:
        if P.size and float(P.min()) < 0:
            raise ValidationError("non-negative projection requires non-negative input")
        V = np.maximum(C, 0.0)
        V += 1e-12 * max(1.0, float(V.max()) if V.size else 0.0)
        X2 = float(np.einsum("ij,ij->", P, P))
        f_prev = np.inf
        for _ in range(500):
            V *= PD / (V @ DtD + _EPS)
            f = max(X2 - 2.0 * float(np.einsum("ij,ij->", PD, V))
                    + float(np.einsum("ij,ij->", V.T @ V, DtD)), 0.0)
            if abs(f_prev - f) <= 1e-9 * max(f_prev if np.isfinite(f_prev) else f, 1e-300):
                break
            f_prev = f
        C = V
    else:
        C = np.maximum(C, 0.0)
    return SubspaceSinogram(C, p.geometry)


def expand(x_s: VolumeStack, d: SpectralBasis) -> VolumeStack:
    """Per-voxel channel-to-spectrum map x_h = x_s D^T; pure linear, no clamp."""
    if x_s.num_channels != d.rank:
        raise ValidationError(
            f"volume has {x_s.num_channels} channels, basis rank is {d.rank}")
    voxels = x_s.voxels.astype(np.float64) @ d.basis.astype(np.float64).T
    return VolumeStack(voxels, x_s.num_rows, x_s.num_cols, x_s.voxel_pitch)

"""Truncated SVD with column centering/scaling and energy diagnostics.

Conventions
-----------
A snapshot matrix ``X`` has one row per independent-variable sample ``y`` and
one column per snapshot (a scenario, or a time instant).  Preprocessing acts
column-wise::

    x_j = (x_raw_j - c_j) / d_j

and the truncated factorisation is written ``X ~ Phi @ A.T`` with
``Phi = U_r * sigma_r`` (principal components, n x r) and ``A = V_r``
(principal directions, m x r).
"""

from dataclasses import dataclass, field
from enum import Enum
import warnings

import numpy as np
import scipy.linalg
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import as_float_array, as_matrix
from .exceptions import InvalidData, InvalidRank, InvalidShape, NumericalFailure

__all__ = [
    "SnapshotKind",
    "SnapshotMatrix",
    "Preprocessing",
    "Decomposition",
    "UnreachedEnergyWarning",
    "center_scale",
    "svd",
    "truncate",
    "principal_components",
    "principal_directions",
    "cumulative_energy",
    "energy_curve",
    "rank_for_energy",
    "reconstruct",
    "SnapshotScaler",
    "SnapshotSVD",
]

_ORTHO_TOL = 1e-10
_DEGENERATE_STD = 1e-12


class SnapshotKind(str, Enum):
    SCENARIO = "scenario"
    TIME = "time"


def _readonly(a):
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SnapshotMatrix:
    """An n x m data matrix with row coordinates and per-column metadata.

    Attributes
    ----------
    values : ndarray of shape (n, m)
    kind : SnapshotKind
        ``SCENARIO`` when each column is a full trajectory for one input
        ``u``; ``TIME`` when each column is a field at one time instant.
    row_coords : ndarray of shape (n, d)
        Independent-variable values of the rows (times, or flattened
        spatial coordinates).
    col_meta : ndarray of shape (m, q)
        Scenario-input vectors (``SCENARIO``) or time stamps with ``q == 1``
        (``TIME``).
    name : str
        Variable label, used by the CSV writer.
    """

    values: np.ndarray
    kind: SnapshotKind
    row_coords: np.ndarray
    col_meta: np.ndarray
    name: str = "value"

    def __post_init__(self):
        values = as_matrix(self.values, "values")
        rows = np.asarray(self.row_coords, dtype=np.float64)
        if rows.ndim == 1:
            rows = rows[:, None]
        meta = np.asarray(self.col_meta, dtype=np.float64)
        if meta.ndim == 1:
            meta = meta[:, None]
        kind = SnapshotKind(self.kind)
        n, m = values.shape
        if rows.shape[0] != n:
            raise InvalidShape(f"row_coords has {rows.shape[0]} rows, values has {n}")
        if meta.shape[0] != m:
            raise InvalidShape(f"col_meta has {meta.shape[0]} entries, values has {m} columns")
        if kind is SnapshotKind.TIME and meta.shape[1] != 1:
            raise InvalidShape("time-aggregated col_meta must hold one time stamp per column")
        object.__setattr__(self, "values", _readonly(values))
        object.__setattr__(self, "row_coords", _readonly(rows))
        object.__setattr__(self, "col_meta", _readonly(meta))
        object.__setattr__(self, "kind", kind)

    @property
    def shape(self):
        return self.values.shape

    def with_values(self, values):
        return SnapshotMatrix(values, self.kind, self.row_coords, self.col_meta, self.name)


@dataclass(frozen=True)
class Preprocessing:
    """Per-column centering ``c`` and scaling ``d`` (``d > 0``)."""

    c: np.ndarray
    d: np.ndarray
    center_method: str = "none"
    scale_method: str = "none"

    def __post_init__(self):
        c = as_float_array(self.c, "c", ndim=1)
        d = as_float_array(self.d, "d", ndim=1)
        if c.shape != d.shape:
            raise InvalidShape("c and d must have equal length")
        if np.any(d <= 0):
            raise InvalidData("scaling factors must be strictly positive")
        object.__setattr__(self, "c", _readonly(c))
        object.__setattr__(self, "d", _readonly(d))

    @classmethod
    def identity(cls, m):
        return cls(np.zeros(m), np.ones(m))

    def apply(self, X):
        return (X - self.c) / self.d

    def invert(self, X):
        return X * self.d + self.c


@dataclass(frozen=True)
class Decomposition:
    """Thin SVD factors with energy bookkeeping across truncation.

    ``total_energy`` is the sum of squared singular values of the full
    decomposition and ``total_amplitude`` the plain sum; both survive
    :func:`truncate` so energy fractions stay relative to the whole matrix.
    """

    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray
    total_energy: float = field(default=None)
    total_amplitude: float = field(default=None)

    def __post_init__(self):
        U = as_float_array(self.U, "U", ndim=2)
        s = as_float_array(self.sigma, "sigma", ndim=1)
        V = as_float_array(self.V, "V", ndim=2)
        r = s.shape[0]
        if U.shape[1] != r or V.shape[1] != r:
            raise InvalidShape(f"U {U.shape}, sigma ({r},), V {V.shape} do not conform")
        if np.any(s < 0) or np.any(np.diff(s) > 0):
            raise InvalidData("singular values must be non-negative and descending")
        te = float(np.sum(s**2)) if self.total_energy is None else float(self.total_energy)
        ta = float(np.sum(s)) if self.total_amplitude is None else float(self.total_amplitude)
        if te < np.sum(s**2) * (1 - 1e-12):
            raise InvalidData("total_energy is smaller than the retained energy")
        object.__setattr__(self, "U", _readonly(U))
        object.__setattr__(self, "sigma", _readonly(s))
        object.__setattr__(self, "V", _readonly(V))
        object.__setattr__(self, "total_energy", te)
        object.__setattr__(self, "total_amplitude", ta)

    @property
    def rank(self):
        return self.sigma.shape[0]


# ---------------------------------------------------------------------------
# Operations


def _values(X):
    if isinstance(X, SnapshotMatrix):
        return X.values
    return as_matrix(X, "X")


def center_scale(X, center="mean", scale="auto"):
    """Center and/or auto-scale the columns of a snapshot matrix.

    Parameters
    ----------
    X : SnapshotMatrix or array_like of shape (n, m)
    center : {"mean", "none"}
    scale : {"auto", "none"}
        ``"auto"`` divides each column by its sample standard deviation
        (``n - 1`` denominator).  Columns whose standard deviation is below
        ``1e-12 * (max|x_j| + 1)`` keep ``d_j = 1``.

    Returns
    -------
    X_pre : same type as ``X``
    prep : Preprocessing
    """
    center = (center or "none").lower()
    scale = (scale or "none").lower()
    if center not in ("mean", "none"):
        raise ValueError(f"unknown centering {center!r}")
    if scale not in ("auto", "none"):
        raise ValueError(f"unknown scaling {scale!r}")
    vals = _values(X)
    n, m = vals.shape
    c = vals.mean(axis=0) if center == "mean" else np.zeros(m)
    if scale == "auto":
        if n > 1:
            d = vals.std(axis=0, ddof=1)
        else:
            d = np.zeros(m)
        floor = _DEGENERATE_STD * (np.abs(vals).max(axis=0) + 1.0)
        d = np.where(d < floor, 1.0, d)
    else:
        d = np.ones(m)
    prep = Preprocessing(c, d, center, scale)
    out = prep.apply(vals)
    if isinstance(X, SnapshotMatrix):
        return X.with_values(out), prep
    return out, prep


def _fix_signs(U, V):
    # Largest-magnitude entry of every U column made positive.
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs, V * signs


def svd(X):
    """Thin SVD ``X = U diag(sigma) V.T`` with a deterministic sign convention.

    LAPACK's divide-and-conquer driver is tried first; if it fails to
    converge the QR-iteration driver is used before giving up.
    """
    A = _values(X)
    try:
        U, s, Vt = np.linalg.svd(A, full_matrices=False)
    except np.linalg.LinAlgError:
        try:
            U, s, Vt = scipy.linalg.svd(A, full_matrices=False, lapack_driver="gesvd")
        except np.linalg.LinAlgError as exc:
            raise NumericalFailure(f"SVD did not converge: {exc}", iterations=None) from exc
    s = np.maximum(s, 0.0)
    U, V = _fix_signs(U, Vt.T)
    return Decomposition(U, s, V)


def truncate(dec, r):
    """Keep the leading ``r`` singular triplets; energy totals are preserved."""
    r = int(r)
    if r < 1 or r > dec.rank:
        raise InvalidRank(f"rank {r} outside [1, {dec.rank}]")
    return Decomposition(
        dec.U[:, :r], dec.sigma[:r], dec.V[:, :r], dec.total_energy, dec.total_amplitude
    )


def principal_components(dec):
    """Scores ``Phi = U diag(sigma)``, shape (n, r)."""
    return dec.U * dec.sigma


def principal_directions(dec):
    """Principal directions ``A = V``, shape (m, r)."""
    return np.array(dec.V)


def _convention_weights(dec, convention):
    if convention == "variance":
        return dec.sigma**2, dec.total_energy
    if convention == "amplitude":
        return dec.sigma, dec.total_amplitude
    raise ValueError(f"unknown energy convention {convention!r}")


def energy_curve(dec, convention="variance"):
    """Cumulative energy fractions for k = 1..rank."""
    w, total = _convention_weights(dec, convention)
    if total == 0:
        return np.ones_like(w)
    return np.cumsum(w) / total


def cumulative_energy(dec, k, convention="variance"):
    """Fraction of the total energy captured by the leading ``k`` modes.

    ``convention="variance"`` uses squared singular values; ``"amplitude"``
    uses the singular values themselves.
    """
    k = int(k)
    if k < 1 or k > dec.rank:
        raise InvalidRank(f"k={k} outside [1, {dec.rank}]")
    return float(min(energy_curve(dec, convention)[k - 1], 1.0))


class UnreachedEnergyWarning(UserWarning):
    """The requested energy fraction is not reached at the stored rank."""


def rank_for_energy(dec, threshold, convention="variance", return_reached=False):
    """Smallest ``k`` whose cumulative energy is at least ``threshold``.

    When the threshold is not reached by the stored rank (possible after
    truncation) the full stored rank is returned and an
    :class:`UnreachedEnergyWarning` is emitted.  With ``return_reached`` the
    result is a ``(k, reached)`` tuple.
    """
    if not (0 < threshold <= 1):
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    curve = energy_curve(dec, convention)
    # tolerate round-off when the threshold is 1.0 at full rank
    hits = np.nonzero(curve >= threshold - 1e-14)[0]
    reached = hits.size > 0
    k = int(hits[0]) + 1 if reached else dec.rank
    if not reached:
        warnings.warn(
            f"energy threshold {threshold} unreached at rank {dec.rank}",
            UnreachedEnergyWarning,
            stacklevel=2,
        )
    return (k, reached) if return_reached else k


def reconstruct(Phi, A, prep=None):
    """Undo the factorisation and the preprocessing: ``(Phi A^T) * d + c``."""
    Phi = as_matrix(Phi, "Phi")
    A = as_matrix(A, "A")
    if Phi.shape[1] != A.shape[1]:
        raise InvalidShape(f"Phi {Phi.shape} and A {A.shape} have different ranks")
    X = Phi @ A.T
    if prep is None:
        return X
    if prep.c.shape[0] != X.shape[1]:
        raise InvalidShape(f"preprocessing has {prep.c.shape[0]} columns, data has {X.shape[1]}")
    return prep.invert(X)


# ---------------------------------------------------------------------------
# Estimators


class SnapshotScaler(TransformerMixin, BaseEstimator):
    """Column-wise centering and auto-scaling as a transformer.

    Each column of the training matrix is treated as a feature, so ``c_`` and
    ``d_`` have one entry per snapshot column.

    Parameters
    ----------
    center : {"mean", "none"}, default="mean"
    scale : {"auto", "none"}, default="auto"
    """

    def __init__(self, center="mean", scale="auto"):
        self.center = center
        self.scale = scale

    def fit(self, X, y=None):
        _, prep = center_scale(as_matrix(X), self.center, self.scale)
        self.preprocessing_ = prep
        self.c_ = np.array(prep.c)
        self.d_ = np.array(prep.d)
        self.n_features_in_ = prep.c.shape[0]
        return self

    def _check(self, X):
        check_is_fitted(self, "preprocessing_")
        X = as_matrix(X)
        if X.shape[1] != self.n_features_in_:
            raise InvalidShape(f"expected {self.n_features_in_} columns, got {X.shape[1]}")
        return X

    def transform(self, X):
        return self.preprocessing_.apply(self._check(X))

    def inverse_transform(self, X):
        return self.preprocessing_.invert(self._check(X))


class SnapshotSVD(TransformerMixin, BaseEstimator):
    """Preprocess-then-truncate SVD of a snapshot matrix.

    ``transform`` maps a matrix with the training columns onto the principal
    components (``Phi = X_pre @ A``); ``inverse_transform`` rebuilds the raw
    matrix from components.

    Parameters
    ----------
    n_components : int or None
        Retained rank; ``None`` keeps ``min(n, m)`` modes, or the rank chosen
        by ``energy_threshold`` when that is set.
    energy_threshold : float or None
        Pick the smallest rank reaching this cumulative energy.
    center, scale : see :func:`center_scale`
    energy_convention : {"variance", "amplitude"}
    """

    def __init__(
        self,
        n_components=None,
        energy_threshold=None,
        center="mean",
        scale="auto",
        energy_convention="variance",
    ):
        self.n_components = n_components
        self.energy_threshold = energy_threshold
        self.center = center
        self.scale = scale
        self.energy_convention = energy_convention

    def fit(self, X, y=None):
        Xp, prep = center_scale(X, self.center, self.scale)
        full = svd(Xp)
        if self.n_components is not None:
            r = int(self.n_components)
        elif self.energy_threshold is not None:
            r = rank_for_energy(full, self.energy_threshold, self.energy_convention)
        else:
            r = full.rank
        dec = truncate(full, r)
        self.preprocessing_ = prep
        self.full_decomposition_ = full
        self.decomposition_ = dec
        self.singular_values_ = np.array(dec.sigma)
        self.principal_components_ = principal_components(dec)
        self.principal_directions_ = principal_directions(dec)
        self.energy_curve_ = energy_curve(full, self.energy_convention)
        self.n_components_ = r
        self.n_features_in_ = prep.c.shape[0]
        return self

    def transform(self, X):
        check_is_fitted(self, "decomposition_")
        X = as_matrix(X)
        if X.shape[1] != self.n_features_in_:
            raise InvalidShape(f"expected {self.n_features_in_} columns, got {X.shape[1]}")
        return self.preprocessing_.apply(X) @ self.principal_directions_

    def inverse_transform(self, Phi):
        check_is_fitted(self, "decomposition_")
        return reconstruct(Phi, self.principal_directions_, self.preprocessing_)

    def reconstruction_error(self, X):
        """Relative Frobenius error of the rank-``n_components_`` round trip."""
        X = as_matrix(X)
        Xr = self.inverse_transform(self.transform(X))
        return float(np.linalg.norm(X - Xr) / np.linalg.norm(X))

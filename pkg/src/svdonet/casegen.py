"""Data generators for the benchmark cases and snapshot-matrix assembly.

Cases
-----
tc1
    Damped mass-spring system ``x' = v, v' = -(k x + c v) / m`` with
    ``(x0, v0)`` drawn by Latin hypercube sampling in (-4, 4)^2.
tc2
    Shifting hyperbolic tangent
    ``x(t) = a tanh(t - b x0) + a tanh(b x0) + x0`` with ``x0`` in (5, 10).
tc4
    Rotating, translating and stretching rigid body ``z(x, y; t)`` for one
    fixed scenario; the branch receives time and the trunk space.
"""

import csv
from dataclasses import dataclass, field, fields
import math
from pathlib import Path

import numpy as np

from . import _rng
from ._validation import as_float_array, as_matrix
from .decomposition import SnapshotKind, SnapshotMatrix
from .exceptions import (
    GridRequired,
    InvalidBounds,
    InvalidData,
    InvalidShape,
    MetaMissing,
    NumericalFailure,
    ParseError,
)

__all__ = [
    "lhs_sample",
    "rk4_integrate",
    "msd_solve",
    "tanh_solution",
    "RigidBodyParams",
    "rigid_body_frame",
    "rigid_body_field",
    "ScenarioSet",
    "Dataset",
    "assemble_scenario_matrix",
    "assemble_time_matrix",
    "snapshots_to_dataset",
    "write_snapshot_csv",
    "load_snapshot_csv",
    "CaseData",
    "make_case",
    "CASES",
]


# ---------------------------------------------------------------------------
# Sampling and integration


def lhs_sample(bounds, n, seed=0, rng=None):
    """Latin hypercube sample of ``n`` points in a box.

    Every dimension is cut into ``n`` equal strata and receives exactly one
    uniformly placed point per stratum; strata are paired across dimensions
    by independent random permutations.

    Parameters
    ----------
    bounds : sequence of (lo, hi)
    n : int
    seed : int
        Used when ``rng`` is not given.
    rng : numpy.random.Generator, optional

    Returns
    -------
    ndarray of shape (n, len(bounds))
    """
    bounds = np.asarray(bounds, dtype=np.float64)
    if bounds.ndim != 2 or bounds.shape[1] != 2 or bounds.shape[0] == 0:
        raise InvalidBounds(f"bounds must be a list of (lo, hi) pairs, got shape {bounds.shape}")
    lo, hi = bounds[:, 0], bounds[:, 1]
    if not np.all(np.isfinite(bounds)) or np.any(lo >= hi):
        raise InvalidBounds(f"need finite lo < hi in every dimension, got {bounds.tolist()}")
    n = int(n)
    if n < 1:
        raise InvalidBounds("n must be >= 1")
    if rng is None:
        rng = _rng.stream(seed, "sampling")
    d = bounds.shape[0]
    strata = np.column_stack([rng.permutation(n) for _ in range(d)])
    unit = (strata + rng.random((n, d))) / n
    pts = lo + (hi - lo) * unit
    # guard the open upper edge against round-off
    return np.minimum(pts, np.nextafter(hi, lo))


def rk4_integrate(f, x0, times, h=1e-3):
    """Classical fixed-step RK4, reporting the state at ``times``.

    Each interval between consecutive output times is split into
    ``ceil(dt / h)`` equal substeps.

    Parameters
    ----------
    f : callable
        ``f(t, x) -> dx/dt``.
    x0 : array_like
        State at ``times[0]``.
    times : array_like, sorted
    h : float
        Maximum substep.

    Returns
    -------
    ndarray of shape (len(times),) + shape(x0)
    """
    times = as_float_array(times, "times", ndim=1)
    if np.any(np.diff(times) < 0):
        raise ValueError("times must be sorted")
    x = np.array(x0, dtype=np.float64)
    out = np.empty((times.size,) + x.shape)
    out[0] = x
    for i in range(1, times.size):
        t0, t1 = times[i - 1], times[i]
        steps = max(1, int(math.ceil((t1 - t0) / h - 1e-9)))
        dt = (t1 - t0) / steps
        t = t0
        for _ in range(steps):
            k1 = f(t, x)
            k2 = f(t + 0.5 * dt, x + 0.5 * dt * k1)
            k3 = f(t + 0.5 * dt, x + 0.5 * dt * k2)
            k4 = f(t + dt, x + dt * k3)
            x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            t += dt
        if not np.all(np.isfinite(x)):
            raise NumericalFailure(f"non-finite state at t={t1}", at=t1)
        out[i] = x
    return out


def msd_solve(x0, v0, k=3.0, c=0.5, m=1.0, times=None):
    """Closed-form solution of the unforced damped mass-spring system.

    The system matrix ``[[0, 1], [-k/m, -c/m]]`` is diagonalised and
    ``exp(A t)`` applied to the initial state.  The critically damped case
    (repeated eigenvalue) uses its own closed form.

    Parameters
    ----------
    x0, v0 : float or array of shape (S,)
    k, c, m : float
    times : array of shape (T,)

    Returns
    -------
    x, v : ndarrays of shape (T,) for scalar inputs, else (S, T)
    """
    if m <= 0 or k < 0 or c < 0:
        raise ValueError("need m > 0 and k, c >= 0")
    times = as_float_array(times, "times", ndim=1)
    scalar = np.ndim(x0) == 0 and np.ndim(v0) == 0
    x0 = np.atleast_1d(np.asarray(x0, dtype=np.float64))
    v0 = np.atleast_1d(np.asarray(v0, dtype=np.float64))
    x0, v0 = np.broadcast_arrays(x0, v0)
    A = np.array([[0.0, 1.0], [-k / m, -c / m]])
    disc = (c / m) ** 2 - 4.0 * k / m
    if abs(disc) <= 1e-12 * max(1.0, (c / m) ** 2):
        r = -c / (2.0 * m)
        e = np.exp(r * times)[None, :]
        a1 = (v0 - r * x0)[:, None]
        x = (x0[:, None] + a1 * times[None, :]) * e
        v = (r * x0[:, None] + a1 * (1.0 + r * times[None, :])) * e
    else:
        lam, vecs = np.linalg.eig(A)
        coef = np.linalg.solve(vecs, np.vstack([x0, v0]).astype(complex))  # (2, S)
        expo = np.exp(np.outer(lam, times))  # (2, T)
        # state(t) = vecs @ diag(exp(lam t)) @ coef
        x = np.real(vecs[0, 0] * coef[0][:, None] * expo[0][None] + vecs[0, 1] * coef[1][:, None] * expo[1][None])
        v = np.real(vecs[1, 0] * coef[0][:, None] * expo[0][None] + vecs[1, 1] * coef[1][:, None] * expo[1][None])
    if scalar:
        return x[0], v[0]
    return x, v


def tanh_solution(x0, t, a=1.0, b=1.0):
    """``a tanh(t - b x0) + a tanh(b x0) + x0`` (broadcasting)."""
    x0 = np.asarray(x0, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    return a * np.tanh(t - b * x0) + a * np.tanh(b * x0) + x0


# ---------------------------------------------------------------------------
# Rigid body


@dataclass(frozen=True)
class RigidBodyParams:
    """Constants of the rotating-translating-stretching body."""

    z0: float = 1.0
    v_z: float = 0.2
    l_x: float = 8.0
    l_y: float = 6.0
    a_x: float = 10.0
    b_x: float = 10.0
    a_y: float = 10.0
    b_y: float = 10.0
    theta0: float = 0.0
    v_theta: float = math.pi
    omega_theta: float = 2.0 * math.pi / 10.0 * math.pi
    t_end: float = 10.0
    phi_theta: float = 2.0
    s0: float = 2.0
    v_s: float = 1.0
    omega_s: float = 2.0 * math.pi / 10.0 * math.pi
    phi_s: float = 0.0
    x_c0: float = 1.0
    y_c0: float = -0.5
    v_xi: float = 0.5
    omega_xi: float = 5.0 * math.pi / 18.0

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def rigid_body_frame(t, params=RigidBodyParams()):
    """Angle, stretch and centre shift ``(theta, s, x_c, y_c)`` at times ``t``."""
    p = params
    t = np.asarray(t, dtype=np.float64)
    theta = p.theta0 + p.v_theta * np.cos(p.omega_theta * t + p.phi_theta)
    s = p.s0 + p.v_s * np.sin(p.omega_s * t + p.phi_s)
    xi = p.omega_xi * t
    x_c = p.x_c0 + p.v_xi * xi * np.cos(xi)
    y_c = p.y_c0 + p.v_xi * xi * np.sin(xi)
    return theta, s, x_c, y_c


def rigid_body_field(x, y, t, params=RigidBodyParams()):
    """Field value ``z(x, y; t)``; arguments broadcast against each other.

    Body-frame coordinates are ``s R(theta) [x, y] + [x_c, y_c]`` and the
    field is ``exp(z_x + z_y) (z0 + v_z t)`` with tanh steps of half-widths
    ``l_x``, ``l_y``.
    """
    p = params
    x, y, t = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (x, y, t)))
    theta, s, x_c, y_c = rigid_body_frame(t, p)
    cos, sin = np.cos(theta), np.sin(theta)
    x_i = s * (cos * x - sin * y) + x_c
    y_i = s * (sin * x + cos * y) + y_c
    z_x = 0.5 * np.tanh(p.a_x * (x_i + p.l_x)) + 0.5 * np.tanh(p.b_x * (x_i - p.l_x))
    z_y = 0.5 * np.tanh(p.a_y * (y_i + p.l_y)) + 0.5 * np.tanh(p.b_y * (y_i - p.l_y))
    return np.exp(z_x + z_y) * (p.z0 + p.v_z * t)


# ---------------------------------------------------------------------------
# Containers


@dataclass
class Dataset:
    """Pointwise operator data.

    ``X`` rows are ``[u | y]``: the first ``n_branch_inputs`` columns feed
    the branch, the rest the trunk.  ``Y`` has one column per variable.
    """

    X: np.ndarray
    Y: np.ndarray
    n_branch_inputs: int
    variables: list
    input_names: list = None
    coord_names: list = None

    def __post_init__(self):
        self.X = as_matrix(self.X, "X")
        self.Y = as_matrix(self.Y, "Y")
        if self.X.shape[0] != self.Y.shape[0]:
            raise InvalidShape("X and Y must have the same number of rows")
        if not (0 < self.n_branch_inputs < self.X.shape[1]):
            raise InvalidShape("n_branch_inputs must leave at least one trunk input")
        if len(self.variables) != self.Y.shape[1]:
            raise InvalidShape("one variable name per Y column required")

    @property
    def U(self):
        return self.X[:, : self.n_branch_inputs]

    @property
    def coords(self):
        return self.X[:, self.n_branch_inputs :]

    def __len__(self):
        return self.X.shape[0]


@dataclass
class ScenarioSet:
    """Trajectories of several scenarios on one shared grid of ``y``.

    Attributes
    ----------
    inputs : ndarray of shape (S, q)
        Scenario inputs ``u``.
    coords : ndarray of shape (n, d)
        Shared independent-variable samples.
    values : dict[str, ndarray of shape (S, n)]
    """

    inputs: np.ndarray
    coords: np.ndarray
    values: dict
    input_names: list = None
    coord_names: list = None

    def __post_init__(self):
        self.inputs = as_matrix(self.inputs, "inputs")
        self.coords = as_matrix(self.coords, "coords")
        S, n = self.inputs.shape[0], self.coords.shape[0]
        clean = {}
        for name, v in self.values.items():
            v = as_float_array(v, f"values[{name}]")
            if v.shape != (S, n):
                raise GridRequired(f"values[{name}] has shape {v.shape}, expected {(S, n)}")
            clean[name] = v
        self.values = clean
        if self.input_names is None:
            self.input_names = [f"u{i}" for i in range(self.inputs.shape[1])]
        if self.coord_names is None:
            self.coord_names = [f"y{i}" for i in range(self.coords.shape[1])]

    @property
    def variables(self):
        return list(self.values)

    def to_dataset(self, variables=None):
        """Flatten to scenario-major ``[u | y]`` rows."""
        variables = variables or self.variables
        S, n = self.inputs.shape[0], self.coords.shape[0]
        U = np.repeat(self.inputs, n, axis=0)
        Yc = np.tile(self.coords, (S, 1))
        Y = np.column_stack([self.values[v].reshape(-1) for v in variables])
        return Dataset(np.hstack([U, Yc]), Y, self.inputs.shape[1], list(variables),
                       list(self.input_names), list(self.coord_names))


def assemble_scenario_matrix(scenarios, variable):
    """Scenario-aggregated snapshot matrix: column ``j`` is scenario ``j``."""
    if variable not in scenarios.values:
        raise KeyError(variable)
    vals = scenarios.values[variable]
    return SnapshotMatrix(vals.T, SnapshotKind.SCENARIO, scenarios.coords, scenarios.inputs,
                          name=variable)


def assemble_time_matrix(field_fn, grid, times, name="z"):
    """Time-aggregated snapshot matrix of a 2-D field.

    Rows run row-major over the grid, ``x`` slowest: row ``i * len(ys) + j``
    holds ``(xs[i], ys[j])``.  Column ``k`` is the field at ``times[k]``.

    Parameters
    ----------
    field_fn : callable or ndarray
        ``field_fn(x, y, t)`` evaluated on broadcast arrays, or a precomputed
        array of shape (len(times), len(xs), len(ys)).
    grid : (xs, ys)
    times : array_like
    """
    xs, ys = (as_float_array(g, "grid", ndim=1) for g in grid)
    times = as_float_array(times, "times", ndim=1)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    coords = np.column_stack([gx.ravel(), gy.ravel()])
    if callable(field_fn):
        cols = [np.asarray(field_fn(coords[:, 0], coords[:, 1], t), dtype=np.float64) for t in times]
        values = np.column_stack(cols)
    else:
        arr = np.asarray(field_fn, dtype=np.float64)
        if arr.shape != (times.size, xs.size, ys.size):
            raise InvalidShape(f"field array shape {arr.shape} does not match grid/times")
        values = arr.reshape(times.size, -1).T
    return SnapshotMatrix(values, SnapshotKind.TIME, coords, times[:, None], name=name)


def snapshots_to_dataset(snapshots, input_names=None, coord_names=None):
    """Pointwise ``[u | y]`` data from snapshot matrices sharing one layout.

    Column metadata (scenario inputs, or time stamps for time-aggregated
    matrices) feeds the branch; row coordinates feed the trunk.  Rows are
    column-major over the snapshot matrix, so all samples of one column are
    contiguous.
    """
    snapshots = list(snapshots)
    if not snapshots:
        raise InvalidData("no snapshot matrices given")
    ref = snapshots[0]
    for s in snapshots[1:]:
        if (s.values.shape != ref.values.shape or not np.array_equal(s.row_coords, ref.row_coords)
                or not np.array_equal(s.col_meta, ref.col_meta)):
            raise GridRequired(f"snapshot {s.name!r} does not share the layout of {ref.name!r}")
    n, m = ref.values.shape
    U = np.repeat(ref.col_meta, n, axis=0)
    Yc = np.tile(ref.row_coords, (m, 1))
    Y = np.column_stack([s.values.T.reshape(-1) for s in snapshots])
    return Dataset(np.hstack([U, Yc]), Y, ref.col_meta.shape[1], [s.name for s in snapshots],
                   input_names, coord_names)


# ---------------------------------------------------------------------------
# Snapshot CSV
#
#   data file   header: coordinate name(s), then one name per snapshot column
#   meta file   <stem>.meta.csv, header "column,kind,<meta names>", one row per
#               snapshot column: its name, "scenario" or "time", and its
#               scenario-input components or time stamp.
# The number of coordinate columns is the data width minus the meta row count.


def _meta_path(path):
    path = Path(path)
    name = path.name
    stem = name[:-4] if name.endswith(".csv") else name
    return path.with_name(stem + ".meta.csv")


def write_snapshot_csv(snap, path, coord_names=None, column_names=None, meta_names=None):
    """Write ``snap`` as a data CSV plus its ``.meta.csv`` sibling."""
    path = Path(path)
    n, m = snap.values.shape
    d = snap.row_coords.shape[1]
    coord_names = coord_names or (["t"] if d == 1 else [f"y{i}" for i in range(d)])
    column_names = column_names or [f"{snap.name}_{j}" for j in range(m)]
    q = snap.col_meta.shape[1]
    if meta_names is None:
        meta_names = ["t"] if snap.kind is SnapshotKind.TIME else [f"u{i}" for i in range(q)]
    fmt = lambda v: format(float(v), ".17g")  # noqa: E731
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(coord_names) + list(column_names))
        for i in range(n):
            w.writerow([fmt(v) for v in snap.row_coords[i]] + [fmt(v) for v in snap.values[i]])
    with open(_meta_path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["column", "kind"] + list(meta_names))
        for j in range(m):
            w.writerow([column_names[j], snap.kind.value] + [fmt(v) for v in snap.col_meta[j]])
    return path


def _parse_row(row, lineno, path, width):
    if len(row) != width:
        raise ParseError(f"expected {width} fields, found {len(row)}", lineno, path)
    try:
        return [float(v) for v in row]
    except ValueError as exc:
        raise ParseError(str(exc), lineno, path) from None


def load_snapshot_csv(path, name=None):
    """Read a snapshot matrix written by :func:`write_snapshot_csv`.

    Raises
    ------
    ParseError
        Empty file, malformed rows, or header/width mismatch (with line number).
    MetaMissing
        The ``.meta.csv`` sibling does not exist.
    """
    path = Path(path)
    meta_path = _meta_path(path)
    if not meta_path.exists():
        raise MetaMissing(f"metadata file not found: {meta_path}")
    with open(meta_path, newline="", encoding="utf-8") as fh:
        meta_rows = list(csv.reader(fh))
    if not meta_rows:
        raise ParseError("empty metadata file", 1, str(meta_path))
    mhead = meta_rows[0]
    if len(mhead) < 3 or mhead[:2] != ["column", "kind"]:
        raise ParseError("metadata header must start with 'column,kind'", 1, str(meta_path))
    kinds, col_names, meta = set(), [], []
    for lineno, row in enumerate(meta_rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(mhead):
            raise ParseError(f"expected {len(mhead)} fields, found {len(row)}", lineno, str(meta_path))
        col_names.append(row[0])
        kinds.add(row[1])
        meta.append(_parse_row(row[2:], lineno, str(meta_path), len(mhead) - 2))
    if len(kinds) != 1:
        raise ParseError(f"metadata mixes kinds {sorted(kinds)}", None, str(meta_path))
    try:
        kind = SnapshotKind(kinds.pop())
    except ValueError as exc:
        raise ParseError(str(exc), None, str(meta_path)) from None
    m = len(col_names)

    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("empty file", 1, str(path))
    header = rows[0]
    d = len(header) - m
    if d < 1:
        raise ParseError(f"header has {len(header)} fields but metadata lists {m} columns",
                         1, str(path))
    if header[d:] != col_names:
        raise ParseError("header column names differ from metadata", 1, str(path))
    data = [_parse_row(row, lineno, str(path), len(header))
            for lineno, row in enumerate(rows[1:], start=2) if row]
    if not data:
        raise ParseError("no data rows", 2, str(path))
    arr = np.array(data)
    if not np.all(np.isfinite(arr)):
        raise ParseError("non-finite values", None, str(path))
    label = name or (col_names[0].rsplit("_", 1)[0] if col_names else "value")
    return SnapshotMatrix(arr[:, d:], kind, arr[:, :d], np.array(meta), name=label)


# ---------------------------------------------------------------------------
# Benchmark cases


@dataclass
class CaseData:
    """Training and held-out test data for one benchmark case."""

    case: str
    train: Dataset
    test: Dataset
    manifest: dict
    train_scenarios: ScenarioSet = None
    test_scenarios: ScenarioSet = None
    extra: dict = field(default_factory=dict)


def _tc1(seed, n_train=100, n_test=10, n_times=500, t_end=15.0, k=3.0, c=0.5, m=1.0,
         bound=4.0):
    times = np.linspace(0.0, t_end, n_times)
    bounds = [(-bound, bound), (-bound, bound)]

    def build(n, stream):
        u = lhs_sample(bounds, n, rng=_rng.stream(seed, stream))
        x, v = msd_solve(u[:, 0], u[:, 1], k, c, m, times)
        return ScenarioSet(u, times[:, None], {"x": x, "v": v}, ["x0", "v0"], ["t"])

    tr, te = build(n_train, "sampling"), build(n_test, "test")
    manifest = dict(case="tc1", seed=seed, bounds=bounds, n_train=n_train, n_test=n_test,
                    n_times=n_times, t_end=t_end, k=k, c=c, m=m)
    return CaseData("tc1", tr.to_dataset(), te.to_dataset(), manifest, tr, te)


def _tc2(seed, n_train=100, n_test=10, n_times=500, t_end=15.0, a=1.0, b=1.0,
         x0_range=(5.0, 10.0), time_sampling="grid"):
    bounds = [tuple(x0_range)]

    def build(n, stream):
        u = lhs_sample(bounds, n, rng=_rng.stream(seed, stream))
        if time_sampling == "grid":
            times = np.linspace(0.0, t_end, n_times)
        elif time_sampling == "random":
            times = np.sort(_rng.stream(seed, stream + "-times").uniform(0.0, t_end, n_times))
        else:
            raise ValueError(f"unknown time_sampling {time_sampling!r}")
        x = tanh_solution(u[:, :1], times[None, :], a, b)
        return ScenarioSet(u, times[:, None], {"x": x}, ["x0"], ["t"])

    tr, te = build(n_train, "sampling"), build(n_test, "test")
    manifest = dict(case="tc2", seed=seed, bounds=bounds, n_train=n_train, n_test=n_test,
                    n_times=n_times, t_end=t_end, a=a, b=b, time_sampling=time_sampling)
    return CaseData("tc2", tr.to_dataset(), te.to_dataset(), manifest, tr, te)


def _tc4(seed, n_points=200_000, train_half_width=10.0, test_half_width=15.0, grid=100,
         n_test_times=100, t_end=10.0):
    params = RigidBodyParams()
    rng = _rng.stream(seed, "sampling")
    pts = np.column_stack([
        rng.uniform(0.0, t_end, n_points),
        rng.uniform(-train_half_width, train_half_width, n_points),
        rng.uniform(-train_half_width, train_half_width, n_points),
    ])
    z = rigid_body_field(pts[:, 1], pts[:, 2], pts[:, 0], params)
    train = Dataset(pts, z[:, None], 1, ["z"], ["t"], ["x", "y"])
    g = np.linspace(-test_half_width, test_half_width, grid)
    test_times = np.linspace(0.0, t_end, n_test_times)
    snap = assemble_time_matrix(lambda x, y, t: rigid_body_field(x, y, t, params), (g, g), test_times)
    n = snap.values.shape[0]
    Xte = np.column_stack([np.repeat(test_times, n), np.tile(snap.row_coords, (n_test_times, 1))])
    Yte = snap.values.T.reshape(-1, 1)
    test = Dataset(Xte, Yte, 1, ["z"], ["t"], ["x", "y"])
    manifest = dict(case="tc4", seed=seed, n_points=n_points, train_half_width=train_half_width,
                    test_half_width=test_half_width, grid=grid, n_test_times=n_test_times,
                    t_end=t_end)
    return CaseData("tc4", train, test, manifest, extra={"test_snapshots": snap, "params": params})


CASES = {"tc1": _tc1, "tc2": _tc2, "tc4": _tc4}


def make_case(case, seed=0, **options):
    """Generate train/test data for ``case`` (``"tc1"``, ``"tc2"`` or ``"tc4"``).

    Training scenarios and held-out test scenarios come from disjoint named
    random streams of ``seed``.
    """
    try:
        builder = CASES[case]
    except KeyError:
        raise ValueError(f"unknown case {case!r}; choose from {sorted(CASES)}") from None
    return builder(seed, **options)

import math

import numpy as np
import pytest

from svdonet.casegen import (
    RigidBodyParams,
    ScenarioSet,
    assemble_scenario_matrix,
    assemble_time_matrix,
    load_snapshot_csv,
    lhs_sample,
    make_case,
    msd_solve,
    rigid_body_field,
    rigid_body_frame,
    rk4_integrate,
    snapshots_to_dataset,
    tanh_solution,
    write_snapshot_csv,
)
from svdonet.decomposition import SnapshotKind, SnapshotMatrix
from svdonet.exceptions import (
    GridRequired,
    InvalidBounds,
    MetaMissing,
    NumericalFailure,
    ParseError,
)


def msd_rhs(k=3.0, c=0.5, m=1.0):
    return lambda t, s: np.array([s[1], -(k * s[0] + c * s[1]) / m])


# --- LHS ------------------------------------------------------------------


@pytest.mark.parametrize("n", [1, 10, 100])
def test_lhs_one_point_per_stratum(n):
    bounds = [(-4.0, 4.0), (-4.0, 4.0), (5.0, 10.0)]
    pts = lhs_sample(bounds, n, seed=3)
    assert pts.shape == (n, 3)
    for j, (lo, hi) in enumerate(bounds):
        bins = np.floor((pts[:, j] - lo) / (hi - lo) * n).astype(int)
        np.testing.assert_array_equal(np.sort(bins), np.arange(n))


def test_lhs_unit_interval_example():
    pts = lhs_sample([(0.0, 4.0)], 4, seed=0).ravel()
    np.testing.assert_array_equal(np.sort(np.floor(pts)), [0, 1, 2, 3])


def test_lhs_is_deterministic():
    np.testing.assert_array_equal(lhs_sample([(0, 1)] * 2, 20, seed=5),
                                  lhs_sample([(0, 1)] * 2, 20, seed=5))
    assert not np.array_equal(lhs_sample([(0, 1)], 20, seed=5), lhs_sample([(0, 1)], 20, seed=6))


@pytest.mark.parametrize("bounds,n", [([(1.0, 0.0)], 3), ([(0.0, np.inf)], 3), ([], 3),
                                      ([(0.0, 1.0)], 0)])
def test_lhs_rejects_bad_input(bounds, n):
    with pytest.raises(InvalidBounds):
        lhs_sample(bounds, n)


# --- RK4 and the oscillator -----------------------------------------------


def test_rk4_constant_field():
    out = rk4_integrate(lambda t, x: np.zeros_like(x), [1.0, 2.0], [0.0, 1.0, 3.0])
    np.testing.assert_array_equal(out, [[1, 2]] * 3)


def test_rk4_exponential():
    out = rk4_integrate(lambda t, x: x, 1.0, [0.0, 1.0], h=1e-3)
    assert abs(out[-1] - math.e) < 1e-10


def test_rk4_fourth_order_on_oscillator():
    times = np.array([0.0, 15.0])
    exact = np.array(msd_solve(1.0, 0.0, times=times))[:, -1]
    errs = [np.abs(rk4_integrate(msd_rhs(), [1.0, 0.0], times, h=h)[-1] - exact).max()
            for h in (0.1, 0.05)]
    assert 16 * 0.8 <= errs[0] / errs[1] <= 16 * 1.2


def test_rk4_reports_blow_up():
    with pytest.raises(NumericalFailure) as exc:
        rk4_integrate(lambda t, x: x * x, 1.0, [0.0, 0.5, 2.0], h=1e-2)
    assert exc.value.at == 2.0


def test_msd_matches_rk4_over_window():
    times = np.linspace(0.0, 15.0, 151)
    x, v = msd_solve(1.0, 0.0, times=times)
    ref = rk4_integrate(msd_rhs(), [1.0, 0.0], times, h=1e-4)
    assert np.abs(ref[:, 0] - x).max() < 1e-8
    assert np.abs(ref[:, 1] - v).max() < 1e-8


def test_msd_underdamped_closed_form():
    t = np.array([1.0])
    x, _ = msd_solve(1.0, 0.0, times=t)
    w = math.sqrt(2.9375)
    expected = math.exp(-0.25) * (math.cos(w) + 0.25 / w * math.sin(w))
    assert x[0] == pytest.approx(expected, abs=1e-13)


def test_msd_equilibrium_and_batch():
    t = np.linspace(0, 5, 11)
    x, v = msd_solve(0.0, 0.0, times=t)
    assert np.all(x == 0) and np.all(v == 0)
    xb, vb = msd_solve(np.array([0.0, 1.0]), np.array([0.0, -1.0]), times=t)
    assert xb.shape == (2, 11)
    np.testing.assert_allclose(xb[1], msd_solve(1.0, -1.0, times=t)[0], atol=1e-14)


def test_msd_energy_never_increases():
    t = np.linspace(0, 15, 500)
    x, v = msd_solve(3.0, -2.0, times=t)
    e = 0.5 * 3.0 * x**2 + 0.5 * v**2
    assert np.all(np.diff(e) <= 1e-12)


def test_msd_critical_damping():
    t = np.linspace(0, 3, 31)
    x, v = msd_solve(1.0, 0.5, k=1.0, c=2.0, m=1.0, times=t)
    ref = rk4_integrate(msd_rhs(1.0, 2.0, 1.0), [1.0, 0.5], t, h=1e-3)
    np.testing.assert_allclose(np.column_stack([x, v]), ref, atol=1e-9)


# --- tanh -----------------------------------------------------------------


def test_tanh_initial_value_and_example():
    assert tanh_solution(7.3, 0.0) == 7.3
    assert tanh_solution(5.0, 5.0) == pytest.approx(5 + math.tanh(5.0), abs=1e-15)


def test_tanh_satisfies_its_ode():
    x0 = np.linspace(5, 10, 11)[:, None]
    t = np.linspace(0, 15, 301)[None, :]
    h = 1e-5
    fd = (tanh_solution(x0, t + h) - tanh_solution(x0, t - h)) / (2 * h)
    assert np.abs(fd - 1 / np.cosh(x0 - t) ** 2).max() < 1e-6


# --- rigid body -----------------------------------------------------------


def test_rigid_body_defaults():
    p = RigidBodyParams()
    assert len(p.to_dict()) == 21
    theta, s, xc, yc = rigid_body_frame(0.0, p)
    assert s == pytest.approx(2.0)
    assert (xc, yc) == (pytest.approx(1.0), pytest.approx(-0.5))
    assert theta == pytest.approx(math.pi * math.cos(2.0))


def test_rigid_body_interior_plateau():
    p = RigidBodyParams()
    for t in np.linspace(0, 10, 41):
        theta, s, xc, yc = rigid_body_frame(t, p)
        # body-frame origin: s R [x, y] + c = 0
        R = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        x, y = np.linalg.solve(s * R, -np.array([xc, yc]))
        assert abs(rigid_body_field(x, y, t, p) - (p.z0 + p.v_z * t)) < 1e-6


def _field_oracle(x, y, t):
    """Written out scalar by scalar from the defaults."""
    th = 0.0 + math.pi * math.cos(math.pi**2 / 5 * t + 2.0)
    s = 2.0 + math.sin(math.pi**2 / 5 * t)
    xi = 5 * math.pi / 18 * t
    xc = 1.0 + 0.5 * xi * math.cos(xi)
    yc = -0.5 + 0.5 * xi * math.sin(xi)
    xi_ = s * (math.cos(th) * x - math.sin(th) * y) + xc
    yi_ = s * (math.sin(th) * x + math.cos(th) * y) + yc
    zx = 0.5 * (math.tanh(10 * (xi_ + 8)) + math.tanh(10 * (xi_ - 8)))
    zy = 0.5 * (math.tanh(10 * (yi_ + 6)) + math.tanh(10 * (yi_ - 6)))
    return math.exp(zx + zy) * (1.0 + 0.2 * t)


def test_rigid_body_matches_independent_formula():
    rng = np.random.default_rng(0)
    pts = np.column_stack([rng.uniform(-15, 15, 300), rng.uniform(-15, 15, 300),
                           rng.uniform(0, 10, 300)])
    got = rigid_body_field(pts[:, 0], pts[:, 1], pts[:, 2])
    want = np.array([_field_oracle(*row) for row in pts])
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


# --- assembly -------------------------------------------------------------


def _scenarios(S=3, n=5):
    rng = np.random.default_rng(1)
    return ScenarioSet(rng.normal(size=(S, 2)), np.linspace(0, 1, n)[:, None],
                       {"x": rng.normal(size=(S, n)), "v": rng.normal(size=(S, n))})


def test_scenario_matrix_columns_are_trajectories():
    sc = _scenarios()
    snap = assemble_scenario_matrix(sc, "v")
    assert snap.values.shape == (5, 3) and snap.kind is SnapshotKind.SCENARIO
    for j in range(3):
        np.testing.assert_array_equal(snap.values[:, j], sc.values["v"][j])
    np.testing.assert_array_equal(snap.col_meta, sc.inputs)


def test_ragged_scenarios_rejected():
    with pytest.raises(GridRequired):
        ScenarioSet(np.zeros((2, 1)), np.zeros((4, 1)), {"x": np.zeros((2, 3))})


def test_tc1_matrix_shape():
    case = make_case("tc1", seed=0)
    snap = assemble_scenario_matrix(case.train_scenarios, "x")
    assert snap.values.shape == (500, 100)
    assert assemble_scenario_matrix(make_case("tc1", n_train=1).train_scenarios, "x").values.shape == (500, 1)


def test_time_matrix_row_order():
    snap = assemble_time_matrix(lambda x, y, t: 10 * x + y + t, ([0.0, 1.0], [0.0, 2.0]), [0.5])
    assert snap.values.shape == (4, 1) and snap.kind is SnapshotKind.TIME
    np.testing.assert_array_equal(snap.row_coords, [[0, 0], [0, 2], [1, 0], [1, 2]])
    np.testing.assert_array_equal(snap.values[:, 0], [0.5, 2.5, 10.5, 12.5])


def test_time_matrix_from_array_matches_callable():
    xs, ys, ts = np.linspace(-1, 1, 4), np.linspace(0, 1, 3), np.array([0.0, 1.0])
    f = lambda x, y, t: np.sin(x) * y + t  # noqa: E731
    arr = np.stack([f(*np.meshgrid(xs, ys, indexing="ij"), t) for t in ts])
    a = assemble_time_matrix(f, (xs, ys), ts)
    b = assemble_time_matrix(arr, (xs, ys), ts)
    np.testing.assert_array_equal(a.values, b.values)


def test_tc4_desk_test_grid():
    case = make_case("tc4", n_points=1000)
    snap = case.extra["test_snapshots"]
    assert snap.values.shape == (10_000, 100)
    assert case.train.X.shape == (1000, 3) and case.train.n_branch_inputs == 1
    assert case.test.X.shape == (1_000_000, 3)


def test_snapshots_to_dataset_layout():
    sc = _scenarios()
    ds = snapshots_to_dataset([assemble_scenario_matrix(sc, v) for v in ("x", "v")])
    assert ds.variables == ["x", "v"] and ds.n_branch_inputs == 2
    ref = sc.to_dataset()
    np.testing.assert_array_equal(ds.X, ref.X)
    np.testing.assert_array_equal(ds.Y, ref.Y)


def test_snapshots_to_dataset_needs_shared_layout():
    sc = _scenarios()
    a = assemble_scenario_matrix(sc, "x")
    b = SnapshotMatrix(a.values, a.kind, a.row_coords + 1, a.col_meta, name="b")
    with pytest.raises(GridRequired):
        snapshots_to_dataset([a, b])


# --- CSV ------------------------------------------------------------------


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    snap = SnapshotMatrix(rng.normal(size=(6, 4)) * 1e3, SnapshotKind.SCENARIO,
                          np.linspace(0, 1, 6)[:, None], rng.normal(size=(4, 2)), name="x")
    write_snapshot_csv(snap, tmp_path / "x.csv")
    back = load_snapshot_csv(tmp_path / "x.csv")
    assert back.name == "x" and back.kind is SnapshotKind.SCENARIO
    np.testing.assert_allclose(back.values, snap.values, rtol=1e-14)
    np.testing.assert_array_equal(back.col_meta, snap.col_meta)


def test_csv_time_kind_round_trip(tmp_path):
    snap = assemble_time_matrix(lambda x, y, t: x * y + t, ([0.0, 1.0], [2.0, 3.0]), [0.0, 0.1, 0.2])
    write_snapshot_csv(snap, tmp_path / "z.csv")
    back = load_snapshot_csv(tmp_path / "z.csv")
    assert back.kind is SnapshotKind.TIME
    np.testing.assert_array_equal(back.row_coords, snap.row_coords)
    np.testing.assert_array_equal(back.values, snap.values)


def test_csv_missing_meta(tmp_path):
    (tmp_path / "a.csv").write_text("t,a_0\n0,1\n")
    with pytest.raises(MetaMissing):
        load_snapshot_csv(tmp_path / "a.csv")


def _write_pair(tmp_path, data):
    (tmp_path / "a.meta.csv").write_text("column,kind,u0\na_0,scenario,1.5\n")
    (tmp_path / "a.csv").write_text(data)
    return tmp_path / "a.csv"


@pytest.mark.parametrize("data,line", [("", 1), ("t,a_0\n0,1\n1,2,3\n", 3), ("t,a_0\n0,x\n", 2),
                                       ("t,b_0\n0,1\n", 1)])
def test_csv_malformed(tmp_path, data, line):
    with pytest.raises(ParseError) as exc:
        load_snapshot_csv(_write_pair(tmp_path, data))
    assert exc.value.line == line


# --- determinism ----------------------------------------------------------


@pytest.mark.parametrize("case", ["tc1", "tc2"])
def test_generators_are_bit_deterministic(case):
    a, b = make_case(case, seed=4), make_case(case, seed=4)
    np.testing.assert_array_equal(a.train.X, b.train.X)
    np.testing.assert_array_equal(a.test.Y, b.test.Y)
    assert a.manifest == b.manifest
    # test scenarios come from their own stream
    assert not np.isin(a.test_scenarios.inputs, a.train_scenarios.inputs).any()


def test_tc2_random_times_are_sorted():
    case = make_case("tc2", time_sampling="random", n_train=3, n_test=2)
    assert np.all(np.diff(case.train_scenarios.coords[:, 0]) > 0)
    with pytest.raises(ValueError):
        make_case("tc2", time_sampling="weird")


def test_unknown_case():
    with pytest.raises(ValueError):
        make_case("tc3")

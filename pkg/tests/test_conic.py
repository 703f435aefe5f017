import numpy as np
import pytest

from softmpc import conic
from softmpc.conic import ConicProgram, SocConstraint, Status

from oracles import box_qp_active_set_enumeration


def box_qp(H, f, lo, hi, names=None):
    n = f.shape[0]
    A_in = np.vstack([np.eye(n), -np.eye(n)])
    b_in = np.concatenate([hi, -lo])
    return ConicProgram(H=H, f=f, A_in=A_in, b_in=b_in,
                        var_names=names or {"z": (0, n)})


def test_single_active_constraint():
    # min z^2 s.t. z >= 1
    prog = ConicProgram(H=np.array([[2.0]]), f=np.zeros(1),
                        A_in=np.array([[-1.0]]), b_in=np.array([-1.0]),
                        var_names={"z": (0, 1)})
    sol = conic.solve(prog)
    assert sol.status == Status.OPTIMAL
    assert abs(sol.z[0] - 1.0) <= 1e-8
    assert abs(sol.objective - 1.0) <= 1e-8


def test_soc_norm_epigraph():
    # min t s.t. ||(z1, z2)|| <= t, z1 = 3, z2 = 4
    G = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    c = np.array([0.0, 0.0, 1.0])
    prog = ConicProgram(H=np.zeros((3, 3)), f=np.array([0.0, 0.0, 1.0]),
                        A_eq=np.array([[1.0, 0, 0], [0, 1.0, 0]]),
                        b_eq=np.array([3.0, 4.0]),
                        socs=[SocConstraint(G, np.zeros(2), c, 0.0)],
                        var_names={"z": (0, 2), "t": (2, 1)})
    sol = conic.solve(prog)
    assert sol.status == Status.OPTIMAL
    assert abs(sol.z[2] - 5.0) <= 1e-6


def test_random_box_qps_match_enumeration(rng):
    for _ in range(200):
        n = int(rng.integers(1, 7))
        M = rng.normal(size=(n, n))
        H = M @ M.T + 0.2 * np.eye(n)
        f = rng.normal(size=n)
        lo = -rng.uniform(0.2, 2.0, size=n)
        hi = rng.uniform(0.2, 2.0, size=n)
        prog = box_qp(H, f, lo, hi)
        sol = conic.solve(prog)
        assert sol.status == Status.OPTIMAL
        z_ref, val_ref = box_qp_active_set_enumeration(H, f, lo, hi)
        assert abs(sol.objective - val_ref) <= 1e-6
        assert np.abs(sol.z - z_ref).max() <= 1e-5


def test_soc_feasibility_of_returned_solutions(rng):
    for _ in range(25):
        n = 4
        M = rng.normal(size=(n, n))
        H = M @ M.T + 0.5 * np.eye(n)
        f = rng.normal(size=n)
        G = rng.normal(size=(2, n))
        soc = SocConstraint(G, rng.normal(size=2) * 0.1,
                            np.zeros(n), rng.uniform(0.5, 2.0))
        prog = ConicProgram(H=H, f=f, socs=[soc], var_names={"z": (0, n)})
        sol = conic.solve(prog)
        assert sol.status == Status.OPTIMAL
        assert soc.violation(sol.z) <= 1e-8


def test_infeasibility_flip_is_monotone():
    # shrink a box around a point required by an equality until empty
    H = 2.0 * np.eye(2)
    f = np.zeros(2)
    A_eq = np.array([[1.0, 1.0]])
    b_eq = np.array([3.0])
    statuses = []
    for width in np.linspace(2.0, 0.2, 25):
        lo, hi = -width * np.ones(2), width * np.ones(2)
        prog = ConicProgram(H=H, f=f, A_eq=A_eq, b_eq=b_eq,
                            A_in=np.vstack([np.eye(2), -np.eye(2)]),
                            b_in=np.concatenate([hi, -lo]),
                            var_names={"z": (0, 2)})
        statuses.append(conic.solve(prog).status)
    assert Status.MAX_ITER not in statuses
    flips = [i for i in range(1, len(statuses)) if statuses[i] != statuses[i - 1]]
    assert len(flips) == 1
    assert statuses[0] == Status.OPTIMAL and statuses[-1] == Status.INFEASIBLE


def test_infeasible_attaches_certificate():
    prog = ConicProgram(H=2 * np.eye(1), f=np.zeros(1),
                        A_in=np.array([[1.0], [-1.0]]),
                        b_in=np.array([-2.0, 1.0]), var_names={"z": (0, 1)})
    sol = conic.solve(prog)
    assert sol.status == Status.INFEASIBLE
    y = sol.infeasibility_certificate
    assert y is not None
    # Farkas: y >= 0, A_in'y = 0, b_in'y < 0
    assert y.min() >= -1e-9
    assert abs(prog.A_in.T @ y).max() <= 1e-8
    assert prog.b_in @ y < 0


def test_warm_start_resolve_is_deterministic(rng):
    n = 5
    M = rng.normal(size=(n, n))
    H = M @ M.T + np.eye(n)
    f = rng.normal(size=n)
    prog = box_qp(H, f, -np.ones(n), np.ones(n))
    first = conic.solve(prog)
    again = conic.solve(prog, warm_start=first.z)
    assert abs(first.objective - again.objective) <= 1e-9


def test_extract_and_unknown_variable():
    prog = box_qp(2 * np.eye(2), np.zeros(2), -np.ones(2), np.ones(2),
                  names={"a": (0, 1), "b": (1, 1)})
    sol = conic.solve(prog)
    assert conic.extract(sol, prog, "a").shape == (1,)
    with pytest.raises(conic.UnknownVariable):
        conic.extract(sol, prog, "c")


def test_validation_rejects_bad_programs():
    with pytest.raises(conic.IllFormed):
        ConicProgram(H=np.array([[1.0, 0.5], [0.4, 1.0]]), f=np.zeros(2)).validate()
    with pytest.raises(conic.IllFormed):
        ConicProgram(H=-np.eye(2), f=np.zeros(2)).validate()
    with pytest.raises(conic.IllFormed):
        ConicProgram(H=np.eye(2), f=np.zeros(2),
                     A_in=np.eye(3), b_in=np.zeros(3)).validate()
    with pytest.raises(conic.IllFormed):
        ConicProgram(H=np.eye(2), f=np.zeros(2),
                     var_names={"a": (0, 1)}).validate()


def test_text_roundtrip(rng):
    n = 3
    M = rng.normal(size=(n, n))
    prog = ConicProgram(H=M @ M.T, f=rng.normal(size=n),
                        A_eq=rng.normal(size=(1, n)), b_eq=rng.normal(size=1),
                        A_in=rng.normal(size=(2, n)), b_in=rng.normal(size=2),
                        socs=[SocConstraint(rng.normal(size=(2, n)),
                                            rng.normal(size=2),
                                            rng.normal(size=n), 1.5)],
                        var_names={"z": (0, n)}, c0=0.25)
    back = ConicProgram.from_text(prog.to_text())
    assert np.array_equal(back.H, prog.H)
    assert np.array_equal(back.f, prog.f)
    assert back.c0 == prog.c0
    assert np.array_equal(back.A_in, prog.A_in)
    assert np.array_equal(back.socs[0].G, prog.socs[0].G)
    assert back.var_names == prog.var_names

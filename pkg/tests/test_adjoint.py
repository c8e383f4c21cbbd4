import numpy as np
import pytest

from cellmech.adjoint import (
    actuation_gradient,
    adjoint_gradients,
    adjoint_state,
    gradcheck,
)
from cellmech.geometry import (
    build_dof_map,
    build_reference,
    default_params,
    make_layout,
    reference_jacobian,
)
from cellmech.mechanics import PatchSystem
from cellmech.solver import SolveSettings, newton_solve

TIGHT = SolveSettings(newton_tol=1e-12)


def make_problem(rows=1, cols=1, seed=0, preset="squeeze_lr"):
    rng = np.random.default_rng(seed)
    layout = make_layout(rows, cols, preset=preset)
    params = default_params(layout)
    params.radii[:] = rng.uniform(0.35, 0.65, size=params.radii.shape)
    nets = build_reference(layout, params)
    dm = build_dof_map(nets, layout)
    return layout, params, PatchSystem(nets, dm)


def solve_loss(layout, params, a, c):
    nets = build_reference(layout, params)
    system = PatchSystem(nets, build_dof_map(nets, layout))
    res = newton_solve(system, a, TIGHT)
    return float(c.ravel() @ res.q.ravel())


def test_adjoint_state_matches_dense_solve():
    layout, params, system = make_problem()
    res = newton_solve(system, np.array([0.12, 0.08]), TIGHT)
    rng = np.random.default_rng(3)
    g = rng.standard_normal((system.dofmap.n_groups, 2))
    lam, H, gf = adjoint_state(system, res.q, g)
    free = system.dofmap.free
    dense = np.linalg.solve(H[free][:, free].toarray(), gf[free])
    assert np.linalg.norm(lam - dense) / np.linalg.norm(dense) <= 1e-10


def test_adjoint_state_rejects_bad_shape():
    layout, params, system = make_problem()
    with pytest.raises(ValueError):
        adjoint_state(system, system.X_global, np.zeros(7))


def test_actuation_gradient_matches_finite_differences():
    layout, params, system = make_problem()
    a = np.array([0.11, 0.07])
    res = newton_solve(system, a, TIGHT)
    rng = np.random.default_rng(4)
    c = rng.standard_normal((system.dofmap.n_groups, 2))
    lam, H, g = adjoint_state(system, res.q, c)
    grad = actuation_gradient(system, H, g, lam)

    delta = 1e-5
    fd = np.empty(2)
    for i in range(2):
        e = np.zeros(2)
        e[i] = delta
        fd[i] = (solve_loss(layout, params, a + e, c)
                 - solve_loss(layout, params, a - e, c)) / (2 * delta)
    assert np.linalg.norm(grad - fd) / np.linalg.norm(fd) <= 1e-5


def test_radii_gradient_matches_finite_differences():
    layout, params, system = make_problem()
    a = np.array([0.1, 0.06])
    res = newton_solve(system, a, TIGHT)
    rng = np.random.default_rng(5)
    c = rng.standard_normal((system.dofmap.n_groups, 2))
    bundle = adjoint_gradients(system, res.q, c, layout, params)

    delta = 1e-5
    idx = [0, 5, 11, 14]
    fd = np.empty(len(idx))
    for k, m in enumerate(idx):
        lo, hi = params.copy(), params.copy()
        lo.radii[0, m] -= delta
        hi.radii[0, m] += delta
        fd[k] = (solve_loss(layout, params=hi, a=a, c=c)
                 - solve_loss(layout, params=lo, a=a, c=c)) / (2 * delta)
    adj = bundle.radii[0, idx]
    assert np.linalg.norm(adj - fd) / np.linalg.norm(fd) <= 1e-4


def test_corner_gradient_matches_finite_differences():
    layout, params, system = make_problem(rows=2, cols=2, seed=1)
    assert params.corners.shape == (1, 2)
    a = np.array([0.08, 0.05])
    # shift the single interior corner off center so the state is generic
    params.corners[0] = [0.04, -0.03]
    nets = build_reference(layout, params)
    system = PatchSystem(nets, build_dof_map(nets, layout))
    res = newton_solve(system, a, TIGHT)
    rng = np.random.default_rng(6)
    c = rng.standard_normal((system.dofmap.n_groups, 2))
    bundle = adjoint_gradients(system, res.q, c, layout, params)

    delta = 1e-5
    fd = np.empty(2)
    for d in range(2):
        lo, hi = params.copy(), params.copy()
        lo.corners[0, d] -= delta
        hi.corners[0, d] += delta
        fd[d] = (solve_loss(layout, params=hi, a=a, c=c)
                 - solve_loss(layout, params=lo, a=a, c=c)) / (2 * delta)
    assert np.linalg.norm(bundle.corners[0] - fd) / np.linalg.norm(fd) <= 1e-4


def test_quadratic_loss_gradient():
    # L = 0.5 ||q - X||^2 exercises state-dependent dL/dq
    layout, params, system = make_problem(seed=2)
    a = np.array([0.13, 0.09])
    res = newton_solve(system, a, TIGHT)
    dL_dq = res.q - system.X_global
    bundle = adjoint_gradients(system, res.q, dL_dq, layout, params)

    def loss_at(params_, a_):
        nets = build_reference(layout, params_)
        sys_ = PatchSystem(nets, build_dof_map(nets, layout))
        r = newton_solve(sys_, a_, TIGHT)
        return 0.5 * float(np.sum((r.q - sys_.X_global) ** 2))

    delta = 1e-5
    fd_a = np.empty(2)
    for i in range(2):
        e = np.zeros(2)
        e[i] = delta
        fd_a[i] = (loss_at(params, a + e) - loss_at(params, a - e)) / (2 * delta)
    assert np.linalg.norm(bundle.actuation - fd_a) / np.linalg.norm(fd_a) <= 1e-4

    lo, hi = params.copy(), params.copy()
    lo.radii[0, 3] -= delta
    hi.radii[0, 3] += delta
    fd_r = (loss_at(hi, a) - loss_at(lo, a)) / (2 * delta)
    # the loss references X explicitly, so add its explicit reference term:
    # dL/dX = -(q - X) at shared points, scattered back to local slots.
    # scatter_pick picks representatives, so spread dL_dq over members first
    counts = np.zeros(system.dofmap.n_groups)
    np.add.at(counts, system.dofmap.group_id.ravel(), 1.0)
    dL_dX = -system.dofmap.gather(dL_dq / counts[:, None])
    bundle2 = adjoint_gradients(system, res.q, dL_dq, layout, params,
                                dL_dX=dL_dX)
    assert abs(bundle2.radii[0, 3] - fd_r) / abs(fd_r) <= 1e-4


def test_gradient_determinism_and_ref_jac_reuse():
    layout, params, system = make_problem(seed=7)
    res = newton_solve(system, np.array([0.1, 0.1]), TIGHT)
    rng = np.random.default_rng(8)
    c = rng.standard_normal((system.dofmap.n_groups, 2))
    b1 = adjoint_gradients(system, res.q, c, layout, params)
    jac = reference_jacobian(layout, params)
    b2 = adjoint_gradients(system, res.q, c, layout, params, ref_jac=jac)
    assert np.array_equal(b1.actuation, b2.actuation)
    assert np.array_equal(b1.radii, b2.radii)
    assert np.array_equal(b1.corners, b2.corners)


def test_gradcheck_runs_clean_on_single_cell():
    layout = make_layout(1, 1, preset="squeeze_lr")
    report = gradcheck(layout, seed=11, n_radii=2)
    assert report["max"] <= 1e-4
    assert "actuation" in report and "radii" in report

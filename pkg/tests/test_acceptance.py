"""Acceptance gate: one test per behavioral criterion.

Criteria 1-3 exercise gradient fidelity, the material model and the
solver directly.  Criteria 4-7 run the committed desk-scale experiment
configs end to end and check task-level outcomes; criterion 8 reruns
every training with the same seed and requires bit-identical loss logs.
Each criterion asserts its own wall-clock budget.
"""

import os
import time
from dataclasses import replace

import numpy as np
import pytest

from cellmech.adjoint import adjoint_gradients
from cellmech.geometry import (GeometryParams, build_dof_map,
                               build_reference, default_params, make_layout,
                               reference_jacobian)
from cellmech.harness.config import load_config
from cellmech.harness.train import build_system, evaluate, train
from cellmech.mechanics import Material, PatchSystem, strain_energy_density
from cellmech.mnist import distill_match_fraction, load_mnist, \
    make_segment_spec
from cellmech.neural import MlpSpec, backward, forward, init_weights, \
    theta_to_vector, vector_to_theta
from cellmech.solver import SolveSettings, newton_solve
from cellmech.tasks import TaskInstance, task_descriptor_input, task_loss

CONFIG_DIR = os.path.join(os.path.dirname(__file__), "..", "configs")


def _cfg(name, out_dir):
    cfg = load_config(os.path.join(CONFIG_DIR, name))
    return replace(cfg, out=str(out_dir))


# ---------------------------------------------------------------------------
# criterion 1: end-to-end gradient fidelity on a 2x2 model


def test_criterion_1_gradient_fidelity():
    t_start = time.time()
    rng = np.random.default_rng(42)
    layout = make_layout(2, 2, preset="squeeze_lr")
    params = default_params(layout)
    params.radii[:] = rng.uniform(0.38, 0.62, size=params.radii.shape)
    params.corners[:] = rng.uniform(-0.05, 0.05, size=params.corners.shape)
    settings = SolveSettings(newton_tol=1e-12, initial_increments=2)

    spec = MlpSpec((2, 8, 6, 2), out_scale=0.6 * layout.cell_width)
    theta = init_weights(spec, seed=7)
    task = TaskInstance("translation",
                        np.array([1.0, 1.0]) + rng.uniform(-0.4, 0.4, 2))
    t_in = task_descriptor_input(layout, task)

    def loss_at(params_, theta_, a_override=None):
        nets = build_reference(layout, params_)
        system_ = PatchSystem(nets, build_dof_map(nets, layout))
        if a_override is None:
            a_, _ = forward(spec, theta_, t_in)
        else:
            a_ = a_override
        res_ = newton_solve(system_, a_, settings)
        return task_loss(system_, layout, res_.q, task)[0]

    # analytic path, exactly as the trainer computes it
    nets = build_reference(layout, params)
    system = PatchSystem(nets, build_dof_map(nets, layout))
    a, cache = forward(spec, theta, t_in)
    res = newton_solve(system, a, settings)
    from cellmech.tasks import task_gradients
    loss0, dL_dq, _ = task_gradients(system, layout, res.q, task)
    ref_jac = reference_jacobian(layout, params)
    bundle = adjoint_gradients(system, res.q, dL_dq, layout, params,
                               ref_jac=ref_jac, settings=settings)
    d_theta, _ = backward(spec, theta, cache, bundle.actuation)

    def rel(adj, fd):
        return float(np.linalg.norm(np.asarray(adj) - np.asarray(fd))
                     / max(np.linalg.norm(fd), 1e-12))

    errs = {}
    # (a) every actuation channel
    h = 1e-6
    fd = np.empty(layout.num_channels)
    for i in range(layout.num_channels):
        e = np.zeros(layout.num_channels)
        e[i] = h
        fd[i] = (loss_at(params, theta, a + e)
                 - loss_at(params, theta, a - e)) / (2 * h)
    errs["actuation"] = rel(bundle.actuation, fd)

    # (b) 10 random radii
    h = 1e-5
    idx = rng.choice(params.radii.size, size=10, replace=False)
    fd = np.empty(10)
    for k, i in enumerate(idx):
        lo, hi = params.copy(), params.copy()
        lo.radii.ravel()[i] -= h
        hi.radii.ravel()[i] += h
        fd[k] = (loss_at(hi, theta) - loss_at(lo, theta)) / (2 * h)
    errs["radii"] = rel(bundle.radii.ravel()[idx], fd)

    # (c) 4 corner offsets: both components of the interior corner plus
    # two random directions in the corner space
    dirs = [np.array([1.0, 0.0]), np.array([0.0, 1.0])]
    for _ in range(2):
        v = rng.standard_normal(2)
        dirs.append(v / np.linalg.norm(v))
    fd = np.empty(4)
    adj = np.empty(4)
    for k, v in enumerate(dirs):
        lo, hi = params.copy(), params.copy()
        lo.corners[0] -= h * v
        hi.corners[0] += h * v
        fd[k] = (loss_at(hi, theta) - loss_at(lo, theta)) / (2 * h)
        adj[k] = bundle.corners[0] @ v
    errs["corners"] = rel(adj, fd)

    # (d) 10 random encoder weights
    vec = theta_to_vector(theta)
    widx = rng.choice(vec.size, size=10, replace=False)
    fd = np.empty(10)
    for k, i in enumerate(widx):
        lo, hi = vec.copy(), vec.copy()
        lo[i] -= h
        hi[i] += h
        fd[k] = (loss_at(params, vector_to_theta(spec, hi))
                 - loss_at(params, vector_to_theta(spec, lo))) / (2 * h)
    errs["theta"] = rel(theta_to_vector(d_theta)[widx], fd)

    assert loss0 > 0
    for family, err in errs.items():
        assert err <= 1e-4, "%s gradient rel err %.3e" % (family, err)
    assert time.time() - t_start <= 300


# ---------------------------------------------------------------------------
# criterion 2: mechanics oracles


def test_criterion_2_mechanics_oracles():
    t_start = time.time()
    mat = Material(youngs=2.25, poisson=0.125)  # mu = kappa = 1
    assert strain_energy_density(np.eye(2), mat) == 0.0
    W = strain_energy_density(np.diag([2.0, 0.5]), mat)
    assert abs(W - 1.125) <= 1e-12

    # residual and hessian against finite differences of the energy,
    # at a smooth deformation that cannot invert thin webbing
    rng = np.random.default_rng(3)
    layout = make_layout(1, 1, preset="none")
    params = default_params(layout)
    nets = build_reference(layout, params)
    system = PatchSystem(nets, build_dof_map(nets, layout))
    X = system.X_global
    q = X + 0.03 * np.stack([np.sin(np.pi * X[:, 0]) * np.cos(X[:, 1]),
                             np.cos(X[:, 0]) * np.sin(np.pi * X[:, 1])], 1)
    psi0, _ = system.energy(q)
    r = system.residual(q)
    H = system.hessian(q).toarray()
    h = 1e-6
    idx = rng.choice(q.size, size=12, replace=False)
    fd_r = np.empty(12)
    fd_H = np.empty((12, q.size))
    for k, i in enumerate(idx):
        lo, hi = q.copy(), q.copy()
        lo.ravel()[i] -= h
        hi.ravel()[i] += h
        fd_r[k] = (system.energy(hi)[0] - system.energy(lo)[0]) / (2 * h)
        fd_H[k] = (system.residual(hi) - system.residual(lo)).ravel() / (2 * h)
    assert np.linalg.norm(r.ravel()[idx] - fd_r) / np.linalg.norm(fd_r) <= 1e-6
    assert (np.linalg.norm(H[idx] - fd_H)
            / np.linalg.norm(fd_H)) <= 1e-5

    # frame indifference: rigid rotation leaves the energy unchanged
    ang = 0.7
    R = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
    psi_rot, _ = system.energy(q @ R.T)
    assert abs(psi_rot - psi0) <= 1e-10
    assert time.time() - t_start <= 60


# ---------------------------------------------------------------------------
# criterion 3: solver behavior


def test_criterion_3_solver_checks():
    t_start = time.time()
    layout = make_layout(2, 2, preset="squeeze_lr")
    params = default_params(layout)
    nets = build_reference(layout, params)
    system = PatchSystem(nets, build_dof_map(nets, layout))

    res0 = newton_solve(system, np.zeros(2))
    assert res0.energy <= 1e-12

    a = np.array([0.15, 0.1])
    q10 = newton_solve(system, a, SolveSettings(initial_increments=10)).q
    q20 = newton_solve(system, a, SolveSettings(initial_increments=20)).q
    scale = np.linalg.norm(q10 - system.X_global)
    assert np.linalg.norm(q10 - q20) / scale <= 1e-6

    res = newton_solve(system, np.array([0.25, 0.2]),
                       SolveSettings(initial_increments=2))
    trace = res.increments[-1]["residuals"]
    assert len(trace) >= 3
    assert trace[-1] <= 1e-8 * trace[0]
    r1, r2, r3 = trace[-3], trace[-2], trace[-1]
    order = np.log(r3 / r2) / np.log(r2 / r1)
    assert order >= 1.5

    # accepted states keep positive jacobian determinant everywhere
    for r in (res0, res):
        assert r.min_det > 0.0
        for log in r.increments:
            assert log["min_det"] > 0.0
    assert time.time() - t_start <= 120


# ---------------------------------------------------------------------------
# criteria 4-7: desk-scale experiment reproductions


@pytest.fixture(scope="module")
def translation_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("accept_translation")
    cfg = _cfg("translation_3x3.yaml", base / "joint")
    t0 = time.time()
    ckpt = train(cfg, out_dir=cfg.out)
    frozen_cfg = replace(cfg, frozen_geometry=True, out=str(base / "frozen"))
    frozen = train(frozen_cfg, out_dir=frozen_cfg.out)
    wall = time.time() - t0
    ev = evaluate(cfg, ckpt, n_eval=50)
    ev_frozen = evaluate(frozen_cfg, frozen, n_eval=50)
    return {"cfg": cfg, "ckpt": ckpt, "frozen_cfg": frozen_cfg,
            "frozen": frozen, "ev": ev, "ev_frozen": ev_frozen,
            "wall": wall}


def test_criterion_4_translation(translation_runs):
    r = translation_runs
    ev = r["ev"]
    assert ev["nonconv"] == 0
    assert ev["rms_error"] <= 0.10 * ev["box_side"], \
        "held-out RMS %.4f vs box side %.2f" % (ev["rms_error"],
                                                ev["box_side"])
    evf = r["ev_frozen"]
    assert evf["vertical_rms"] >= 0.80 * evf["mean_vertical_offset"], \
        "frozen-geometry vertical RMS %.4f, mean offset %.4f" % (
            evf["vertical_rms"], evf["mean_vertical_offset"])
    assert r["wall"] <= 7200


@pytest.fixture(scope="module")
def rotation_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("accept_rotation")
    cfg = _cfg("rotation_5x5.yaml", base / "run")
    t0 = time.time()
    ckpt = train(cfg, out_dir=cfg.out)
    wall = time.time() - t0
    ev = evaluate(cfg, ckpt, n_eval=25)
    return {"cfg": cfg, "ckpt": ckpt, "ev": ev, "wall": wall}


def test_criterion_5_rotation(rotation_run):
    r = rotation_run
    ev = r["ev"]
    assert ev["nonconv"] == 0
    assert ev["endpoint_rms"] <= 0.10 * ev["stick_length"], \
        "endpoint RMS %.4f vs stick length %.4f" % (ev["endpoint_rms"],
                                                    ev["stick_length"])
    assert r["wall"] <= 7200


@pytest.fixture(scope="module")
def shape_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("accept_shape")
    cfg = _cfg("shape_3x3.yaml", base / "joint")
    t0 = time.time()
    ckpt = train(cfg, out_dir=cfg.out)
    frozen_cfg = replace(cfg, frozen_geometry=True, out=str(base / "frozen"))
    frozen = train(frozen_cfg, out_dir=frozen_cfg.out)
    wall = time.time() - t0
    ev = evaluate(cfg, ckpt, n_eval=50)
    ev_frozen = evaluate(frozen_cfg, frozen, n_eval=50)
    return {"cfg": cfg, "ckpt": ckpt, "frozen_cfg": frozen_cfg,
            "frozen": frozen, "ev": ev, "ev_frozen": ev_frozen,
            "wall": wall}


def test_criterion_6_shape_matching(shape_runs):
    r = shape_runs
    assert r["cfg"].steps >= 1500 and r["cfg"].batch >= 4
    joint, frozen = r["ev"]["mean_loss"], r["ev_frozen"]["mean_loss"]
    assert joint <= 0.80 * frozen, \
        "joint mean eval loss %.5f not 20%% below frozen %.5f" % (joint,
                                                                  frozen)
    assert r["wall"] <= 14400


@pytest.fixture(scope="module")
def mnist_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("accept_mnist")
    cfg = _cfg("mnist_4x3.yaml", base / "run")
    t0 = time.time()
    ckpt = train(cfg, out_dir=cfg.out)
    wall = time.time() - t0
    ev = evaluate(cfg, ckpt)
    return {"cfg": cfg, "ckpt": ckpt, "ev": ev, "wall": wall,
            "out": str(base / "run")}


def test_criterion_7_mnist(mnist_run):
    r = mnist_run
    cfg, ckpt = r["cfg"], r["ckpt"]

    # (a) lookup-table readout accuracy for every digit and segment
    per_digit = r["ev"]["per_digit_sq"]
    assert per_digit.shape == (10, 7)
    assert np.all(np.isfinite(per_digit))
    assert per_digit.max() <= 0.05, \
        "worst per-segment squared error %.4f" % per_digit.max()

    # (b) underactuation is structural: six channels drive seven slits
    layout = make_layout(cfg.rows, cfg.cols, cfg.cell_width, cfg.preset)
    seg = make_segment_spec(layout)
    assert layout.num_channels == 6
    assert len(seg.endpoints) == 7
    assert ckpt.extras["table"].shape == (10, layout.num_channels)

    # (c) distilled classifier reproduces the table actuations
    data = os.path.join(r["out"], "data")
    images, labels = load_mnist(
        os.path.join(data, "train-images-idx3-ubyte"),
        os.path.join(data, "train-labels-idx1-ubyte"))
    spec = MlpSpec(tuple(cfg.encoder), out_scale=ckpt.out_scale)
    frac = distill_match_fraction(spec, ckpt.theta, images, labels,
                                  ckpt.extras["table"], ckpt.out_scale)
    assert frac >= 0.95, "only %.1f%% of digits within 5%% of a_max" % (
        100 * frac)
    assert r["wall"] <= 14400


# ---------------------------------------------------------------------------
# criterion 8: rerun determinism


def test_criterion_8_determinism(tmp_path_factory, translation_runs,
                                 rotation_run, shape_runs, mnist_run):
    base = tmp_path_factory.mktemp("accept_rerun")
    runs = [
        ("translation", translation_runs["cfg"], translation_runs["ckpt"]),
        ("translation_frozen", translation_runs["frozen_cfg"],
         translation_runs["frozen"]),
        ("rotation", rotation_run["cfg"], rotation_run["ckpt"]),
        ("shape", shape_runs["cfg"], shape_runs["ckpt"]),
        ("shape_frozen", shape_runs["frozen_cfg"], shape_runs["frozen"]),
        ("mnist", mnist_run["cfg"], mnist_run["ckpt"]),
    ]
    for name, cfg, first in runs:
        cfg2 = replace(cfg, out=str(base / name))
        again = train(cfg2, out_dir=cfg2.out)
        assert np.array_equal(again.loss_history, first.loss_history), \
            "%s loss log not reproduced" % name

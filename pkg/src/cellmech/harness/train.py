"""Bi-level training loop with worker-parallel minibatching.

A single coordinator owns the encoder weights, geometry parameters and
optimizer state.  Each step samples a batch of tasks; every task is
evaluated independently (forward encoder, equilibrium solve, loss,
adjoint gradients), serially or on a process pool, and the per-task
gradients are summed in task order so the result is independent of the
worker count.  Nonconvergent solves contribute zero gradient and are
counted; a batch that mostly fails aborts the run with diagnostics.
"""

import json
import multiprocessing as mp
import os
import tempfile
import time

import numpy as np

from ..adjoint import adjoint_gradients
from ..geometry import build_dof_map, build_reference, default_params, \
    reference_jacobian
from ..mechanics import PatchSystem
from ..neural import OptimState, backward, forward, init_weights, sgd_step
from ..solver import SolverError, newton_solve
from ..tasks import TaskInstance, pointer_position, sample_rotation, \
    sample_shape, sample_translation, stick_groups, task_descriptor_input, \
    task_gradients, task_loss
from .checkpoint import Checkpoint, save_checkpoint
from .config import config_digest, encoder_of, family_of, layout_of, \
    material_of, solve_settings_of


class TrainingAborted(RuntimeError):
    """Raised when more than half of a batch fails to converge."""

    def __init__(self, step, nonconv, batch):
        super().__init__("aborted at step %d: %d of %d equilibrium solves "
                         "failed to converge" % (step, nonconv, batch))
        self.step = step
        self.nonconv = nonconv
        self.batch = batch


def build_system(layout, params, material=None):
    nets = build_reference(layout, params)
    return PatchSystem(nets, build_dof_map(nets, layout), material)


def sample_task(cfg, layout, rng, family=None):
    if cfg.kind == "translation":
        return sample_translation(layout, rng, cfg.box_scale)
    if cfg.kind == "rotation":
        return sample_rotation(rng, (cfg.angle_lo, cfg.angle_hi))
    if cfg.kind == "shape":
        return TaskInstance("shape", sample_shape(family, rng).ravel())
    raise ValueError("no sampler for task kind %r" % (cfg.kind,))


def _eval_chunk(args):
    """Loss and gradients for a chunk of (index, task) pairs.

    Runs in a worker process; rebuilds the system from the shipped
    geometry so every sample sees identical state regardless of which
    worker computes it.  Failed solves return loss None.
    """
    cfg, params, theta, items = args
    layout = layout_of(cfg)
    system = build_system(layout, params, material_of(cfg))
    mlp = encoder_of(cfg)
    settings = solve_settings_of(cfg)
    ref_jac = None
    counts = None
    if not cfg.frozen_geometry:
        ref_jac = reference_jacobian(layout, params)
        counts = np.bincount(system.dofmap.group_id.ravel(),
                             minlength=system.dofmap.n_groups)
    out = []
    for idx, task in items:
        a, cache = forward(mlp, theta, task_descriptor_input(layout, task))
        try:
            res = newton_solve(system, a, settings)
        except SolverError:
            out.append((idx, None, None, None, None))
            continue
        loss, dL_dq, dX_glob = task_gradients(system, layout, res.q, task)
        if ref_jac is None:
            bundle = adjoint_gradients(system, res.q, dL_dq,
                                       settings=settings)
        else:
            dL_dX = None
            if dX_glob is not None:
                # spread the global reference derivative over coincident
                # control points; their jacobian rows are identical
                dL_dX = system.dofmap.gather(dX_glob / counts[:, None])
            bundle = adjoint_gradients(system, res.q, dL_dq, layout, params,
                                       dL_dX=dL_dX, ref_jac=ref_jac,
                                       settings=settings)
        d_theta, _ = backward(mlp, theta, cache, bundle.actuation)
        out.append((idx, loss, d_theta, bundle.radii, bundle.corners))
    return out


def _chunk(items, n_chunks):
    bounds = np.linspace(0, len(items), n_chunks + 1).astype(int)
    return [items[bounds[i]:bounds[i + 1]] for i in range(n_chunks)
            if bounds[i] < bounds[i + 1]]


def train(cfg, *, workers=None, steps=None, out_dir=None):
    """Run the configured experiment and return the final checkpoint.

    workers, steps and out_dir override the config when given; the
    worker count never changes results, only wall time.
    """
    if cfg.kind == "mnist":
        return train_mnist(cfg, out_dir=out_dir)
    M = cfg.workers if workers is None else workers
    n_steps = cfg.steps if steps is None else steps
    layout = layout_of(cfg)
    mlp = encoder_of(cfg)
    theta = init_weights(mlp, cfg.seed)
    params = default_params(layout, radius=cfg.initial_radius)
    opt = OptimState(lr=cfg.lr, lr_geometry=cfg.lr_geometry)
    rng = np.random.default_rng(cfg.seed)
    family = family_of(cfg) if cfg.kind == "shape" else None
    digest = config_digest(cfg)
    loss_hist, nonconv_hist = [], []

    metrics = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        from .config import save_config
        save_config(cfg, os.path.join(out_dir, "config.yaml"))
        metrics = open(os.path.join(out_dir, "metrics.jsonl"), "w")

    def snapshot(step):
        return Checkpoint(config_digest=digest, step=step,
                          theta=[(W.copy(), b.copy()) for W, b in theta],
                          out_scale=mlp.out_scale, params=params.copy(),
                          opt=OptimState(opt.lr, opt.lr_geometry, opt.step),
                          loss_history=np.array(loss_hist),
                          nonconv_history=np.array(nonconv_hist, dtype=float))

    pool = None
    try:
        if M > 1:
            methods = mp.get_all_start_methods()
            ctx = mp.get_context("fork" if "fork" in methods else methods[0])
            pool = ctx.Pool(M)
        for step in range(n_steps):
            t0 = time.perf_counter()
            tasks = [sample_task(cfg, layout, rng, family)
                     for _ in range(cfg.batch)]
            payloads = [(cfg, params, theta, ch)
                        for ch in _chunk(list(enumerate(tasks)),
                                         min(M, cfg.batch))]
            if pool is not None and len(payloads) > 1:
                results = pool.map(_eval_chunk, payloads)
            else:
                results = [_eval_chunk(p) for p in payloads]
            flat = sorted((r for chunk in results for r in chunk),
                          key=lambda r: r[0])

            sum_theta = [(np.zeros_like(W), np.zeros_like(b))
                         for W, b in theta]
            sum_radii = np.zeros_like(params.radii)
            sum_corners = np.zeros_like(params.corners)
            losses = []
            nonconv = 0
            for _, loss, d_theta, d_radii, d_corners in flat:
                if loss is None:
                    nonconv += 1
                    continue
                losses.append(loss)
                for (sW, sb), (dW, db) in zip(sum_theta, d_theta):
                    sW += dW
                    sb += db
                if d_radii is not None:
                    sum_radii += d_radii
                    sum_corners += d_corners
            if 2 * nonconv > cfg.batch:
                raise TrainingAborted(step, nonconv, cfg.batch)
            mean_loss = float(np.mean(losses))
            sgd_step(theta, sum_theta, opt,
                     geometry=None if cfg.frozen_geometry else params,
                     d_radii=sum_radii, d_corners=sum_corners, layout=layout)
            loss_hist.append(mean_loss)
            nonconv_hist.append(nonconv)
            if metrics is not None:
                rec = {"step": step, "loss": mean_loss, "nonconv": nonconv,
                       "wall": round(time.perf_counter() - t0, 6)}
                metrics.write(json.dumps(rec, sort_keys=True) + "\n")
                metrics.flush()
            if (out_dir and cfg.checkpoint_every
                    and (step + 1) % cfg.checkpoint_every == 0):
                save_checkpoint(snapshot(step + 1), os.path.join(
                    out_dir, "ckpt_%06d.bin" % (step + 1)))
    finally:
        if pool is not None:
            pool.close()
            pool.join()
        if metrics is not None:
            metrics.close()

    ckpt = snapshot(n_steps)
    if out_dir:
        save_checkpoint(ckpt, os.path.join(out_dir, "checkpoint.bin"))
    return ckpt


# ---------------------------------------------------------------------------
# held-out evaluation

def evaluate(cfg, ckpt, *, n_eval=50, seed=1000003):
    """Metrics over a held-out task grid for a trained checkpoint."""
    layout = layout_of(cfg)
    system = build_system(layout, ckpt.params, material_of(cfg))
    mlp = encoder_of(cfg)
    settings = solve_settings_of(cfg)
    if cfg.kind == "translation":
        return _eval_translation(cfg, ckpt, layout, system, mlp, settings,
                                 n_eval, seed)
    if cfg.kind == "rotation":
        return _eval_rotation(cfg, ckpt, layout, system, mlp, settings,
                              n_eval)
    if cfg.kind == "shape":
        return _eval_shape(cfg, ckpt, layout, system, mlp, settings,
                           n_eval, seed)
    if cfg.kind == "mnist":
        return _eval_mnist(cfg, ckpt, layout, system, settings)
    raise ValueError("no evaluator for task kind %r" % (cfg.kind,))


def _eval_translation(cfg, ckpt, layout, system, mlp, settings, n_eval, seed):
    rng = np.random.default_rng(seed)
    p0 = pointer_position(system, layout, system.X_global)
    targets, achieved, losses = [], [], []
    nonconv = 0
    for _ in range(n_eval):
        task = sample_translation(layout, rng, cfg.box_scale)
        a, _ = forward(mlp, ckpt.theta, task_descriptor_input(layout, task))
        try:
            res = newton_solve(system, a, settings)
        except SolverError:
            nonconv += 1
            continue
        loss, _ = task_loss(system, layout, res.q, task)
        targets.append(task.descriptor)
        achieved.append(pointer_position(system, layout, res.q))
        losses.append(loss)
    targets = np.array(targets)
    achieved = np.array(achieved)
    losses = np.array(losses)
    err = achieved - targets
    return {
        "kind": "translation",
        "n": len(losses),
        "nonconv": nonconv,
        "mean_loss": float(losses.mean()),
        "max_loss": float(losses.max()),
        "rms_error": float(np.sqrt(np.mean(np.sum(err ** 2, axis=1)))),
        "vertical_rms": float(np.sqrt(np.mean(err[:, 1] ** 2))),
        "mean_vertical_offset": float(np.mean(np.abs(targets[:, 1] - p0[1]))),
        "box_side": cfg.box_scale * cfg.cell_width,
        "targets": targets,
        "achieved": achieved,
        "losses": losses,
    }


def _eval_rotation(cfg, ckpt, layout, system, mlp, settings, n_eval):
    commanded = np.linspace(cfg.angle_lo, cfg.angle_hi, n_eval)
    groups = stick_groups(system, layout)
    ends0 = system.X_global[groups]
    v0 = ends0[1] - ends0[0]
    length = float(np.linalg.norm(v0))
    losses, achieved = [], []
    nonconv = 0
    used = []
    for t in commanded:
        task = TaskInstance("rotation", t)
        a, _ = forward(mlp, ckpt.theta, task_descriptor_input(layout, task))
        try:
            res = newton_solve(system, a, settings)
        except SolverError:
            nonconv += 1
            continue
        loss, _ = task_loss(system, layout, res.q, task)
        v1 = res.q[groups][1] - res.q[groups][0]
        achieved.append(float(np.arctan2(v0[0] * v1[1] - v0[1] * v1[0],
                                         np.dot(v0, v1))))
        losses.append(loss)
        used.append(t)
    losses = np.array(losses)
    # per-task loss is already the mean squared endpoint error
    rms = float(np.sqrt(losses.mean()))
    return {
        "kind": "rotation",
        "n": len(losses),
        "nonconv": nonconv,
        "mean_loss": float(losses.mean()),
        "max_loss": float(losses.max()),
        "endpoint_rms": rms,
        "endpoint_rms_frac": rms / length,
        "stick_length": length,
        "commanded": np.array(used),
        "achieved": np.array(achieved),
        "losses": losses,
    }


def _eval_shape(cfg, ckpt, layout, system, mlp, settings, n_eval, seed):
    rng = np.random.default_rng(seed)
    family = family_of(cfg)
    losses = []
    nonconv = 0
    for _ in range(n_eval):
        task = TaskInstance("shape", sample_shape(family, rng).ravel())
        a, _ = forward(mlp, ckpt.theta, task_descriptor_input(layout, task))
        try:
            res = newton_solve(system, a, settings)
        except SolverError:
            nonconv += 1
            continue
        loss, _ = task_loss(system, layout, res.q, task)
        losses.append(loss)
    losses = np.array(losses)
    return {
        "kind": "shape",
        "n": len(losses),
        "nonconv": nonconv,
        "mean_loss": float(losses.mean()),
        "max_loss": float(losses.max()),
        "losses": losses,
    }


def _eval_mnist(cfg, ckpt, layout, system, settings):
    from ..mnist import make_segment_spec, mnist_loss, segment_targets, \
        slit_readout
    seg = make_segment_spec(layout)
    table = ckpt.extras["table"]
    color = ckpt.params.color
    per_digit = np.zeros((10, 7))
    losses = np.zeros(10)
    nonconv = 0
    for digit in range(10):
        try:
            res = newton_solve(system, table[digit], settings)
        except SolverError:
            nonconv += 1
            per_digit[digit] = np.nan
            losses[digit] = np.nan
            continue
        readout = slit_readout(system, layout, res.q, color, seg)
        err2 = (readout - segment_targets(digit)) ** 2
        per_digit[digit] = err2
        losses[digit] = err2.mean()
    return {
        "kind": "mnist",
        "n": 10,
        "nonconv": nonconv,
        "mean_loss": float(np.nanmean(losses)),
        "max_loss": float(np.nanmax(losses)),
        "per_digit_sq": per_digit,
        "max_segment_sq": float(np.nanmax(per_digit)),
        "losses": losses,
    }


# ---------------------------------------------------------------------------
# three-stage digit-display pipeline

def train_mnist(cfg, *, out_dir=None):
    """Lookup pretraining, encoder distillation, end-to-end finetuning."""
    from ..mnist import load_mnist, make_fixture_dataset, make_segment_spec, \
        mnist_distill, mnist_finetune, mnist_pretrain_lookup
    layout = layout_of(cfg)
    params = default_params(layout, radius=cfg.initial_radius,
                            with_color=True)
    system = build_system(layout, params, material_of(cfg))
    seg = make_segment_spec(layout)
    settings = solve_settings_of(cfg)
    a_max = 0.6 * cfg.cell_width
    log = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        from .config import save_config
        save_config(cfg, os.path.join(out_dir, "config.yaml"))
        log = open(os.path.join(out_dir, "metrics.jsonl"), "w")

    try:
        color, table, hist1 = mnist_pretrain_lookup(
            system, layout, seg, steps=cfg.pretrain_steps,
            lr=cfg.pretrain_lr, a_max=a_max, seed=cfg.seed,
            settings=settings, log=log)

        if cfg.mnist_dir:
            data_dir = cfg.mnist_dir
            img_path = os.path.join(data_dir, "train-images-idx3-ubyte")
            lbl_path = os.path.join(data_dir, "train-labels-idx1-ubyte")
        else:
            data_dir = os.path.join(out_dir, "data") if out_dir \
                else tempfile.mkdtemp(prefix="cellmech-digits-")
            os.makedirs(data_dir, exist_ok=True)
            img_path, lbl_path = make_fixture_dataset(
                data_dir, n_per_class=cfg.n_per_class, seed=cfg.seed)
        images, labels = load_mnist(img_path, lbl_path)

        spec, theta, hist2 = mnist_distill(
            images, labels, table, a_max, steps=cfg.distill_steps,
            lr=cfg.distill_lr, batch=cfg.distill_batch, seed=cfg.seed,
            sizes=cfg.encoder)

        theta, color, hist3 = mnist_finetune(
            system, layout, seg, spec, theta, color, images, labels,
            steps=cfg.finetune_steps, lr=cfg.finetune_lr,
            batch=cfg.finetune_batch, seed=cfg.seed, settings=settings,
            log=log)
    finally:
        if log is not None:
            log.close()

    params.color = color
    total = cfg.pretrain_steps + cfg.distill_steps + cfg.finetune_steps
    ckpt = Checkpoint(
        config_digest=config_digest(cfg), step=total, theta=theta,
        out_scale=a_max, params=params,
        opt=OptimState(cfg.finetune_lr),
        loss_history=np.concatenate([hist1, hist2, hist3]),
        nonconv_history=np.zeros(0),
        extras={"table": table,
                "stage_lengths": np.array(
                    [len(hist1), len(hist2), len(hist3)], dtype=float)})
    if out_dir:
        save_checkpoint(ckpt, os.path.join(out_dir, "checkpoint.bin"))
    return ckpt

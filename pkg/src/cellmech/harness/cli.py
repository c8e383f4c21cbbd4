"""Command line interface for training, evaluation and rendering.

verbs:
  train CONFIG      run the configured experiment
  eval CKPT         held-out metrics for a checkpoint
  render CKPT       SVG of a solved task from a checkpoint
  gradcheck CONFIG  finite-difference audit of the adjoint gradients
  solve CONFIG      one equilibrium solve at a given actuation
"""

import argparse
import json
import os
import sys

import numpy as np

from ..adjoint import gradcheck as run_gradcheck
from ..solver import SolverError, newton_solve
from ..tasks import TaskInstance, pointer_position, sample_shape, \
    stick_groups, task_descriptor_input
from .checkpoint import load_checkpoint
from .config import config_digest, encoder_of, family_of, layout_of, \
    load_config, material_of, solve_settings_of
from .render import render_svg
from .train import build_system, evaluate, train


def _add_common(sub):
    sub.add_argument("--seed", type=int, default=None)
    sub.add_argument("--out", default=None)


def _apply_overrides(cfg, args):
    from dataclasses import replace
    kw = {}
    if getattr(args, "seed", None) is not None:
        kw["seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        kw["workers"] = args.workers
    if getattr(args, "steps", None) is not None:
        kw["steps"] = args.steps
    if getattr(args, "out", None) is not None:
        kw["out"] = args.out
    return replace(cfg, **kw) if kw else cfg


def _config_for_checkpoint(args):
    path = args.config
    if path is None:
        path = os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)),
                            "config.yaml")
    if not os.path.exists(path):
        raise SystemExit("no config found at %s; pass --config" % path)
    return load_config(path)


def _jsonable(metrics):
    out = {}
    for key, val in metrics.items():
        out[key] = val.tolist() if isinstance(val, np.ndarray) else val
    return out


def _cmd_train(args):
    cfg = _apply_overrides(load_config(args.config), args)
    out_dir = args.out or cfg.out
    ckpt = train(cfg, workers=args.workers, steps=args.steps,
                 out_dir=out_dir)
    tail = ckpt.loss_history[-50:]
    print(json.dumps({"steps": int(ckpt.step),
                      "final_loss": float(tail.mean()) if len(tail) else None,
                      "out": out_dir}, sort_keys=True))
    return 0


def _cmd_eval(args):
    cfg = _config_for_checkpoint(args)
    ckpt = load_checkpoint(args.checkpoint, expect_digest=config_digest(cfg))
    metrics = evaluate(cfg, ckpt, n_eval=args.n_eval,
                       seed=args.seed if args.seed is not None else 1000003)
    blob = json.dumps(_jsonable(metrics), sort_keys=True, indent=2)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "metrics.json"), "w") as fh:
            fh.write(blob + "\n")
    print(blob)
    return 0


def _parse_task(cfg, arg, layout):
    if cfg.kind == "shape":
        seed = int(arg.split(":", 1)[1]) if arg else 0
        pts = sample_shape(family_of(cfg), np.random.default_rng(seed))
        return TaskInstance("shape", pts.ravel())
    if cfg.kind == "translation":
        if arg:
            vals = np.array([float(v) for v in arg.split(",")])
        else:
            w = cfg.cell_width
            vals = np.array([0.5 * cfg.cols * w, 0.5 * cfg.rows * w])
        return TaskInstance("translation", vals)
    if cfg.kind == "rotation":
        return TaskInstance("rotation",
                            float(arg) if arg else cfg.angle_hi)
    raise SystemExit("render --task is unsupported for kind %r" % cfg.kind)


def _cmd_render(args):
    from ..neural import forward
    from ..tasks import pore_boundary_matrix
    cfg = _config_for_checkpoint(args)
    ckpt = load_checkpoint(args.checkpoint, expect_digest=config_digest(cfg))
    layout = layout_of(cfg)
    system = build_system(layout, ckpt.params, material_of(cfg))
    ann = {}
    if cfg.kind == "mnist":
        digit = int(args.task.split(":", 1)[1]) if args.task else 8
        a = ckpt.extras["table"][digit]
        from ..mnist import make_segment_spec
        ann["slits"] = make_segment_spec(layout).endpoints
    else:
        task = _parse_task(cfg, args.task, layout)
        a, _ = forward(encoder_of(cfg), ckpt.theta,
                       task_descriptor_input(layout, task))
    res = newton_solve(system, a, solve_settings_of(cfg))
    if cfg.kind == "translation":
        ann["pointer"] = pointer_position(system, layout, res.q)
        ann["target"] = task.descriptor
    elif cfg.kind == "rotation":
        groups = stick_groups(system, layout)
        ends0 = system.X_global[groups]
        ann["stick"] = res.q[groups]
        c = ends0.mean(axis=0)
        t = float(task.descriptor[0])
        R = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
        ann["target_stick"] = c + (ends0 - c) @ R.T
    elif cfg.kind == "shape":
        pts, _, _ = pore_boundary_matrix(system, layout, res.q,
                                         n_points=cfg.shape_points)
        ann["outline"] = pts
        ann["target_outline"] = task.descriptor.reshape(-1, 2) + \
            pts.mean(axis=0)
    svg = render_svg(system, layout, res.q, color=ckpt.params.color,
                     annotations=ann)
    out = args.out or "render.svg"
    with open(out, "w") as fh:
        fh.write(svg)
    print(json.dumps({"out": out, "energy": res.energy}, sort_keys=True))
    return 0


def _cmd_gradcheck(args):
    cfg = load_config(args.config)
    layout = layout_of(cfg)
    report = run_gradcheck(layout, seed=args.seed or 0)
    status = 0
    for name in ("actuation", "radii", "corners"):
        if name in report:
            print("%-10s rel %.3e" % (name, report[name]))
    print("max        rel %.3e" % report["max"])
    if report["max"] > 1e-4:
        print("FAIL: gradient disagreement above 1e-4")
        status = 1
    return status


def _cmd_solve(args):
    cfg = load_config(args.config)
    layout = layout_of(cfg)
    from ..geometry import default_params
    params = default_params(layout, radius=cfg.initial_radius)
    system = build_system(layout, params, material_of(cfg))
    a = np.array([float(v) for v in args.actuation.split(",")])
    if a.size != layout.num_channels:
        raise SystemExit("expected %d actuation values, got %d"
                         % (layout.num_channels, a.size))
    try:
        res = newton_solve(system, a, solve_settings_of(cfg))
    except SolverError as exc:
        print(json.dumps({"converged": False, "error": str(exc)}))
        return 1
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(render_svg(system, layout, res.q))
    print(json.dumps({"converged": res.converged, "energy": res.energy,
                      "increments": len(res.increments),
                      "residual": res.final_residual,
                      "min_det": res.min_det}, sort_keys=True))
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="cellmech",
        description="differentiable cellular metamaterial training")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", help="run a configured experiment")
    p.add_argument("config")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    _add_common(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="held-out metrics for a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--config", default=None)
    p.add_argument("--n-eval", type=int, default=50)
    _add_common(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("render", help="SVG of a solved task")
    p.add_argument("checkpoint")
    p.add_argument("--config", default=None)
    p.add_argument("--task", default=None,
                   help="descriptor: 'x,y', angle, 'sample:SEED' or "
                        "'digit:D'")
    _add_common(p)
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("config")
    _add_common(p)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("solve", help="one equilibrium solve")
    p.add_argument("config")
    p.add_argument("--actuation", required=True,
                   help="comma separated channel displacements")
    _add_common(p)
    p.set_defaults(func=_cmd_solve)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

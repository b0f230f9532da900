"""Command-line entry point: train, sample, eval, oracle-check, trajectories.

Exit codes: 0 success, 1 failed audit (e.g. bound below exact NLL), 2 config
or usage error, 3 training abort, 4 checkpoint format/version mismatch.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .catdist import check_simplex
from .config import ConfigError, RunConfig
from .coupling import coupling_matrix, expected_stay_mass
from .forward_process import ForwardProcess, PriorSpec
from .objective import diff_loss_relaxed, full_bound
from .oracle import exact_reinforce_grad, fd_check
from .reverse_model import NetSpec, ReverseModel, exact_model_nll
from . import trainer as trainer_mod
from .trainer import (CheckpointError, TrainingAborted, build_dataset,
                      build_models, evaluate_models, load_checkpoint,
                      restore_arrays, write_bytes_atomic, write_text_atomic)

EVAL_KEYS = ("bound", "bound_nats_per_dim", "l_rec", "l_prior", "exact_nll",
             "bound_minus_nll", "tv", "validity", "factorization_gap",
             "reverse_entropy_per_step")


def _load_run(args):
    cfg = RunConfig.from_file(args.config, getattr(args, "set", None) or ())
    dataset = build_dataset(cfg, workdir=getattr(args, "out", None) or cfg["train.out"])
    fwd, rev = build_models(cfg, dataset)
    if getattr(args, "ckpt", None):
        _, arrays = load_checkpoint(args.ckpt)
        restore_arrays(arrays, fwd, rev)
    return cfg, dataset, fwd, rev


def write_samples_csv(path, xs: np.ndarray):
    D = xs.shape[1] if xs.size else xs.shape[1]
    header = ",".join(f"x{i + 1}" for i in range(D))
    lines = [header] + [",".join(str(int(v)) for v in row) for row in xs]
    write_text_atomic(path, "\n".join(lines) + "\n")


def write_pgm(path, img: np.ndarray):
    """Binary (P5) grayscale image."""
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    write_bytes_atomic(path, f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def categories_to_gray(z: np.ndarray, mask_index: int | None) -> np.ndarray:
    """Map categories to gray levels: data 0 -> black, 1 -> white, mask -> gray."""
    out = np.where(z == 0, 0, 255).astype(np.uint8)
    if mask_index is not None:
        out = np.where(z == mask_index, 128, out).astype(np.uint8)
    return out


def export_trajectory(out_dir, cfg, dataset, fwd, rev, n, steps, rng):
    """Write per-step states: PGM per (sample, step) for images, CSV otherwise."""
    os.makedirs(out_dir, exist_ok=True)
    _, states = rev.sample(n, rng, T=steps, record_trajectory=True)
    image_kind = cfg["data.kind"] in ("idx", "digits")
    mask_index = rev.K - 1 if cfg["prior.kind"] == "mask" else None
    side = getattr(dataset, "side", None)
    for si, z in enumerate(states):  # states[0] is z_T, states[-1] is z_0
        t = steps - si
        if image_kind:
            for j in range(z.shape[0]):
                img = categories_to_gray(z[j].reshape(side, side), mask_index)
                write_pgm(os.path.join(out_dir, f"traj-s{j:04d}-t{t}.pgm"), img)
        else:
            write_samples_csv(os.path.join(out_dir, f"samples-t{t}.csv"), z)
    return states


# ---------------------------------------------------------------------------
# subcommands

def cmd_train(args) -> int:
    cfg = RunConfig.from_file(args.config, args.set or ())
    out = args.out or cfg["train.out"]
    summary = trainer_mod.train(cfg, out_dir=out,
                                progress_every=args.progress_every)
    print(f"wrote {summary['metrics_csv']} and {summary['final_checkpoint']}")
    final = summary["final"]
    print(f"final bound={final['bound']:.6f}"
          + (f" tv={final['tv']:.4f}" if final.get("tv") is not None else ""))
    return 0


def cmd_sample(args) -> int:
    cfg, dataset, fwd, rev = _load_run(args)
    os.makedirs(args.out, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    steps = args.steps or cfg["model.T"]
    xs = rev.sample(args.n, rng, T=steps) if args.n > 0 \
        else np.zeros((0, rev.D), dtype=int)
    write_samples_csv(os.path.join(args.out, "samples.csv"), xs)
    if args.trajectory:
        export_trajectory(args.out, cfg, dataset, fwd, rev,
                          min(args.n, args.trajectory_samples), steps, rng)
    if hasattr(dataset, "law") and args.n > 0 and rev.K ** rev.D <= 10000:
        law = dataset.law()
        idx = np.ravel_multi_index(tuple(xs.T), (rev.K,) * rev.D)
        hist = np.bincount(idx, minlength=law.probs.shape[0]) / args.n
        tv = 0.5 * float(np.abs(hist - law.probs).sum())
        print(f"tv_vs_exact_law={tv:.6f}")
    print(f"wrote {args.n} samples to {args.out}/samples.csv")
    return 0


def cmd_eval(args) -> int:
    cfg, dataset, fwd, rev = _load_run(args)
    metrics = evaluate_models(fwd, rev, dataset, cfg, seed_tag=args.seed,
                              tv_samples=args.tv_samples)
    record = {k: metrics.get(k) for k in EVAL_KEYS}
    text = json.dumps(record, indent=2)
    out_path = args.out or "eval.json"
    write_text_atomic(out_path, text + "\n")
    print(text)
    if record["bound_minus_nll"] is not None:
        # exact bound vs exact NLL on the same evaluation points
        if record["bound_minus_nll"] < -1e-9:
            print(f"AUDIT FAILED: bound is {-record['bound_minus_nll']:.3e} "
                  "below the exact NLL on the evaluation points",
                  file=sys.stderr)
            return 1
        print(f"audit ok: bound exceeds exact NLL by "
              f"{record['bound_minus_nll']:.6f} nats on the evaluation points")
    return 0


def cmd_export_trajectories(args) -> int:
    cfg, dataset, fwd, rev = _load_run(args)
    rng = np.random.default_rng(args.seed)
    steps = args.steps or cfg["model.T"]
    export_trajectory(args.out, cfg, dataset, fwd, rev, args.n, steps, rng)
    print(f"wrote {args.n} trajectories ({steps + 1} states each) to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# oracle-check suites

def _tiny_instance(K=3, D=2, T=2, seed=0, width=8):
    spec = NetSpec(width=width, depth=2, time_dim=4)
    prior = PriorSpec("uniform")
    rng = np.random.default_rng(seed)
    fwd = ForwardProcess(K, D, T, prior, spec=spec, rng=rng)
    rev = ReverseModel(K, D, T, spec, prior.vector(K), rng)
    for p in fwd.params() + rev.params():  # break the zero-init symmetry
        p.value = p.value + rng.normal(0, 0.3, p.value.shape)
    return fwd, rev


def suite_coupling(report) -> bool:
    rng = np.random.default_rng(0)
    worst_cons, worst_stay = 0.0, 0.0
    for _ in range(1000):
        K = int(rng.integers(2, 17))
        u_s = rng.dirichlet(np.ones(K))
        u_t = rng.dirichlet(np.ones(K))
        M = coupling_matrix(u_s, u_t)
        for k in range(K):
            check_simplex(M[k], tol=1e-9)
        worst_cons = max(worst_cons, float(np.abs(u_t @ M - u_s).max()))
        stay = float((u_t * np.diag(M)).sum())
        worst_stay = max(worst_stay, abs(stay - expected_stay_mass(u_s, u_t)))
    ok = worst_cons < 1e-12 and worst_stay < 1e-12
    report("coupling: marginal consistency", worst_cons < 1e-12,
           f"max err {worst_cons:.2e}")
    report("coupling: maximal stay mass", worst_stay < 1e-12,
           f"max err {worst_stay:.2e}")
    return ok


def suite_gradients(report) -> bool:
    ok = True
    for K, D in ((2, 1), (3, 2)):
        fwd, rev = _tiny_instance(K=K, D=D, seed=K * 10 + D)
        params = fwd.params() + rev.params()
        x = np.random.default_rng(1).integers(0, K, size=(2, D))
        t = np.array([1, 2])
        noise_rng = np.random.default_rng(7)
        from .catdist import gumbel_noise
        noise = gumbel_noise((2, D, K), noise_rng)

        def relaxed_loss():
            return diff_loss_relaxed(fwd, rev, x, t, 0.7, None, noise=noise)

        err = fd_check(relaxed_loss, params, h=1e-5)
        report(f"gradients: relaxed objective K={K} D={D}", err < 1e-4,
               f"max rel err {err:.2e}")
        ok &= err < 1e-4

        def enum_loss():
            _, term = _enum_term(fwd, rev, x[0], 2)
            return term

        err2 = fd_check(enum_loss, params, h=1e-5)
        report(f"gradients: enumerated score objective K={K} D={D}",
               err2 < 1e-6, f"max rel err {err2:.2e}")
        ok &= err2 < 1e-6
    return ok


def _enum_term(fwd, rev, x, t):
    from .oracle import _enumerated_term_var
    val, term = _enumerated_term_var(fwd, rev, x, t, cap=10000)
    return val, term


def suite_estimators(report, n_groups=200, group=500) -> bool:
    from .objective import diff_loss_reinforce
    fwd, rev = _tiny_instance(K=2, D=1, T=2, seed=3)
    params = fwd.params()
    x = np.array([[1]])
    # exact gradient averaged over t (training draws t uniformly)
    exact = None
    for t in (1, 2):
        _, g = exact_reinforce_grad(fwd, rev, x[0], t)
        g = [gi / 2.0 for gi in g[:len(params)]]
        exact = g if exact is None else [a + b for a, b in zip(exact, g)]
    rng = np.random.default_rng(11)
    group_means = []
    for _ in range(n_groups):
        xs = np.repeat(x, group, axis=0)
        ts = rng.integers(1, 3, size=group)
        for p in params:
            p.grad = None
        loss, _ = diff_loss_reinforce(fwd, rev, xs, ts, rng, scale_T=False)
        loss.backward()
        group_means.append([np.zeros_like(p.value) if p.grad is None
                            else p.grad.copy() for p in params])
    ok = True
    worst_z = 0.0
    for i in range(len(params)):
        stack = np.stack([gm[i] for gm in group_means])
        mean = stack.mean(axis=0)
        se = stack.std(axis=0, ddof=1) / np.sqrt(n_groups)
        z = np.abs(mean - exact[i]) / np.maximum(se, 1e-12)
        worst_z = max(worst_z, float(z.max()))
    ok = worst_z < 4.0
    report("estimators: score-function gradient unbiased", ok,
           f"max |z| {worst_z:.2f} over {n_groups * group} draws")
    return ok


def suite_bounds(report) -> bool:
    ok = True
    for seed in range(3):
        fwd, rev = _tiny_instance(K=3, D=2, T=2, seed=seed)
        rng = np.random.default_rng(seed)
        xs = rng.integers(0, 3, size=(16, 2))
        bound = full_bound(fwd, rev, xs).total
        nll = exact_model_nll(rev, xs)
        good = bound >= nll - 1e-9
        report(f"bounds: bound >= exact NLL (seed {seed})", good,
               f"bound {bound:.6f} nll {nll:.6f}")
        ok &= good
    return ok


SUITES = {
    "coupling": [suite_coupling],
    "gradients": [suite_gradients],
    "estimators": [suite_estimators],
    "bounds": [suite_bounds],
    "all": [suite_coupling, suite_gradients, suite_estimators, suite_bounds],
}


def cmd_oracle_check(args) -> int:
    if args.suite not in SUITES:
        print(f"unknown suite: {args.suite} (choose from {sorted(SUITES)})",
              file=sys.stderr)
        return 2
    all_ok = True

    def report(name, ok, detail=""):
        print(f"[{'PASS' if ok else 'FAIL'}] {name}" + (f": {detail}" if detail else ""))

    for fn in SUITES[args.suite]:
        all_ok &= fn(report)
    return 0 if all_ok else 1


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fldd",
                                description="trainable-noising discrete diffusion lab")
    sub = p.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="train a model from a config file")
    tr.add_argument("--config", required=True)
    tr.add_argument("--set", action="append", metavar="KEY=VALUE",
                    help="override a config key")
    tr.add_argument("--out", default=None, help="output directory override")
    tr.add_argument("--progress-every", type=int, default=0)
    tr.set_defaults(fn=cmd_train)

    sa = sub.add_parser("sample", help="generate samples from a checkpoint")
    sa.add_argument("--ckpt", required=True)
    sa.add_argument("--config", required=True)
    sa.add_argument("--set", action="append", metavar="KEY=VALUE")
    sa.add_argument("--n", type=int, required=True)
    sa.add_argument("--steps", type=int, default=0)
    sa.add_argument("--out", required=True)
    sa.add_argument("--seed", type=int, default=0)
    sa.add_argument("--trajectory", action="store_true",
                    help="also dump intermediate states z_T..z_0")
    sa.add_argument("--trajectory-samples", type=int, default=16)
    sa.set_defaults(fn=cmd_sample)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--config", required=True)
    ev.add_argument("--set", action="append", metavar="KEY=VALUE")
    ev.add_argument("--out", default=None, help="report path (default eval.json)")
    ev.add_argument("--tv-samples", type=int, default=100000)
    ev.add_argument("--seed", type=int, default=0)
    ev.set_defaults(fn=cmd_eval)

    oc = sub.add_parser("oracle-check", help="run exact-oracle property suites")
    oc.add_argument("--suite", required=True)
    oc.set_defaults(fn=cmd_oracle_check)

    ex = sub.add_parser("export-trajectories",
                        help="dump intermediate sampler states")
    ex.add_argument("--ckpt", required=True)
    ex.add_argument("--config", required=True)
    ex.add_argument("--set", action="append", metavar="KEY=VALUE")
    ex.add_argument("--n", type=int, default=16)
    ex.add_argument("--steps", type=int, default=0)
    ex.add_argument("--out", required=True)
    ex.add_argument("--seed", type=int, default=0)
    ex.set_defaults(fn=cmd_export_trajectories)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except TrainingAborted as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return 3
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

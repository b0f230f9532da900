"""End-to-end training loop: relaxed warm-up, then score-function phase.

Owns run artifacts: a metrics CSV stream, binary checkpoints with full
optimizer and RNG state, and the evaluation metrics record. All file writes
go through a temp-file + rename so interrupted runs never leave corrupt
artifacts.
"""

from __future__ import annotations

import logging
import os
import struct
import tempfile

import numpy as np

from . import ndgrad as nd
from .config import ConfigError, RunConfig
from .datasets import GmmGrid, IdxImages, RandomWalk, load_idx, make_digits_idx
from .forward_process import ForwardProcess, MaskedForwardProcess, PriorSpec
from .objective import TauSchedule, diff_loss_reinforce, diff_loss_relaxed, full_bound
from .oracle import EnumeratedLaw, factorization_gap, induced_target
from .reverse_model import NetSpec, ReverseModel, exact_model_nll

log = logging.getLogger("fldd")

CKPT_MAGIC = b"FLDD"
CKPT_VERSION = 1
MAX_BAD_STEPS = 100

METRIC_FIELDS = ("step", "phase", "tau", "loss", "bound", "exact_nll", "tv")


class TrainingAborted(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# atomic file helpers

def write_bytes_atomic(path, data: bytes):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_text_atomic(path, text: str):
    write_bytes_atomic(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# RNG state <-> float64 limbs (16-bit chunks, exactly representable)

def _int_to_limbs(x: int, n: int) -> list[float]:
    return [float((x >> (16 * i)) & 0xFFFF) for i in range(n)]


def _limbs_to_int(limbs) -> int:
    return sum(int(v) << (16 * i) for i, v in enumerate(limbs))


def rng_state_array(gen: np.random.Generator) -> np.ndarray:
    st = gen.bit_generator.state
    vals = (_int_to_limbs(st["state"]["state"], 8)
            + _int_to_limbs(st["state"]["inc"], 8)
            + [float(st["has_uint32"]), float(st["uinteger"])])
    return np.array(vals)


def rng_from_state_array(arr: np.ndarray) -> np.random.Generator:
    gen = np.random.Generator(np.random.PCG64())
    gen.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": _limbs_to_int(arr[:8]), "inc": _limbs_to_int(arr[8:16])},
        "has_uint32": int(arr[16]),
        "uinteger": int(arr[17]),
    }
    return gen


# ---------------------------------------------------------------------------
# checkpoint container: magic, version, step, then length-prefixed f64 arrays

def save_checkpoint(path, step: int, arrays: dict):
    parts = [CKPT_MAGIC, struct.pack("<IQ", CKPT_VERSION, step),
             struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{max(arr.ndim, 1)}I",
                                 *(arr.shape if arr.ndim else (1,))))
        parts.append(arr.tobytes())
    write_bytes_atomic(path, b"".join(parts))


def load_checkpoint(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic {data[:4]!r}")
    version, step = struct.unpack_from("<IQ", data, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {version} (expected {CKPT_VERSION})")
    (count,) = struct.unpack_from("<I", data, 16)
    off = 20
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{max(ndim, 1)}I", data, off)
        off += 4 * max(ndim, 1)
        if ndim == 0:
            shape = ()
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).copy()
        off += 8 * n
        arrays[name] = arr.reshape(shape)
    return step, arrays


# ---------------------------------------------------------------------------
# model construction

def build_dataset(cfg: RunConfig, workdir: str | None = None):
    kind = cfg["data.kind"]
    if kind == "gmm":
        return GmmGrid(grid=cfg["data.grid"], mu1=tuple(cfg["data.mu1"]),
                       mu2=tuple(cfg["data.mu2"]), weight=cfg["data.weight"],
                       sigma=cfg["data.sigma"])
    if kind == "walk":
        return RandomWalk(D=cfg["data.length"])
    if kind in ("idx", "digits"):
        images = cfg["data.images"]
        labels = cfg["data.labels"] or None
        if kind == "digits":
            base = workdir or cfg["train.out"]
            os.makedirs(base, exist_ok=True)
            images = os.path.join(base, "digits-images.idx")
            if not os.path.exists(images):
                make_digits_idx(images, side=cfg["data.side"])
            labels = None
        if not images:
            raise ConfigError("data.kind=idx requires data.images")
        data, lab = load_idx(images, labels, threshold=cfg["data.threshold"],
                             side=cfg["data.side"] or None)
        return IdxImages(data=data, side=cfg["data.side"], labels=lab)
    raise ConfigError(f"unknown data.kind: {kind}")


def model_dims(cfg: RunConfig, dataset):
    data_k = dataset.K
    if cfg["prior.kind"] == "mask":
        return data_k + 1, dataset.D, data_k  # K, D, mask_index
    return data_k, dataset.D, None


def build_models(cfg: RunConfig, dataset):
    K, D, mask_index = model_dims(cfg, dataset)
    T = cfg["model.T"]
    spec = NetSpec(width=cfg["net.width"], depth=cfg["net.depth"],
                   time_dim=cfg["net.time_dim"])
    prior = PriorSpec(kind=cfg["prior.kind"], mask_index=mask_index)
    seed = cfg["train.seed"]
    rng_fwd = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 10])))
    rng_rev = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 11])))
    masked = cfg["forward.masked"]
    learned = cfg["forward.learned"]
    if masked:
        if cfg["prior.kind"] != "mask":
            raise ConfigError("forward.masked=true requires prior.kind=mask")
        fwd = MaskedForwardProcess(K, D, T, prior, spec=spec if learned else None,
                                   rng=rng_fwd if learned else None, learned=learned,
                                   monotone=cfg["forward.monotone_mask"])
    else:
        fwd = ForwardProcess(K, D, T, prior, spec=spec if learned else None,
                             rng=rng_fwd if learned else None, learned=learned)
    rev = ReverseModel(K, D, T, spec, prior.vector(K), rng_rev)
    return fwd, rev


def collect_arrays(fwd, rev, opt, rngs: dict, baseline: float) -> dict:
    arrays = {}
    for i, p in enumerate(fwd.params()):
        arrays[f"phi.{i}"] = p.value
    for i, p in enumerate(rev.params()):
        arrays[f"theta.{i}"] = p.value
    arrays.update(opt.state_arrays())
    for name, gen in rngs.items():
        arrays[f"rng.{name}"] = rng_state_array(gen)
    arrays["baseline"] = np.array([baseline])
    return arrays


def restore_arrays(arrays: dict, fwd, rev, opt=None, rngs: dict | None = None) -> float:
    for i, p in enumerate(fwd.params()):
        p.value = arrays[f"phi.{i}"].reshape(p.value.shape).copy()
    for i, p in enumerate(rev.params()):
        p.value = arrays[f"theta.{i}"].reshape(p.value.shape).copy()
    if opt is not None and "opt.t" in arrays:
        opt.load_state_arrays(arrays)
    if rngs is not None:
        for name in list(rngs):
            key = f"rng.{name}"
            if key in arrays:
                rngs[name] = rng_from_state_array(arrays[key])
    return float(arrays.get("baseline", np.zeros(1))[0])


# ---------------------------------------------------------------------------
# metrics stream

class MetricsWriter:
    """Buffered CSV stream rewritten atomically at every append."""

    def __init__(self, path):
        self.path = path
        self.rows: list[dict] = []

    def append(self, **fields):
        self.rows.append(fields)
        self.flush()

    def format(self) -> str:
        lines = [",".join(METRIC_FIELDS)]
        for row in self.rows:
            vals = []
            for k in METRIC_FIELDS:
                v = row.get(k)
                if v is None:
                    vals.append("")
                elif isinstance(v, float):
                    vals.append(f"{v:.10g}")
                else:
                    vals.append(str(v))
            lines.append(",".join(vals))
        return "\n".join(lines) + "\n"

    def flush(self):
        if self.path is not None:
            write_text_atomic(self.path, self.format())


# ---------------------------------------------------------------------------
# evaluation

def sample_tv(rev: ReverseModel, law: EnumeratedLaw, n: int,
              rng: np.random.Generator) -> float:
    """Total variation between the sampler's histogram and the exact law."""
    xs = rev.sample(n, rng)
    idx = np.ravel_multi_index(tuple(xs.T), (rev.K,) * rev.D)
    hist = np.bincount(idx, minlength=law.probs.shape[0]) / n
    return 0.5 * float(np.abs(hist - law.probs).sum())


def mean_factorization_gap(fwd, dataset, n_z: int, rng: np.random.Generator,
                           cap: int = 10000) -> float:
    """Average induced-target factorization gap at t=1 over sampled z_1."""
    law = dataset.law()
    xs = dataset.sample(n_z, rng)
    z1 = fwd.sample_zt(xs, np.ones(n_z, dtype=int), rng)
    gaps = [factorization_gap(induced_target(law, fwd, 0, 1, z1[i], cap=cap))
            for i in range(n_z)]
    return float(np.mean(gaps))


def reverse_entropy_per_step(rev: ReverseModel, n: int, rng: np.random.Generator):
    """Mean per-coordinate entropy of the reverse simplexes along a rollout."""
    from .catdist import entropy_rows
    z = rev.sample_prior(n, rng)
    ents = []
    for t in range(rev.T, 0, -1):
        probs = rev.dist_np(z, t)
        ents.append(float(entropy_rows(probs).mean()))
        from .catdist import sample_cat_batch
        z = sample_cat_batch(probs, rng)
    return ents


def evaluate_models(fwd, rev, dataset, cfg: RunConfig, seed_tag: int,
                    tv_samples: int = 100000, exact_z: bool | None = None,
                    fgap_z: int = 16, cap: int = 10000) -> dict:
    """Full metrics record; entries are None when not computable."""
    seed = cfg["train.seed"]
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 5, seed_tag])))
    n_eval = cfg["train.eval_points"]
    xs = dataset.sample(n_eval, rng)
    bound = full_bound(fwd, rev, xs, rng=rng, n_mc=cfg["train.eval_mc"],
                       cap=cap, exact_z=exact_z)

    metrics = {
        "bound": bound.total,
        "bound_nats_per_dim": bound.total / dataset.D,
        "l_rec": bound.l_rec,
        "l_prior": bound.l_prior,
        "exact_nll": None,
        "bound_minus_nll": None,
        "tv": None,
        "validity": None,
        "factorization_gap": None,
        "reverse_entropy_per_step": reverse_entropy_per_step(rev, 256, rng),
    }
    enumerable = rev.K ** rev.D <= cap
    if enumerable:
        law = dataset.law() if hasattr(dataset, "law") else None
        if law is not None:
            metrics["exact_nll"] = exact_model_nll(
                rev, law.states, cap=cap, weights=law.probs)
            if tv_samples > 0:
                metrics["tv"] = sample_tv(rev, law, tv_samples, rng)
        else:
            metrics["exact_nll"] = exact_model_nll(rev, dataset.sample(4096, rng), cap=cap)
        if fwd.kind == "general" and (exact_z is None or exact_z):
            # like-for-like audit: exact bound and exact NLL on the same points
            exact_bound = full_bound(fwd, rev, xs, cap=cap, exact_z=True)
            metrics["bound_minus_nll"] = (exact_bound.total
                                          - exact_model_nll(rev, xs, cap=cap))
        if law is not None and fwd.kind == "general" and fgap_z > 0:
            metrics["factorization_gap"] = mean_factorization_gap(
                fwd, dataset, fgap_z, rng, cap=cap)
    if isinstance(dataset, RandomWalk):
        samples = rev.sample(10000, rng)
        metrics["validity"] = float(dataset.is_valid(samples).mean())
    return metrics


# ---------------------------------------------------------------------------
# training loop

def make_rngs(seed: int) -> dict:
    return {
        "data": np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0]))),
        "zt": np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 1]))),
        "gumbel": np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 2]))),
    }


def train(cfg: RunConfig, out_dir=None, progress_every: int = 0):
    """Run the two-phase loop; writes metrics.csv and checkpoints.

    Returns a summary dict with the final checkpoint path and last metrics.
    """
    out_dir = out_dir or cfg["train.out"]
    os.makedirs(out_dir, exist_ok=True)
    dataset = build_dataset(cfg, workdir=out_dir)
    fwd, rev = build_models(cfg, dataset)
    params = fwd.params() + rev.params()
    opt = nd.AdamW(params, lr=cfg["train.lr"], beta1=cfg["train.beta1"],
                   beta2=cfg["train.beta2"], eps=cfg["train.eps"],
                   weight_decay=cfg["train.weight_decay"])
    rngs = make_rngs(cfg["train.seed"])
    tau_sched = TauSchedule(cfg["train.tau_start"], cfg["train.tau_end"],
                            cfg.tau_decay_steps)

    warmup = cfg["train.warmup_steps"]
    total = warmup + cfg["train.reinforce_steps"]
    batch = cfg["train.batch"]
    T = cfg["model.T"]
    eval_every = cfg["train.eval_every"]
    ckpt_every = cfg["train.ckpt_every"]
    baseline = 0.0
    baseline_ready = False
    bad_streak = 0
    metrics = MetricsWriter(os.path.join(out_dir, "metrics.csv"))

    def eval_row(step, phase, tau, loss_val, final=False):
        # fixed eval seed: same eval set and MC noise at every cadence point
        m = evaluate_models(fwd, rev, dataset, cfg, seed_tag=0,
                            tv_samples=cfg["train.final_tv_samples"] if final else 0,
                            exact_z=False, fgap_z=0)
        metrics.append(step=step, phase=phase, tau=tau, loss=loss_val,
                       bound=m["bound"], exact_nll=m["exact_nll"], tv=m["tv"])
        return m

    def save(step, name):
        arrays = collect_arrays(fwd, rev, opt, rngs, baseline)
        save_checkpoint(os.path.join(out_dir, name), step, arrays)

    last_loss = None
    for step in range(total):
        phase = "relaxed" if step < warmup else "reinforce"
        tau = tau_sched.value(step) if phase == "relaxed" else None
        if step % eval_every == 0:
            eval_row(step, phase, tau, last_loss)
        if ckpt_every and step and step % ckpt_every == 0:
            save(step, f"ckpt-{step}.bin")
        if step == warmup and warmup > 0:
            save(step, f"ckpt-{step}.bin")
            if cfg["train.reinforce_lr"] > 0:
                opt.lr = cfg["train.reinforce_lr"]

        x = dataset.sample(batch, rngs["data"])
        t = rngs["zt"].integers(1, T + 1, size=batch)
        if phase == "relaxed":
            loss = diff_loss_relaxed(fwd, rev, x, t, tau, rngs["gumbel"])
            l_values = None
        else:
            loss, l_values = diff_loss_reinforce(
                fwd, rev, x, t, rngs["zt"],
                baseline=baseline if (cfg["train.baseline"] and baseline_ready) else 0.0)

        loss_val = float(loss.value)
        if not np.isfinite(loss_val):
            bad_streak += 1
            log.warning("step %d: non-finite loss, skipping", step)
            if bad_streak >= MAX_BAD_STEPS:
                raise TrainingAborted(
                    f"{MAX_BAD_STEPS} consecutive non-finite losses at step {step}")
            continue

        opt.zero_grad()
        loss.backward()
        clip_now = phase == "reinforce" or cfg["train.clip_warmup"]
        if clip_now and cfg["train.clip"] > 0:
            nd.clip_grads_(params, cfg["train.clip"])
        if not np.isfinite(nd.global_grad_norm(params)):
            bad_streak += 1
            log.warning("step %d: non-finite gradients, skipping", step)
            if bad_streak >= MAX_BAD_STEPS:
                raise TrainingAborted(
                    f"{MAX_BAD_STEPS} consecutive non-finite gradients at step {step}")
            continue
        bad_streak = 0
        opt.step()
        last_loss = loss_val

        if l_values is not None:
            mean_l = float(np.mean(l_values))
            if not baseline_ready:
                baseline, baseline_ready = mean_l, True
            else:
                decay = cfg["train.baseline_decay"]
                baseline = decay * baseline + (1.0 - decay) * mean_l
        if progress_every and (step + 1) % progress_every == 0:
            log.info("step %d/%d phase=%s loss=%.4f", step + 1, total, phase, loss_val)

    final_metrics = eval_row(total, "reinforce" if total > warmup else "relaxed",
                             None, last_loss, final=True)
    save(total, "final.bin")
    return {
        "out_dir": out_dir,
        "final_checkpoint": os.path.join(out_dir, "final.bin"),
        "metrics_csv": metrics.path,
        "steps": total,
        "final": final_metrics,
    }

"""Flat key=value run configuration with typed keys and strict validation."""

from __future__ import annotations

import copy

_FLOATS = "floats"

# key -> (type, default). Types: int, float, bool, str, or "floats"
# (comma-separated float list).
SCHEMA = {
    "data.kind": (str, "gmm"),  # gmm | walk | digits | idx
    "data.grid": (int, 50),
    "data.mu1": (_FLOATS, [15.0, 15.0]),
    "data.mu2": (_FLOATS, [35.0, 35.0]),
    "data.weight": (float, 0.5),
    "data.sigma": (float, 1.0),
    "data.length": (int, 8),
    "data.images": (str, ""),
    "data.labels": (str, ""),
    "data.threshold": (float, 0.5),
    "data.side": (int, 14),
    "model.T": (int, 2),
    "prior.kind": (str, "uniform"),  # uniform | mask
    "forward.learned": (bool, True),
    "forward.masked": (bool, False),
    "forward.monotone_mask": (bool, False),
    "net.width": (int, 256),
    "net.depth": (int, 3),
    "net.time_dim": (int, 16),
    "train.warmup_steps": (int, 10000),
    "train.reinforce_steps": (int, 10000),
    "train.tau_decay_steps": (int, 0),  # 0 -> same as warmup_steps
    "train.tau_start": (float, 1.0),
    "train.tau_end": (float, 1e-3),
    "train.batch": (int, 256),
    "train.lr": (float, 2e-4),
    "train.reinforce_lr": (float, 0.0),  # 0 -> same as train.lr
    "train.beta1": (float, 0.9),
    "train.beta2": (float, 0.999),
    "train.eps": (float, 1e-8),
    "train.weight_decay": (float, 0.0),
    "train.clip": (float, 10.0),
    "train.clip_warmup": (bool, False),
    "train.baseline": (bool, True),
    "train.baseline_decay": (float, 0.99),
    "train.seed": (int, 0),
    "train.eval_every": (int, 500),
    "train.eval_points": (int, 256),
    "train.eval_mc": (int, 64),
    "train.final_tv_samples": (int, 10000),
    "train.ckpt_every": (int, 0),  # 0 -> phase boundaries and final only
    "train.out": (str, "run"),
}


class ConfigError(ValueError):
    pass


def _parse_value(key: str, raw: str):
    typ = SCHEMA[key][0]
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if typ is _FLOATS:
            return [float(v) for v in raw.split(",") if v.strip() != ""]
        return typ(raw)
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {raw!r}") from e


class RunConfig:
    """All hyperparameters of one run, addressable by flat dotted keys."""

    def __init__(self, values: dict | None = None):
        self._values = {k: copy.deepcopy(d) for k, (_, d) in SCHEMA.items()}
        for k, v in (values or {}).items():
            if k not in SCHEMA:
                raise ConfigError(f"unknown config key: {k}")
            self._values[k] = v

    def __getitem__(self, key: str):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key: {key}")
        return self._values[key]

    def set(self, key: str, raw: str):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key: {key}")
        self._values[key] = _parse_value(key, raw)

    def items(self):
        return self._values.items()

    @property
    def tau_decay_steps(self) -> int:
        n = self["train.tau_decay_steps"]
        return n if n > 0 else self["train.warmup_steps"]

    @classmethod
    def from_file(cls, path, overrides=()) -> "RunConfig":
        cfg = cls()
        with open(path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
                key, raw = line.split("=", 1)
                key = key.strip()
                if key not in SCHEMA:
                    raise ConfigError(f"{path}:{lineno}: unknown config key: {key}")
                cfg.set(key, raw)
        cfg.apply_overrides(overrides)
        return cfg

    def apply_overrides(self, overrides):
        for ov in overrides:
            if "=" not in ov:
                raise ConfigError(f"override must be key=value, got {ov!r}")
            key, raw = ov.split("=", 1)
            self.set(key.strip(), raw)

    def to_text(self) -> str:
        lines = []
        for k, v in self._values.items():
            if SCHEMA[k][0] is _FLOATS:
                v = ",".join(str(x) for x in v)
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

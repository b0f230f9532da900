"""Readers for the training-run artifact formats.

Only the documented file interfaces are consumed here: the metrics CSV
(header step,phase,tau,loss,bound,exact_nll,tv with empty fields allowed),
the samples CSV (header x1..xD, integer categories), and binary P5 PGM.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

METRIC_FIELDS = ("step", "phase", "tau", "loss", "bound", "exact_nll", "tv")


class ArtifactError(ValueError):
    """Malformed input artifact; message names the offending file/line."""


@dataclass
class MetricsTable:
    steps: np.ndarray
    phases: list
    columns: dict  # name -> float array with NaN for empty fields


def read_metrics(path) -> MetricsTable:
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln.rstrip("\n") for ln in f]
    if not lines or lines[0].split(",") != list(METRIC_FIELDS):
        raise ArtifactError(f"{path}:1: expected metrics header "
                            f"{','.join(METRIC_FIELDS)!r}")
    steps, phases = [], []
    cols = {k: [] for k in METRIC_FIELDS[2:]}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != len(METRIC_FIELDS):
            raise ArtifactError(f"{path}:{lineno}: expected "
                                f"{len(METRIC_FIELDS)} fields, got {len(parts)}")
        try:
            steps.append(int(parts[0]))
        except ValueError:
            raise ArtifactError(f"{path}:{lineno}: bad step {parts[0]!r}") from None
        phases.append(parts[1])
        for name, raw in zip(METRIC_FIELDS[2:], parts[2:]):
            if raw == "":
                cols[name].append(np.nan)
            else:
                try:
                    cols[name].append(float(raw))
                except ValueError:
                    raise ArtifactError(
                        f"{path}:{lineno}: bad {name} value {raw!r}") from None
    return MetricsTable(steps=np.array(steps, dtype=int), phases=phases,
                        columns={k: np.array(v) for k, v in cols.items()})


def read_samples(path) -> np.ndarray:
    """Samples CSV -> (N, D) int array; N may be zero."""
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln.rstrip("\n") for ln in f]
    if not lines:
        raise ArtifactError(f"{path}:1: empty file, expected an x1..xD header")
    header = lines[0].split(",")
    if header != [f"x{i + 1}" for i in range(len(header))]:
        raise ArtifactError(f"{path}:1: expected header x1..xD, got {lines[0]!r}")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != len(header):
            raise ArtifactError(f"{path}:{lineno}: expected {len(header)} "
                                f"columns, got {len(parts)}")
        try:
            rows.append([int(v) for v in parts])
        except ValueError:
            raise ArtifactError(f"{path}:{lineno}: non-integer category") from None
    if not rows:
        return np.zeros((0, len(header)), dtype=int)
    return np.array(rows, dtype=int)


_PGM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def read_pgm(path) -> np.ndarray:
    """Binary P5 grayscale image -> (H, W) uint8 array."""
    with open(path, "rb") as f:
        data = f.read()
    pos = 0
    tokens = []
    for _ in range(4):
        m = _PGM_TOKEN.match(data, pos)
        if not m:
            raise ArtifactError(f"{path}: truncated PGM header at byte {pos}")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise ArtifactError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError:
        raise ArtifactError(f"{path}: bad PGM dimensions") from None
    if maxval != 255:
        raise ArtifactError(f"{path}: unsupported maxval {maxval}")
    payload = data[pos + 1:pos + 1 + w * h]
    if len(payload) != w * h:
        raise ArtifactError(f"{path}: truncated pixel payload at byte {pos + 1}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w)

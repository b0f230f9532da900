"""Round-trip against real run artifacts produced by the trainer CLI.

The trainer is driven as an external command; only its documented file
outputs are consumed.
"""

import subprocess
import sys

import pytest
from matplotlib.image import imread

from fldd_plots.cli import main
from fldd_plots.render import render_trajectory_strip

TRAIN_CFG = """
data.kind=gmm
data.grid=6
data.mu1=1,1
data.mu2=4,4
data.sigma=0.7
model.T=2
net.width=16
net.depth=2
net.time_dim=4
train.warmup_steps=30
train.reinforce_steps=10
train.batch=32
train.lr=3e-3
train.eval_every=20
train.eval_points=32
train.eval_mc=4
train.final_tv_samples=1000
"""

DIGITS_CFG = """
data.kind=digits
data.side=8
model.T=4
prior.kind=mask
forward.masked=true
net.width=16
net.depth=2
net.time_dim=4
train.warmup_steps=10
train.reinforce_steps=0
train.batch=8
train.eval_every=10
train.eval_points=8
train.eval_mc=2
train.final_tv_samples=0
"""


def run_cli(*args):
    proc = subprocess.run([sys.executable, "-m", "fldd.cli", *args],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return proc


@pytest.fixture(scope="module")
def artifacts(tmp_path_factory):
    pytest.importorskip("fldd")
    root = tmp_path_factory.mktemp("roundtrip")
    cfg = root / "gmm.cfg"
    cfg.write_text(TRAIN_CFG)
    run = root / "run"
    run_cli("train", "--config", str(cfg), "--out", str(run))
    samples = root / "samples"
    run_cli("sample", "--ckpt", str(run / "final.bin"), "--config", str(cfg),
            "--n", "2000", "--out", str(samples), "--trajectory")

    dcfg = root / "digits.cfg"
    dcfg.write_text(DIGITS_CFG)
    drun = root / "drun"
    run_cli("train", "--config", str(dcfg), "--out", str(drun))
    traj = root / "traj"
    run_cli("export-trajectories", "--ckpt", str(drun / "final.bin"),
            "--config", str(dcfg), "--n", "2", "--out", str(traj))
    return root, run, samples, traj


def test_curves_png_from_real_metrics(artifacts, tmp_path):
    root, run, _, _ = artifacts
    out = tmp_path / "curves.png"
    assert main(["curves", "--metrics", str(run / "metrics.csv"),
                 "--out", str(out)]) == 0
    assert imread(out).shape[0] > 0


def test_panels_png_from_real_samples(artifacts, tmp_path):
    root, _, samples, _ = artifacts
    out = tmp_path / "panels.png"
    csvs = [str(samples / f"samples-t{t}.csv") for t in (2, 1, 0)]
    assert main(["gmm-panels", "--samples", *csvs, "--out", str(out),
                 "--grid", "6"]) == 0
    assert imread(out).shape[0] > 0


def test_trajectory_strip_has_T_plus_one_tiles(artifacts, tmp_path):
    _, _, _, traj = artifacts
    out = tmp_path / "strip.png"
    count = render_trajectory_strip(traj, out, sample=0)
    assert count == 4 + 1  # trained with T=4
    assert out.exists()

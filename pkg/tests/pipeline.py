"""Shared helper that drives the command-line pipeline in a subprocess."""

import os
import subprocess
import sys
from pathlib import Path

TRAIN_CONFIG = "n_trees = 40\nmax_depth = 3\nlearning_rate = 0.15\n"


def crowdlend(*args, env=None, cwd=None):
    full_env = {**os.environ, **(env or {})}
    return subprocess.run([sys.executable, "-m", "crowdlend.cli", *map(str, args)],
                          capture_output=True, text=True, env=full_env, cwd=cwd)


def ok(*args, **kw):
    res = crowdlend(*args, **kw)
    assert res.returncode == 0, res.stderr
    return res


def run_pipeline(root: Path, seed: int = 5, n: int = 4000, debias_runs: int = 2) -> Path:
    """synth -> train -> evaluate -> compare -> audit -> debias under ``root``."""
    root = Path(root)
    data = root / "data"
    cfg = root / "run.cfg"
    cfg.parent.mkdir(parents=True, exist_ok=True)
    cfg.write_text(TRAIN_CONFIG + f"debias_runs = {debias_runs}\nrandom_reps = 20\n")
    ok("synth", "--n", n, "--group-strength", 0.5, "--seed", seed, "--out-dir", data)
    common = ["--input", data / "loans.csv", "--schema", data / "schema.txt", "--seed", seed,
              "--config", cfg]
    ok("train", *common, "--out-dir", root / "train")
    pred = ["--predictions", root / "train" / "predictions.csv"]
    ok("evaluate", *common, *pred, "--rates", data / "rates.csv", "--out-dir", root / "evaluate")
    ok("compare", *common, *pred, "--rates", data / "rates.csv", "--out-dir", root / "compare")
    groups = ["--group-map", data / "group_map.csv"]
    ok("audit", *common, *pred, *groups, "--out-dir", root / "audit")
    ok("debias", *common, *groups, "--out-dir", root / "debias")
    return root

# tests/test_build_init_cache_script.py
from __future__ import annotations

import runpy
import sys
from pathlib import Path

from src import artifacts, lab
from src.config import PATHS, load_experiment_config


def test_build_init_cache_script_writes_a_reusable_field(tmp_path: Path):
    """
    Light end-to-end test of scripts/build_init_cache.py:

    - run the module as a script on the toy config with 3 iterations;
    - check the snapshot and the stage-1 curve next to it;
    - feed the snapshot back through optim.init_cache and check that the
      run skips stage 1.
    """
    toy = PATHS.configs_dir / "toy.yaml"
    out_path = tmp_path / "init_cache.bin"

    argv_backup = sys.argv[:]
    try:
        sys.argv = ["scripts.build_init_cache", "--config", str(toy), "--out", str(out_path), "--iters", "3"]
        runpy.run_module("scripts.build_init_cache", run_name="__main__")
    finally:
        sys.argv = argv_backup

    assert out_path.exists(), "Field snapshot was not created"
    density, color, extent = artifacts.decode_field(out_path.read_bytes())
    assert density.shape == (16, 16, 16)
    assert extent == 1.25

    header, rows = artifacts.read_csv(out_path.with_suffix(".stage1.csv"))
    assert header[0] == "iter"
    assert len(rows) == 3

    cfg = load_experiment_config(toy).with_updates(optim={"init_cache": str(out_path), "stage2_iters": 2})
    report = lab.run(cfg)
    assert report.stage1 is None
    assert len(report.stage2) == 2

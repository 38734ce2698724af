"""Smoke test for the dpsmc_py extension.

Builds the extension with cargo, loads it from a temporary directory and
exercises each binding once.

    python3 python/smoke_test.py
"""

import importlib.util
import json
import math
import pathlib
import shutil
import subprocess
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load_extension():
    subprocess.run(
        ["cargo", "build", "-p", "dpsmc-python", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    suffix = {"darwin": "dylib", "win32": "dll"}.get(sys.platform, "so")
    built = ROOT / "target" / "debug" / f"libdpsmc_py.{suffix}"
    if sys.platform == "win32":
        built = ROOT / "target" / "debug" / "dpsmc_py.dll"
    target = pathlib.Path(tempfile.mkdtemp()) / ("dpsmc_py.pyd" if sys.platform == "win32" else "dpsmc_py.so")
    shutil.copy(built, target)
    spec = importlib.util.spec_from_file_location("dpsmc_py", target)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def main():
    m = load_extension()
    print("dpsmc_py", m.__version__)

    c = m.solve_sensitivity(1, 1.0, 0.05)
    assert abs(c - 1.959964) < 1e-4, c

    assert m.effective_fraction_swor(100, 50, 10) == 0.2
    rows = m.amplification_curve(100, 10, [0.0], [0.0, 0.5])
    assert [r[3] for r in rows] == [0.1, 0.1]

    plan = m.plan_noise(2.0, 10, 2, "collusion_robust")
    assert math.isclose(plan["sigma_i"] ** 2, 4.0 / 7.0)

    inputs = [[1.0, -2.5], [0.25, 4.0], [3.0, 0.0]]
    for protocol in ("pairwise", "dca"):
        total = m.secure_sum(inputs, protocol, seed=3)
        assert all(abs(a - b) < 1e-6 for a, b in zip(total, [4.25, 1.5])), total

    eps = m.analytic_gaussian_epsilon(1.0, 1e-5)
    assert 0 < eps < 10

    config = json.loads((ROOT / "configs" / "dpsmc_pairwise.json").read_text())
    config["train"]["steps"] = 5
    result = json.loads(m.run_experiment(json.dumps(config)))
    assert result["status"] == "completed"
    assert result["report"]["steps_completed"] == 5

    try:
        m.solve_sensitivity(0)
    except ValueError:
        pass
    else:
        raise AssertionError("k = 0 accepted")

    print("ok")


if __name__ == "__main__":
    main()

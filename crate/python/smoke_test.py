"""Smoke test for the wnvi_py extension.

    cargo build --release -p wnvi-py --features extension-module
    python3 python/smoke_test.py

The script copies target/release/libwnvi_py.so next to itself as
wnvi_py.so if the module is not importable yet.
"""

import math
import shutil
import sys
import tempfile
from pathlib import Path

HERE = Path(__file__).resolve().parent
ROOT = HERE.parent

try:
    import wnvi_py
except ImportError:
    lib = ROOT / "target" / "release" / "libwnvi_py.so"
    if not lib.exists():
        sys.exit(f"build the extension first: {lib} not found")
    shutil.copy(lib, HERE / "wnvi_py.so")
    sys.path.insert(0, str(HERE))
    import wnvi_py


def close(a, b, tol=1e-9):
    return all(math.isclose(x, y, rel_tol=tol, abs_tol=tol) for x, y in zip(a, b))


def main():
    g = [[1e-3, 2e-4], [-5e-4, 3e-4]]
    assert wnvi_py.transiso_stress([[0, 0], [0, 0]], 1.0, 3.0, 0.3, 1.154) == (0.0, 0.0, 0.0)
    lin = wnvi_py.linear_stress(g, 1.0, 0.3)
    lam, mu = 0.3 / (1.3 * 0.4), 1.0 / 2.6
    tr = g[0][0] + g[1][1]
    want = (lam * tr + 2 * mu * g[0][0], mu * (g[0][1] + g[1][0]), lam * tr + 2 * mu * g[1][1])
    assert close(lin, want), (lin, want)
    iso = wnvi_py.transiso_stress(g, 1.0, 1.0, 0.3, 1.0 / 2.6)
    assert close(iso, lin, 1e-5), (iso, lin)

    u = wnvi_py.solve_linear(5, [1.0] * 32, 0.3)
    assert len(u) == 50
    # clamped left edge, compressive load on the right
    assert all(u[2 * k] == 0.0 for k in range(0, 25, 5))
    assert u[2 * 24] < 0.0

    with tempfile.TemporaryDirectory() as tmp:
        cfg = Path(tmp) / "tiny.toml"
        cfg.write_text(
            "[mesh]\ntruth_n = 9\ninversion_n = 5\nobs_n = 3\n\n"
            "[inference]\nmean_net_hidden = [6]\nrank = 2\nk = 8\nl = 2\nmax_iters = 20\nwarmup = 5\ntrace_every = 5\n\n"
            "[inference.displacement_net]\nd_z = 3\nhidden_layers = 1\nwidth = 5\n\n"
            "[report]\nsamples = 20\npixels_per_cell = 2\n\n"
            "[mc_study]\ncounts = [10, 100]\nreference_points = 500\nweight_functions = 2\nrealizations = 2\n"
        )
        out = Path(tmp) / "run"
        wnvi_py.generate(str(cfg), str(out), 3)
        obs = wnvi_py.read_field(str(out / "observations.field"))
        assert obs["kind"] == "point" and obs["components"] == 2 and len(obs["values"]) == 9
        assert obs["seed"] == 3
        assert wnvi_py.infer(str(cfg), str(out), 3) == 20
        summary = wnvi_py.report(str(cfg), str(out), 3)
        assert summary["iterations"] == 20
        assert summary["config_hash"] == obs["config"]
        ln_e = wnvi_py.read_field(str(out / "report" / "ln_e.field"))
        assert len(ln_e["values"]) == 32 and ln_e["components"] == 5
        rows = wnvi_py.mc_study(str(cfg), 3)
        assert [p for p, _ in rows] == [10, 100]

    try:
        wnvi_py.solve_linear(5, [1.0] * 3, 0.3)
    except ValueError:
        pass
    else:
        raise AssertionError("bad modulus count accepted")
    try:
        wnvi_py.generate("/nonexistent/config.toml")
    except (OSError, ValueError):
        pass
    else:
        raise AssertionError("missing config accepted")
    print("smoke test ok")


if __name__ == "__main__":
    main()

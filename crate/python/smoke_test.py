"""Smoke test for the `roa` Python extension.

Imports an installed `roa` module if there is one, otherwise builds the
extension with cargo and loads it from a temporary directory.
"""

import importlib
import json
import math
import pathlib
import shutil
import subprocess
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parents[1]


def load_roa():
    try:
        return importlib.import_module("roa")
    except ImportError:
        pass
    subprocess.run(
        ["cargo", "build", "--release", "-p", "roa-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    libs = [p for p in (ROOT / "target" / "release").glob("libroa.*") if p.suffix in (".so", ".dylib")]
    if not libs:
        sys.exit("built library not found")
    tmp = pathlib.Path(tempfile.mkdtemp())
    shutil.copy(libs[0], tmp / "roa.so")
    sys.path.insert(0, str(tmp))
    return importlib.import_module("roa")


def main():
    roa = load_roa()

    p = roa.Polynomial(2, [([2, 0], 1.0), ([0, 2], 1.0)])
    assert p.dim == 2 and p.degree == 2
    assert p.eval([3.0, 4.0]) == 25.0
    q = roa.affine_shift_expand([[1.0, 0.0], [0.0, 1.0]], [-0.8, 0.0])
    assert abs(q.coeff([1, 0]) - 1.6) < 1e-12 and abs(q.coeff([0, 0]) - 0.64) < 1e-12
    assert (q - p).degree == 1
    print("shifted shape:", q)

    v0 = roa.benchmark_v0("vdp")
    assert abs(v0.coeff([2, 0]) - 2.7) < 0.05
    f = roa.benchmark_field("vdp")
    vdot = v0.lie_derivative(f)
    assert vdot.eval([0.1, 0.1]) < 0.0

    assert roa.r_or(0.3, -0.2, 2.0) == 0.6
    assert roa.r_and(0.3, -0.2, 2.0) == -0.4

    cfg = {"system": "bistable", "algorithm": "a1", "seed": 3, "oracle": {"mc_samples": 20000}}
    res = roa.run(json.dumps(cfg))
    print(res)
    assert res.exit_code == 0
    assert all(ok for _, _, ok in res.sets)
    assert res.union_area > 0.0 and math.isfinite(res.union_stderr)
    assert "measure set=Omega_e" in res.report
    checks = roa.validate_certs(res.certs_json)
    assert checks and all(ok for _, ok in checks), checks

    try:
        roa.run(json.dumps({"system": "bistable", "algorithm": "a1", "colour": 1}))
    except ValueError as e:
        print("rejected config:", e)
    else:
        raise AssertionError("unknown key accepted")

    print("python smoke test passed")


if __name__ == "__main__":
    main()

"""Exercise the Python bindings end to end.

Uses an installed ``emvlab_py`` if present, otherwise builds the extension
with cargo and loads it from the target directory.
"""

import importlib.machinery
import importlib.util
import json
import pathlib
import subprocess
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load():
    try:
        import emvlab_py

        return emvlab_py
    except ImportError:
        pass
    subprocess.run(
        ["cargo", "build", "--release", "-p", "emvlab-py"], cwd=ROOT, check=True
    )
    suffix = {"darwin": "dylib", "win32": "dll"}.get(sys.platform, "so")
    prefix = "" if sys.platform == "win32" else "lib"
    lib = ROOT / "target" / "release" / f"{prefix}emvlab_py.{suffix}"
    loader = importlib.machinery.ExtensionFileLoader("emvlab_py", str(lib))
    spec = importlib.util.spec_from_file_location("emvlab_py", lib, loader=loader)
    module = importlib.util.module_from_spec(spec)
    loader.exec_module(module)
    return module


def main():
    em = load()

    net = em.grid_network(3, 3, link_m=200.0, lanes=2, ec_ratio=0.2)
    assert len(net["nodes"]) == 9 and len(net["links"]) == 24

    scenario = em.builtin_scenario("grid3x3-smoke")
    scenario["sim"]["repetitions"] = 2
    a = em.simulate(scenario)
    b = em.simulate(json.dumps(scenario))
    assert a == b and len(a) == 2
    assert all(r["t_emv_s"] is not None for r in a)
    print("simulate:", [round(r["t_emv_s"], 2) for r in a])

    matrix = {
        "scenarios": [scenario],
        "controllers": [{"policy": "fixed"}, {"policy": "maxpressure"}],
        "routers": [{"mode": "static"}],
        "repetitions": 2,
        "seed": 1,
    }
    res = em.run_matrix(matrix)
    assert len(res["rows"]) == 2
    print(res["table"], end="")

    with tempfile.TemporaryDirectory() as tmp:
        curve = em.train(
            {"scenario": scenario, "episodes": 2, "seed": 3}, out_dir=tmp
        )
        assert [r["episode"] for r in curve] == [0, 1]
        assert (pathlib.Path(tmp) / "policy.json").exists()

        acc = em.access_run(str(ROOT / "configs" / "access_toy"), out_dir=tmp)
        for kind, cov in acc["coverage"].items():
            assert all(x <= y for x, y in zip(cov, cov[1:])), kind
            assert cov[-1] == 1.0, kind
        print("coverage at 240 s:", {k: v[acc["taus"].index(240.0)] for k, v in acc["coverage"].items()})

    try:
        em.builtin_scenario("nope")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown builtin accepted")
    print("python smoke: ok")


if __name__ == "__main__":
    main()

"""Smoke test for the Python bindings.

Usage: python python/smoke_test.py [path/to/built/library]

Without an argument the installed `pyvolgibbs` package is imported. With
one, the shared library produced by `cargo build -p volgibbs-py` is loaded
directly.
"""

import importlib.machinery
import importlib.util
import json
import math
import sys
import tempfile
from pathlib import Path


def load(path=None):
    if path is None:
        import pyvolgibbs

        return pyvolgibbs
    loader = importlib.machinery.ExtensionFileLoader("pyvolgibbs", path)
    spec = importlib.util.spec_from_file_location("pyvolgibbs", path, loader=loader)
    module = importlib.util.module_from_spec(spec)
    loader.exec_module(module)
    return module


def main():
    vg = load(sys.argv[1] if len(sys.argv) > 1 else None)
    print("pyvolgibbs", vg.version())

    alpha, beta, nu, rho, f = 0.02, 0.5, 0.3, -0.2, 0.01
    atm = vg.sabr_normal_vol(alpha, beta, nu, rho, f, f, 1.0)
    assert 0.0 < atm < 0.05, atm

    # put-call parity: payer - receiver = annuity * (F - K)
    k = 0.012
    pay = vg.sabr_price(alpha, beta, nu, rho, f, k, 1.0, 2.0, kind="payer")
    rec = vg.sabr_price(alpha, beta, nu, rho, f, k, 1.0, 2.0, kind="receiver")
    annuity = sum(0.25 * math.exp(-0.01 * (1.0 + 0.25 * i)) for i in range(1, 9))
    assert abs(pay - rec - annuity * (f - k)) < 1e-12, (pay, rec)

    h = 1e-6
    up = vg.sabr_price(alpha, beta, nu, rho, f + h, k, 1.0, 2.0)
    dn = vg.sabr_price(alpha, beta, nu, rho, f - h, k, 1.0, 2.0)
    delta = vg.sabr_delta(alpha, beta, nu, rho, f, k, 1.0, 2.0)
    assert abs((up - dn) / (2 * h) - delta) < 1e-4 * annuity, delta

    offsets = [-0.02, -0.01, -0.005, 0.0, 0.005, 0.01, 0.02]
    strikes = [f + o for o in offsets]
    vols = [1e4 * vg.sabr_normal_vol(alpha, beta, nu, rho, f, s, 1.0) for s in strikes]
    vols[1] = None
    fit = vg.calibrate_smile(strikes, vols, f, 1.0, 2.0)
    assert abs(fit["alpha"] - alpha) < 1e-8 * alpha, fit
    assert abs(fit["nu"] - nu) < 1e-6 and abs(fit["rho"] - rho) < 1e-6, fit

    try:
        vg.sabr_normal_vol(-1.0, beta, nu, rho, f, f, 1.0)
    except ValueError as e:
        print("rejected bad alpha:", e)
    else:
        raise AssertionError("negative alpha accepted")

    cfg = json.loads(vg.default_config())
    cfg.update(n_train=30, n_holdout=1)
    cfg["train"]["epochs"] = 10
    cfg["gibbs"].update(chain_length=20, burn_in=5)
    cfg["hedge"].update(n_paths=2, steps_per_day=1, tiers=["week", "day"], reestimate_every_days=60)
    cfg["hedge"]["gibbs"].update(chain_length=5, burn_in=1)
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        config = tmp / "config.json"
        config.write_text(json.dumps(cfg))
        out = tmp / "run"
        for line in vg.synth(out, config=config, seed=3)["lines"]:
            print(line)
        for line in vg.train(out, config=config, seed=3)["lines"]:
            print(line)
        model = out / "model.vgv"
        cube = out / "holdout" / "cubes" / "cube_00000.csv"
        res = vg.impute(out, model, cube, mask_rate=0.7, config=config, seed=3)
        print("\n".join(res["lines"]))
        res = vg.calibrate(out, cube, forwards=out / "holdout" / "forwards" / "forwards_00000.csv", config=config)
        print("\n".join(res["lines"]))
        res = vg.hedge(out, model=model, config=config, seed=3)
        report = json.loads(res["report"])
        assert len(report["results"]) == 6, report
        print("\n".join(res["lines"]))
        res = vg.diagnose(out, model, config=config)
        print("\n".join(res["lines"]))
        try:
            vg.calibrate(out, tmp / "missing.csv", config=config)
        except OSError as e:
            print("missing cube reported:", e)
        else:
            raise AssertionError("missing cube accepted")
    print("smoke test passed")


if __name__ == "__main__":
    main()

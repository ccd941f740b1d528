"""Small hand-built panels shared by the unit tests."""

import numpy as np

from rtnm.panel import NEVER, PanelDataset


def make_panel(adoption, covariates=None, outcomes=None, t0=-1, t_max=3, names=None):
    adoption = np.asarray([NEVER if g is None else g for g in adoption], dtype=float)
    n, n_per = len(adoption), t_max - t0 + 1
    if covariates is None:
        covariates = np.random.default_rng(0).normal(size=(n, n_per, 1))
    covariates = np.asarray(covariates, dtype=float)
    if covariates.ndim == 2:
        covariates = covariates[:, :, None]
    names = names or tuple(f"x{k}" for k in range(covariates.shape[2]))
    return PanelDataset(
        unit_ids=tuple(f"u{i}" for i in range(n)),
        t0=t0, t_max=t_max, covariates=covariates, adoption=adoption,
        covariate_names=names, outcomes=outcomes,
    )


def run_pipeline(root, n_units=400, seed=7, boot=200):
    """simulate -> match -> estimate -> infer -> test -> report through the CLI.

    Returns the bytes of every file written, keyed by path relative to ``root``.
    """
    import json
    from pathlib import Path

    from rtnm.cli import main

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "dgp.json").write_text(json.dumps({"n_units": n_units, "effect": {"kind": "constant", "base": 1.0}}))
    sim = root / "sim"
    steps = [
        ["simulate", "--config", str(root / "dgp.json"), "--seed", str(seed), "--out", str(sim)],
        ["match", "--input", str(sim / "panel_r000.csv"), "--schema", str(sim / "schema.json"),
         "--seed", str(seed), "--balance", str(root / "balance.csv"), "--out", str(root / "design.json")],
        ["estimate", "--input", str(sim / "panel_r000.csv"), "--schema", str(sim / "schema.json"),
         "--design", str(root / "design.json"), "--csv", str(root / "att.csv"), "--out", str(root / "att.json")],
        ["infer", "--estimate", str(root / "att.json"), "--design", str(root / "design.json"),
         "--boot", str(boot), "--seed", str(seed), "--csv", str(root / "se.csv"), "--out", str(root / "sigma.json")],
        ["test", "--estimate", str(root / "att.json"), "--sigma", str(root / "sigma.json"), "--family", "standard",
         "--boot", str(boot), "--seed", str(seed), "--csv", str(root / "tests.csv"), "--out", str(root / "tests.json")],
        ["report", "--estimate", str(root / "att.json"), "--sigma", str(root / "sigma.json"),
         "--text", str(root / "report.txt"), "--out", str(root / "report.csv")],
    ]
    for argv in steps:
        code = main(argv)
        if code != 0:
            raise RuntimeError(f"{argv[0]} exited with {code}")
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}

"""On-disk formats: versioned JSON artifacts, estimate tables and run manifests.

JSON is written with sorted keys and ``\\n`` line endings so that identical
inputs give byte-identical files.  Artifacts carry a ``manifest`` block that
names the run (a hash of command, settings, input digests and versions) but no
wall-clock time; the sidecar manifest file holds the timestamp, taken from
``SOURCE_DATE_EPOCH`` when that is set.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import platform
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import pandas as pd

from .bootstrap import CovarianceEstimate
from .errors import SchemaError
from .estimate import AttVector

SCHEMA_VERSION = 1


def _default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _clean(obj):
    # JSON has no infinities; never-treated cohorts and unbounded ratios become strings/null upstream
    if isinstance(obj, float) and not math.isfinite(obj):
        return "inf" if obj > 0 else "-inf"
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2, default=_default, allow_nan=False) + "\n"


def write_json(obj, path: str | os.PathLike) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(obj))


def read_json(path: str | os.PathLike, kind: str | None = None) -> dict:
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    if kind is not None and d.get("kind") != kind:
        raise SchemaError(f"{path} is a {d.get('kind')!r} artifact, expected {kind!r}")
    version = d.get("schema_version")
    if version is not None and version > SCHEMA_VERSION:
        raise SchemaError(f"{path} uses schema version {version}; this build reads up to {SCHEMA_VERSION}")
    return d


def file_digest(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def versions() -> dict:
    import ortools
    import scipy

    from . import __version__

    return {
        "rtnm": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
        "ortools": ortools.__version__,
    }


def run_manifest(command: str, settings: dict, inputs: dict[str, str | os.PathLike]) -> dict:
    """Deterministic identity of a run: command, settings, input digests, versions."""
    digests = {role: file_digest(p) for role, p in sorted(inputs.items())}
    body = {"command": command, "settings": settings, "inputs": digests, "versions": versions()}
    run_id = hashlib.sha256(dumps(body).encode()).hexdigest()[:16]
    return {"run_id": run_id, **body}


def timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    moment = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
    return moment.strftime("%Y-%m-%dT%H:%M:%SZ")


def write_manifest(manifest: dict, outputs: list[str | os.PathLike], path: str | os.PathLike) -> None:
    record = dict(manifest)
    record["schema_version"] = SCHEMA_VERSION
    record["kind"] = "manifest"
    record["created"] = timestamp()
    record["outputs"] = {Path(p).name: file_digest(p) for p in outputs}
    write_json(record, path)


def manifest_path(out: str | os.PathLike) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".manifest.json") if out.suffix else out / "manifest.json"


def artifact(kind: str, payload: dict, manifest: dict) -> dict:
    return {"schema_version": SCHEMA_VERSION, "kind": kind, "manifest": manifest, **payload}


def estimates_frame(att: AttVector, sigma: CovarianceEstimate | None = None, z: float = 1.959963984540054) -> pd.DataFrame:
    """Columns ``g,t,estimate,se,ci_lo,ci_hi,n_strata_used`` (blank SE without a covariance)."""
    frame = pd.DataFrame({
        "g": [g for g, _ in att.index],
        "t": [t for _, t in att.index],
        "estimate": att.values,
    })
    if sigma is not None:
        se = sigma.se
        frame["se"] = se
        frame["ci_lo"] = att.values - z * se
        frame["ci_hi"] = att.values + z * se
    else:
        frame["se"] = np.nan
        frame["ci_lo"] = np.nan
        frame["ci_hi"] = np.nan
    used = att.n_strata_used if att.n_strata_used is not None else np.zeros(att.index.K, dtype=int)
    frame["n_strata_used"] = used
    return frame


def write_csv(frame: pd.DataFrame, path: str | os.PathLike) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n", float_format="%.10g", encoding="utf-8")


def report_grid(att: AttVector, sigma: CovarianceEstimate | None, alpha_z: float = 1.959963984540054) -> pd.DataFrame:
    """Cohorts as rows, periods as columns, ``estimate (se)`` cells.

    Estimates whose 95% normal interval excludes zero are wrapped in ``**``.
    """
    cohorts = att.index.cohorts()
    periods = sorted({t for _, t in att.index})
    grid = pd.DataFrame("", index=pd.Index(cohorts, name="g"), columns=[str(t) for t in periods])
    se = sigma.se if sigma is not None else None
    for k, (g, t) in enumerate(att.index):
        est = f"{att.values[k]:.3f}"
        if se is None:
            grid.loc[g, str(t)] = est
            continue
        if se[k] > 0 and abs(att.values[k]) / se[k] > alpha_z:
            est = f"**{est}**"
        grid.loc[g, str(t)] = f"{est} ({se[k]:.3f})"
    return grid


def grid_text(grid: pd.DataFrame) -> str:
    header = ["g"] + [f"t={c}" for c in grid.columns]
    rows = [[str(g)] + list(grid.loc[g]) for g in grid.index]
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    line = lambda cells: "  ".join(c.rjust(w) for c, w in zip(cells, widths)).rstrip()  # noqa: E731
    return "\n".join([line(header)] + [line(r) for r in rows]) + "\n"

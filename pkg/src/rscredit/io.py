"""Configuration ingestion and solution persistence.

Model config (JSON)::

    {
      "N": 2, "theta": 1.0, "T": 1.0, "d": 2,
      "regimes": {"Q": [[-1, 1], [1, -1]]}        # or {"family": "geometric", "n_max": 64}
      "r": [...], "mu": [[...]], "sigma": [[[...]]],
      "lambda": {"1": {"00": [0.2, 0.3], "01": [...], ...}, "2": {...}},
      "tolerances": {"row_sum": 1e-12, "pd_floor": 1e-10},
      "solver": {"M": 400, "levels": [4, 8, 16, 32], "tol_sup": 1e-6, "foc_tol": 1e-10,
                 "margin_floor": 1e-6, "seed": 0}
    }

``lambda`` maps a regime label to either a vector (the same intensities in
every default state) or a table keyed by default-state bitstrings; the
leftmost character is stock 1.  Countable families take their coefficient
rows from the arrays and repeat the last row for higher regimes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .dpe_solver import SolutionGrid, TimeGrid
from .model import (
    MAX_STOCKS, PD_FLOOR, ROW_SUM_TOL, CoefficientTable, FiniteModel, ModelError, ModelSpec, RegimeGenerator,
    bitstring, geometric_generator, popcount, validate_model,
)

FORMAT_VERSION = 1
FAMILIES = {"geometric": geometric_generator}


class ConfigError(ValueError):
    """Bad configuration; ``report`` carries validation issues when present."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class SolutionFormatError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    model_path: Optional[str] = None
    M: int = 400
    levels: tuple = (4, 8, 16, 32)
    tol_sup: float = 1e-6
    foc_tol: float = 1e-10
    margin_floor: float = 1e-6
    row_sum_tol: float = ROW_SUM_TOL
    pd_floor: float = PD_FLOOR
    out_dir: Optional[str] = None
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("tol_sup", "foc_tol", "margin_floor", "row_sum_tol", "pd_floor"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"tolerance {name} must be positive")
        if int(self.M) != self.M or self.M < 2:
            raise ConfigError(f"grid steps M must be an integer >= 2, got {self.M}")
        if any(b <= a for a, b in zip(self.levels, self.levels[1:])) or not self.levels:
            raise ConfigError(f"levels must be strictly increasing, got {list(self.levels)}")

    def grid(self, T: float) -> TimeGrid:
        return TimeGrid(T, int(self.M))


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------

def _read_json(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return data


def _need(data: dict, key: str, ctx: str = ""):
    if key not in data:
        raise ConfigError(f"missing key {ctx + key!r}")
    return data[key]


def _array(value, shape: tuple, key: str) -> np.ndarray:
    try:
        a = np.array(value, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"key {key!r}: expected a numeric array") from None
    if a.shape != shape:
        raise ConfigError(f"key {key!r}: expected shape {shape}, got {a.shape}")
    return a


def _lambda_table(raw, n_rows: int, N: int) -> np.ndarray:
    if not isinstance(raw, dict):
        raise ConfigError("key 'lambda' must map regime labels to intensity tables")
    lam = np.full((n_rows, 1 << N, N), np.nan)
    for a in range(n_rows):
        label = str(a + 1)
        if label not in raw:
            raise ConfigError(f"missing key 'lambda.{label}'")
        entry = raw[label]
        if isinstance(entry, list):
            lam[a] = _array(entry, (N,), f"lambda.{label}")
            continue
        if not isinstance(entry, dict):
            raise ConfigError(f"key 'lambda.{label}' must be a list or a bitstring table")
        for key, vec in entry.items():
            if len(key) != N or set(key) - {"0", "1"}:
                raise ConfigError(f"key 'lambda.{label}.{key}': default-state bitstring must have {N} characters of 0/1")
            mask = sum(1 << j for j, ch in enumerate(key) if ch == "1")
            lam[a, mask] = _array(vec, (N,), f"lambda.{label}.{key}")
        for mask in range(1 << N):
            if popcount(mask) < N and np.isnan(lam[a, mask]).any():
                raise ConfigError(f"missing key 'lambda.{label}.{bitstring(mask, N)}'")
    # intensities of defaulted stocks are never read
    for mask in range(1 << N):
        for j in range(N):
            if mask >> j & 1:
                lam[:, mask, j] = 0.0
    return lam


def parse_model(data: dict) -> ModelSpec:
    N = _need(data, "N")
    if not isinstance(N, int) or not 1 <= N <= MAX_STOCKS:
        raise ConfigError(f"key 'N' must be an integer in 1..{MAX_STOCKS}")
    theta = float(_need(data, "theta"))
    T = float(_need(data, "T"))
    d = int(data.get("d", N))
    reg = _need(data, "regimes")
    if not isinstance(reg, dict):
        raise ConfigError("key 'regimes' must be an object")
    r = np.atleast_1d(np.array(_need(data, "r"), dtype=float))
    K = r.shape[0]
    n_max = int(reg.get("n_max", 64))
    if "Q" in reg:
        Q = _array(reg["Q"], (K, K), "regimes.Q")
        gen = RegimeGenerator.finite(Q)
    elif "family" in reg:
        fam = reg["family"]
        if fam not in FAMILIES:
            raise ConfigError(f"key 'regimes.family': unknown family {fam!r} (known: {sorted(FAMILIES)})")
        gen = FAMILIES[fam]()
    else:
        raise ConfigError("key 'regimes' needs 'Q' or 'family'")
    mu = _array(_need(data, "mu"), (K, N), "mu")
    sigma = _array(_need(data, "sigma"), (K, N, d), "sigma")
    lam = _lambda_table(_need(data, "lambda"), K, N)
    try:
        return ModelSpec(N, theta, T, d, gen, CoefficientTable(r, mu, sigma, lam), n_max=n_max)
    except ModelError as exc:
        raise ConfigError(str(exc)) from None


def parse_run_config(data: dict, path=None) -> RunConfig:
    sv = data.get("solver", {})
    tl = data.get("tolerances", {})
    try:
        return RunConfig(
            model_path=None if path is None else str(path),
            M=int(sv.get("M", 400)),
            levels=tuple(int(v) for v in sv.get("levels", (4, 8, 16, 32))),
            tol_sup=float(sv.get("tol_sup", 1e-6)),
            foc_tol=float(sv.get("foc_tol", 1e-10)),
            margin_floor=float(sv.get("margin_floor", 1e-6)),
            row_sum_tol=float(tl.get("row_sum", ROW_SUM_TOL)),
            pd_floor=float(tl.get("pd_floor", PD_FLOOR)),
            seed=int(sv.get("seed", 0)),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"key 'solver': {exc}") from None


def load_config(path, validate: bool = True):
    """Parse and validate a model config; returns ``(RunConfig, ModelSpec)``."""
    data = _read_json(path)
    spec = parse_model(data)
    cfg = parse_run_config(data, path)
    if validate:
        report = validate_model(spec, row_tol=cfg.row_sum_tol, pd_floor=cfg.pd_floor)
        if not report.ok:
            first = report.issues[0].message
            raise ConfigError(f"invalid model: {first}" + (f" (+{len(report.issues) - 1} more)" if len(report.issues) > 1 else ""),
                              report=report)
    return cfg, spec


# ---------------------------------------------------------------------------
# finite models <-> JSON
# ---------------------------------------------------------------------------

def finite_model_to_dict(model: FiniteModel) -> dict:
    c = model.coef
    return {
        "theta": model.theta, "T": model.T, "labels": list(model.labels),
        "Q": model.Q.tolist(), "r": c.r.tolist(), "mu": c.mu.tolist(),
        "sigma": c.sigma.tolist(), "lambda": c.lam.tolist(),
    }


def finite_model_from_dict(d: dict) -> FiniteModel:
    coef = CoefficientTable(np.array(d["r"]), np.array(d["mu"]), np.array(d["sigma"]), np.array(d["lambda"]))
    return FiniteModel(float(d["theta"]), float(d["T"]), np.array(d["Q"]), coef, tuple(d["labels"]))


# ---------------------------------------------------------------------------
# solution persistence
# ---------------------------------------------------------------------------

def _layer_file(mask: int, N: int) -> str:
    return f"phi_{bitstring(mask, N)}.csv"


def _fmt(v: float) -> str:
    return repr(float(v))


def save_solution(sol: SolutionGrid, out_dir) -> Path:
    """Write one CSV per default state plus ``manifest.json`` and ``model.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    N = sol.N
    labels = sol.model.labels
    nodes = sol.grid.nodes
    files = {}
    for mask in sorted(sol.tables):
        z = bitstring(mask, N)
        name = _layer_file(mask, N)
        files[z] = name
        header = "t," + ",".join(f"{z}:{lab}" for lab in labels)
        rows = [",".join([_fmt(t)] + [_fmt(v) for v in row]) for t, row in zip(nodes, sol.tables[mask])]
        (out / name).write_text(header + "\n" + "\n".join(rows) + "\n")
    manifest = {
        "format_version": FORMAT_VERSION,
        "theta": sol.theta, "T": sol.grid.T, "M": sol.grid.M, "N": N, "regimes": list(labels),
        "layers": files,
        "eps": {bitstring(m, N): v for m, v in sol.eps.items()},
        "floors": {bitstring(m, N): v for m, v in sol.floors.items()},
        "diagnostics": _jsonable(sol.diagnostics),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    (out / "model.json").write_text(json.dumps(finite_model_to_dict(sol.model)))
    return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def load_solution(in_dir) -> SolutionGrid:
    src = Path(in_dir)
    mpath = src / "manifest.json"
    if not mpath.exists():
        raise SolutionFormatError(f"missing {mpath}")
    try:
        man = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise SolutionFormatError(f"{mpath}:{exc.lineno}: {exc.msg}") from None
    ver = man.get("format_version")
    if ver != FORMAT_VERSION:
        raise SolutionFormatError(f"unsupported solution format version {ver!r} (expected {FORMAT_VERSION})")
    model = finite_model_from_dict(json.loads((src / "model.json").read_text()))
    N, M = int(man["N"]), int(man["M"])
    labels = model.labels
    layers = man.get("layers", {})
    tables = {}
    for mask in range(1 << N):
        z = bitstring(mask, N)
        if z not in layers:
            raise SolutionFormatError(f"manifest has no layer for z={z}")
        f = src / layers[z]
        if not f.exists():
            raise SolutionFormatError(f"missing layer file {f.name}")
        lines = f.read_text().strip().split("\n")
        expect = "t," + ",".join(f"{z}:{lab}" for lab in labels)
        if lines[0] != expect:
            raise SolutionFormatError(f"{f.name}: header {lines[0]!r} does not match manifest")
        if len(lines) != M + 2:
            raise SolutionFormatError(f"{f.name}: expected {M + 1} rows, found {len(lines) - 1}")
        vals = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
        if vals.shape[1] != len(labels) + 1:
            raise SolutionFormatError(f"{f.name}: wrong column count")
        tables[mask] = vals[:, 1:]
    def unpack(d):
        return {int(sum(1 << j for j, ch in enumerate(k) if ch == "1")): float(v) for k, v in d.items()}
    return SolutionGrid(model, TimeGrid(float(man["T"]), M), tables, unpack(man.get("eps", {})),
                        unpack(man.get("floors", {})), man.get("diagnostics", {}))


def save_strategy(sgrid, out_dir, summary: Optional[dict] = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    N = sgrid.N
    nodes = sgrid.grid.nodes
    for mask in sorted(sgrid.pi):
        z = bitstring(mask, N)
        header = "t,regime," + ",".join(f"pi_{j + 1}" for j in range(N)) + ",foc_residual,margin"
        rows = []
        for m, t in enumerate(nodes):
            for a, lab in enumerate(sgrid.model.labels):
                vals = [_fmt(t), str(lab)] + [_fmt(v) for v in sgrid.pi[mask][m, a]]
                vals += [_fmt(sgrid.foc[mask][m, a]), _fmt(sgrid.margin[mask][m, a])]
                rows.append(",".join(vals))
        (out / f"strategy_{z}.csv").write_text(header + "\n" + "\n".join(rows) + "\n")
    if summary is not None:
        (out / "strategy_summary.json").write_text(json.dumps(_jsonable(summary), indent=2))
    return out


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2))

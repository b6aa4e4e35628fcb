"""Sweep runner: hypergrid (dim x horizon x loss x seed) cells to CSV, SVG and a manifest.

Exit codes: 0 success, 1 at least one cell failed, 2 configuration error,
3 I/O error while writing outputs.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import itertools
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .env import BudgetError, ConfigError, HyperGrid
from .losses import LOSS_KINDS, LossSpec
from .trainer import MetricsRow, TrainConfig, train_run

log = logging.getLogger("subgfn")

EXIT_OK, EXIT_CELL, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3

CSV_HEADER = (
    "step", "dim", "horizon", "loss", "seed", "loss_value", "l1_exact",
    "l1_empirical", "log_z", "mean_entropy", "modes_found", "elapsed_ms",
)

LOSS_COLORS = {"tb": "#d62728", "subtb": "#2ca02c", "subgfn": "#1f77b4", "fm": "#ff7f0e", "db": "#9467bd"}
LOSS_LABELS = {"tb": "TB", "subtb": "SubTB", "subgfn": "SubGFN", "fm": "FM", "db": "DB"}

# flag name -> (config attribute, type); list-valued flags accept several values
LIST_KEYS = {"dim": int, "horizon": int, "loss": str, "seed": int}
SCALAR_KEYS = {
    "r0": float, "lambda": float, "delta": float, "steps": int, "batch-size": int,
    "lr": float, "lr-logz": float, "epsilon": float, "eval-every": int,
    "entropy-mode": str, "entropy-refresh": int, "mc-rollouts": int, "jobs": int,
    "out": str, "empirical-window": int, "interval-closure": str, "record-time": bool,
}

DEFAULTS = {
    "dim": [2, 3, 4], "horizon": [8, 16, 32], "loss": ["tb", "subtb", "subgfn"], "seed": [0],
    "r0": 0.1, "lambda": 0.99, "delta": 1e-6, "steps": 20_000, "batch-size": 8,
    "lr": 1e-3, "lr-logz": 1e-1, "epsilon": 0.0, "eval-every": 250,
    "entropy-mode": "dp", "entropy-refresh": 100, "mc-rollouts": 64, "jobs": 1,
    "out": "runs", "empirical-window": 1000, "interval-closure": "open", "record-time": False,
}


@dataclass
class RunMatrix:
    """Resolved sweep: the cell axes plus the settings shared by every cell."""

    dims: list[int]
    horizons: list[int]
    losses: list[LossSpec]
    seeds: list[int]
    r0: float = 0.1
    interval_closure: str = "open"
    train: dict = field(default_factory=dict)
    jobs: int = 1
    out: str = "runs"
    record_time: bool = False

    def cells(self) -> list[tuple[int, int, LossSpec, int]]:
        return list(itertools.product(self.dims, self.horizons, self.losses, self.seeds))

    def train_config(self, spec: LossSpec, seed: int) -> TrainConfig:
        return TrainConfig(loss=spec, seed=seed, record_time=self.record_time, **self.train)

    def resolved(self) -> dict:
        spec = self.losses[0]
        return {
            "dim": self.dims, "horizon": self.horizons, "loss": [s.kind for s in self.losses],
            "seed": self.seeds, "r0": self.r0, "interval-closure": self.interval_closure,
            "lambda": spec.lam, "delta": spec.delta, "entropy-mode": spec.entropy_mode,
            "entropy-refresh": spec.entropy_refresh, "mc-rollouts": spec.mc_rollouts,
            "steps": self.train["steps"], "batch-size": self.train["batch_size"],
            "lr": self.train["lr_policy"], "lr-logz": self.train["lr_logz_flow"],
            "epsilon": self.train["epsilon"], "eval-every": self.train["eval_every"],
            "empirical-window": self.train["empirical_window"], "jobs": self.jobs,
            "out": self.out, "record-time": self.record_time,
        }


@dataclass
class CellResult:
    dim: int
    horizon: int
    loss: str
    seed: int
    rows: list[MetricsRow]
    error: str | None = None

    @property
    def name(self) -> str:
        return f"d{self.dim}_h{self.horizon}_{self.loss}_s{self.seed}"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="subgfn", description="Train tabular GFlowNets on hypergrids and record convergence.")
    for key, typ in LIST_KEYS.items():
        kw = {"choices": LOSS_KINDS} if key == "loss" else {}
        p.add_argument(f"--{key}", type=typ, nargs="+", default=None, **kw)
    for key, typ in SCALAR_KEYS.items():
        dest = key.replace("-", "_")
        if typ is bool:
            p.add_argument(f"--{key}", dest=dest, action="store_const", const=True, default=None)
            continue
        kw = {}
        if key == "entropy-mode":
            kw["choices"] = ("dp", "mc")
        if key == "interval-closure":
            kw["choices"] = ("open", "half-open")
        p.add_argument(f"--{key}", dest=dest, type=typ, default=None, **kw)
    p.add_argument("--config", default=None, help="flat JSON file whose keys mirror the flag names")
    return p


def _read_config_file(path: str) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a JSON object")
    out = {}
    for key, value in raw.items():
        flag = key.replace("_", "-")
        if flag in LIST_KEYS:
            typ = LIST_KEYS[flag]
            values = value if isinstance(value, list) else [value]
            if not values or not all(_type_ok(v, typ) for v in values):
                raise ConfigError(f"config: bad value for {key!r}: {value!r}")
            out[flag] = list(values)
        elif flag in SCALAR_KEYS:
            if not _type_ok(value, SCALAR_KEYS[flag]):
                raise ConfigError(f"config: bad value for {key!r}: {value!r}")
            out[flag] = value
        else:
            raise ConfigError(f"config: unknown key {key!r}")
    return out


def _type_ok(value, typ) -> bool:
    if typ is bool:
        return isinstance(value, bool)
    if typ is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if typ is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    return isinstance(value, str)


def parse_config(argv: list[str] | None = None) -> RunMatrix:
    """Flags override config-file values, which override the defaults.

    Raises ``ConfigError`` (or ``BudgetError`` for oversized grids) with a
    message naming the offending key.
    """
    ns = build_parser().parse_args(argv)
    values = dict(DEFAULTS)
    if ns.config:
        values.update(_read_config_file(ns.config))
    for key in list(LIST_KEYS) + list(SCALAR_KEYS):
        given = getattr(ns, key.replace("-", "_"))
        if given is not None:
            values[key] = given
    if values["loss"] and any(k not in LOSS_KINDS for k in values["loss"]):
        bad = next(k for k in values["loss"] if k not in LOSS_KINDS)
        raise ConfigError(f"loss: unknown kind {bad!r}")
    for key in LIST_KEYS:
        if not values[key]:
            raise ConfigError(f"{key}: needs at least one value")
    if values["jobs"] < 1:
        raise ConfigError("jobs: must be >= 1")
    if values["empirical-window"] < 0:
        raise ConfigError("empirical-window: must be >= 0")

    try:
        losses = [
            LossSpec(
                kind=k, delta=values["delta"], lam=values["lambda"], entropy_mode=values["entropy-mode"],
                entropy_refresh=values["entropy-refresh"], mc_rollouts=values["mc-rollouts"],
            )
            for k in dict.fromkeys(values["loss"])
        ]
    except ConfigError as exc:
        raise ConfigError(f"loss options: {exc}") from exc
    train = {
        "steps": values["steps"], "batch_size": values["batch-size"], "lr_policy": values["lr"],
        "lr_logz_flow": values["lr-logz"], "epsilon": values["epsilon"], "eval_every": values["eval-every"],
        "empirical_window": values["empirical-window"],
    }
    matrix = RunMatrix(
        dims=list(dict.fromkeys(values["dim"])), horizons=list(dict.fromkeys(values["horizon"])),
        losses=losses, seeds=list(dict.fromkeys(values["seed"])), r0=values["r0"],
        interval_closure=values["interval-closure"], train=train, jobs=values["jobs"],
        out=values["out"], record_time=values["record-time"],
    )
    try:
        matrix.train_config(losses[0], matrix.seeds[0])
    except ConfigError as exc:
        raise ConfigError(f"training options: {exc}") from exc
    for d, h in itertools.product(matrix.dims, matrix.horizons):
        try:
            HyperGrid(d, h, matrix.r0, matrix.interval_closure).check_budget()
        except ConfigError as exc:
            raise ConfigError(f"dim/horizon/r0: {exc}") from exc
        except BudgetError as exc:
            raise BudgetError(f"dim/horizon: {exc}") from exc
    return matrix


def run_cell(matrix: RunMatrix, dim: int, horizon: int, spec: LossSpec, seed: int) -> CellResult:
    """One training run; any exception is captured in ``CellResult.error``."""
    try:
        env = HyperGrid(dim, horizon, matrix.r0, matrix.interval_closure)
        _, rows = train_run(env, matrix.train_config(spec, seed))
        return CellResult(dim, horizon, spec.kind, seed, rows)
    except Exception as exc:  # recorded and skipped, the sweep carries on
        return CellResult(dim, horizon, spec.kind, seed, [], f"{type(exc).__name__}: {exc}")


def run_experiment(matrix: RunMatrix) -> list[CellResult]:
    """Run every cell, in parallel up to ``matrix.jobs``; results come back in cell order."""
    cells = matrix.cells()
    results: list[CellResult] = []
    if matrix.jobs == 1:
        for i, cell in enumerate(cells):
            results.append(_report(run_cell(matrix, *cell), i, len(cells)))
        return results
    with ProcessPoolExecutor(max_workers=matrix.jobs) as pool:
        futures = [pool.submit(run_cell, matrix, *cell) for cell in cells]
        for i, fut in enumerate(futures):
            results.append(_report(fut.result(), i, len(cells)))
    return results


def _report(res: CellResult, i: int, total: int) -> CellResult:
    if res.error:
        log.error("[%d/%d] %s failed: %s", i + 1, total, res.name, res.error)
    else:
        last = res.rows[-1].l1_exact if res.rows else float("nan")
        log.info("[%d/%d] %s done, final l1_exact %.4f", i + 1, total, res.name, last)
    return res


# --- serialization ------------------------------------------------------------


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def metrics_csv(results: list[CellResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for res in results:
        for r in res.rows:
            w.writerow([
                r.step, res.dim, res.horizon, res.loss, res.seed, _fmt(r.loss_value), _fmt(r.l1_exact),
                _fmt(r.l1_empirical), _fmt(r.log_z), _fmt(r.mean_entropy), r.modes_found, _fmt(r.elapsed_ms),
            ])
    return buf.getvalue()


def parse_metrics_csv(text: str) -> list[tuple[tuple[int, int, str, int], MetricsRow]]:
    """Inverse of ``metrics_csv``: ``((dim, horizon, loss, seed), row)`` pairs."""
    reader = csv.reader(io.StringIO(text))
    header = tuple(next(reader))
    if header != CSV_HEADER:
        raise ValueError(f"unexpected header {header}")

    def opt(s):
        return None if s == "" else float(s)

    out = []
    for rec in reader:
        key = (int(rec[1]), int(rec[2]), rec[3], int(rec[4]))
        row = MetricsRow(
            step=int(rec[0]), loss_value=float(rec[5]), l1_exact=float(rec[6]), l1_empirical=opt(rec[7]),
            log_z=float(rec[8]), mean_entropy=opt(rec[9]), modes_found=int(rec[10]), elapsed_ms=opt(rec[11]),
        )
        out.append((key, row))
    return out


def convergence_svg(results: list[CellResult], dim: int, horizon: int, width: int = 640, height: int = 400) -> str:
    """L1 curves of one (dim, horizon), one polyline per loss kind (mean over seeds)."""
    series: dict[str, dict[int, list[float]]] = {}
    for res in results:
        if res.dim == dim and res.horizon == horizon and res.rows:
            pts = series.setdefault(res.loss, {})
            for r in res.rows:
                pts.setdefault(r.step, []).append(r.l1_exact)
    left, right, top, bottom = 60, 130, 30, 50
    pw, ph = width - left - right, height - top - bottom
    xmax = max((max(p) for p in series.values()), default=1) or 1
    ymax = max((max(max(v) for v in p.values()) for p in series.values()), default=1.0)
    ymax = ymax if ymax > 0 else 1.0

    def sx(x):
        return left + pw * x / xmax

    def sy(y):
        return top + ph * (1 - y / ymax)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{left + pw / 2:.1f}" y="18" text-anchor="middle" font-family="sans-serif" font-size="14">'
        f"Hypergrid D={dim}, H={horizon}</text>",
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for k in range(6):
        xv, yv = xmax * k / 5, ymax * k / 5
        out.append(f'<line x1="{sx(xv):.1f}" y1="{top + ph}" x2="{sx(xv):.1f}" y2="{top + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{sx(xv):.1f}" y="{top + ph + 18}" text-anchor="middle" font-family="sans-serif" font-size="10">{xv:g}</text>')
        out.append(f'<line x1="{left - 5}" y1="{sy(yv):.1f}" x2="{left}" y2="{sy(yv):.1f}" stroke="black"/>')
        out.append(f'<text x="{left - 8}" y="{sy(yv) + 3:.1f}" text-anchor="end" font-family="sans-serif" font-size="10">{yv:.3g}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle" font-family="sans-serif" font-size="12">step</text>')
    out.append(
        f'<text x="15" y="{top + ph / 2:.1f}" text-anchor="middle" font-family="sans-serif" font-size="12" '
        f'transform="rotate(-90 15 {top + ph / 2:.1f})">L1 distance</text>'
    )
    kinds = [k for k in LOSS_KINDS if k in series]
    for i, kind in enumerate(kinds):
        pts = sorted(series[kind].items())
        coords = " ".join(f"{sx(s):.2f},{sy(sum(v) / len(v)):.2f}" for s, v in pts)
        color = LOSS_COLORS[kind]
        out.append(f'<polyline data-loss="{kind}" fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        ly = top + 10 + 18 * i
        out.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 35}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 40}" y="{ly + 4}" font-family="sans-serif" font-size="12">{LOSS_LABELS[kind]}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def code_version() -> dict:
    """Installed package version plus a digest of the package sources."""
    from importlib.metadata import PackageNotFoundError, version

    try:
        ver = version("artifact")
    except PackageNotFoundError:
        ver = "unknown"
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return {"version": ver, "source_sha256": h.hexdigest()}


def _atomic_write(path: Path, data: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_outputs(results: list[CellResult], matrix: RunMatrix, out_dir: str | os.PathLike) -> list[Path]:
    """Per-cell CSVs, ``metrics.csv``, one SVG per (dim, horizon) and ``manifest.json``.

    Raises ``OSError`` on any I/O failure.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for res in results:
        if res.error is None:
            path = out / f"cell_{res.name}.csv"
            _atomic_write(path, metrics_csv([res]))
            written.append(path)
    path = out / "metrics.csv"
    _atomic_write(path, metrics_csv([r for r in results if r.error is None]))
    written.append(path)
    for d, h in itertools.product(matrix.dims, matrix.horizons):
        path = out / f"l1_d{d}_h{h}.svg"
        _atomic_write(path, convergence_svg(results, d, h))
        written.append(path)
    manifest = {
        "config": matrix.resolved(),
        "loss_specs": [dataclasses.asdict(s) for s in matrix.losses],
        "code": code_version(),
        "cells": [{"name": r.name, "rows": len(r.rows), "error": r.error} for r in results],
    }
    path = out / "manifest.json"
    _atomic_write(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    written.append(path)
    return written


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(message)s")
    try:
        matrix = parse_config(argv)
    except (ConfigError, BudgetError) as exc:
        print(f"subgfn: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    log.info("running %d cells into %s", len(matrix.cells()), matrix.out)
    results = run_experiment(matrix)
    try:
        write_outputs(results, matrix, matrix.out)
    except OSError as exc:
        print(f"subgfn: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_CELL if any(r.error for r in results) else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

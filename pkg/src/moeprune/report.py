"""Summaries of finished runs, computed from their metrics CSVs.

Four products, each written as CSV plus a small standalone SVG:

* ``accuracy``  -- setting x final eval accuracy, mean and std over seeds
* ``shares``    -- per-window expert shares for every layer of every run
* ``k_half``    -- survivor count at the half-way point versus beta
* ``final_shares`` -- last-window share distribution, experts sorted by share

Every number comes from a metrics row (or arithmetic on several). The run
directory's ``summary.json`` and ``config.txt``, when present, are read only
to label a run with its setting, seed and beta.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import kvtext
from .training import METRIC_COLUMNS

log = logging.getLogger(__name__)


class ReportError(RuntimeError):
    """No usable metrics were found."""


@dataclass
class RunRecord:
    path: Path
    setting: str
    seed: int | None
    beta: float | None
    rows: list[dict]

    @property
    def label(self) -> str:
        return self.setting if self.seed is None else f"{self.setting}/seed{self.seed}"

    def accuracy(self) -> float | None:
        for r in reversed(self.rows):
            if r["phase"] == "eval" and str(r["event"]).startswith("accuracy="):
                return float(r["event"].split("=", 1)[1])
        return None

    def total_steps(self) -> int:
        return max((r["step"] for r in self.rows if r["phase"] != "eval"), default=0)

    def window_rows(self) -> list[dict]:
        return [r for r in self.rows if r["window"] != ""]


@dataclass
class Report:
    runs: list[RunRecord] = field(default_factory=list)
    skipped: list[tuple[Path, str]] = field(default_factory=list)

    def accuracy_table(self) -> list[dict]:
        by_setting: dict[str, list[float]] = defaultdict(list)
        for run in self.runs:
            acc = run.accuracy()
            if acc is not None:
                by_setting[run.setting].append(acc)
        table = []
        for setting, accs in by_setting.items():
            a = np.array(accs) * 100.0
            table.append({"setting": setting, "runs": len(a), "mean_accuracy": float(a.mean()),
                          "std_accuracy": float(a.std())})
        return table

    def share_series(self) -> list[dict]:
        out = []
        for run in self.runs:
            for r in run.window_rows():
                out.append({"run": run.label, "setting": run.setting, "seed": run.seed, "layer": r["layer"],
                            "window": r["window"], "step": r["step"], "expert": r["expert"],
                            "share": r["share"], "survivors": r["survivors"], "event": r["event"]})
        return out

    def k_half_table(self) -> list[dict]:
        """Survivors per layer entering the half-way step, averaged over seeds per (setting, beta)."""
        acc: dict[tuple, list[int]] = defaultdict(list)
        for run in self.runs:
            rows = run.window_rows()
            if not rows:
                continue
            half = run.total_steps() // 2
            for layer in sorted({r["layer"] for r in rows}):
                layer_rows = [r for r in rows if r["layer"] == layer]
                experts = len({r["expert"] for r in layer_rows})
                before = [r for r in layer_rows if r["step"] < half]
                k = before[-1]["survivors"] if before else experts
                acc[(run.setting, run.beta, layer)].append(k)
        return [{"setting": s, "beta": b, "layer": layer, "runs": len(ks), "k_half": float(np.mean(ks))}
                for (s, b, layer), ks in sorted(acc.items(), key=lambda kv: (kv[0][0], _num(kv[0][1]), kv[0][2]))]

    def final_shares(self) -> list[dict]:
        """Shares from each run's last recorded window, ranked within each layer."""
        out = []
        for run in self.runs:
            rows = [r for r in run.window_rows() if r["share"] != ""]
            for layer in sorted({r["layer"] for r in rows}):
                layer_rows = [r for r in rows if r["layer"] == layer]
                last = max(r["window"] for r in layer_rows)
                final = sorted((r for r in layer_rows if r["window"] == last), key=lambda r: -r["share"])
                for rank, r in enumerate(final):
                    out.append({"run": run.label, "setting": run.setting, "layer": layer, "window": last,
                                "rank": rank, "expert": r["expert"], "share": r["share"]})
        return out

    def survivors_at(self, run: RunRecord, step: int) -> dict[int, int]:
        """Survivor count per layer after the last window decision at or before ``step``."""
        out = {}
        for r in run.window_rows():
            if r["step"] <= step:
                out[r["layer"]] = r["survivors"]
        return out

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = {}
        tables = {
            "accuracy": (self.accuracy_table(), ["setting", "runs", "mean_accuracy", "std_accuracy"]),
            "shares": (self.share_series(), ["run", "setting", "seed", "layer", "window", "step", "expert",
                                             "share", "survivors", "event"]),
            "k_half": (self.k_half_table(), ["setting", "beta", "layer", "runs", "k_half"]),
            "final_shares": (self.final_shares(), ["run", "setting", "layer", "window", "rank", "expert", "share"]),
        }
        for name, (rows, cols) in tables.items():
            path = out / f"{name}.csv"
            with open(path, "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=cols)
                w.writeheader()
                w.writerows(rows)
            written[name] = path
        svgs = {
            "accuracy": _accuracy_svg(tables["accuracy"][0]),
            "shares": _shares_svg(tables["shares"][0]),
            "k_half": _k_half_svg(tables["k_half"][0]),
            "final_shares": _final_shares_svg(tables["final_shares"][0]),
        }
        for name, svg in svgs.items():
            path = out / f"{name}.svg"
            path.write_text(svg)
            written[f"{name}.svg"] = path
        return written

    def format_accuracy(self) -> str:
        lines = [f"{'setting':<28} {'runs':>4} {'accuracy %':>16}"]
        for row in self.accuracy_table():
            lines.append(f"{row['setting']:<28} {row['runs']:>4} "
                         f"{row['mean_accuracy']:>9.2f} ± {row['std_accuracy']:<5.2f}")
        return "\n".join(lines)


def _num(v) -> float:
    return -math.inf if v is None else float(v)


# -- loading ------------------------------------------------------------------------


def find_metrics(paths) -> list[Path]:
    """Metrics files under each path (a run directory, a parent of run directories, or a CSV)."""
    found = []
    for p in map(Path, paths):
        if p.is_file():
            found.append(p)
        elif (p / "metrics.csv").exists():
            found.append(p / "metrics.csv")
        elif p.is_dir():
            found.extend(sorted(p.rglob("metrics.csv")))
        else:
            found.append(p / "metrics.csv")  # reported as missing
    return found


def _parse_row(raw: dict) -> dict:
    row = dict(raw)
    row["step"] = int(raw["step"])
    for key in ("layer", "window", "expert", "hits", "survivors"):
        row[key] = int(raw[key]) if raw[key] != "" else ""
    for key in ("loss", "lr", "share"):
        row[key] = float(raw[key]) if raw[key] != "" else ""
    return row


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRIC_COLUMNS:
            raise ValueError(f"unexpected columns {reader.fieldnames}")
        return [_parse_row(r) for r in reader]


def _labels(run_dir: Path) -> tuple[str, int | None, float | None]:
    setting, seed, beta = run_dir.name, None, None
    summary = run_dir / "summary.json"
    if summary.exists():
        try:
            s = json.loads(summary.read_text())
            setting = s.get("setting") or setting
            seed = s.get("seed")
        except (ValueError, OSError):
            log.warning("ignoring unreadable %s", summary)
    config = run_dir / "config.txt"
    if config.exists():
        try:
            beta = kvtext.loads(config.read_text()).get("prune", {}).get("beta")
        except (ValueError, OSError):
            log.warning("ignoring unreadable %s", config)
    return setting, seed, beta


def load_runs(paths) -> Report:
    report = Report()
    for metrics in find_metrics(paths):
        try:
            rows = read_metrics(metrics)
        except (OSError, ValueError, KeyError) as exc:
            log.warning("skipping %s: %s", metrics, exc)
            report.skipped.append((metrics, str(exc)))
            continue
        setting, seed, beta = _labels(metrics.parent)
        report.runs.append(RunRecord(metrics.parent, setting, seed, beta, rows))
    return report


def report(run_dirs, out_dir=None) -> Report:
    """Load every run under ``run_dirs``; write tables and plots to ``out_dir`` if given."""
    rep = load_runs(run_dirs)
    if not rep.runs:
        raise ReportError("no readable metrics.csv among the given paths")
    if out_dir is not None:
        rep.write(out_dir)
    return rep


# -- minimal SVG ----------------------------------------------------------------------

_W, _H, _PAD = 640, 360, 50
_COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def _svg(body: list[str], title: str) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
            f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="11">')
    frame = [f'<rect width="{_W}" height="{_H}" fill="white"/>',
             f'<text x="{_W / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
             f'<line x1="{_PAD}" y1="{_H - _PAD}" x2="{_W - _PAD}" y2="{_H - _PAD}" stroke="black"/>',
             f'<line x1="{_PAD}" y1="{_PAD}" x2="{_PAD}" y2="{_H - _PAD}" stroke="black"/>']
    return "\n".join([head, *frame, *body, "</svg>"]) + "\n"


def _scale(lo: float, hi: float, a: float, b: float):
    if hi == lo:
        hi = lo + 1.0
    return lambda v: a + (v - lo) / (hi - lo) * (b - a)


def _y_axis(lo: float, hi: float, y) -> list[str]:
    out = []
    for v in np.linspace(lo, hi, 5):
        out.append(f'<text x="{_PAD - 4}" y="{y(v) + 4:.1f}" text-anchor="end">{v:.3g}</text>')
    return out


def _bars(labels: list[str], values: list[float], errors: list[float] | None, title: str) -> str:
    if not values:
        return _svg(['<text x="320" y="180" text-anchor="middle">no data</text>'], title)
    top = max(v + (e or 0) for v, e in zip(values, errors or [0] * len(values)))
    lo = min(0.0, min(values))
    y = _scale(lo, top * 1.05 if top > 0 else 1.0, _H - _PAD, _PAD)
    slot = (_W - 2 * _PAD) / len(values)
    body = _y_axis(lo, top * 1.05 if top > 0 else 1.0, y)
    for i, (lab, v) in enumerate(zip(labels, values)):
        x = _PAD + i * slot + slot * 0.15
        body.append(f'<rect x="{x:.1f}" y="{y(max(v, 0)):.1f}" width="{slot * 0.7:.1f}" '
                    f'height="{abs(y(v) - y(0)):.1f}" fill="{_COLORS[i % len(_COLORS)]}"/>')
        if errors:
            cx = x + slot * 0.35
            body.append(f'<line x1="{cx:.1f}" y1="{y(v - errors[i]):.1f}" x2="{cx:.1f}" '
                        f'y2="{y(v + errors[i]):.1f}" stroke="black"/>')
        body.append(f'<text x="{x + slot * 0.35:.1f}" y="{_H - _PAD + 14}" text-anchor="middle">{escape(lab)}</text>')
    return _svg(body, title)


def _lines(series: dict[str, tuple[list[float], list[float]]], title: str, xlabel: str, ylabel: str) -> str:
    pts = [(x, v) for xs, ys in series.values() for x, v in zip(xs, ys)]
    if not pts:
        return _svg(['<text x="320" y="180" text-anchor="middle">no data</text>'], title)
    xs_all, ys_all = zip(*pts)
    x = _scale(min(xs_all), max(xs_all), _PAD, _W - _PAD)
    ylo, yhi = min(0.0, min(ys_all)), max(ys_all) * 1.05 or 1.0
    y = _scale(ylo, yhi, _H - _PAD, _PAD)
    body = _y_axis(ylo, yhi, y)
    body.append(f'<text x="{_W / 2}" y="{_H - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    body.append(f'<text x="14" y="{_H / 2}" transform="rotate(-90 14 {_H / 2})" '
                f'text-anchor="middle">{escape(ylabel)}</text>')
    for i, (name, (xs, ys)) in enumerate(series.items()):
        color = _COLORS[i % len(_COLORS)]
        coords = " ".join(f"{x(a):.1f},{y(b):.1f}" for a, b in zip(xs, ys))
        body.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        body.append(f'<text x="{_W - _PAD + 4}" y="{_PAD + 12 * i}" fill="{color}">{escape(name)}</text>')
    return _svg(body, title)


def _accuracy_svg(rows: list[dict]) -> str:
    return _bars([r["setting"] for r in rows], [r["mean_accuracy"] for r in rows],
                 [r["std_accuracy"] for r in rows], "Final accuracy (%) by setting, mean ± std")


def _shares_svg(rows: list[dict]) -> str:
    # first run only, one line per (layer, expert), so the plot stays readable
    if not rows:
        return _lines({}, "Expert share per window", "window", "share")
    first = rows[0]["run"]
    series: dict[str, tuple[list, list]] = {}
    for r in rows:
        if r["run"] != first or r["share"] == "":
            continue
        xs, ys = series.setdefault(f"L{r['layer']} e{r['expert']}", ([], []))
        xs.append(r["window"])
        ys.append(r["share"])
    return _lines(series, f"Expert share per window ({first})", "window", "share")


def _k_half_svg(rows: list[dict]) -> str:
    series: dict[str, tuple[list, list]] = {}
    for r in rows:
        if r["beta"] is None:
            continue
        xs, ys = series.setdefault(f"{r['setting']} L{r['layer']}", ([], []))
        xs.append(float(r["beta"]))
        ys.append(r["k_half"])
    return _lines(series, "Survivors at half schedule vs beta", "beta", "K_half")


def _final_shares_svg(rows: list[dict]) -> str:
    by_rank: dict[int, list[float]] = defaultdict(list)
    for r in rows:
        by_rank[r["rank"]].append(r["share"])
    ranks = sorted(by_rank)
    return _bars([f"#{k + 1}" for k in ranks], [float(np.mean(by_rank[k])) for k in ranks], None,
                 "Final-window share by expert rank (mean over runs and layers)")

"""Trace, summary and sweep-table emission, plus matplotlib figures."""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .simulator import IterationRecord


def fmt(x) -> str:
    """17 significant digits (exact round trip for float64); blank for missing values."""
    if x is None:
        return ""
    x = float(x)
    if math.isnan(x):
        return ""
    return format(x, ".17g")


def trace_header(m: int) -> list[str]:
    return (["t", "f", "grad_norm", "hess_min_eig", "good_count", "ejected_ids", "sigma_norm", "delta_norm"]
            + [f"dev_A_{i}" for i in range(m)] + [f"dev_B_{i}" for i in range(m)])


def trace_rows(records: Iterable[IterationRecord], m: int) -> Iterable[list[str]]:
    blank = [""] * m
    for r in records:
        dev_A = [fmt(v) for v in r.dev_A] if r.dev_A is not None else blank
        dev_B = [fmt(v) for v in r.dev_B] if r.dev_B is not None else blank
        yield ([str(r.t), fmt(r.f), fmt(r.grad_norm), fmt(r.hess_min_eig), str(r.good_count),
                ";".join(str(i) for i in r.ejected), fmt(r.sigma_norm), fmt(r.delta_norm)] + dev_A + dev_B)


def render_trace(records: Sequence[IterationRecord], m: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(trace_header(m))
    w.writerows(trace_rows(records, m))
    return buf.getvalue()


def write_trace(path: Path, records: Sequence[IterationRecord], m: int) -> None:
    Path(path).write_text(render_trace(records, m), encoding="utf-8")


def read_trace(path: Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def render_summary(summary: dict) -> str:
    return json.dumps(summary, indent=2, allow_nan=False, default=_json_default) + "\n"


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def write_summary(path: Path, summary: dict) -> None:
    Path(path).write_text(render_summary(summary), encoding="utf-8")


def sweep_table(cells: Iterable[dict], defenses: Sequence[str], attacks: Sequence[str]) -> list[list[str]]:
    """Rows are defenses, two columns per attack: median final grad norm and median caught count.

    ``cells`` holds one dict per (defense, attack, seed) with keys ``defense``,
    ``attack``, ``status`` and, when completed, ``final_grad_norm`` and
    ``caught_count``. The result does not depend on the order of ``cells``.
    """
    grouped: dict[tuple[str, str], list[dict]] = {}
    for c in cells:
        grouped.setdefault((c["defense"], c["attack"]), []).append(c)
    header = ["defense"]
    for a in attacks:
        header += [f"{a}.grad_norm", f"{a}.caught"]
    rows = [header]
    for dname in defenses:
        row = [dname]
        for a in attacks:
            group = grouped.get((dname, a), [])
            bad = sorted({c["status"] for c in group if c["status"] not in ("completed", "diverged")})
            if not group or bad:
                label = bad[0] if bad else "missing"
                row += [label, label]
                continue
            g = [math.inf if c["final_grad_norm"] is None else c["final_grad_norm"] for c in group]
            row += [fmt(float(np.median(g))), fmt(float(np.median([c["caught_count"] for c in group])))]
        rows.append(row)
    return rows


def write_table(path: Path, rows: list[list[str]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_run(records: Sequence[IterationRecord], summary: dict, out_dir: Path) -> list[Path]:
    """Gradient-norm/good-set figure and, for safeguard runs, the per-worker deviation figure."""
    plt = _pyplot()
    out_dir = Path(out_dir)
    byz = set(summary["config"]["byzantine_ids"])
    t = np.array([r.t for r in records])
    paths = []

    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    ax1.semilogy(t, [max(r.grad_norm, 1e-300) for r in records], lw=1)
    ax1.set_ylabel("||grad f(x_t)||")
    ax2.step(t, [r.good_count for r in records], where="post")
    ax2.set_ylabel("|good_t|")
    ax2.set_xlabel("iteration")
    fig.tight_layout()
    p = out_dir / "convergence.png"
    fig.savefig(p, dpi=100)
    plt.close(fig)
    paths.append(p)

    if records and records[0].dev_B is not None:
        m = len(records[0].dev_B)
        panels = [("dev_B", "||B_i - B_med||")]
        if records[0].dev_A is not None:
            panels.append(("dev_A", "||A_i - A_med||"))
        fig, axes = plt.subplots(len(panels), 1, figsize=(7, 2.6 * len(panels)), sharex=True, squeeze=False)
        for ax, (attr, label) in zip(axes[:, 0], panels):
            D = np.array([getattr(r, attr) for r in records])
            for i in range(m):
                ax.plot(t, D[:, i], lw=0.8, color="tab:red" if i in byz else "tab:blue", alpha=0.8)
            ax.set_ylabel(label)
        axes[-1, 0].set_xlabel("iteration (red: Byzantine, blue: honest)")
        fig.tight_layout()
        p = out_dir / "deviation.png"
        fig.savefig(p, dpi=100)
        plt.close(fig)
        paths.append(p)
    return paths


def plot_sweep(rows: list[list[str]], out_path: Path) -> Path:
    plt = _pyplot()
    header, body = rows[0], rows[1:]
    attacks = [h[: -len(".grad_norm")] for h in header[1::2]]
    defenses = [r[0] for r in body]
    M = np.full((len(defenses), len(attacks)), np.nan)
    for i, r in enumerate(body):
        for j in range(len(attacks)):
            try:
                M[i, j] = float(r[1 + 2 * j])
            except ValueError:
                pass
    fig, ax = plt.subplots(figsize=(1.2 * len(attacks) + 3, 0.5 * len(defenses) + 2))
    with np.errstate(divide="ignore"):
        im = ax.imshow(np.log10(M), cmap="viridis_r", aspect="auto")
    ax.set_xticks(range(len(attacks)), attacks, rotation=30, ha="right")
    ax.set_yticks(range(len(defenses)), defenses)
    fig.colorbar(im, ax=ax, label="log10 median final ||grad f||")
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return Path(out_path)

"""Charts for a run directory, drawn from tab-separated data files.

Every chart is rendered from a TSV that is written next to it, so
``plot_from_data`` on the emitted TSV reproduces the SVG byte for byte.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Dict, List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

DYNAMICS = ("mean_reward", "mean_entropy", "mean_response_length", "mean_kl_to_ref", "loss")
_RC = {"svg.hashsalt": "sftrl", "svg.fonttype": "path", "figure.figsize": (6.4, 4.0)}


class PlotInputError(FileNotFoundError):
    pass


def _read_tsv(path: Path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f, delimiter="\t"))
    if not rows:
        raise PlotInputError(f"{path} is empty")
    return rows[0], rows[1:]


def _num(x: str):
    return float("nan") if x == "" else float(x)


def _save(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_from_data(tsv, svg, kind: str, title: str = "") -> None:
    """Render one chart from its data file.

    kind ``line``: first column is x, remaining columns are series.
    kind ``bar``:  first column is the category, remaining columns are grouped bars.
    """
    header, rows = _read_tsv(Path(tsv))
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        if kind == "line":
            xs = [_num(r[0]) for r in rows]
            for j, name in enumerate(header[1:], start=1):
                ax.plot(xs, [_num(r[j]) for r in rows], marker="o" if len(rows) <= 12 else None, label=name)
            ax.set_xlabel(header[0])
        elif kind == "bar":
            cats = [r[0] for r in rows]
            series = header[1:]
            width = 0.8 / max(len(series), 1)
            for j, name in enumerate(series):
                xs = [i + (j - (len(series) - 1) / 2) * width for i in range(len(cats))]
                ax.bar(xs, [_num(r[j + 1]) for r in rows], width=width, label=name)
            ax.set_xticks(range(len(cats)))
            ax.set_xticklabels(cats, rotation=45 if len(cats) > 6 else 0)
            ax.set_xlabel(header[0])
        else:
            raise ValueError(f"unknown chart kind {kind!r}")
        if title:
            ax.set_title(title)
        if len(header) > 2:
            ax.legend(fontsize="small")
        fig.tight_layout()
        _save(fig, Path(svg))


def _write_tsv(path: Path, header: List[str], rows: List[list]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, delimiter="\t")
        w.writerow(header)
        w.writerows(rows)


def _read_stream(path: Path) -> List[dict]:
    records = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    if not records:
        raise PlotInputError(f"metrics stream {path} is empty")
    return records


def emit_plots(run_dir) -> List[Path]:
    """Write SVG charts plus their TSV data under ``run_dir/plots``; returns the chart paths."""
    run_dir = Path(run_dir)
    streams = sorted(run_dir.glob("stages/*/metrics.jsonl"))
    analysis = run_dir / "analysis"
    missing = []
    if not streams:
        missing.append("stages/*/metrics.jsonl")
    if not (analysis / "gains.tsv").is_file():
        missing.append("analysis/gains.tsv")
    if not (analysis / "words.tsv").is_file():
        missing.append("analysis/words.tsv")
    if not streams and not analysis.is_dir():
        raise PlotInputError(f"nothing to plot in {run_dir}; missing: {', '.join(missing)}")
    out = run_dir / "plots"
    out.mkdir(exist_ok=True)
    charts: List[Path] = []

    def chart(stem: str, header, rows, kind: str, title: str):
        data = out / f"{stem}.tsv"
        _write_tsv(data, header, rows)
        plot_from_data(data, out / f"{stem}.svg", kind, title)
        charts.append(out / f"{stem}.svg")

    # training dynamics: one chart per metric, one series per stage
    by_stage: Dict[str, List[dict]] = {p.parent.name: _read_stream(p) for p in streams}
    for metric in DYNAMICS:
        series = {s: recs for s, recs in by_stage.items() if all(metric in r for r in recs)}
        if not series:
            continue
        width = max(len(r) for r in series.values())
        rows = []
        for i in range(width):
            rows.append([i] + [f"{recs[i][metric]:.6g}" if i < len(recs) else "" for recs in series.values()])
        chart(f"dynamics_{metric}", ["step"] + list(series), rows, "line", metric)

    if (analysis / "gains.tsv").is_file():
        header, rows = _read_tsv(analysis / "gains.tsv")
        chart("gains", ["level"] + header[2:], [[r[0]] + r[2:] for r in rows], "bar", "gain by level (pp)")
    if (analysis / "words.tsv").is_file():
        header, rows = _read_tsv(analysis / "words.tsv")
        chart("words", header, rows, "bar", "lexicon word frequency")
    for path in sorted(analysis.glob("merge_*.tsv")) if analysis.is_dir() else []:
        header, rows = _read_tsv(path)
        chart(path.stem, header, rows, "line", f"{path.stem[6:]} accuracy by ratio")
    if missing and not charts:
        raise PlotInputError(f"nothing to plot in {run_dir}; missing: {', '.join(missing)}")
    return charts

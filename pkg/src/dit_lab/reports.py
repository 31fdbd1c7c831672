"""CSV, JSON, aligned-text and SVG report emission.

Every writer is deterministic: floats go out with ``repr`` precision, JSON
keys are sorted, and SVG files carry no timestamp, so identical inputs give
identical bytes.
"""

from __future__ import annotations

import csv
import io
import json
import os
from pathlib import Path

import numpy as np


def atomic_write(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(data, str):
        data = data.encode("utf-8")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return path


def fmt_float(v):
    return repr(float(v))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def dumps_json(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(path, obj):
    return atomic_write(path, dumps_json(obj))


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt_float(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def write_csv(path, header, rows):
    return atomic_write(path, csv_text(header, rows))


INFLUENCE_HEADER = ("j", "t1", "t2", "query_id", "Q")


def influence_rows(records):
    return [(r.j, r.window.t1, r.window.t2, r.query_id, float(r.Q)) for r in records]


def write_influence_csv(path, records):
    return write_csv(path, INFLUENCE_HEADER, influence_rows(records))


def read_csv(path):
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def mean_std(values):
    """Mean and population std (0 for a single value)."""
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std())


def pm(values, digits=2):
    m, s = mean_std(values)
    return f"{m:.{digits}f} ± {s:.{digits}f}"


def aligned_table(header, rows) -> str:
    cells = [list(map(str, header))] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = []
    for k, r in enumerate(cells):
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))))
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_svg_lines(path, series: dict, xlabel="epoch", ylabel="value", title=None):
    """Line chart of named 1-D series, written as SVG with no embedded date."""
    import matplotlib

    matplotlib.use("Agg")
    from matplotlib import pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "dit-lab", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 4))
        for name in sorted(series):
            ys = np.asarray(series[name], dtype=np.float64)
            ax.plot(np.arange(1, ys.shape[0] + 1), ys, marker="o", ms=3, label=name)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        if series:
            ax.legend(fontsize=8)
        buf = io.StringIO()
        fig.savefig(buf, format="svg", metadata={"Date": None})
        plt.close(fig)
    return atomic_write(path, buf.getvalue())

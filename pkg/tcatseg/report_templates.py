from __future__ import annotations

from collections.abc import Mapping, Sequence

METRIC_LABELS = {
    "oa": "OA",
    "dsc": "DSC",
    "sen": "SEN",
    "ppv": "PPV",
    "tir": "TIR",
    "tla": "TLA",
    "tsa": "TSA",
    "score": "Score",
}
VARIANT_NOTE = "TLA, TSA and TIR are artifact-defined metric variants."
MISSING = "n/a"


def _pct(value: float | None) -> str:
    if value is None:
        return MISSING
    return f"{100.0 * value:.2f}"


def render_header(title: str, n_files: int) -> str:
    return f"# {title}\n\nFiles evaluated: {n_files} · {VARIANT_NOTE}\n"


def render_table(rows: Sequence[tuple[str, Mapping[str, float]]]) -> str:
    """One markdown row per (name, metrics) pair, values x100."""
    keys = list(METRIC_LABELS)
    lines = [
        "| File | " + " | ".join(METRIC_LABELS[k] for k in keys) + " |",
        "|---|" + "---:|" * len(keys),
    ]
    for name, metrics in rows:
        lines.append(f"| {name} | " + " | ".join(_pct(metrics.get(k)) for k in keys) + " |")
    return "\n".join(lines) + "\n"


def render_flat(metrics: Mapping[str, float]) -> str:
    """Machine-readable ``key = value`` lines, values x100 with two decimals."""
    lines = [f"# {VARIANT_NOTE}"]
    lines.extend(f"{k} = {_pct(metrics.get(k))}" for k in METRIC_LABELS)
    return "\n".join(lines) + "\n"


def render_report(
    title: str,
    per_file: Sequence[tuple[str, Mapping[str, float]]],
    aggregate: Mapping[str, float],
) -> str:
    parts = [
        render_header(title, len(per_file)),
        "## Aggregate (mean over files)\n",
        render_table([("mean", aggregate)]),
        "## Per file\n",
        render_table(per_file),
    ]
    return "\n".join(parts)

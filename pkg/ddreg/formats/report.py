"""
Render metric tables

Every renderer takes a `ReportTable` and returns the document as a string.
"""

import json
import math

import pandas as pd

from ddreg.evaluation import METRICS, ReportTable

HEADERS = {
    "ssim": "SSIM",
    "ncc": "NCC",
    "dsc": "DSC",
    "hd": "HD (mm)",
    "hd95": "HD95 (mm)",
    "tre": "TRE (mm)",
    "runtime": "Runtime (s)",
}


def _cell(mean: float, std: float) -> str:
    if not math.isfinite(mean):
        return "n/a"
    if not math.isfinite(std):
        return f"{mean:.3f}"
    return f"{mean:.3f}±{std:.3f}"


def to_dataframe(table: ReportTable, bold: str = "*") -> pd.DataFrame:
    """One formatted row per method; the best cell of each column is wrapped in `bold`"""
    rows = []
    for k, row in enumerate(table.rows):
        cells = {"Method": row.method, "n": row.n_pairs}
        for metric in METRICS:
            summary = row.metrics[metric]
            cell = _cell(summary.mean, summary.std)
            if table.best.get(metric) == k:
                cell = f"{bold}{cell}{bold}"
            cells[HEADERS[metric]] = cell
        rows.append(cells)
    return pd.DataFrame(rows, columns=["Method", "n", *HEADERS.values()])


def to_text(table: ReportTable) -> str:
    """Aligned plain-text table, best cells starred"""
    return to_dataframe(table).to_string(index=False) + "\n"


def to_markdown(table: ReportTable) -> str:
    """Markdown table, best cells in bold"""
    df = to_dataframe(table, bold="**")
    lines = [
        "| " + " | ".join(df.columns) + " |",
        "| " + " | ".join("---" for _ in df.columns) + " |",
    ]
    for _, row in df.iterrows():
        lines.append("| " + " | ".join(str(v) for v in row) + " |")
    return "\n".join(lines) + "\n"


def to_csv(table: ReportTable) -> str:
    """Numeric CSV: mean, std, count and a best flag per metric"""
    rows = []
    for k, row in enumerate(table.rows):
        record = {"method": row.method, "n_pairs": row.n_pairs, "missing_labels": row.missing_labels}
        for metric in METRICS:
            summary = row.metrics[metric]
            record[f"{metric}_mean"] = summary.mean
            record[f"{metric}_std"] = summary.std
            record[f"{metric}_count"] = summary.count
            record[f"{metric}_best"] = table.best.get(metric) == k
        rows.append(record)
    return pd.DataFrame(rows).to_csv(index=False)


def to_json(table: ReportTable) -> str:
    """Rows and best-method markers as JSON"""
    return json.dumps(
        {
            "rows": [row.model_dump() for row in table.rows],
            "best": {
                metric: (table.rows[k].method if k is not None else None)
                for metric, k in table.best.items()
            },
        },
        indent=2,
    )

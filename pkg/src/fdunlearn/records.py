"""Named metric results and their CSV persistence."""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, fields
from pathlib import Path

CSV_COLUMNS = ("run_id", "method", "domain", "layer", "metric", "k", "round", "value", "flags")


@dataclass(frozen=True)
class MetricRecord:
    metric: str
    value: float
    run_id: str = ""
    method: str = ""
    domain: str = ""
    layer: str = ""
    k: int | None = None
    round: int | None = None
    flags: str = ""


def format_value(v: float) -> str:
    return repr(float(v))


def records_to_csv(records, columns=CSV_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in records:
        row = asdict(r)
        out = []
        for c in columns:
            v = row[c]
            if c == "value":
                out.append(format_value(v))
            else:
                out.append("" if v is None else str(v))
        w.writerow(out)
    return buf.getvalue()


def write_records(path, records, columns=CSV_COLUMNS) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(records_to_csv(records, columns))


def read_records(path) -> list[MetricRecord]:
    names = {f.name for f in fields(MetricRecord)}
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            kw = {k: v for k, v in row.items() if k in names}
            kw["value"] = float(kw["value"])
            for key in ("k", "round"):
                if key in kw:
                    kw[key] = int(kw[key]) if kw[key] not in ("", None) else None
            out.append(MetricRecord(**kw))
    return out

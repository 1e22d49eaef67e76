# core/services/report_service.py
"""
Report Service - Writes every report as JSON, CSV, Markdown and HTML.

Each report kind has a versioned schema: a fixed column list with units. CSV
headers read ``key [unit]``. The JSON document carries the schema name and
version, the columns and the rows, plus free-form aggregates under ``extra``.
"""

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence

import markdown

from core.errors import DataError
from core.services.base_service import BaseService, StatusCallback
from core.services.evaluation_service import TransferReport
from core.utils import dump_json


@dataclass(frozen=True)
class Column:
    key: str
    unit: str

    @property
    def header(self) -> str:
        return f"{self.key} [{self.unit}]"


SCHEMAS: Dict[str, tuple] = {
    "clean-accuracy": (1, (Column("bits", "bits"), Column("accuracy", "fraction"))),
    "transfer": (1, (
        Column("patch_id", "id"), Column("source_bits", "bits"), Column("target_bits", "bits"),
        Column("seen", "bool"), Column("asr", "fraction"), Column("robust_accuracy", "fraction"),
    )),
    "alignment": (1, (
        Column("domain", "name"), Column("tap", "name"), Column("bits_a", "bits"), Column("bits_b", "bits"),
        Column("metric", "name"), Column("value", "similarity"),
    )),
    "ablation": (1, (
        Column("variant", "name"), Column("split", "name"), Column("cross_bit_asr", "fraction"),
        Column("asr", "fraction"), Column("mean_clean_accuracy", "fraction"),
    )),
    "sweep": (1, (
        Column("grid", "name"), Column("alpha", "weight"), Column("beta", "weight"),
        Column("lambda_fdp", "weight"), Column("lambda_gpdp", "weight"), Column("bits", "bits"),
        Column("clean_accuracy", "fraction"), Column("adv_accuracy", "fraction"),
    )),
}


def _cell(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def load_report(path: Path) -> Dict[str, Any]:
    """Read a JSON report and check it against its schema."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read report {path}: {e}") from e
    kind = doc.get("schema")
    if kind not in SCHEMAS:
        raise DataError(f"{path}: unknown report schema '{kind}'")
    version, columns = SCHEMAS[kind]
    if doc.get("schema_version") != version:
        raise DataError(f"{path}: schema '{kind}' version {doc.get('schema_version')}, expected {version}")
    if doc.get("columns") != [{"key": c.key, "unit": c.unit} for c in columns]:
        raise DataError(f"{path}: columns do not match schema '{kind}'")
    keys = [c.key for c in columns]
    for i, row in enumerate(doc.get("rows", [])):
        if sorted(row) != sorted(keys):
            raise DataError(f"{path}: row {i} keys {sorted(row)} do not match schema '{kind}'")
    return doc


class ReportService(BaseService):
    def __init__(self, out_dir: Path, status_callback: Optional[StatusCallback] = None):
        self.out_dir = Path(out_dir)
        super().__init__(status_callback)

    def write(self, name: str, kind: str, rows: Sequence[Mapping[str, Any]], title: str,
              extra: Optional[Dict[str, Any]] = None, notes: Sequence[str] = ()) -> Dict[str, Path]:
        """Write ``name``.json/.csv/.md/.html under the output directory."""
        version, columns = SCHEMAS[kind]
        keys = [c.key for c in columns]
        rows = [{k: row[k] for k in keys} for row in rows]
        self.out_dir.mkdir(parents=True, exist_ok=True)
        paths = {ext: self.out_dir / f"{name}.{ext}" for ext in ("json", "csv", "md", "html")}

        dump_json({
            "schema": kind,
            "schema_version": version,
            "columns": [{"key": c.key, "unit": c.unit} for c in columns],
            "rows": rows,
            "extra": extra or {},
        }, paths["json"])

        with open(paths["csv"], "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow([c.header for c in columns])
            for row in rows:
                writer.writerow([_cell(row[k]) for k in keys])

        md = self._markdown(title, columns, rows, notes)
        paths["md"].write_text(md, encoding="utf-8")
        body = markdown.markdown(md, extensions=["tables"])
        paths["html"].write_text(
            f"<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>{title}</title></head>\n"
            f"<body>\n{body}\n</body></html>\n",
            encoding="utf-8",
        )
        self._status(f"Wrote {kind} report to {paths['json']}")
        return paths

    @staticmethod
    def _markdown(title: str, columns: Sequence[Column], rows: Sequence[Mapping[str, Any]],
                  notes: Sequence[str]) -> str:
        lines = [f"# {title}", ""]
        lines += [f"- {n}" for n in notes]
        if notes:
            lines.append("")
        lines.append("| " + " | ".join(c.header for c in columns) + " |")
        lines.append("|" + "---|" * len(columns))
        for row in rows:
            lines.append("| " + " | ".join(_cell(row[c.key]) for c in columns) + " |")
        return "\n".join(lines) + "\n"

    # ── Report builders ─────────────────────────────────────────────────

    def clean_accuracy(self, accuracy: Mapping[int, float], name: str = "clean_accuracy") -> Dict[str, Path]:
        rows = [{"bits": b, "accuracy": a} for b, a in sorted(accuracy.items(), reverse=True)]
        return self.write(name, "clean-accuracy", rows, "Clean accuracy per bit-width")

    def transfer(self, report: TransferReport, name: str = "transfer") -> Dict[str, Path]:
        rows = [c.__dict__ for c in report.cells]
        extra = {
            "targeted": report.targeted,
            "mean_asr": [{"source_bits": s, "target_bits": t, "asr": v} for (s, t), v in report.mean_asr().items()],
            "mean_asr_unseen": [{"source_bits": s, "target_bits": t, "asr": v}
                                for (s, t), v in report.mean_asr("unseen").items()],
            "clean_accuracy": {str(b): a for b, a in report.clean_accuracy.items()},
            "target_rate": {str(b): r for b, r in report.target_rate.items()},
        }
        notes = [f"mean ASR {s}b → {t}b: {v:.3f}" for (s, t), v in report.mean_asr().items()]
        notes += [f"pre-attack target-class rate at {b}b: {r:.3f}" for b, r in report.target_rate.items()]
        return self.write(name, "transfer", rows, "Patch transfer across bit-widths", extra, notes)

    def alignment(self, report: TransferReport, name: str = "alignment") -> Dict[str, Path]:
        rows = [r.__dict__ for r in report.similarities]
        return self.write(name, "alignment", rows, "Cross-bit alignment of features and input gradients")

    def ablation(self, rows: List[Dict[str, Any]], name: str = "ablation") -> Dict[str, Path]:
        return self.write(name, "ablation", rows, "Ablation: full / w/o FDP / w/o GPDP")

    def sweep(self, rows: List[Dict[str, Any]], name: str = "sweep") -> Dict[str, Path]:
        return self.write(name, "sweep", rows, "Loss-weight sweep")

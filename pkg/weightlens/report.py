"""
Versioned JSON reports and their CSV companions.

A report is ``{"schema_version", "tool_version", "command", "config",
"seeds", "blocks"}``; each block names the operation that produced it and
the formula it used. Keys are sorted and no timestamps are written, so a
fixed configuration and seed give byte-identical files.
"""
import csv
import json
import logging
import math
import os
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


def tool_version() -> str:
    from weightlens import __version__
    return __version__


def block(operation: str, formula: str, values: Any) -> Dict[str, Any]:
    return {"operation": operation, "formula": formula, "values": values}


def build_report(command: str, config: Optional[Mapping[str, Any]], seeds: Mapping[str, int],
                 blocks: Mapping[str, Dict[str, Any]]) -> Dict[str, Any]:
    return {
        "schema_version": SCHEMA_VERSION,
        "tool_version": tool_version(),
        "command": command,
        "config": dict(config or {}),
        "seeds": dict(seeds),
        "blocks": dict(blocks),
    }


def to_jsonable(value: Any) -> Any:
    """Plain JSON types only; non-finite floats become null."""
    if isinstance(value, Mapping):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    if hasattr(value, "value") and isinstance(getattr(value, "value"), str):
        return value.value
    return value


def dumps_report(report: Mapping[str, Any]) -> str:
    return json.dumps(to_jsonable(report), indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_report(path: Union[str, os.PathLike], report: Mapping[str, Any]) -> None:
    """Write via a temporary file and rename, so readers never see half a report."""
    path = os.fspath(path)
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    text = dumps_report(report)
    tmp_path = f"{path}.partial"
    with open(tmp_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp_path, path)
    logger.info("Wrote report %s", path)


def load_report(path: Union[str, os.PathLike]) -> Dict[str, Any]:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def write_rows_csv(path: Union[str, os.PathLike], rows: Sequence[Mapping[str, Any]],
                   fieldnames: Optional[List[str]] = None) -> None:
    """
    One CSV row per mapping. Floats are written with ``repr`` so the CSV and
    the JSON report agree digit for digit.

    :param fieldnames: Column order; defaults to the keys of the first row
    """
    path = os.fspath(path)
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    fieldnames = fieldnames or (list(rows[0].keys()) if rows else [])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _cell(row.get(k, "")) for k in fieldnames})


def _cell(value: Any) -> Any:
    value = to_jsonable(value)
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, dict)):
        return json.dumps(value, sort_keys=True)
    return value

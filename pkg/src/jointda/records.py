"""Versioned CSV files.

Every file starts with a comment line ``# <schema> v<version>`` followed by the
header row. Readers check both and refuse anything that does not match.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Iterable, Mapping, Sequence

SCHEMA_VERSIONS = {"metrics": 1, "bound_report": 1, "gradcheck": 1, "bench": 1}


class SchemaError(ValueError):
    """A CSV file does not carry the expected schema tag or columns."""


def _fmt(value) -> str:
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return repr(value)  # shortest round-trip form, so re-reading is exact
    return str(value)


def write_versioned_csv(path, schema: str, columns: Sequence[str], rows: Iterable[Mapping]) -> int:
    version = SCHEMA_VERSIONS[schema]
    n = 0
    with open(Path(path), "w", newline="") as fh:
        fh.write(f"# {schema} v{version}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            extra = set(row) - set(columns)
            if extra:
                raise SchemaError(f"row has columns outside the {schema} schema: {sorted(extra)}")
            writer.writerow([_fmt(row.get(c, "")) for c in columns])
            n += 1
    return n


def read_versioned_csv(path, schema: str, columns: Sequence[str]) -> list[dict[str, str]]:
    version = SCHEMA_VERSIONS[schema]
    with open(Path(path), newline="") as fh:
        tag = fh.readline().strip()
        if tag != f"# {schema} v{version}":
            raise SchemaError(f"{path}: expected schema tag '# {schema} v{version}', found {tag!r}")
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != tuple(columns):
            raise SchemaError(f"{path}: columns {header} do not match the {schema} schema {list(columns)}")
        return [dict(zip(columns, row)) for row in reader]

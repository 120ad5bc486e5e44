"""Schema versions carried by every output file."""
from __future__ import annotations

from .errors import DataError

SCHEMA_VERSION = "1.0"


def check_version(doc: dict, kind: str, source: str = "") -> None:
    """Refuse documents without a version or with an unknown major version."""
    where = f" in {source}" if source else ""
    v = doc.get("schema_version") if isinstance(doc, dict) else None
    if v is None:
        raise DataError(f"{kind}{where} has no schema_version field")
    major = str(v).split(".")[0]
    if major != SCHEMA_VERSION.split(".")[0]:
        raise DataError(f"{kind}{where} has schema_version {v}; this reader understands {SCHEMA_VERSION}")

"""Reading and writing record files, ground truth, weights and report tables.

Record files are JSON lines. The first line is a header::

    {"schema_version": "1.0", "kind": "records", "registers": [...],
     "first_year": 2000, "n_years": 10}

and every further line is one individual::

    {"id": "a1", "entry_year": 2003, "covariates": {"sex": "female", "age": 41},
     "observations": [[2003, 5], [2004, 5], ...]}

Category codes put the register bitmask in bits 0..K-1 and the event flag in
bits K..K+1 (0 none, 1 emigration, 2 death, 3 re-immigration). A CSV long
format with columns ``id, year, category`` plus one column per stored
covariate is converted on ingest.

CSV outputs start with a ``# schema_version=...`` comment line.
"""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError
from .model import ModelSpec
from .population import PopulationSeries
from .records import Record, validate_record
from .schema import SCHEMA_VERSION, check_version
from .simulator import GroundTruth

MAX_LISTED = 20


def _header(kind: str, spec: ModelSpec, **extra) -> dict:
    return {"schema_version": SCHEMA_VERSION, "kind": kind, "registers": list(spec.registers),
            "first_year": spec.first_year, "n_years": spec.n_years, **extra}


def _dump(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def _check_header(doc, kind: str, spec: ModelSpec, source: str):
    check_version(doc, kind, source)
    if doc.get("kind") != kind.replace(" ", "_"):
        raise DataError(f"{source}: expected a {kind} file, found kind {doc.get('kind')!r}")
    if list(doc.get("registers", [])) != list(spec.registers):
        raise DataError(f"{source}: file registers {doc.get('registers')} do not match "
                        f"the configured registers {list(spec.registers)}")
    if doc.get("first_year") != spec.first_year or doc.get("n_years") != spec.n_years:
        raise DataError(f"{source}: study window {doc.get('first_year')}+{doc.get('n_years')} does not "
                        f"match the configured {spec.first_year}+{spec.n_years}")


# ---------------------------------------------------------------------------
# records


def write_records(path, records: Sequence[Record], spec: ModelSpec) -> None:
    lines = [_dump(_header("records", spec))]
    for r in records:
        lines.append(_dump({"id": r.id, "entry_year": r.entry_year, "covariates": dict(r.covariates),
                            "observations": [[y, c] for y, c in r.observations()]}))
    Path(path).write_text("\n".join(lines) + "\n")


def _from_wire(doc, spec: ModelSpec) -> tuple[Record | None, str | None, str]:
    """Convert one wire document; returns (record, problem, id)."""
    rid = str(doc.get("id", "?")) if isinstance(doc, dict) else "?"
    try:
        entry = int(doc["entry_year"])
        obs = doc["observations"]
        cov = doc.get("covariates", {})
        if not isinstance(cov, dict):
            return None, "covariates must be a mapping", rid
        years = [int(o[0]) for o in obs]
        codes = [int(o[1]) for o in obs]
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        return None, f"malformed record ({exc.__class__.__name__}: {exc})", rid
    expected = list(range(entry, spec.last_year + 1))
    if years != expected:
        if len(set(years)) != len(years):
            return None, "duplicate observation years", rid
        missing = sorted(set(expected) - set(years))
        if missing:
            return None, f"observation years must run from {entry} to {spec.last_year} without gaps (missing {missing[0]})", rid
        return None, f"observation years must run consecutively from {entry} to {spec.last_year}", rid
    return Record(rid, entry, cov, codes), None, rid


def _collect(docs: Iterable[tuple[int, object]], spec: ModelSpec, source: str) -> list[Record]:
    records, problems, seen = [], [], set()
    for line_no, doc in docs:
        rec, msg, rid = _from_wire(doc, spec)
        if rec is not None:
            msg = validate_record(rec, spec)
            if msg is None and rid in seen:
                msg = "duplicate record id"
        seen.add(rid)
        if msg:
            problems.append((rid, line_no, msg))
        elif rec is not None:
            records.append(rec)
    if problems:
        shown = "; ".join(f"{rid} (line {ln}): {m}" for rid, ln, m in problems[:MAX_LISTED])
        more = f" (first {MAX_LISTED} shown)" if len(problems) > MAX_LISTED else ""
        raise DataError(f"{source}: {len(problems)} invalid record(s){more}: {shown}")
    if not records:
        raise DataError(f"{source}: no records")
    return records


def read_records(path, spec: ModelSpec) -> list[Record]:
    """Read and validate a JSON-lines or CSV long-format record file."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"data file {path} not found")
    if path.suffix.lower() == ".csv":
        return read_records_csv(path, spec)
    source = str(path)

    def docs():
        with open(path) as fh:
            header_seen = False
            for k, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    doc = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataError(f"{source}:{k}: not valid JSON ({exc.msg})") from None
                if not header_seen:
                    _check_header(doc, "records", spec, source)
                    header_seen = True
                    continue
                yield k, doc
            if not header_seen:
                raise DataError(f"{source}: empty record file")

    return _collect(docs(), spec, source)


def read_records_csv(path, spec: ModelSpec) -> list[Record]:
    """Long format: one row per person-year with id, year, category and covariate columns."""
    source = str(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(row for row in fh if not row.startswith("#"))
        need = {"id", "year", "category"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise DataError(f"{source}: CSV needs columns {sorted(need)}, found {reader.fieldnames}")
        cov_cols = [c for c in reader.fieldnames if c not in need]
        rows: dict[str, list] = {}
        first_line: dict[str, int] = {}
        for k, row in enumerate(reader, start=2):
            rid = row["id"]
            first_line.setdefault(rid, k)
            rows.setdefault(rid, []).append(row)
    dims = {d.name: d for d in spec.scheme.dimensions}
    docs = []
    for rid, rs in rows.items():
        try:
            rs = sorted(rs, key=lambda r: int(r["year"]))
            obs = [[int(r["year"]), int(r["category"])] for r in rs]
        except ValueError:
            docs.append((first_line[rid], {"id": rid, "entry_year": None}))
            continue
        cov = {}
        for c in cov_cols:
            v = rs[0][c]
            d = dims.get(c)
            cov[c] = int(v) if d is not None and d.kind == "age" and v.strip().lstrip("-").isdigit() else v
        docs.append((first_line[rid], {"id": rid, "entry_year": obs[0][0], "covariates": cov,
                                       "observations": obs}))
    return _collect(docs, spec, source)


# ---------------------------------------------------------------------------
# ground truth and weights


def write_truth(path, truth: GroundTruth, spec: ModelSpec, params: np.ndarray) -> None:
    """Sidecar with true states (1-based), groups (1-based) and parameters."""
    lines = [_dump(_header("ground_truth", spec, parameters=dict(zip(spec.param_names, map(float, params)))))]
    for i, rid in enumerate(truth.ids):
        t0 = int(truth.entry[i])
        lines.append(_dump({"id": rid, "group": int(truth.groups[i]) + 1,
                            "states": [int(s) + 1 for s in truth.states[i, t0:]]}))
    Path(path).write_text("\n".join(lines) + "\n")


def read_truth_states(path, spec: ModelSpec) -> tuple[list[str], np.ndarray, np.ndarray]:
    """(ids, (n, T) 0-based states with -1 before entry, 0-based groups)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"ground-truth file {path} not found")
    lines = path.read_text().splitlines()
    _check_header(json.loads(lines[0]), "ground truth", spec, str(path))
    ids, groups = [], []
    states = np.full((len(lines) - 1, spec.n_years), -1, dtype=np.int64)
    for i, line in enumerate(lines[1:]):
        doc = json.loads(line)
        ids.append(doc["id"])
        groups.append(doc["group"] - 1)
        st = doc["states"]
        states[i, spec.n_years - len(st):] = np.asarray(st) - 1
    return ids, states, np.asarray(groups)


def read_weights(path, ids: Sequence[str]) -> np.ndarray:
    """Non-negative per-record weights from a CSV with columns id, weight."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"weights file {path} not found")
    with open(path, newline="") as fh:
        reader = csv.DictReader(row for row in fh if not row.startswith("#"))
        if reader.fieldnames is None or not {"id", "weight"} <= set(reader.fieldnames):
            raise DataError(f"{path}: weights CSV needs columns id and weight")
        got = {}
        for k, row in enumerate(reader, start=2):
            try:
                w = float(row["weight"])
            except ValueError:
                raise DataError(f"{path}:{k}: weight {row['weight']!r} is not a number") from None
            if not np.isfinite(w) or w < 0:
                raise DataError(f"{path}:{k}: weight for {row['id']} must be finite and non-negative")
            got[row["id"]] = w
    missing = [i for i in ids if i not in got]
    extra = sorted(set(got) - set(ids))
    if missing or extra:
        bad = (missing + extra)[:MAX_LISTED]
        raise DataError(f"{path}: weights must cover exactly the records "
                        f"({len(missing)} missing, {len(extra)} unknown; e.g. {bad})")
    return np.array([got[i] for i in ids])


# ---------------------------------------------------------------------------
# tables


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence], kind: str) -> None:
    buf = io.StringIO()
    buf.write(f"# schema_version={SCHEMA_VERSION} kind={kind}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    Path(path).write_text(buf.getvalue())


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return "" if not np.isfinite(v) else repr(float(v))
    return v


def read_csv(path) -> tuple[dict, list[dict]]:
    """Rows of a CSV written by ``write_csv`` after checking its schema line."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"table {path} not found")
    text = path.read_text().splitlines()
    if not text or not text[0].startswith("#"):
        raise DataError(f"{path}: missing schema line")
    meta = dict(kv.split("=", 1) for kv in text[0][1:].split())
    check_version(meta, "table", str(path))
    return meta, list(csv.DictReader(text[1:]))


def write_population(path, series: PopulationSeries) -> None:
    d = series.as_dict()
    cols = ["present", "abroad_known", "abroad_unknown", "dead"]
    header = ["Year", "Present", "AbroadKnown", "AbroadUnknown", "Dead"]
    if series.registered is not None:
        cols += ["registered", "overcoverage"]
        header += ["Registered", "Overcoverage"]
    rows = [[y] + [d[c][t] for c in cols] for t, y in enumerate(d["year"])]
    write_csv(path, header, rows, "population_series")


def write_trajectories(path, trajectories, spec: ModelSpec) -> None:
    lines = [_dump(_header("trajectories", spec))]
    for tr in trajectories:
        lines.append(_dump({"id": tr.id, "entry_year": tr.entry_year, "states": list(tr.state_ids),
                            "group": tr.group, "log_score": tr.log_score}))
    Path(path).write_text("\n".join(lines) + "\n")

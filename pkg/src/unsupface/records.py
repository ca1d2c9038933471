"""Line-delimited JSON and CSV helpers with provenance headers."""

import csv
import hashlib
import io
import json
from pathlib import Path

PROVENANCE_KEY = "provenance"


def config_hash(cfg):
    """Short, stable hash of a JSON-serialisable config."""
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def provenance(stage, seed, cfg):
    return {"stage": stage, "seed": seed, "config_hash": config_hash(cfg)}


def dumps(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_jsonl(path, rows, header=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if header is not None:
            fh.write(dumps({PROVENANCE_KEY: header}) + "\n")
        for row in rows:
            fh.write(dumps(row) + "\n")


def iter_jsonl(path):
    """Yield ``(line_number, record)``; provenance and blank lines are skipped."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if PROVENANCE_KEY in rec and len(rec) == 1:
                continue
            yield lineno, rec


def read_header(path):
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().strip()
    if first.startswith("#"):
        return json.loads(first.split(":", 1)[1])
    if first:
        rec = json.loads(first)
        if PROVENANCE_KEY in rec:
            return rec[PROVENANCE_KEY]
    return None


def write_csv(path, fieldnames, rows, header=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    if header is not None:
        buf.write("# provenance: " + dumps(header) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(fieldnames)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    path.write_text(buf.getvalue(), encoding="utf-8")


def read_csv(path):
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def write_json(path, obj, header=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = dict(obj)
    if header is not None:
        doc = {PROVENANCE_KEY: header, **doc}
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v

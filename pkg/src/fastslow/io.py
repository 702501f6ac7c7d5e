"""Path exports (CSV, AVLB binary) and tidy report writers."""

import csv
import hashlib
import json
import struct

import numpy as np

from .errors import SpecError

AVLB_MAGIC = b"AVLB"
AVLB_VERSION = 1
_HEADER = struct.Struct("<4sIIQ")


def write_path_csv(path, values):
    """Columns ``n, xi_1 .. xi_d``; values written with full round-trip precision."""
    values = np.atleast_2d(np.asarray(values, dtype=float).T).T
    d = values.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n"] + [f"xi_{i + 1}" for i in range(d)])
        for n, row in enumerate(values):
            w.writerow([n] + [repr(float(v)) for v in row])


def read_path_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if not header or header[0] != "n":
        raise SpecError("path CSV must start with an 'n' column")
    return np.array([[float(v) for v in r[1:]] for r in body]).reshape(len(body), len(header) - 1)


def write_avlb(path, values):
    """Header ``magic, version, d, n`` then ``n * d`` little-endian float64 values."""
    values = np.atleast_2d(np.asarray(values, dtype=float).T).T
    n, d = values.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(AVLB_MAGIC, AVLB_VERSION, d, n))
        fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def read_avlb(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise SpecError("truncated AVLB header")
    magic, version, d, n = _HEADER.unpack_from(raw)
    if magic != AVLB_MAGIC:
        raise SpecError("not an AVLB file")
    if version != AVLB_VERSION:
        raise SpecError(f"unsupported AVLB version {version}")
    body = raw[_HEADER.size:]
    if len(body) != 8 * n * d:
        raise SpecError("AVLB payload length does not match its header")
    return np.frombuffer(body, dtype="<f8").reshape(n, d).copy()


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def sha256_hex(obj):
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def git_blob_sha1(content):
    """Content address in git's blob format: ``sha1(b"blob <len>\\0" + content)``."""
    data = content.encode() if isinstance(content, str) else bytes(content)
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def flatten(record, prefix=""):
    """Nested dicts/lists to dotted keys with scalar leaves."""
    out = {}
    if isinstance(record, dict):
        for k, v in record.items():
            out.update(flatten(v, f"{prefix}{k}."))
    elif isinstance(record, (list, tuple, np.ndarray)):
        for i, v in enumerate(record):
            out.update(flatten(v, f"{prefix}{i}."))
    else:
        out[prefix[:-1]] = _jsonable(record) if isinstance(record, (np.floating, np.integer)) else record
    return out


def tidy_rows(experiment, scale, record, extra):
    """One ``(experiment, scale, statistic, value)`` row per scalar leaf of ``record``."""
    return [dict(experiment=experiment, scale=scale, statistic=k, value=v, **extra)
            for k, v in flatten(record).items()]


def write_json(path, document):
    with open(path, "w") as fh:
        fh.write(json.dumps(document, sort_keys=True, indent=2, default=_jsonable))
        fh.write("\n")


def write_tidy_csv(path, rows):
    fields = ["experiment", "scale", "statistic", "value", "config_hash", "registry_blob"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})

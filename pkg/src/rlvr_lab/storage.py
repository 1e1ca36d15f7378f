"""Policy checkpoints and metric streams on disk.

Checkpoint layout (little-endian)::

    8 bytes   magic  b"RLVRCKPT"
    4 bytes   format version (uint32)
    4 bytes   header length n (uint32)
    n bytes   JSON header: kind, feature_dim, vocab_size, max_len, step, sha256
    rest      params as float64, C order

The header is written with sorted keys so identical policies give identical
bytes.
"""

import csv
import hashlib
import io
import json
import os
import struct

import numpy as np

from rlvr_lab import policy as pol

MAGIC = b"RLVRCKPT"
CKPT_VERSION = 1
METRICS_SCHEMA_VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(policy, step=0, extra=None):
    data = np.ascontiguousarray(policy.params, dtype="<f8").tobytes()
    header = {
        "kind": policy.kind,
        "feature_dim": policy.feature_dim,
        "vocab_size": policy.vocab_size,
        "max_len": policy.max_len,
        "step": int(step),
        "sha256": hashlib.sha256(data).hexdigest(),
    }
    if extra:
        header["extra"] = extra
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<II", CKPT_VERSION, len(hb)) + hb + data


def parse_checkpoint(blob):
    """Returns ``(policy, header)``."""
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise CheckpointError("not a policy checkpoint (bad magic)")
    version, n = struct.unpack("<II", blob[8:16])
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(blob[16 : 16 + n])
    except ValueError as exc:
        raise CheckpointError("corrupt checkpoint header") from exc
    data = blob[16 + n :]
    if hashlib.sha256(data).hexdigest() != header.get("sha256"):
        raise CheckpointError("checkpoint payload does not match its checksum")
    shell = pol.SoftmaxPolicy(header["kind"], header["feature_dim"], header["vocab_size"], header["max_len"])
    params = np.frombuffer(data, dtype="<f8")
    if params.size != shell.params.size:
        raise CheckpointError("checkpoint payload size does not match its header")
    return shell.with_params(params.reshape(shell.params.shape).astype(np.float64)), header


def _atomic_write(path, blob):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def save_checkpoint(path, policy, step=0, extra=None):
    _atomic_write(path, checkpoint_bytes(policy, step, extra))
    return path


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


def write_json(path, obj):
    _atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


# metric streams


def metric_line(record):
    return json.dumps(record, sort_keys=True, separators=(",", ":"), allow_nan=False)


def metric_lines(record, meta=None):
    """One line per metric: ``{"step", "metric", "value", "meta"}``, metrics in sorted order.
    String-valued fields of ``record`` travel in ``meta``."""
    meta = dict(meta or {})
    meta.update({k: v for k, v in record.items() if isinstance(v, str)})
    step = record["step"]
    return "".join(
        metric_line({"step": step, "metric": k, "value": record[k], "meta": meta}) + "\n"
        for k in sorted(record)
        if k != "step" and not isinstance(record[k], str)
    )


def read_metrics(path):
    """Per-step records (metric -> value, plus metadata) rebuilt from a
    long-format JSONL stream whose first line is the schema header."""
    out = []
    if not os.path.exists(path):
        return out
    with open(path) as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if i == 0 and "schema_version" in rec and "step" not in rec:
                if rec["schema_version"] != METRICS_SCHEMA_VERSION:
                    raise CheckpointError(f"unsupported metrics schema {rec['schema_version']!r}")
                continue
            if not out or out[-1]["step"] != rec["step"]:
                out.append({"step": rec["step"]})
            out[-1].update(rec.get("meta") or {})
            out[-1][rec["metric"]] = rec["value"]
    return out


def wide_csv(records):
    """All records as one CSV table, columns sorted with ``step`` first."""
    cols = sorted({k for r in records for k in r} - {"step"})
    cols = ["step"] + cols if records else ["step"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in records:
        w.writerow(["" if r.get(c) is None else _fmt(r[c]) for c in cols])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)

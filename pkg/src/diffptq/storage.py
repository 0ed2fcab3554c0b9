"""On-disk formats.

Everything is UTF-8 text so that identical runs give byte-identical files.
Floats are written with ``repr`` (shortest round-trip form). Each file
carries the config hash and the tool version.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from . import __version__
from .diffusion import NoiseSchedule
from .errors import InvalidArgumentError, NotFoundError
from .fakequant import ActQuantTable, QuantizedDenoiser
from .model import build_model
from .quant import QuantParams

CHECKPOINT = "checkpoint.json"
TRAIN_LOG = "train_log.csv"
WEIGHTS = "quantized_weights.json"
TABLE = "act_table.csv"
CALIB_LOG = "calib_log.csv"


def provenance(config_hash: str) -> dict:
    return {"config_hash": config_hash, "tool_version": __version__}


def _array(a) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": [float(v) for v in a.ravel()]}


def _unarray(d) -> np.ndarray:
    return np.array(d["data"], dtype=np.float64).reshape(d["shape"])


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _read(path: Path, what: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise NotFoundError(f"{what} not found: {path}") from None


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="")
    return path


def csv_text(header, rows, meta: dict | None = None) -> str:
    """Comment lines ``# key=value``, then a CSV header and rows."""
    buf = io.StringIO()
    for k, v in (meta or {}).items():
        buf.write(f"# {k}={v}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def read_csv(path) -> tuple[dict, list[dict]]:
    meta, body = {}, []
    for line in _read(path, "table").splitlines():
        if line.startswith("#"):
            key, sep, value = line[1:].strip().partition("=")
            if sep:
                meta[key.strip()] = value.strip()
        elif line:
            body.append(line)
    return meta, list(csv.DictReader(body))


# -- model checkpoint ------------------------------------------------------


def save_checkpoint(path, model, sched: NoiseSchedule, config_hash: str) -> Path:
    doc = {
        "format": "diffptq-checkpoint/1",
        **provenance(config_hash),
        "model": model.config,
        "schedule": {"beta": [float(b) for b in sched.beta]},
        "params": {k: _array(v) for k, v in model.params.items()},
    }
    return write_text(path, _dump_json(doc))


def load_checkpoint(path):
    """Returns ``(model, schedule, meta)``."""
    doc = json.loads(_read(path, "checkpoint"))
    if doc.get("format") != "diffptq-checkpoint/1":
        raise InvalidArgumentError(f"{path}: not a diffptq checkpoint")
    model = build_model(doc["model"], {k: _unarray(v) for k, v in doc["params"].items()})
    sched = NoiseSchedule(np.array(doc["schedule"]["beta"], dtype=np.float64))
    return model, sched, {k: doc[k] for k in ("config_hash", "tool_version")}


# -- quantized weights and activation table --------------------------------


def save_quantized_weights(path, qm: QuantizedDenoiser, config_hash: str, weight_bits) -> Path:
    doc = {
        "format": "diffptq-qweights/1",
        **provenance(config_hash),
        "weight_bits": weight_bits,
        "weight_params": {layer: q.to_record() for layer, q in qm.weight_params.items()},
        "qweights": {k: _array(v) for k, v in qm.qweights.items()},
    }
    return write_text(path, _dump_json(doc))


def load_quantized_weights(path) -> tuple[dict, dict, dict]:
    """Returns ``(weight_params, qweights, meta)``."""
    doc = json.loads(_read(path, "quantized weights"))
    params = {layer: QuantParams.from_record(rec) for layer, rec in doc["weight_params"].items()}
    qweights = {k: _unarray(v) for k, v in doc["qweights"].items()}
    meta = {k: doc[k] for k in ("config_hash", "tool_version", "weight_bits")}
    return params, qweights, meta


def save_table(path, table: ActQuantTable, config_hash: str, extra: dict | None = None) -> Path:
    return write_text(path, table.to_text({**provenance(config_hash), **(extra or {})}))


def load_table(path) -> tuple[ActQuantTable, dict]:
    return ActQuantTable.from_text(_read(path, "activation table"))


def load_quantized_model(model, run_dir) -> tuple[QuantizedDenoiser, dict]:
    run_dir = Path(run_dir)
    params, qweights, wmeta = load_quantized_weights(run_dir / WEIGHTS)
    table, tmeta = load_table(run_dir / TABLE)
    qm = QuantizedDenoiser(model, params, qweights, table, weights_enabled=bool(qweights))
    return qm, {"weights": wmeta, "table": tmeta}

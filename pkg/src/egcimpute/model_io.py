"""Versioned text serialization of fitted copula models.

The file is JSON: floats are written with ``repr`` precision so a reload
reproduces every parameter bit for bit.  Non-finite locations of merged
categories use the JSON extensions ``Infinity``/``-Infinity``.  Leading
lines starting with ``#`` are comments.
"""
from __future__ import annotations

import json
from collections import deque
from pathlib import Path

import numpy as np

from .data_model import VariableSchema
from .em_fit import CopulaModel, LowRankParams
from .marginals import marginal_from_dict

FORMAT_NAME = "egcimpute-model"
FORMAT_VERSION = 1


class ModelFileError(ValueError):
    pass


def _plain(obj):
    """Recursively turn numpy containers and scalars into JSON-ready values."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, deque)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    return obj


def model_to_dict(model: CopulaModel) -> dict:
    info = {k: v for k, v in model.info.items() if k not in ("timing", "generator")}
    out = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "schema_hash": model.schema.hash(),
        "schema": model.schema.to_text(),
        "marginals": [m.to_dict() for m in model.marginals],
        "sigma": _plain(model.sigma),
        "lowrank": None,
        "windows": None,
        "info": _plain(info),
    }
    if model.lowrank is not None:
        out["lowrank"] = {"W": _plain(model.lowrank.W), "sigma2": float(model.lowrank.sigma2)}
    if model.windows is not None:
        out["windows"] = {"size": model.windows[0].maxlen if model.windows else None,
                          "values": [_plain(w) for w in model.windows]}
    return out


def model_from_dict(data: dict) -> CopulaModel:
    if data.get("format") != FORMAT_NAME:
        raise ModelFileError("not a model file")
    if data.get("version") != FORMAT_VERSION:
        raise ModelFileError(f"unsupported model file version {data.get('version')!r}")
    schema = VariableSchema.from_text(data["schema"])
    if schema.hash() != data["schema_hash"]:
        raise ModelFileError("schema hash mismatch")
    marginals = [marginal_from_dict(m) for m in data["marginals"]]
    lowrank = None
    if data.get("lowrank") is not None:
        lowrank = LowRankParams(np.array(data["lowrank"]["W"], dtype=float), float(data["lowrank"]["sigma2"]))
    windows = None
    if data.get("windows") is not None:
        size = data["windows"]["size"]
        windows = [deque(v, maxlen=size) for v in data["windows"]["values"]]
    return CopulaModel(schema, marginals, np.array(data["sigma"], dtype=float), lowrank, windows,
                       dict(data.get("info", {})))


def dumps(model: CopulaModel, comment: str | None = None) -> str:
    head = f"# {comment}\n" if comment else ""
    return head + json.dumps(model_to_dict(model), indent=1, sort_keys=True) + "\n"


def loads(text: str) -> CopulaModel:
    lines = text.splitlines(keepends=True)
    while lines and lines[0].startswith("#"):
        lines.pop(0)
    try:
        data = json.loads("".join(lines))
    except json.JSONDecodeError as exc:
        raise ModelFileError(f"malformed model file: {exc}") from None
    return model_from_dict(data)


def save_model(model: CopulaModel, path, comment: str | None = None) -> None:
    Path(path).write_text(dumps(model, comment))


def load_model(path) -> CopulaModel:
    return loads(Path(path).read_text())

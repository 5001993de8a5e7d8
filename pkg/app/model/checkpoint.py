"""
Checkpoint format (little-endian):

    b"COXMTCKP"              magic
    uint32                   format version
    uint64                   header length
    header                   UTF-8 JSON: model spec, pair config, parameter names/shapes, extras
    float64[...]             student parameters, header order, C order
    float64[...]             teacher parameters, same order

A JSON manifest with the shapes and hyperparameters is written next to it.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np
from pydantic import TypeAdapter

from app.errors import IngestionFormatError
from app.logging_utils import get_logger
from app.model.pair import StudentTeacherPair, init_model, load_params
from app.model.schemas import ModelSpec, PairConfig

logger = get_logger("Checkpoint")

MAGIC = b"COXMTCKP"
FORMAT_VERSION = 1

_spec_adapter = TypeAdapter(ModelSpec)


def _header(pair: StudentTeacherPair, extra: Optional[Dict[str, Any]]) -> Dict[str, Any]:
    return {
        "format_version": FORMAT_VERSION,
        "spec": pair.spec.model_dump(),
        "pair_config": pair.config.model_dump(),
        "parameters": [{"name": k, "shape": list(v.shape)} for k, v in pair.student.items()],
        "extra": extra or {},
    }


def save_checkpoint(pair: StudentTeacherPair, path: str | Path,
                    extra: Optional[Dict[str, Any]] = None) -> Tuple[Path, Path]:
    """extra carries run hyperparameters such as the consistency weight w."""
    pair.check_congruent()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _header(pair, extra)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for params in (pair.student, pair.teacher):
            for p in params.values():
                fh.write(np.ascontiguousarray(p.values, dtype="<f8").tobytes())

    manifest = path.with_suffix(path.suffix + ".json")
    manifest_doc = {
        "checkpoint": path.name,
        "format_version": FORMAT_VERSION,
        "model_kind": header["spec"]["kind"],
        "alpha": pair.config.alpha,
        "noise_sigma": pair.config.noise_sigma,
        "student_dropout": pair.config.student_dropout,
        "teacher_dropout": pair.config.teacher_dropout,
        "shapes": {p["name"]: p["shape"] for p in header["parameters"]},
        "run": header["extra"],
    }
    manifest.write_text(json.dumps(manifest_doc, indent=2, sort_keys=True), encoding="utf-8")
    logger.info(f"saved checkpoint {path} ({pair.n_parameters()} parameters)")
    return path, manifest


def load_checkpoint(path: str | Path) -> Tuple[StudentTeacherPair, Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise IngestionFormatError("checkpoint not found", path=str(path))
    raw = path.read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise IngestionFormatError("not a checkpoint file", path=str(path))
    offset = len(MAGIC)
    version, header_len = struct.unpack_from("<IQ", raw, offset)
    if version != FORMAT_VERSION:
        raise IngestionFormatError(f"unsupported checkpoint version {version}", path=str(path))
    offset += struct.calcsize("<IQ")
    header = json.loads(raw[offset: offset + header_len].decode("utf-8"))
    offset += header_len

    spec = _spec_adapter.validate_python(header["spec"])
    pair = init_model(spec, seed=0, config=PairConfig(**header["pair_config"]))

    def _read_block(off: int) -> Tuple[Dict[str, np.ndarray], int]:
        arrays = {}
        for entry in header["parameters"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            end = off + 8 * count
            if end > len(raw):
                raise IngestionFormatError("checkpoint truncated", path=str(path))
            arrays[entry["name"]] = np.frombuffer(raw[off:end], dtype="<f8").reshape(shape).astype(float)
            off = end
        return arrays, off

    student, offset = _read_block(offset)
    teacher, offset = _read_block(offset)
    if offset != len(raw):
        raise IngestionFormatError("trailing bytes after checkpoint payload", path=str(path))
    load_params(pair.student, student)
    load_params(pair.teacher, teacher)
    return pair, header["extra"]

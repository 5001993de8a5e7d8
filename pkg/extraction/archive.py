"""
Dataset archives: one .npz with the arrays plus a JSON report next to it.

The archive hash is a SHA-256 over the arrays in a fixed key order (dtype,
shape and raw little-endian bytes), so identical content gives an identical
hash whatever the zip container's timestamps are.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from app.errors import IngestionFormatError
from app.logging_utils import get_logger
from extraction.expression_pipeline import write_clinical_csv, write_expression_csv
from extraction.schemas import (
    ClinicalRecord,
    ExpressionMatrix,
    IngestionReport,
    PatchFeatureSet,
    SampleStatus,
    SurvivalDataset,
)

logger = get_logger("Archive")

ARCHIVE_VERSION = 1


def _to_arrays(ds: SurvivalDataset, beta: Optional[np.ndarray] = None) -> Dict[str, np.ndarray]:
    arrays = {
        "version": np.array([ARCHIVE_VERSION], dtype=np.int64),
        "sample_ids": np.array(ds.sample_ids, dtype=str),
        "feature_ids": np.array(ds.feature_ids, dtype=str),
        "features": np.ascontiguousarray(ds.features, dtype=np.float64),
        "times": np.ascontiguousarray(ds.times, dtype=np.float64),
        "status": np.ascontiguousarray(ds.status, dtype=np.int8),
    }
    if ds.teacher_features is not None:
        arrays["teacher_features"] = np.ascontiguousarray(ds.teacher_features, dtype=np.float64)
    if ds.patches is not None:
        counts = np.array([p.n_patches for p in ds.patches], dtype=np.int64)
        arrays["patch_offsets"] = np.concatenate([[0], np.cumsum(counts)])
        arrays["patch_rows"] = np.vstack([p.patch_features for p in ds.patches]).astype(np.float64)
        if all(p.augmented_patch_features is not None for p in ds.patches):
            arrays["patch_augmented"] = np.vstack([p.augmented_patch_features for p in ds.patches]).astype(np.float64)
    if beta is not None:
        arrays["beta"] = np.asarray(beta, dtype=np.float64)
    return arrays


def content_hash(arrays: Dict[str, np.ndarray]) -> str:
    digest = hashlib.sha256()
    for key in sorted(arrays):
        a = np.ascontiguousarray(arrays[key])
        if a.dtype.kind == "U":
            payload = "\x1f".join(a.tolist()).encode("utf-8")
            dtype = "str"
        else:
            payload = a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes()
            dtype = a.dtype.str
        digest.update(f"{key}|{dtype}|{a.shape}|".encode("utf-8"))
        digest.update(payload)
    return digest.hexdigest()


def dataset_hash(ds: SurvivalDataset, beta: Optional[np.ndarray] = None) -> str:
    return content_hash(_to_arrays(ds, beta))


def save_dataset(ds: SurvivalDataset, path: str | Path, report: Optional[IngestionReport] = None,
                 beta: Optional[np.ndarray] = None) -> str:
    """Writes <path>.npz and <path>.report.json; returns the archive hash."""
    path = Path(path).with_suffix(".npz")
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = _to_arrays(ds, beta)
    digest = content_hash(arrays)
    np.savez(path, **arrays)

    report = report or IngestionReport(status_counts=ds.status_counts())
    document = {"archive": path.name, "sha256": digest, "n_samples": ds.n_samples, "d": ds.dim,
                "has_patches": ds.patches is not None, **report.model_dump()}
    report_path(path).write_text(json.dumps(document, indent=2, sort_keys=True), encoding="utf-8")
    logger.info(f"wrote {path} ({ds.n_samples} samples, sha256 {digest[:12]})")
    return digest


def report_path(archive: str | Path) -> Path:
    archive = Path(archive)
    return archive.with_name(archive.stem + ".report.json")


def load_dataset(path: str | Path) -> Tuple[SurvivalDataset, Optional[np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise IngestionFormatError("dataset archive not found", path=str(path))
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {key: data[key] for key in data.files}
    except (OSError, ValueError) as exc:
        raise IngestionFormatError(f"unreadable dataset archive: {exc}", path=str(path)) from None

    for key in ("version", "sample_ids", "features", "times", "status"):
        if key not in arrays:
            raise IngestionFormatError(f"archive lacks '{key}'", path=str(path))
    if int(arrays["version"][0]) != ARCHIVE_VERSION:
        raise IngestionFormatError(f"unsupported archive version {int(arrays['version'][0])}", path=str(path))

    sample_ids = tuple(str(s) for s in arrays["sample_ids"])
    patches = None
    if "patch_offsets" in arrays:
        offsets = arrays["patch_offsets"]
        rows = arrays["patch_rows"]
        augmented = arrays.get("patch_augmented")
        patches = tuple(
            PatchFeatureSet(
                sample_id=sid,
                patch_features=rows[offsets[i]:offsets[i + 1]],
                augmented_patch_features=None if augmented is None else augmented[offsets[i]:offsets[i + 1]],
            )
            for i, sid in enumerate(sample_ids)
        )
    ds = SurvivalDataset(
        sample_ids=sample_ids,
        features=arrays["features"],
        times=arrays["times"],
        status=arrays["status"].astype(np.int8),
        feature_ids=tuple(str(g) for g in arrays.get("feature_ids", np.array([], dtype=str))),
        teacher_features=arrays.get("teacher_features"),
        patches=patches,
    )
    return ds, arrays.get("beta")


def export_dataset_csv(ds: SurvivalDataset, directory: str | Path) -> Dict[str, Path]:
    """Expression CSV, clinical CSV and unlabeled id list that ingest back to the same arrays."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    feature_ids = ds.feature_ids or tuple(f"f{j}" for j in range(ds.dim))
    matrix = ExpressionMatrix(sample_ids=ds.sample_ids, gene_ids=feature_ids, values=ds.features)
    paths = {"expression": write_expression_csv(matrix, directory / "expression.csv")}
    records = [
        ClinicalRecord(sample_id=sid, time=float(ds.times[i]), status=status)
        for i, (sid, status) in enumerate(zip(ds.sample_ids, ds.statuses()))
        if status != SampleStatus.UNLABELED
    ]
    paths["clinical"] = write_clinical_csv(records, directory / "clinical.csv")
    unlabeled = [sid for sid, status in zip(ds.sample_ids, ds.statuses()) if status == SampleStatus.UNLABELED]
    paths["unlabeled"] = directory / "unlabeled_ids.txt"
    paths["unlabeled"].write_text("".join(f"{sid}\n" for sid in unlabeled), encoding="utf-8")
    return paths

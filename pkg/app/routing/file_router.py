from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Tuple


class FeatureFileFormat(str, Enum):
    NPY = "npy"        # binary float matrix
    CSV = "csv"        # comma-separated, no header
    UNKNOWN = "unknown"


# augmented sibling suffixes: <id>.aug.npy, <id>_aug.csv
AUGMENTED_MARKERS = (".aug", "_aug")


@dataclass
class RoutedFile:
    format: FeatureFileFormat
    path: Path
    sample_id: str
    augmented: bool = False
    reason: Optional[str] = None  # debug için açıklama


def _infer_format(name: str) -> Tuple[FeatureFileFormat, str]:
    name = name.lower()
    if name.endswith(".npy"):
        return FeatureFileFormat.NPY, "extension:npy"
    if name.endswith((".csv", ".txt")):
        return FeatureFileFormat.CSV, "extension:csv"
    return FeatureFileFormat.UNKNOWN, "fallback:unknown"


def _split_sample_id(stem: str) -> Tuple[str, bool]:
    for marker in AUGMENTED_MARKERS:
        if stem.endswith(marker):
            return stem[: -len(marker)], True
    return stem, False


def route_feature_file(path: str | Path) -> RoutedFile:
    """
    Patch-feature dosyasının formatını ve hangi örneğe ait olduğunu belirler.
    patch_pipeline bu fonksiyonu kullanıyor.
    """
    path = Path(path)
    fmt, reason = _infer_format(path.name)
    stem = path.name
    for ext in (".npy", ".csv", ".txt"):
        if stem.lower().endswith(ext):
            stem = stem[: -len(ext)]
            break
    sample_id, augmented = _split_sample_id(stem)
    return RoutedFile(
        format=fmt,
        path=path,
        sample_id=sample_id,
        augmented=augmented,
        reason=reason,
    )

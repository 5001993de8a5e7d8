"""
Precomputed WSI patch features: one file per sample (n × 1024, .npy or .csv),
optional augmented sibling (<id>.aug.npy / <id>_aug.csv) of identical shape.
"""
from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.errors import IngestionFormatError, JoinError
from app.logging_utils import get_logger
from app.routing.file_router import FeatureFileFormat, RoutedFile, route_feature_file
from extraction.schemas import PATCH_FEATURE_DIM, PatchFeatureSet

logger = get_logger("PatchPipeline")


class PatchPipeline:
    def __init__(self, expected_width: int = PATCH_FEATURE_DIM):
        self.expected_width = expected_width

    # --------- İç yardımcılar --------- #
    def _read_matrix(self, routed: RoutedFile) -> np.ndarray:
        if routed.format == FeatureFileFormat.NPY:
            try:
                values = np.load(routed.path, allow_pickle=False)
            except (ValueError, OSError) as exc:
                raise IngestionFormatError(f"unreadable npy: {exc}", path=str(routed.path)) from None
        elif routed.format == FeatureFileFormat.CSV:
            try:
                values = pd.read_csv(routed.path, header=None).to_numpy(dtype=float)
            except (pd.errors.EmptyDataError, ValueError) as exc:
                raise IngestionFormatError(f"unreadable csv: {exc}", path=str(routed.path)) from None
        else:
            raise IngestionFormatError("unsupported patch-feature format", path=str(routed.path))

        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values.reshape(1, -1)
        if values.ndim != 2 or values.shape[0] < 1:
            raise IngestionFormatError("patch features must be an n × width matrix", path=str(routed.path))
        if values.shape[1] != self.expected_width:
            raise IngestionFormatError(
                f"patch feature width {values.shape[1]} != {self.expected_width}", path=str(routed.path)
            )
        if not np.all(np.isfinite(values)):
            raise IngestionFormatError("non-finite patch feature", path=str(routed.path))
        return values

    # --------- Public API --------- #
    def load_file(self, path: str | Path) -> Tuple[str, np.ndarray, bool]:
        routed = route_feature_file(path)
        return routed.sample_id, self._read_matrix(routed), routed.augmented

    def load_directory(self, directory: str | Path,
                       sample_ids: Optional[Sequence[str]] = None) -> Dict[str, PatchFeatureSet]:
        directory = Path(directory)
        if not directory.is_dir():
            raise IngestionFormatError("patch directory not found", path=str(directory))

        plain: Dict[str, np.ndarray] = {}
        augmented: Dict[str, np.ndarray] = {}
        for path in sorted(directory.iterdir()):
            routed = route_feature_file(path)
            if routed.format == FeatureFileFormat.UNKNOWN:
                logger.debug(f"skipping {path.name} ({routed.reason})")
                continue
            target = augmented if routed.augmented else plain
            target[routed.sample_id] = self._read_matrix(routed)

        orphans = sorted(set(augmented) - set(plain))
        if orphans:
            raise JoinError(orphans[0], "augmented patch file without base file")

        wanted = list(sample_ids) if sample_ids is not None else sorted(plain)
        sets: Dict[str, PatchFeatureSet] = {}
        for sid in wanted:
            if sid not in plain:
                raise JoinError(sid, "no patch-feature file for sample")
            sets[sid] = PatchFeatureSet(
                sample_id=sid,
                patch_features=plain[sid],
                augmented_patch_features=augmented.get(sid),
            )
        logger.info(f"loaded patch features for {len(sets)} sample(s) from {directory}")
        return sets


def average_patch_features(sets: Sequence[PatchFeatureSet]) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    Slide-level vectors for the single-modal image model: mean of patch rows
    (student view) and mean of augmented rows (teacher view, when every set has one).
    """
    student = np.vstack([s.patch_features.mean(axis=0) for s in sets])
    if all(s.augmented_patch_features is not None for s in sets):
        teacher = np.vstack([s.augmented_patch_features.mean(axis=0) for s in sets])
    else:
        teacher = None
    return student, teacher


def write_patch_set(patch_set: PatchFeatureSet, directory: str | Path) -> List[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = [directory / f"{patch_set.sample_id}.npy"]
    np.save(written[0], patch_set.patch_features)
    if patch_set.augmented_patch_features is not None:
        written.append(directory / f"{patch_set.sample_id}.aug.npy")
        np.save(written[1], patch_set.augmented_patch_features)
    return written

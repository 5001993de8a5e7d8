"""
Expression / clinical CSV ingestion and the fixed preprocessing chain:

    missing-gene drop → (optional) reference normalization → top-variance selection → log2(1+x)

Variance selection runs on pre-log values; the log transform is the last step.
"""
from __future__ import annotations

from pathlib import Path
from typing import Iterable, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.errors import (
    BoundError,
    DegenerateReferenceError,
    DomainError,
    DuplicateSampleError,
    IngestionFormatError,
    InsufficientEventsError,
    JoinError,
    MissingHousekeepingError,
    PreprocessingOrderError,
)
from app.logging_utils import get_logger
from extraction.schemas import (
    PREPROCESSING_STAGES,
    STATUS_CODE,
    ClinicalRecord,
    ExpressionMatrix,
    IngestionReport,
    SampleStatus,
    SurvivalDataset,
)

logger = get_logger("Ingest")

Orientation = Literal["samples_as_rows", "genes_as_rows"]

# Housekeeping genes uniformly expressed across human tissues
DEFAULT_HOUSEKEEPING_GENES = (
    "C1orf43", "CHMP2A", "GPI", "PSMB2", "PSMB4",
    "RAB7A", "REEP5", "SNRPD3", "VCP", "VPS29",
)


# ----------------- CSV ingestion ----------------- #

def _read_raw(path: Path) -> pd.DataFrame:
    if not path.exists():
        raise IngestionFormatError("file not found", path=str(path))
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, header=None, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise IngestionFormatError("empty file", path=str(path)) from None
    except (pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise IngestionFormatError(f"unreadable CSV: {exc}", path=str(path)) from None
    if frame.shape[0] < 2 or frame.shape[1] < 2:
        raise IngestionFormatError("need a header row, an id column and at least one value", path=str(path))
    return frame


def load_expression_csv(
    path: str | Path,
    orientation: Orientation = "samples_as_rows",
    dedup: bool = False,
    report: Optional[IngestionReport] = None,
) -> ExpressionMatrix:
    """
    First row = gene ids, first column = sample ids (or transposed with
    orientation="genes_as_rows"). Empty cell = missing; any gene with a missing
    cell is dropped. dedup keeps the first of repeated sample ids instead of failing.
    """
    path = Path(path)
    raw = _read_raw(path)
    header = [c.strip() for c in raw.iloc[0, 1:].tolist()]
    row_ids = [r.strip() for r in raw.iloc[1:, 0].tolist()]
    cells = raw.iloc[1:, 1:].to_numpy(dtype=object)

    stripped = np.vectorize(lambda c: c.strip())(cells) if cells.size else cells
    missing = stripped == ""
    numeric = pd.to_numeric(pd.Series(stripped.ravel()), errors="coerce").to_numpy().reshape(stripped.shape)
    bad = np.isnan(numeric) & ~missing
    if bad.any():
        r, c = map(int, np.argwhere(bad)[0])
        # dosya koordinatları 1-tabanlı, başlık satırı 1
        raise IngestionFormatError(
            f"unparseable cell {cells[r, c]!r}", path=str(path), row=r + 2, column=c + 2,
        )

    if orientation == "genes_as_rows":
        sample_ids, gene_ids = header, row_ids
        values, missing = numeric.T.astype(float), missing.T
    else:
        sample_ids, gene_ids = row_ids, header
        values = numeric.astype(float)

    keep_rows: List[int] = []
    seen = {}
    deduplicated: List[str] = []
    for i, sid in enumerate(sample_ids):
        if sid in seen:
            if not dedup:
                raise DuplicateSampleError(sid)
            deduplicated.append(sid)
            continue
        seen[sid] = i
        keep_rows.append(i)
    values = values[keep_rows]
    missing = missing[keep_rows]
    sample_ids = [sample_ids[i] for i in keep_rows]

    gene_missing = missing.any(axis=0)
    dropped = [g for g, m in zip(gene_ids, gene_missing) if m]
    kept_cols = np.flatnonzero(~gene_missing)
    if dropped:
        logger.info(f"{path.name}: dropped {len(dropped)} gene(s) with missing values")

    matrix = ExpressionMatrix(
        sample_ids=tuple(sample_ids),
        gene_ids=tuple(gene_ids[c] for c in kept_cols),
        values=values[:, kept_cols],
        dropped_genes=tuple(dropped),
    )
    if report is not None:
        report.expression_path = str(path)
        report.n_genes_loaded = len(gene_ids)
        report.dropped_genes = list(dropped)
        report.deduplicated_samples = deduplicated
    return matrix


def write_expression_csv(matrix: ExpressionMatrix, path: str | Path,
                         orientation: Orientation = "samples_as_rows") -> Path:
    path = Path(path)
    frame = pd.DataFrame(matrix.values, index=list(matrix.sample_ids), columns=list(matrix.gene_ids))
    if orientation == "genes_as_rows":
        frame = frame.T
    frame.index.name = "id"
    frame.to_csv(path, float_format="%.17g")
    return path


def load_clinical_csv(path: str | Path) -> List[ClinicalRecord]:
    """Columns sample_id,time,status with status 1 = event, 0 = censored."""
    path = Path(path)
    if not path.exists():
        raise IngestionFormatError("file not found", path=str(path))
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise IngestionFormatError("empty file", path=str(path)) from None
    required = ["sample_id", "time", "status"]
    missing_cols = [c for c in required if c not in frame.columns]
    if missing_cols:
        raise IngestionFormatError(f"missing columns: {', '.join(missing_cols)}", path=str(path))

    records: List[ClinicalRecord] = []
    seen = set()
    for i, row in enumerate(frame.itertuples(index=False)):
        line = i + 2
        sid = str(row.sample_id).strip()
        if sid in seen:
            raise DuplicateSampleError(sid)
        seen.add(sid)
        try:
            time = float(row.time)
        except ValueError:
            raise IngestionFormatError(f"unparseable time {row.time!r}", path=str(path), row=line, column=2) from None
        status_raw = str(row.status).strip()
        if status_raw not in ("0", "1"):
            raise IngestionFormatError(f"status must be 0 or 1, got {status_raw!r}", path=str(path), row=line, column=3)
        if not np.isfinite(time) or time <= 0:
            raise IngestionFormatError(f"time must be positive, got {time}", path=str(path), row=line, column=2)
        records.append(ClinicalRecord(
            sample_id=sid,
            time=time,
            status=SampleStatus.EVENT if status_raw == "1" else SampleStatus.CENSORED,
        ))
    return records


def write_clinical_csv(records: Iterable[ClinicalRecord], path: str | Path) -> Path:
    path = Path(path)
    frame = pd.DataFrame(
        [
            {"sample_id": r.sample_id, "time": repr(r.time), "status": 1 if r.status == SampleStatus.EVENT else 0}
            for r in records
        ],
        columns=["sample_id", "time", "status"],
    )
    frame.to_csv(path, index=False)
    return path


def load_id_list(path: str | Path) -> List[str]:
    path = Path(path)
    if not path.exists():
        raise IngestionFormatError("file not found", path=str(path))
    return [line.strip() for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


# ----------------- transforms ----------------- #

def log_transform(matrix: ExpressionMatrix) -> ExpressionMatrix:
    if matrix.values.size and matrix.values.min() < 0:
        raise DomainError("log2(1+x) expects non-negative expression values")
    return matrix.with_values(np.log2(1.0 + matrix.values), stage="log_transformed")


def select_top_variance_genes(matrix: ExpressionMatrix, k: int) -> ExpressionMatrix:
    """k genes of largest (n-1)-denominator variance; ties keep the earlier gene; original order preserved."""
    if k <= 0 or k > matrix.n_genes:
        raise BoundError(f"k={k} outside 1..{matrix.n_genes}")
    if matrix.n_samples < 2:
        raise BoundError("variance needs at least two samples")
    variances = np.var(matrix.values, axis=0, ddof=1)
    ranked = np.argsort(-variances, kind="stable")
    chosen = np.sort(ranked[:k])
    return matrix.select_genes(chosen, stage="selected")


def normalize_to_reference(
    source: ExpressionMatrix,
    reference: ExpressionMatrix,
    housekeeping_gene_ids: Sequence[str] = DEFAULT_HOUSEKEEPING_GENES,
) -> ExpressionMatrix:
    """Scale every source cell by E_t/E_g (pooled housekeeping means), on the pre-log scale."""
    missing = [g for g in housekeeping_gene_ids if g not in source.gene_ids or g not in reference.gene_ids]
    if missing:
        raise MissingHousekeepingError(missing)
    ref_cols = [reference.gene_ids.index(g) for g in housekeeping_gene_ids]
    src_cols = [source.gene_ids.index(g) for g in housekeeping_gene_ids]
    e_t = float(np.mean(reference.values[:, ref_cols]))
    e_g = float(np.mean(source.values[:, src_cols]))
    if e_g == 0.0:
        raise DegenerateReferenceError("source housekeeping mean is zero")
    factor = e_t / e_g
    logger.info(f"normalization factor E_t/E_g = {factor:.6g}")
    return source.with_values(source.values * factor, stage="normalized", normalization_factor=factor)


# ----------------- dataset assembly ----------------- #

def assemble_dataset(
    expr: ExpressionMatrix,
    clinical: Sequence[ClinicalRecord],
    unlabeled_ids: Iterable[str] = (),
    report: Optional[IngestionReport] = None,
    min_events: int = 2,
) -> SurvivalDataset:
    """
    Joins clinical records onto the expression rows. Samples with neither a
    record nor an unlabeled mark are dropped (and reported).
    """
    unlabeled = list(dict.fromkeys(unlabeled_ids))
    row_of = {sid: i for i, sid in enumerate(expr.sample_ids)}
    records = {}
    for rec in clinical:
        if rec.sample_id not in row_of:
            raise JoinError(rec.sample_id)
        records[rec.sample_id] = rec
    overlap = sorted(set(unlabeled) & set(records))
    if overlap:
        raise JoinError(overlap[0], "sample both labeled and unlabeled")
    for sid in unlabeled:
        if sid not in row_of:
            raise JoinError(sid, "unlabeled id absent from expression matrix")

    unlabeled_set = set(unlabeled)
    rows, times, status, dropped = [], [], [], []
    for sid in expr.sample_ids:
        if sid in records:
            rec = records[sid]
            rows.append(row_of[sid])
            times.append(rec.time)
            status.append(STATUS_CODE[rec.status])
        elif sid in unlabeled_set:
            rows.append(row_of[sid])
            times.append(np.nan)
            status.append(STATUS_CODE[SampleStatus.UNLABELED])
        else:
            dropped.append(sid)
    if dropped:
        logger.info(f"dropped {len(dropped)} sample(s) without clinical record or unlabeled mark")

    status_arr = np.asarray(status, dtype=np.int8)
    n_events = int((status_arr == STATUS_CODE[SampleStatus.EVENT]).sum())
    if n_events < min_events:
        raise InsufficientEventsError(f"dataset has {n_events} event(s); at least {min_events} required")

    ds = SurvivalDataset(
        sample_ids=tuple(expr.sample_ids[i] for i in rows),
        features=expr.values[rows],
        times=np.asarray(times, dtype=float),
        status=status_arr,
        feature_ids=expr.gene_ids,
    )
    if report is not None:
        report.dropped_samples = dropped
        report.status_counts = ds.status_counts()
    return ds


# ----------------- pipeline ----------------- #

class ExpressionPipeline:
    """
    Applies the preprocessing chain and refuses any step that would run
    out of order (each stage may run at most once, only forward).
    """

    def __init__(
        self,
        top_k: Optional[int] = 4000,
        housekeeping_gene_ids: Sequence[str] = DEFAULT_HOUSEKEEPING_GENES,
        log: bool = True,
    ):
        self.top_k = top_k
        self.housekeeping_gene_ids = tuple(housekeeping_gene_ids)
        self.log = log

    @staticmethod
    def _advance(matrix: ExpressionMatrix, stage: str) -> None:
        current = PREPROCESSING_STAGES.index(matrix.stage)
        target = PREPROCESSING_STAGES.index(stage)
        if target <= current:
            raise PreprocessingOrderError(f"cannot apply '{stage}' after '{matrix.stage}'")

    def normalize(self, matrix: ExpressionMatrix, reference: ExpressionMatrix) -> ExpressionMatrix:
        self._advance(matrix, "normalized")
        return normalize_to_reference(matrix, reference, self.housekeeping_gene_ids)

    def add_cohort(self, matrix: ExpressionMatrix, extra: ExpressionMatrix,
                   report: Optional[IngestionReport] = None) -> ExpressionMatrix:
        """
        Scales the extra cohort onto matrix (the reference) by housekeeping means,
        then stacks it under matrix on the shared genes. Rows of matrix are untouched.
        """
        if matrix.stage not in ("ingested", "normalized"):
            raise PreprocessingOrderError(f"cannot add a cohort after '{matrix.stage}'")
        extra = self.normalize(extra, matrix)
        merged, dropped = stack_samples(matrix, extra)
        if report is not None:
            report.dropped_genes = list(dict.fromkeys([*report.dropped_genes, *dropped, *extra.dropped_genes]))
            report.extra["cohort_normalization_factor"] = f"{extra.normalization_factor:.10g}"
        return merged

    def select(self, matrix: ExpressionMatrix, k: Optional[int] = None) -> ExpressionMatrix:
        self._advance(matrix, "selected")
        return select_top_variance_genes(matrix, k or self.top_k or matrix.n_genes)

    def log_transform(self, matrix: ExpressionMatrix) -> ExpressionMatrix:
        self._advance(matrix, "log_transformed")
        return log_transform(matrix)

    def run(
        self,
        matrix: ExpressionMatrix,
        reference: Optional[ExpressionMatrix] = None,
        report: Optional[IngestionReport] = None,
    ) -> ExpressionMatrix:
        if reference is not None:
            matrix = self.normalize(matrix, reference)
        if self.top_k is not None:
            matrix = self.select(matrix, min(self.top_k, matrix.n_genes))
        if self.log:
            matrix = self.log_transform(matrix)
        if report is not None:
            report.normalization_factor = matrix.normalization_factor
            report.selected_genes = matrix.n_genes
            report.log_transformed = self.log
        return matrix


def align_genes(matrix: ExpressionMatrix, gene_ids: Sequence[str]) -> ExpressionMatrix:
    """Restrict/reorder columns to gene_ids (e.g. unlabeled cohort onto the labeled cohort's genes)."""
    missing = [g for g in gene_ids if g not in matrix.gene_ids]
    if missing:
        raise JoinError(missing[0], "gene absent from matrix")
    index = {g: i for i, g in enumerate(matrix.gene_ids)}
    return matrix.select_genes([index[g] for g in gene_ids], stage=matrix.stage)


def stack_samples(first: ExpressionMatrix, second: ExpressionMatrix) -> Tuple[ExpressionMatrix, List[str]]:
    """Row-concatenate two matrices on their shared genes; returns the merged matrix and dropped genes."""
    shared = [g for g in first.gene_ids if g in set(second.gene_ids)]
    dropped = [g for g in first.gene_ids if g not in set(shared)]
    a = align_genes(first, shared)
    b = align_genes(second, shared)
    dupes = set(a.sample_ids) & set(b.sample_ids)
    if dupes:
        raise DuplicateSampleError(sorted(dupes)[0])
    merged = ExpressionMatrix(
        sample_ids=a.sample_ids + b.sample_ids,
        gene_ids=tuple(shared),
        values=np.vstack([a.values, b.values]),
        stage=first.stage,
        dropped_genes=first.dropped_genes + tuple(dropped),
        normalization_factor=first.normalization_factor,
    )
    return merged, dropped

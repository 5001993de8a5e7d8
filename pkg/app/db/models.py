# app/db/models.py
import uuid
from datetime import datetime
from typing import List

from sqlalchemy import JSON, Column, DateTime, Float, Integer, String, select

from app.db.session import Base, get_db, get_engine
from app.experiment.schemas import RunLedger, RunRecord


class RunRecordRow(Base):
    __tablename__ = "run_records"

    id = Column(String(36), primary_key=True, default=lambda: str(uuid.uuid4()))

    ledger_name = Column(String(256), nullable=False, index=True)
    model_kind = Column(String(32), nullable=False, default="mlp")  # mlp | fusion | concat
    protocol_seed = Column(Integer, nullable=False)

    repeat = Column(Integer, nullable=False)
    fold = Column(Integer, nullable=False)
    seed = Column(Integer, nullable=False)

    c_index = Column(Float, nullable=False)
    ibs = Column(Float, nullable=False)
    stratification_p = Column(Float, nullable=True)
    ibs_horizon = Column(Float, nullable=True)
    validation_c_index = Column(Float, nullable=True)

    hyperparameters = Column(JSON, nullable=False, default=dict)
    # Audit: sample ids per role
    ids = Column(JSON, nullable=False, default=dict)
    checkpoint = Column(String(1024), nullable=True)

    created_at = Column(DateTime, default=datetime.utcnow)

    @classmethod
    def from_record(cls, ledger: RunLedger, record: RunRecord) -> "RunRecordRow":
        return cls(
            ledger_name=ledger.name,
            model_kind=ledger.model_kind,
            protocol_seed=ledger.seed,
            repeat=record.repeat,
            fold=record.fold,
            seed=record.seed,
            c_index=record.c_index,
            ibs=record.ibs,
            stratification_p=record.stratification_p,
            ibs_horizon=record.ibs_horizon,
            validation_c_index=record.validation_c_index,
            hyperparameters=record.hyperparameters,
            ids={"train": record.train_ids, "val": record.val_ids,
                 "test": record.test_ids, "scaler": record.scaler_ids},
            checkpoint=record.checkpoint,
        )

    def to_record(self) -> RunRecord:
        ids = self.ids or {}
        return RunRecord(
            repeat=self.repeat, fold=self.fold, seed=self.seed,
            c_index=self.c_index, ibs=self.ibs,
            stratification_p=self.stratification_p, ibs_horizon=self.ibs_horizon,
            validation_c_index=self.validation_c_index,
            hyperparameters=self.hyperparameters or {},
            train_ids=ids.get("train", []), val_ids=ids.get("val", []),
            test_ids=ids.get("test", []), scaler_ids=ids.get("scaler", []),
            checkpoint=self.checkpoint,
        )


def store_ledger(ledger: RunLedger, url: str = "") -> int:
    """Replaces any rows stored under the same ledger name."""
    Base.metadata.create_all(bind=get_engine(url))
    for db in get_db(url):
        db.query(RunRecordRow).filter(RunRecordRow.ledger_name == ledger.name).delete()
        db.add_all([RunRecordRow.from_record(ledger, r) for r in ledger.records])
        db.commit()
    return len(ledger.records)


def fetch_ledger(name: str, url: str = "") -> RunLedger:
    for db in get_db(url):
        rows: List[RunRecordRow] = list(
            db.execute(select(RunRecordRow).where(RunRecordRow.ledger_name == name)
                       .order_by(RunRecordRow.repeat, RunRecordRow.fold)).scalars()
        )
        if not rows:
            raise KeyError(name)
        repeats = len({r.repeat for r in rows})
        return RunLedger(
            name=name, repeats=repeats, k=len(rows) // repeats, seed=rows[0].protocol_seed,
            model_kind=rows[0].model_kind, records=[r.to_record() for r in rows],
        )

# app/db/session.py
import os
from functools import lru_cache

from sqlalchemy import create_engine
from sqlalchemy.orm import declarative_base, sessionmaker

# Örnek: postgresql://postgres@localhost:5432/coxmt  veya  sqlite:///runs/ledgers.db
# Boş bırakılırsa ledger'lar yalnızca dosyaya yazılır.
DATABASE_URL = os.getenv("DATABASE_URL", "")

Base = declarative_base()


def ledger_store_enabled() -> bool:
    return bool(DATABASE_URL)


@lru_cache(maxsize=None)
def get_engine(url: str = ""):
    return create_engine(url or DATABASE_URL, future=True)


def session_factory(url: str = ""):
    return sessionmaker(autocommit=False, autoflush=False, bind=get_engine(url))


def get_db(url: str = ""):
    """
    Context-free session generator; caller closes by exhausting it.
    """
    db = session_factory(url)()
    try:
        yield db
    finally:
        db.close()

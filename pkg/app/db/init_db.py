# app/db/init_db.py
from app.db.models import Base
from app.db.session import get_engine


def init_db(url: str = ""):
    Base.metadata.create_all(bind=get_engine(url))


if __name__ == "__main__":
    init_db()

"""SQLite run ledger. One engine per process; tables are created on first use."""

from __future__ import annotations

from functools import lru_cache
from pathlib import Path

from sqlalchemy import create_engine, event
from sqlalchemy.engine import make_url
from sqlalchemy.orm import DeclarativeBase, sessionmaker

from app.config import settings


class Base(DeclarativeBase):
    pass


def ledger_file(url: str | None = None) -> Path | None:
    """File behind a SQLite ledger URL; None for in-memory or server databases."""
    parsed = make_url(url or settings.db_url)
    if parsed.get_backend_name() != "sqlite" or parsed.database in (None, "", ":memory:"):
        return None
    return Path(parsed.database)


_sqlite = make_url(settings.db_url).get_backend_name() == "sqlite"
engine = create_engine(
    settings.db_url,
    connect_args={"check_same_thread": False} if _sqlite else {},
    future=True,
)
SessionLocal = sessionmaker(bind=engine, autoflush=False, expire_on_commit=False)


if _sqlite:
    @event.listens_for(engine, "connect")
    def _configure_ledger(dbapi_connection, _connection_record) -> None:  # type: ignore[no-untyped-def]
        cursor = dbapi_connection.cursor()
        # parallel CLI runs append to the same file
        cursor.execute("PRAGMA busy_timeout=10000;")
        cursor.execute("PRAGMA synchronous=NORMAL;")
        cursor.close()


@lru_cache(maxsize=1)
def init_db() -> None:
    from app import models  # noqa: F401

    path = ledger_file()
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
    Base.metadata.create_all(bind=engine)

from __future__ import annotations

from datetime import datetime
from uuid import uuid4

from sqlalchemy import DateTime, Float, Integer, String
from sqlalchemy.orm import Mapped, mapped_column
from sqlalchemy.types import JSON

from app.db import Base


COMMANDS = ("fit", "loo", "psis", "theory", "simulate")
EXIT_CODES = {"ok": 0, "input": 2, "diagnostic": 3, "internal": 4}


def uuid_str() -> str:
    return str(uuid4())


class TimestampedMixin:
    created_at: Mapped[datetime] = mapped_column(DateTime, default=datetime.utcnow, nullable=False)


class RunRecord(Base, TimestampedMixin):
    __tablename__ = "run_records"

    id: Mapped[str] = mapped_column(String(36), primary_key=True, default=uuid_str)
    command: Mapped[str] = mapped_column(String(32), nullable=False, index=True)
    config_hash: Mapped[str] = mapped_column(String(64), nullable=False, index=True)
    seed: Mapped[int | None] = mapped_column(Integer, nullable=True)
    exit_code: Mapped[int] = mapped_column(Integer, default=0, nullable=False)
    wall_time_seconds: Mapped[float] = mapped_column(Float, default=0.0, nullable=False)
    manifest: Mapped[dict] = mapped_column(JSON, default=dict)

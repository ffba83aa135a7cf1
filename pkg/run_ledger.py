#!/usr/bin/env python3
"""
run_ledger.py

SQLAlchemy run ledger: a `trial_job` queue (one row per experiment seed when the
trial mode is "enqueue") and a `stage_log` table with one row per stage event,
so partial runs can be inspected after a failure. SQLite file inside the
experiment output dir by default; Postgres when USE_POSTGRES / --use-postgres.
"""

from datetime import datetime
from pathlib import Path
from typing import List, Optional

from sqlalchemy import Column, DateTime, Integer, String, Text, create_engine
from sqlalchemy.orm import declarative_base, sessionmaker

from sista_common import POSTGRES_DSN, SQLITE_FILENAME

Base = declarative_base()


class StageLog(Base):
    __tablename__ = "stage_log"
    id = Column(Integer, primary_key=True)
    trial = Column(String, index=True)  # e.g. "shape/C/seed-0"
    stage = Column(String, index=True)  # invert, finetune, sample, adapt, evaluate, ...
    status = Column(String)  # started, done, failed
    message = Column(Text)
    created_at = Column(DateTime, default=datetime.utcnow)


class TrialJob(Base):
    """Queue of experiment trials consumed by trial_worker.py"""
    __tablename__ = "trial_job"
    id = Column(Integer, primary_key=True)
    config_path = Column(String, index=True)
    seed = Column(Integer, index=True)
    status = Column(String, index=True, default="pending")  # pending, processing, done, failed
    attempts = Column(Integer, default=0)
    last_error = Column(Text)
    result_path = Column(String, nullable=True)
    created_at = Column(DateTime, default=datetime.utcnow)
    updated_at = Column(DateTime, default=datetime.utcnow, onupdate=datetime.utcnow)


def get_engine_and_session(use_postgres: bool = False, out_dir=None):
    if use_postgres:
        if not POSTGRES_DSN or POSTGRES_DSN.strip() == "":
            raise RuntimeError("POSTGRES_DSN not configured.")
        engine = create_engine(POSTGRES_DSN, echo=False)
    else:
        sqlite_path = (Path(out_dir) / SQLITE_FILENAME if out_dir else Path(SQLITE_FILENAME)).resolve()
        sqlite_path.parent.mkdir(parents=True, exist_ok=True)
        engine = create_engine(f"sqlite:///{sqlite_path}", echo=False)
    Base.metadata.create_all(bind=engine)
    Session = sessionmaker(bind=engine)
    return engine, Session


def log_stage(session, trial: str, stage: str, status: str, message: Optional[str] = None) -> StageLog:
    row = StageLog(trial=trial, stage=stage, status=status, message=message)
    session.add(row)
    session.commit()
    return row


def enqueue_trial(session, config_path: str, seed: int) -> TrialJob:
    """
    Enqueue a trial unless one is already pending/processing/done for the same (config, seed).
    Returns the job row (existing or new).
    """
    config_path = str(Path(config_path).resolve())
    existing = session.query(TrialJob).filter(
        TrialJob.config_path == config_path,
        TrialJob.seed == seed,
        TrialJob.status.in_(["pending", "processing", "done"]),
    ).first()
    if existing:
        return existing
    job = TrialJob(config_path=config_path, seed=seed, status="pending", attempts=0)
    session.add(job)
    session.commit()
    return job


def fetch_next_jobs(session, limit: int) -> List[TrialJob]:
    return session.query(TrialJob).filter(TrialJob.status == "pending").order_by(TrialJob.created_at.asc(), TrialJob.id.asc()).limit(limit).all()


def stage_history(session, trial: Optional[str] = None) -> List[StageLog]:
    q = session.query(StageLog)
    if trial is not None:
        q = q.filter(StageLog.trial == trial)
    return q.order_by(StageLog.id.asc()).all()

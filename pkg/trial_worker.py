#!/usr/bin/env python3
"""
Simple worker to process queued experiment trials.
Jobs are enqueued by `sista_cli.py run --trial-mode enqueue` (one per seed).
Start several workers to run seeds in parallel processes; each seed writes to
its own trials/<task>/<domain>/seed-N directory. `sista_cli.py report --in DIR`
aggregates the finished trials.
"""

import argparse
import time
from datetime import datetime

from sista_common import USE_POSTGRES, console
from run_ledger import TrialJob, fetch_next_jobs, get_engine_and_session, log_stage
from pipeline import load_experiment_config, open_context, run_trial


def claim_job(session, job: TrialJob) -> bool:
    """Atomically move a pending job to processing; False if another worker got it first."""
    updated = session.query(TrialJob).filter(TrialJob.id == job.id, TrialJob.status == "pending").update(
        {
            TrialJob.status: "processing",
            TrialJob.attempts: (job.attempts or 0) + 1,
            TrialJob.updated_at: datetime.utcnow(),
        },
        synchronize_session=False,
    )
    session.commit()
    session.refresh(job)
    return updated == 1


def process_job(session, job: TrialJob):
    if not claim_job(session, job):
        return
    try:
        cfg = load_experiment_config(job.config_path)
        ctx = open_context(cfg)
        try:
            for task in cfg.tasks:
                for shift in cfg.shifts:
                    run_trial(cfg, job.seed, task, shift, ctx)
        finally:
            ctx.session.close()
        job.status = "done"
        job.last_error = None
        job.result_path = cfg.output_dir
    except Exception as e:
        job.status = "failed"
        job.last_error = f"{type(e).__name__}: {e}"
        log_stage(session, f"job-{job.id}/seed-{job.seed}", getattr(e, "stage", "trial"), "failed", job.last_error)
    finally:
        job.updated_at = datetime.utcnow()
        session.commit()


def main():
    parser = argparse.ArgumentParser(description="Process experiment trials enqueued by `sista_cli.py run`.")
    parser.add_argument("--ledger-dir", default=".", help="Directory holding the SQLite ledger (the experiment output dir)")
    parser.add_argument("--limit", type=int, default=1, help="Number of jobs to process per batch")
    parser.add_argument("--loop", action="store_true", help="Keep polling for new jobs")
    parser.add_argument("--sleep", type=int, default=5, help="Seconds to sleep between polls when looping")
    parser.add_argument("--use-postgres", action="store_true", help="Use PostgreSQL (overrides USE_POSTGRES)")
    args = parser.parse_args()

    use_postgres = USE_POSTGRES or args.use_postgres
    engine, Session = get_engine_and_session(use_postgres, out_dir=args.ledger_dir)
    session = Session()

    try:
        while True:
            jobs = fetch_next_jobs(session, args.limit)
            if not jobs:
                if not args.loop:
                    console.print("No pending jobs.")
                    break
                time.sleep(args.sleep)
                continue

            for job in jobs:
                console.print(f"[+] Processing job {job.id}: seed {job.seed} ({job.config_path})")
                process_job(session, job)
                if job.status == "failed":
                    console.print(f"[red][!] job {job.id} failed: {job.last_error}[/red]")

            if not args.loop:
                break
            time.sleep(args.sleep)
    finally:
        session.close()


if __name__ == "__main__":
    main()

# app/queue/queue_manager.py
"""
Queue Manager for protocol jobs
- RQ (Redis Queue) for job management
- A job carries a validated JobConfig document; the worker re-validates it
"""
import os
from typing import Any, Dict, Optional

from redis import Redis
from rq import Queue
from rq.exceptions import NoSuchJobError
from rq.job import Job

# Redis configuration
REDIS_URL = os.getenv("REDIS_URL", "redis://localhost:6379/0")
QUEUE_NAME = os.getenv("COXMT_QUEUE_NAME", "coxmt_protocol")

# Initialize Redis connection (lazy: nothing is sent until the first command)
redis_conn = Redis.from_url(REDIS_URL)

# Create queue
protocol_queue = Queue(QUEUE_NAME, connection=redis_conn)

JOB_TIMEOUT = 6 * 3600  # 20 runs × grid on CPU


def enqueue_protocol_job(job_document: Dict[str, Any], command: str = "protocol") -> Job:
    """
    Enqueue a protocol-family command (protocol | ablate | scaling)

    Args:
        job_document: JobConfig as a plain dict (JSON-compatible)
        command: which experiment the worker should run

    Returns:
        RQ Job object
    """
    from app.workers.protocol_worker import run_job

    job = protocol_queue.enqueue(
        run_job,
        job_document,
        command,
        job_timeout=JOB_TIMEOUT,
        result_ttl=7 * 86400,  # ledger summaries stay a week
        failure_ttl=86400,
    )
    return job


_STATES = {
    "queued": "queued",
    "deferred": "queued",
    "scheduled": "queued",
    "started": "running",
    "finished": "completed",
    "failed": "failed",
    "stopped": "failed",
    "canceled": "failed",
}


def _failure_line(exc_info: Optional[str]) -> Optional[str]:
    # last traceback line holds "ErrorType: message"
    if not exc_info:
        return None
    lines = [line for line in exc_info.strip().splitlines() if line.strip()]
    return lines[-1] if lines else None


def get_job_status(job_id: str) -> Dict[str, Any]:
    """
    State of an enqueued experiment. Progress and message come from the worker's
    job.meta; a finished job carries the command summary (ledger means, runs).
    """
    try:
        job = Job.fetch(job_id, connection=redis_conn)
    except NoSuchJobError:
        return {"id": job_id, "state": "not_found"}

    raw = job.get_status(refresh=True)
    state = _STATES.get(getattr(raw, "value", raw), "unknown")
    document, command = (list(job.args) + [{}, "protocol"])[:2]
    status: Dict[str, Any] = {
        "id": job.id,
        "state": state,
        "command": command,
        "name": document.get("name") if isinstance(document, dict) else None,
        "progress": 100 if state == "completed" else job.meta.get("progress", 0),
        "message": job.meta.get("message", ""),
        "enqueued_at": job.enqueued_at.isoformat() if job.enqueued_at else None,
        "ended_at": job.ended_at.isoformat() if job.ended_at else None,
    }
    if state == "completed":
        status["summary"] = job.result
    elif state == "failed":
        status["error"] = _failure_line(job.exc_info)
    return status

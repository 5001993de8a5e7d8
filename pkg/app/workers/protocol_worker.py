# app/workers/protocol_worker.py
"""
RQ worker entry: runs a protocol-family command from a JobConfig document.
Start a worker with:  rq worker coxmt_protocol
"""
import time
from typing import Any, Dict

from app.cli.commands import cmd_ablate, cmd_protocol, cmd_scaling
from app.cli.schemas import JobConfig
from app.errors import ConfigError
from app.experiment.protocol import DEFAULT_WORKERS
from app.logging_utils import get_logger

logger = get_logger("Worker")

COMMANDS = {
    "protocol": cmd_protocol,
    "ablate": cmd_ablate,
    "scaling": cmd_scaling,
}


def run_job(job_document: Dict[str, Any], command: str = "protocol") -> Dict[str, Any]:
    start_time = time.time()

    # Get current job for progress updates
    try:
        from rq import get_current_job
        job = get_current_job()
    except Exception:
        job = None

    def update_progress(percent: int, message: str = ""):
        if job:
            job.meta['progress'] = percent
            job.meta['message'] = message
            job.save_meta()
        logger.info(f"{percent}% - {message}")

    try:
        update_progress(5, f"validating {command} job...")
        if command not in COMMANDS:
            raise ConfigError(f"unknown command: {command}")
        config = JobConfig.model_validate(job_document)

        update_progress(10, f"running {config.name}...")
        summary = COMMANDS[command](config, workers=config.workers or DEFAULT_WORKERS)

        update_progress(100, "Complete!")
        logger.info(f"{command} '{config.name}' finished in {time.time() - start_time:.2f}s")
        return summary

    except Exception as e:
        update_progress(0, f"Failed: {str(e)}")
        logger.error(f"Error: {e}")
        raise e

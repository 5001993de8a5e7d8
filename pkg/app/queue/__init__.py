# app/queue/__init__.py
from app.queue.queue_manager import (
    enqueue_protocol_job,
    get_job_status,
    protocol_queue
)

__all__ = [
    'enqueue_protocol_job',
    'get_job_status',
    'protocol_queue'
]

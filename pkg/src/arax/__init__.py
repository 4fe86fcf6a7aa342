"""arax: a runtime that decouples applications from compute devices.

Clients issue named tasks into shared-memory queues; the server assigns
queues to virtual accelerator backends, shares devices spatially, and can
live-migrate a queue (and its data) between devices while the client keeps
issuing.
"""

from .client import Session, TaskBuffer, TaskDescriptor, TaskHandle, TaskQueueHandle, TaskStatus
from .clock import RealClock, VirtualClock
from .shm.arena import SharedArena

__version__ = "0.1.0"

__all__ = [
    "Session",
    "TaskBuffer",
    "TaskDescriptor",
    "TaskHandle",
    "TaskQueueHandle",
    "TaskStatus",
    "RealClock",
    "VirtualClock",
    "SharedArena",
]

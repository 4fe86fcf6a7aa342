from .core import Server, DispatchTable
from .scheduler import Scheduler, MigrationPlan

__all__ = ["Server", "DispatchTable", "Scheduler", "MigrationPlan"]

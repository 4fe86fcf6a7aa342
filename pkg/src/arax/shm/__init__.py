from .arena import SharedArena, ArenaStats
from .ring import RingQueue
from .directory import Directory

__all__ = ["SharedArena", "ArenaStats", "RingQueue", "Directory"]

"""Jobs sent from the manager to workers, and their results."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .games import GameState
from .tree import SolutionNode


class JobStatus(enum.IntEnum):
    WIN = 1
    LOSS = 2
    UNKNOWN = 3
    # malformed job; distinct from running out of budget
    ERROR = 4


@dataclass
class Job:
    job_id: int
    position: GameState
    budget: int
    checkpoint_version: int


@dataclass
class JobResult:
    job_id: int
    status: JobStatus
    nodes: int
    wall_time: float = 0.0
    checkpoint_version: int = 0
    worker_id: int = 0
    proof: SolutionNode | None = field(default=None, repr=False)
    error: str = ""

    @property
    def solved(self) -> bool:
        return self.status in (JobStatus.WIN, JobStatus.LOSS)

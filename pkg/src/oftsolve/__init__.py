"""Distributed AND-OR proof search guided by a proof cost network, with an
online fine-tuning trainer, for small Hex boards and Tic-Tac-Toe."""

from .games import AND, OR, GameState, Outcome, get_game
from .harness import SolveConfig, SolveReport, compare, solve
from .manager import Manager, ManagerConfig
from .network import Checkpoint, Network, evaluate
from .oracle import Oracle
from .trainer import OnlineTrainer, TrainerConfig, pretrain
from .tree import SolutionTree, read_solution, verify_solution, write_solution
from .worker import Worker, WorkerConfig

__version__ = "0.1.0"

__all__ = ["AND", "OR", "GameState", "Outcome", "get_game", "SolveConfig", "SolveReport", "compare", "solve",
           "Manager", "ManagerConfig", "Checkpoint", "Network", "evaluate", "Oracle", "OnlineTrainer",
           "TrainerConfig", "pretrain", "SolutionTree", "read_solution", "verify_solution", "write_solution",
           "Worker", "WorkerConfig"]

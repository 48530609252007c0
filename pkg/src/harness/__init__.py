"""
Synthetic tasks, evaluation, experiment drivers and the CLI.

Only the task definitions are re-exported here; import ``evaluation``,
``experiments`` and ``cli`` from their modules.
"""

from .tasks import CharTokenizer, Example, Task, TaskKind, TaskSizes, make_task, oracle_answer

__all__ = ["CharTokenizer", "Example", "Task", "TaskKind", "TaskSizes", "make_task",
           "oracle_answer"]

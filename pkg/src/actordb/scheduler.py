"""Two-level priority scheduler for projection maintenance.

Tasks are generators; each ``next()`` is one step. Before every step the
scheduler re-checks the interactive queue, so a long batch task (a rebuild)
is preempted between steps as soon as interactive work arrives. A worker
thread is optional: without one, :meth:`TaskScheduler.run` drains the queue
in the calling thread.
"""

from __future__ import annotations

import itertools
import threading
from collections import deque
from concurrent.futures import Future
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Any, Callable, Generator, Optional


class Priority(IntEnum):
    INTERACTIVE = 0
    BATCH = 1


@dataclass(eq=False)
class MaintenanceTask:
    projection: str
    priority: Priority
    work: str  # "catch_up" | "rebuild" | "promote"
    steps: Generator[Any, None, Any]
    future: Future = field(default_factory=Future)
    task_id: int = 0


@dataclass(frozen=True)
class StepLog:
    task_id: int
    projection: str
    priority: Priority
    work: str
    interactive_queued: int


class TaskScheduler:
    def __init__(self, log_size: int = 10_000):
        self._interactive: deque[MaintenanceTask] = deque()
        self._batch: deque[MaintenanceTask] = deque()
        self._cond = threading.Condition()
        self._exec_lock = threading.Lock()
        self._ids = itertools.count(1)
        self._thread: Optional[threading.Thread] = None
        self._stopping = False
        self.log: deque[StepLog] = deque(maxlen=log_size)
        self.on_step: Optional[Callable[[MaintenanceTask], None]] = None

    def submit(self, projection: str, priority: Priority, work: str, steps) -> MaintenanceTask:
        task = MaintenanceTask(projection, priority, work, steps, task_id=next(self._ids))
        with self._cond:
            (self._interactive if priority == Priority.INTERACTIVE else self._batch).append(task)
            self._cond.notify()
        return task

    def pending(self) -> tuple[int, int]:
        with self._cond:
            return len(self._interactive), len(self._batch)

    def _next_task(self) -> Optional[MaintenanceTask]:
        with self._cond:
            if self._interactive:
                return self._interactive[0]
            if self._batch:
                return self._batch[0]
            return None

    def _step(self, task: MaintenanceTask) -> None:
        with self._cond:
            queued = len(self._interactive)
        self.log.append(StepLog(task.task_id, task.projection, task.priority, task.work, queued if task.priority == Priority.BATCH else 0))
        if self.on_step is not None:
            self.on_step(task)
        try:
            next(task.steps)
            return
        except StopIteration as stop:
            task.future.set_result(stop.value)
        except BaseException as exc:  # noqa: BLE001 - delivered through the future
            task.future.set_exception(exc)
        with self._cond:
            queue = self._interactive if task.priority == Priority.INTERACTIVE else self._batch
            queue.remove(task)

    def run_pending(self) -> int:
        """Execute queued steps until both queues are empty; returns steps run."""
        n = 0
        with self._exec_lock:
            while True:
                task = self._next_task()
                if task is None:
                    return n
                self._step(task)
                n += 1

    def run(self, projection: str, priority: Priority, work: str, steps):
        """Submit and block until the task finishes; returns its result."""
        task = self.submit(projection, priority, work, steps)
        if self._thread is None:
            while not task.future.done():
                self.run_pending()
        return task.future.result()

    # -- worker thread ---------------------------------------------------------

    def start(self) -> None:
        if self._thread is not None:
            return
        self._stopping = False
        self._thread = threading.Thread(target=self._loop, name="actordb-scheduler", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        thread = self._thread
        if thread is None:
            return
        with self._cond:
            self._stopping = True
            self._cond.notify_all()
        thread.join()
        self._thread = None
        self.run_pending()

    def _loop(self) -> None:
        while True:
            with self._cond:
                while not self._interactive and not self._batch and not self._stopping:
                    self._cond.wait()
                if self._stopping:
                    return
            self.run_pending()

"""
Sistema de Processamento Paralelo para execuções independentes.

Executa runs (arm, seed) independentes em slots de workers, com controle de
concorrência, estatísticas e monitoramento de progresso. Os resultados são
devolvidos ordenados pelo id da tarefa, independentemente da ordem de
conclusão.
"""

import queue
import threading
import time
from concurrent.futures import Future, ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional

from .logger import get_logger


@dataclass
class RunTask:
    """Uma execução independente: um braço do experimento com uma seed."""

    task_id: str
    arm: str
    seed: int
    payload: Dict[str, Any] = field(default_factory=dict)
    priority: int = 0
    created_at: float = field(default_factory=time.time)

    def __post_init__(self):
        """Validar e normalizar dados da tarefa."""
        if not self.task_id:
            self.task_id = f"{self.arm}_seed{self.seed}"


@dataclass
class RunResult:
    """Resultado de uma execução."""

    task_id: str
    arm: str
    seed: int
    success: bool
    result: Any = None
    error: Optional[str] = None
    processing_time: float = 0.0
    started_at: Optional[float] = None
    completed_at: Optional[float] = None
    worker_id: Optional[str] = None

    def __post_init__(self):
        """Calcular métricas derivadas."""
        if self.started_at and self.completed_at:
            self.processing_time = self.completed_at - self.started_at


@dataclass
class ProcessingStats:
    """Estatísticas de processamento."""

    total_tasks: int = 0
    completed_tasks: int = 0
    successful_tasks: int = 0
    failed_tasks: int = 0

    total_processing_time: float = 0.0
    avg_processing_time: float = 0.0

    start_time: Optional[float] = None
    end_time: Optional[float] = None

    def update(self, result: RunResult):
        """Atualizar estatísticas com resultado."""
        self.completed_tasks += 1
        if result.success:
            self.successful_tasks += 1
        else:
            self.failed_tasks += 1

        self.total_processing_time += result.processing_time
        self.avg_processing_time = self.total_processing_time / self.completed_tasks

    @property
    def success_rate(self) -> float:
        """Taxa de sucesso."""
        return self.successful_tasks / max(self.completed_tasks, 1)

    @property
    def elapsed_time(self) -> float:
        """Tempo decorrido total."""
        if self.start_time is None:
            return 0.0
        end = self.end_time or time.time()
        return end - self.start_time


class ParallelProcessor:
    """
    Processador paralelo para execuções (arm, seed).

    Funcionalidades:
    - ThreadPool configurável
    - Tentativas com backoff exponencial
    - Monitoramento de progresso
    - Resultados em ordem determinística
    """

    def __init__(self, max_workers: int = 1,
                 progress_callback: Optional[Callable[[Dict[str, Any]], None]] = None):
        """
        Inicializar processador paralelo.

        Args:
            max_workers: Número máximo de workers simultâneos
            progress_callback: Função para receber updates de progresso
        """
        if max_workers < 1:
            raise ValueError("max_workers deve ser >= 1")
        self.max_workers = max_workers
        self.progress_callback = progress_callback
        self.logger = get_logger("parallel_processor")

        # Estado do processamento
        self.is_running = False
        self.tasks_queue: queue.PriorityQueue = queue.PriorityQueue()

        # Controle de progresso
        self.stats = ProcessingStats()
        self.active_futures: Dict[str, Future] = {}
        self.progress_lock = threading.Lock()

        self.logger.debug(f"Processador paralelo inicializado: {max_workers} workers")

    def add_task(self, task: RunTask) -> str:
        """
        Adicionar tarefa à fila de processamento.

        Returns:
            ID da tarefa
        """
        # PriorityQueue ordena pela tupla; task_id desempata
        self.tasks_queue.put((task.priority, task.task_id, task))
        with self.progress_lock:
            self.stats.total_tasks += 1
        self.logger.debug(f"Tarefa adicionada: {task.task_id}")
        return task.task_id

    def add_batch(self, tasks: List[RunTask]) -> List[str]:
        """Adicionar lote de tarefas."""
        task_ids = [self.add_task(task) for task in tasks]
        self.logger.info(f"Lote adicionado: {len(task_ids)} execuções")
        return task_ids

    def process_batch(self, run_function: Callable[[RunTask], Any],
                      max_retries: int = 0) -> List[RunResult]:
        """
        Processar todas as tarefas na fila.

        Args:
            run_function: Função que executa uma tarefa
            max_retries: Número máximo de novas tentativas por tarefa

        Returns:
            Lista de resultados ordenada por task_id
        """
        if self.is_running:
            raise RuntimeError("Processador já está executando")

        self.is_running = True
        self.stats.start_time = time.time()
        try:
            results = self._execute_batch(run_function, max_retries)
        finally:
            self.is_running = False
            self.stats.end_time = time.time()
        return sorted(results, key=lambda r: r.task_id)

    def _execute_batch(self, run_function: Callable[[RunTask], Any],
                       max_retries: int) -> List[RunResult]:
        """Executar processamento em lote."""
        tasks: List[RunTask] = []
        while not self.tasks_queue.empty():
            _, _, task = self.tasks_queue.get_nowait()
            tasks.append(task)
        if not tasks:
            return []

        num_workers = min(self.max_workers, len(tasks))
        self.logger.info(f"Iniciando {len(tasks)} execuções com {num_workers} workers")

        results: List[RunResult] = []
        with ThreadPoolExecutor(max_workers=num_workers,
                                thread_name_prefix="l2d-run") as executor:
            future_to_task = {}
            for task in tasks:
                future = executor.submit(self._process_single_task, task,
                                         run_function, max_retries)
                future_to_task[future] = task
                self.active_futures[task.task_id] = future

            for future in as_completed(future_to_task):
                task = future_to_task[future]
                self.active_futures.pop(task.task_id, None)
                try:
                    result = future.result()
                except Exception as e:
                    self.logger.error(f"Erro inesperado na tarefa {task.task_id}: {e}")
                    now = time.time()
                    result = RunResult(task.task_id, task.arm, task.seed, success=False,
                                       error=str(e), started_at=now, completed_at=now)
                results.append(result)
                self._update_progress(result)

        self.logger.info(f"Processamento concluído: {len(results)} execuções")
        return results

    def _process_single_task(self, task: RunTask, run_function: Callable[[RunTask], Any],
                             max_retries: int) -> RunResult:
        """Processar uma única tarefa."""
        worker_id = threading.current_thread().name
        started_at = time.time()
        self.logger.debug(f"Iniciando execução: {task.task_id} (worker: {worker_id})")

        error_msg = "Erro desconhecido"
        for attempt in range(max_retries + 1):
            if not self.is_running:
                error_msg = "Processamento cancelado"
                break
            try:
                result = run_function(task)
                return RunResult(task.task_id, task.arm, task.seed, success=True,
                                 result=result, started_at=started_at,
                                 completed_at=time.time(), worker_id=worker_id)
            except Exception as e:
                error_msg = f"{type(e).__name__}: {e}"
                if attempt < max_retries:
                    self.logger.warning(f"Tentativa {attempt + 1} falhou para "
                                        f"{task.task_id}: {error_msg}")
                    time.sleep(2 ** attempt)
                else:
                    self.logger.error(f"Todas as tentativas falharam para "
                                      f"{task.task_id}: {error_msg}")

        return RunResult(task.task_id, task.arm, task.seed, success=False,
                         error=error_msg, started_at=started_at,
                         completed_at=time.time(), worker_id=worker_id)

    def _update_progress(self, result: RunResult):
        """Atualizar progresso com thread safety."""
        with self.progress_lock:
            self.stats.update(result)
            if self.progress_callback:
                try:
                    self.progress_callback({
                        'completed': self.stats.completed_tasks,
                        'total': self.stats.total_tasks,
                        'success_rate': self.stats.success_rate,
                        'avg_time': self.stats.avg_processing_time,
                        'elapsed': self.stats.elapsed_time,
                    })
                except Exception as e:
                    self.logger.warning(f"Erro no callback de progresso: {e}")

    def cancel_processing(self) -> bool:
        """Cancelar processamento em andamento."""
        if not self.is_running:
            return False
        self.is_running = False
        for future in self.active_futures.values():
            future.cancel()
        self.logger.info("Processamento cancelado")
        return True

    def get_statistics(self) -> Dict[str, Any]:
        """Obter estatísticas detalhadas."""
        with self.progress_lock:
            return {
                'total_tasks': self.stats.total_tasks,
                'completed_tasks': self.stats.completed_tasks,
                'successful_tasks': self.stats.successful_tasks,
                'failed_tasks': self.stats.failed_tasks,
                'success_rate': self.stats.success_rate,
                'total_processing_time': self.stats.total_processing_time,
                'avg_processing_time': self.stats.avg_processing_time,
                'elapsed_time': self.stats.elapsed_time,
                'is_running': self.is_running,
                'pending_tasks': self.tasks_queue.qsize(),
                'max_workers': self.max_workers,
            }


def run_parallel(tasks: List[RunTask], run_function: Callable[[RunTask], Any],
                 max_workers: int = 1, max_retries: int = 0) -> List[RunResult]:
    """Executar tarefas em paralelo e retornar resultados ordenados."""
    processor = ParallelProcessor(max_workers=max_workers)
    processor.add_batch(tasks)
    return processor.process_batch(run_function, max_retries)

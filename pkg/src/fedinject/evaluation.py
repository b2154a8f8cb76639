"""The benchmark matrix and the zero-shot harness.

One matrix run trains {FedAvg, FedProx} x {single, multi} x {base,
global_finetune, llm_finetune}; single scope means one experiment per task.
The llm_finetune run yields two surfaces, the aggregated client model (^*)
and the injected foundation stub (^F), for 16 labelled rows per task.
"""
from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .client import ClientModel
from .config import ALGOS, SCOPES, ExperimentConfig
from .datagen import Dataset
from .federation import (ExperimentResult, config_label, evaluate_foundation, run_experiment,
                         stub_config)
from .foundation import FoundationStub
from .metrics import MetricsRow
from .tasks import VALIDATION_TASKS, TaskSpec, get_task

VARIANTS_RUN = ("base", "global_finetune", "llm_finetune")
SURFACES = ("base", "global_finetune", "byproduct", "foundation")
FROZEN_LABEL = "FrozenStub"

# column order of the result tables: scope, then algorithm, then surface
MATRIX_LABELS: List[str] = [config_label(a, s, v)
                            for s in SCOPES for a in ALGOS for v in SURFACES]


@dataclass
class MatrixResult:
    rows: List[MetricsRow]
    # (algo, scope, task or None) -> finished llm_finetune experiment
    injected: Dict[Tuple[str, str, Optional[str]], ExperimentResult] = field(default_factory=dict)

    def row(self, label: str, task: str) -> MetricsRow:
        for r in self.rows:
            if r.config == label and r.task == task:
                return r
        raise KeyError((label, task))


def matrix_cells(base: ExperimentConfig,
                 variants: Sequence[str] = VARIANTS_RUN) -> List[ExperimentConfig]:
    """Every training execution of the matrix, in canonical order."""
    cells = []
    for scope, algo, variant in itertools.product(SCOPES, ALGOS, variants):
        if scope == "single":
            for task in base.data.tasks:
                cells.append(base.replace(scope=scope, algo=algo, variant=variant, task=task,
                                          threads=1))
        else:
            cells.append(base.replace(scope=scope, algo=algo, variant=variant, task=None,
                                      threads=1))
    return cells


def run_benchmark_matrix(dataset: Dataset, base: ExperimentConfig,
                         threads: Optional[int] = None,
                         variants: Sequence[str] = VARIANTS_RUN) -> MatrixResult:
    """Run all cells and return rows ordered by task, then by ``MATRIX_LABELS``.

    Cells are independent, so they may run on a thread pool; every cell is
    seeded from its own config, which keeps the output independent of
    ``threads``. Restricting ``variants`` yields only the matching labels.
    """
    cells = matrix_cells(base, variants)
    threads = threads or base.federation.threads
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(lambda c: run_experiment(c, dataset), cells))
    else:
        results = [run_experiment(c, dataset) for c in cells]

    by_key: Dict[Tuple[str, str], MetricsRow] = {}
    out = MatrixResult(rows=[])
    for cfg, res in zip(cells, results):
        f = cfg.federation
        for r in res.rows:
            key = (r.config, r.task)
            if key in by_key:
                raise RuntimeError(f"duplicate matrix row {key}")
            by_key[key] = r
        if f.variant == "llm_finetune":
            out.injected[(f.algo, f.scope, f.task)] = res
    for task in base.data.tasks:
        for label in MATRIX_LABELS:
            if (label, task) in by_key:
                out.rows.append(by_key[(label, task)])
    if len(out.rows) != len(by_key):
        raise RuntimeError("matrix produced rows outside the label scheme")
    return out


def zero_shot_rows(result: ExperimentResult, dataset: Dataset, tasks: Sequence[TaskSpec],
                   label: str) -> List[MetricsRow]:
    """Foundation-path rows for ``tasks``; an untrained modality gives a ✗ row."""
    return evaluate_foundation(result.stub, result.global_model, dataset, label, tasks)


def run_zero_shot(dataset: Dataset, matrix: MatrixResult, base: ExperimentConfig,
                  tasks: Sequence[TaskSpec] = VALIDATION_TASKS) -> List[MetricsRow]:
    """Evaluate injected stubs on tasks that never took part in training.

    Rows, in order: the stub before any injection (never capable), each
    multi-task ^F model, then each single-task ^F model labelled with the task
    it was trained on. A single-task model meets modalities it never saw, which
    is what produces the ✗ cells.
    """
    rows: List[MetricsRow] = []
    frozen = FoundationStub(stub_config(base), base.seed)
    m = base.model
    plain = ClientModel([get_task(t) for t in base.data.tasks], base.seed, 0, m.enc_dim,
                        m.dec_hidden)
    rows += evaluate_foundation(frozen, plain, dataset, FROZEN_LABEL, tasks)
    for algo in ALGOS:
        res = matrix.injected.get((algo, "multi", None))
        if res is not None:
            rows += zero_shot_rows(res, dataset, tasks, config_label(algo, "multi", "foundation"))
    for algo in ALGOS:
        for train_task in base.data.tasks:
            res = matrix.injected.get((algo, "single", train_task))
            if res is not None:
                label = f"{config_label(algo, 'single', 'foundation')}@{train_task}"
                rows += zero_shot_rows(res, dataset, tasks, label)
    return rows

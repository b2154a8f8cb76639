"""Synthetic multi-modal task data, the 7:1:1:1 split, and client sharding.

Each modality carries a class-conditional mean shift: a positive sample adds
``margin * pattern`` to unit Gaussian noise, where ``pattern`` is a fixed
per-(task, modality) template with unit RMS. Image templates are Gaussian
blobs, signal templates sinusoids, tabular templates random directions.
Validation twins reuse the templates of their source task and apply a
distribution shift.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence

import numpy as np

from .rng import rng_for
from .tasks import (ModalityKind, RAW_SHAPES, TaskSpec, TRAINING_TASKS, TWIN_OF,
                    VALIDATION_TASKS)


@dataclass(frozen=True)
class Shift:
    """Distribution shift applied to a validation twin."""
    offset: float = 0.3          # added to every feature
    margin_scale: float = 0.8    # multiplies the class margin
    noise_scale: float = 1.1


@dataclass(frozen=True)
class SyntheticTaskRecipe:
    task: TaskSpec
    margin: float = 1.0
    label_balance: float = 0.5
    pattern_key: str = ""        # whose templates to use; defaults to task.name
    shift: Optional[Shift] = None

    @property
    def key(self) -> str:
        return self.pattern_key or self.task.name


@dataclass
class TaskData:
    task: TaskSpec
    features: Dict[ModalityKind, np.ndarray]   # modality -> (n, *raw_shape)
    labels: np.ndarray                          # (n,) int64
    ids: np.ndarray                             # (n,) int64

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "TaskData":
        idx = np.asarray(idx, dtype=np.int64)
        return TaskData(self.task, {m: a[idx] for m, a in self.features.items()},
                        self.labels[idx], self.ids[idx])

    def select_ids(self, ids: Sequence[int]) -> "TaskData":
        pos = {int(i): k for k, i in enumerate(self.ids)}
        return self.subset([pos[int(i)] for i in ids])


@dataclass
class DatasetSplit:
    client_shards: List[List[int]]
    public: List[int]
    dev: List[int]
    test: List[int]

    @property
    def train(self) -> List[int]:
        return sorted(i for s in self.client_shards for i in s)


@dataclass
class TaskDataset:
    data: TaskData
    split: Optional[DatasetSplit] = None

    def part(self, name: str) -> TaskData:
        if name == "all":
            return self.data
        return self.data.select_ids(getattr(self.split, name))

    def shard(self, client: int) -> TaskData:
        return self.data.select_ids(self.split.client_shards[client])


@dataclass
class Dataset:
    training: Dict[str, TaskDataset] = field(default_factory=dict)
    validation: Dict[str, TaskDataset] = field(default_factory=dict)


# ------------------------------------------------------------------ templates

def _template(seed: int, key: str, modality: ModalityKind) -> np.ndarray:
    rng = rng_for(seed, "template", key, modality.value)
    shape = RAW_SHAPES[modality]
    if modality is ModalityKind.IMAGE:
        _, h, w = shape
        cy, cx = rng.uniform(1.5, h - 2.5), rng.uniform(1.5, w - 2.5)
        yy, xx = np.mgrid[0:h, 0:w]
        u = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 1.5 ** 2))[None]
    elif modality is ModalityKind.SIGNAL:
        leads, length = shape
        cycles = rng.uniform(2.0, 5.0)
        phase = rng.uniform(0, 2 * np.pi, size=(leads, 1))
        t = np.arange(length)[None, :]
        u = np.sin(2 * np.pi * cycles * t / length + phase)
    else:
        u = rng.normal(size=shape)
    return u / np.sqrt(np.mean(u * u))


def generate_task(recipe: SyntheticTaskRecipe, n: int, seed: int) -> TaskData:
    """Draw ``n`` labelled samples; sample ``i`` depends only on (recipe, seed, i)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    task = recipe.task
    templates = {m: _template(seed, recipe.key, m) for m in task.modalities}
    shift = recipe.shift
    margin = recipe.margin * (shift.margin_scale if shift else 1.0)
    noise = shift.noise_scale if shift else 1.0
    offset = shift.offset if shift else 0.0
    feats = {m: np.empty((n,) + RAW_SHAPES[m]) for m in task.modalities}
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        rng = rng_for(seed, "sample", task.name, i)
        y = int(rng.random() < recipe.label_balance)
        labels[i] = y
        for m in task.modalities:
            x = noise * rng.normal(size=RAW_SHAPES[m]) + offset
            feats[m][i] = x + y * margin * templates[m]
    ids = np.arange(n, dtype=np.int64)
    return TaskData(task, feats, labels, ids)


# ------------------------------------------------------------------ splitting

def partition(n_total: int, ratios: Sequence[int] = (7, 1, 1, 1)) -> List[int]:
    """Largest-remainder apportionment of ``n_total`` items; ties go to earlier parts."""
    if n_total < len(ratios):
        raise ValueError(f"cannot split {n_total} items into {len(ratios)} parts")
    total = sum(ratios)
    quotas = [Fraction(n_total * r, total) for r in ratios]
    sizes = [int(q) for q in quotas]
    left = n_total - sum(sizes)
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[:left]:
        sizes[i] += 1
    return sizes


def shard_clients(train_ids: Sequence[int], n_clients: int, seed: int) -> List[List[int]]:
    if n_clients < 1:
        raise ValueError("need at least one client")
    ids = np.array(train_ids, dtype=np.int64)
    rng_for(seed, "shard").shuffle(ids)
    return [sorted(int(i) for i in ids[c::n_clients]) for c in range(n_clients)]


def split_task(data: TaskData, n_clients: int, seed: int,
               ratios: Sequence[int] = (7, 1, 1, 1)) -> DatasetSplit:
    sizes = partition(len(data), ratios)
    ids = data.ids.copy()
    rng_for(seed, "split", data.task.name).shuffle(ids)
    cuts = np.cumsum(sizes)
    train, public, dev, test = np.split(ids, cuts[:-1])
    shards = shard_clients(train, n_clients, seed=_task_seed(seed, data.task.name))
    return DatasetSplit(shards, sorted(public.tolist()), sorted(dev.tolist()), sorted(test.tolist()))


def _task_seed(seed: int, name: str) -> int:
    return int(rng_for(seed, "shard-seed", name).integers(2 ** 31))


# --------------------------------------------------------------- the roster

# per-task class margin at scale 1.0; the multi-modality task gets the
# smallest per-modality shift since its evidence adds up across four streams
TASK_MARGIN = {"lung_opacity": 0.4, "covid19": 0.5, "ecg_abnormal": 0.8, "mortality": 0.25}


def default_recipes(margin: float = 1.0) -> Dict[str, SyntheticTaskRecipe]:
    recipes = {t.name: SyntheticTaskRecipe(t, margin=margin * TASK_MARGIN[t.name])
               for t in TRAINING_TASKS}
    for t in VALIDATION_TASKS:
        src = TWIN_OF[t.name]
        recipes[t.name] = SyntheticTaskRecipe(t, margin=margin * TASK_MARGIN[src],
                                              pattern_key=src, shift=Shift())
    return recipes


def build_dataset(seed: int, n_per_task: int = 600, n_clients: int = 5, margin: float = 1.0,
                  n_validation: int = 200, training: Sequence[str] | None = None) -> Dataset:
    recipes = default_recipes(margin)
    names = list(training) if training is not None else [t.name for t in TRAINING_TASKS]
    ds = Dataset()
    for name in names:
        data = generate_task(recipes[name], n_per_task, seed)
        ds.training[name] = TaskDataset(data, split_task(data, n_clients, seed))
    for t in VALIDATION_TASKS:
        data = generate_task(recipes[t.name], n_validation, seed)
        ds.validation[t.name] = TaskDataset(data, None)
    return ds


# ---------------------------------------------------------------------- dump

def dump_dataset(ds: Dataset, out_dir: str) -> List[str]:
    """Write one container file per split part (and per validation task)."""
    from .wire import write_tensor_file

    paths = []
    for name, td in ds.training.items():
        for part in ("train", "public", "dev", "test"):
            sub = td.part(part)
            paths.append(write_tensor_file(os.path.join(out_dir, f"{name}.{part}.fmki"),
                                           _records(sub)))
    for name, td in ds.validation.items():
        paths.append(write_tensor_file(os.path.join(out_dir, f"{name}.test.fmki"),
                                       _records(td.data)))
    return paths


def _records(data: TaskData) -> Dict[str, np.ndarray]:
    out = {}
    for k, sid in enumerate(data.ids):
        out[f"{sid}/label"] = np.array([float(data.labels[k])])
        for m in data.task.modalities:
            out[f"{sid}/{m.value}"] = data.features[m][k]
    return out

"""Communication rounds: local training, upload, aggregation, server step, broadcast.

All client -> server and server -> client traffic passes through the wire
codec, even in-process, so every round exercises serialization.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .client import ClientModel, LocalConfig, predict, task_batches, train_local
from .config import ExperimentConfig
from .datagen import Dataset, TaskData, build_dataset
from .errors import CapabilityError, ContractError, InputError, RoundError
from .foundation import (FoundationStub, StubConfig, injection_parameters, injection_step,
                         zero_shot_infer)
from .metrics import MetricsRow, classification_metrics
from .optim import Optimizer
from .rng import rng_for
from .tasks import TaskSpec, get_task
from .tasks import MODALITY_ORDER
from .wire import (META_PREFIX, ModelUpdate, deserialize_update, read_tensor_file,
                   serialize_update, write_tensor_file)

log = logging.getLogger(__name__)

BROADCAST_ID = 0xFFFFFFFF


@dataclass
class GlobalState:
    round_index: int
    encoders: Dict[str, np.ndarray]
    decoders: Dict[str, np.ndarray]
    stub: Optional[FoundationStub] = None

    def tensors(self) -> Dict[str, np.ndarray]:
        return {**self.encoders, **self.decoders}


@dataclass
class SimClient:
    client_id: int
    model: ClientModel
    shard: Dict[str, TaskData]

    def sample_count(self) -> int:
        return sum(len(d) for d in self.shard.values())


# ---------------------------------------------------------------- aggregation

def _mean_incremental(arrays: Sequence[np.ndarray]) -> np.ndarray:
    # running mean: exact for identical inputs, fixed summation order
    m = np.array(arrays[0], dtype=np.float64, copy=True)
    for k, a in enumerate(arrays[1:], start=2):
        m = m + (a - m) / k
    return m


def _mean_compensated(arrays: Sequence[np.ndarray]) -> np.ndarray:
    # Neumaier summation of deviations from the per-entry minimum; sorting each
    # entry's values first fixes the summation order, so the result does not
    # depend on which client sent which tensor
    stacked = np.sort(np.stack([np.asarray(a, dtype=np.float64) for a in arrays]), axis=0)
    base = stacked[0]
    s = np.zeros_like(base)
    c = np.zeros_like(s)
    for a in stacked:
        x = a - base
        t = s + x
        big = np.abs(s) >= np.abs(x)
        c = c + np.where(big, (s - t) + x, (x - t) + s)
        s = t
    return base + (s + c) / len(arrays)


def aggregate(updates: Sequence[ModelUpdate], compensated: bool = False
              ) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    """Unweighted per-parameter mean of client updates, in ascending client order."""
    if not updates:
        raise ContractError("aggregate needs at least one update")
    ordered = sorted(updates, key=lambda u: u.client_id)
    ref = ordered[0].tensors
    for u in ordered[1:]:
        if list(u.tensors) != list(ref):
            diff = sorted(set(u.tensors) ^ set(ref)) or ["<order>"]
            raise ContractError(f"client {u.client_id}: parameter names differ: {diff}")
        for name, arr in u.tensors.items():
            if arr.shape != ref[name].shape:
                raise ContractError(f"client {u.client_id}: parameter {name} has shape "
                                    f"{arr.shape}, expected {ref[name].shape}")
    mean = _mean_compensated if compensated else _mean_incremental
    out = {name: mean([u.tensors[name] for u in ordered]) for name in ref}
    enc = {k: v for k, v in out.items() if k.startswith("enc.")}
    dec = {k: v for k, v in out.items() if k.startswith("dec.")}
    return enc, dec


# ------------------------------------------------------------- server phases

def _local_config(cfg: ExperimentConfig) -> LocalConfig:
    f = cfg.federation
    return LocalConfig(epochs=f.local_epochs, batch_size=f.batch_size, lr=f.local_lr,
                       algo=f.algo, lam=f.lam)


def _client_update(client: SimClient, global_tensors: Dict[str, np.ndarray],
                   cfg: ExperimentConfig, round_index: int) -> Tuple[bytes, List[float]]:
    trace = train_local(client.model, client.shard, _local_config(cfg), global_tensors,
                        seed=cfg.seed, stream=(client.client_id, round_index))
    u = ModelUpdate(client.client_id, round_index, client.model.state_dict(),
                    client.sample_count())
    return serialize_update(u), trace


def global_finetune(model: ClientModel, public: Mapping[str, TaskData], cfg: ExperimentConfig,
                    round_index: int) -> List[float]:
    """Fine-tune the aggregated client-style model on server public data."""
    f = cfg.federation
    local = LocalConfig(epochs=f.finetune_epochs, batch_size=f.batch_size, lr=f.finetune_lr,
                        algo="fedavg")
    return train_local(model, public, local, seed=cfg.seed, stream=("public", round_index))


def inject(stub: FoundationStub, model: ClientModel, public: Mapping[str, TaskData],
           cfg: ExperimentConfig, round_index: int) -> List[float]:
    """K epochs of injection steps; the k-th step uses every task's k-th public batch."""
    f = cfg.federation
    opt = Optimizer(injection_parameters(stub, model.enc), "adam", f.foundation_lr)
    losses = []
    for epoch in range(f.injection_epochs):
        schedules = {name: task_batches(data, f.batch_size,
                                        rng_for(cfg.seed, "inject", round_index, epoch, name))
                     for name, data in public.items() if len(data) > 0}
        longest = max((len(b) for b in schedules.values()), default=0)
        for k in range(longest):
            batches = {name: (model.tasks[name], *b[k])
                       for name, b in schedules.items() if k < len(b)}
            losses.append(injection_step(stub, model.enc, batches, opt=opt))
    return losses


# --------------------------------------------------------------------- rounds

@dataclass
class RoundLog:
    round_index: int
    client_traces: List[List[float]]
    server_trace: List[float] = field(default_factory=list)


def broadcast(state: GlobalState, clients: Sequence[SimClient]) -> None:
    msg = serialize_update(ModelUpdate(BROADCAST_ID, state.round_index, state.tensors(), 0))
    for c in clients:
        c.model.load_state_dict(deserialize_update(msg).tensors)


def run_round(state: GlobalState, clients: Sequence[SimClient], cfg: ExperimentConfig,
              server_model: ClientModel, public: Mapping[str, TaskData],
              pool: Optional[ThreadPoolExecutor] = None,
              last: Optional[bool] = None) -> Tuple[GlobalState, RoundLog]:
    r = state.round_index
    f = cfg.federation
    global_tensors = state.tensors()

    def work(c: SimClient):
        try:
            return _client_update(c, global_tensors, cfg, r)
        except Exception as e:
            raise RoundError(r, c.client_id, e) from e

    if pool is not None:
        results = list(pool.map(work, clients))
    else:
        results = [work(c) for c in clients]
    updates = [deserialize_update(msg) for msg, _ in results]
    enc, dec = aggregate(updates, compensated=f.compensated)
    server_model.load_state_dict({**enc, **dec})
    rlog = RoundLog(r, [t for _, t in results])

    if last is None:
        last = r == f.num_rounds - 1
    if f.variant == "global_finetune" and (f.finetune_every_round or last):
        rlog.server_trace = global_finetune(server_model, public, cfg, r)
    elif f.variant == "llm_finetune":
        rlog.server_trace = inject(state.stub, server_model, public, cfg, r)
    new = GlobalState(r + 1, server_model.encoder_state(), server_model.decoder_state(),
                      state.stub)
    broadcast(new, clients)
    for trace in rlog.client_traces + [rlog.server_trace]:
        if not all(np.isfinite(trace)):
            raise FloatingPointError(f"round {r}: non-finite loss in trace")
    return new, rlog


# ----------------------------------------------------------------- checkpoints

STUB_PREFIX = "stub."
_TRAINED = META_PREFIX + "trained_modalities"


def checkpoint_tensors(state: GlobalState) -> Dict[str, np.ndarray]:
    """Global encoders and decoders, plus the stub's trainable periphery if any."""
    out = dict(state.tensors())
    if state.stub is not None:
        for name, p in state.stub.named_parameters():
            if p.trainable:
                out[STUB_PREFIX + name] = p.data
        out[_TRAINED] = np.array([float(m in state.stub.trained_modalities)
                                  for m in MODALITY_ORDER])
    return out


def save_checkpoint(path: str, state: GlobalState) -> str:
    return write_tensor_file(path, checkpoint_tensors(state), state.round_index, BROADCAST_ID)


def load_checkpoint(path: str) -> Tuple[int, Dict[str, np.ndarray]]:
    """``(round_index, tensors)``; raises a ``ParseError`` on a damaged file."""
    round_index, _, tensors = read_tensor_file(path)
    return round_index, tensors


def _restore(state: GlobalState, server_model: ClientModel,
             checkpoint: Tuple[int, Mapping[str, np.ndarray]]) -> GlobalState:
    round_index, tensors = checkpoint
    model_part = {k: v for k, v in tensors.items()
                  if not k.startswith(STUB_PREFIX) and not k.startswith(META_PREFIX)}
    try:
        server_model.load_state_dict(model_part)
    except (KeyError, ValueError) as e:
        raise InputError(f"checkpoint does not match the configured model: {e}") from None
    stub = state.stub
    if stub is not None:
        params = {STUB_PREFIX + n: p for n, p in stub.named_parameters() if p.trainable}
        if any(k in tensors for k in params):
            for k, p in params.items():
                if k not in tensors or tensors[k].shape != p.shape:
                    raise InputError(f"checkpoint entry {k} is missing or has the wrong shape")
                p.data = tensors[k].copy()
            mask = tensors.get(_TRAINED)
            if mask is not None:
                stub.trained_modalities = {m for m, v in zip(MODALITY_ORDER, mask) if v}
    return GlobalState(round_index, server_model.encoder_state(), server_model.decoder_state(),
                       stub)


# ----------------------------------------------------------------- experiment

SYMBOL = {"base": "", "global_finetune": "^+", "byproduct": "^*", "foundation": "^F"}


def config_label(algo: str, scope: str, surface: str) -> str:
    name = {"fedavg": "FedAvg", "fedprox": "FedProx"}[algo]
    return f"{name}_{scope[0]}{SYMBOL[surface]}"


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    tasks: List[TaskSpec]
    state: GlobalState
    global_model: ClientModel
    rows: List[MetricsRow]
    logs: List[RoundLog]
    stub: Optional[FoundationStub] = None

    def row(self, label: str, task: str) -> MetricsRow:
        for r in self.rows:
            if r.config == label and r.task == task:
                return r
        raise KeyError((label, task))


def stub_config(cfg: ExperimentConfig) -> StubConfig:
    m = cfg.model
    return StubConfig(vocab_size=m.vocab_size, d_k=m.d_k, n_blocks=m.n_blocks,
                      block_hidden=m.block_hidden, rank=m.rank, n_experts=m.n_experts,
                      router_mlp=m.router_mlp, enc_dim=m.enc_dim)


def evaluate_global(model: ClientModel, dataset: Dataset, label: str) -> List[MetricsRow]:
    rows = []
    for name, task in model.tasks.items():
        test = dataset.training[name].part("test")
        preds, _ = predict(model, task, test)
        rows.append(classification_metrics(preds, test.labels, config=label, task=name))
    return rows


def evaluate_foundation(stub: FoundationStub, model: ClientModel, dataset: Dataset, label: str,
                        tasks: Optional[Sequence[TaskSpec]] = None, part: str = "test"
                        ) -> List[MetricsRow]:
    rows = []
    for task in tasks or list(model.tasks.values()):
        td = dataset.training.get(task.name) or dataset.validation[task.name]
        data = td.part(part) if td.split is not None else td.data
        try:
            preds, _ = zero_shot_infer(stub, model.enc, task, data.features)
        except CapabilityError:
            rows.append(MetricsRow.not_capable(label, task.name, len(data)))
            continue
        rows.append(classification_metrics(preds, data.labels, config=label, task=task.name))
    return rows


def run_experiment(cfg: ExperimentConfig, dataset: Optional[Dataset] = None,
                   checkpoint: Optional[Tuple[int, Mapping[str, np.ndarray]]] = None
                   ) -> ExperimentResult:
    """Run ``num_rounds`` synchronous rounds for one (algo, scope, variant) cell.

    Single scope requires ``federation.task``; the matrix harness runs one
    experiment per task. With ``checkpoint`` (as returned by
    ``load_checkpoint``) training resumes from that global state and runs
    ``num_rounds`` further rounds.
    """
    f = cfg.federation
    if dataset is None:
        dataset = build_dataset(cfg.seed, cfg.data.n_per_task, f.num_clients, cfg.data.margin,
                                cfg.data.n_validation, cfg.data.tasks)
    if f.scope == "single":
        if f.task is None:
            raise ContractError("single-task scope needs federation.task")
        names = [f.task]
    else:
        names = list(cfg.data.tasks)
    tasks = [get_task(n) for n in names]
    m = cfg.model
    clients = []
    for c in range(f.num_clients):
        model = ClientModel(tasks, cfg.seed, c, m.enc_dim, m.dec_hidden)
        shard = {n: dataset.training[n].shard(c) for n in names}
        clients.append(SimClient(c, model, shard))
    server_model = ClientModel(tasks, cfg.seed, BROADCAST_ID, m.enc_dim, m.dec_hidden)
    public = {n: dataset.training[n].part("public") for n in names}
    stub = FoundationStub(stub_config(cfg), cfg.seed) if f.variant == "llm_finetune" else None
    state = GlobalState(0, server_model.encoder_state(), server_model.decoder_state(), stub)
    if checkpoint is not None:
        state = _restore(state, server_model, checkpoint)
        broadcast(state, clients)
    end = state.round_index + f.num_rounds

    logs = []
    pool = ThreadPoolExecutor(f.threads) if f.threads > 1 else None
    try:
        for _ in range(f.num_rounds):
            last = state.round_index == end - 1
            state, rlog = run_round(state, clients, cfg, server_model, public, pool, last)
            logs.append(rlog)
            log.info("round %d done: mean client loss %.4f", rlog.round_index,
                     float(np.mean([t[-1] for t in rlog.client_traces if t] or [np.nan])))
    finally:
        if pool is not None:
            pool.shutdown()

    server_model.load_state_dict(state.tensors())
    rows: List[MetricsRow] = []
    if f.variant == "base":
        rows += evaluate_global(server_model, dataset, config_label(f.algo, f.scope, "base"))
    elif f.variant == "global_finetune":
        rows += evaluate_global(server_model, dataset,
                                config_label(f.algo, f.scope, "global_finetune"))
    else:
        rows += evaluate_global(server_model, dataset, config_label(f.algo, f.scope, "byproduct"))
        rows += evaluate_foundation(stub, server_model, dataset,
                                    config_label(f.algo, f.scope, "foundation"))
    return ExperimentResult(cfg, tasks, state, server_model, rows, logs, stub)

"""Client-side multi-modal multi-task models and local training."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import ContractError, InputError
from .nn import MLP, Conv1d, Conv2d, Linear, Module
from .optim import Optimizer
from .rng import rng_for
from .tasks import ModalityKind, RAW_SHAPES, TaskSpec
from .tensor import Tensor

ENC_DIM = 16
DEC_HIDDEN = 32

Sample = Mapping[ModalityKind, np.ndarray]  # modality -> (B, *raw_shape)


class ImageEncoder(Module):
    # two 3x3 convs, spatial mean pool, linear head
    def __init__(self, rng, out_dim: int = ENC_DIM):
        c = RAW_SHAPES[ModalityKind.IMAGE][0]
        self.conv1 = Conv2d(c, 4, 3, rng)
        self.conv2 = Conv2d(4, 8, 3, rng)
        self.head = Linear(8, out_dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = T.relu(self.conv2(T.relu(self.conv1(x))))
        return self.head(h.mean(axis=(2, 3)))


class SignalEncoder(Module):
    def __init__(self, rng, out_dim: int = ENC_DIM):
        c = RAW_SHAPES[ModalityKind.SIGNAL][0]
        self.conv1 = Conv1d(c, 8, 5, rng)
        self.conv2 = Conv1d(8, 8, 5, rng)
        self.head = Linear(8, out_dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = T.relu(self.conv2(T.relu(self.conv1(x))))
        return self.head(h.mean(axis=2))


class TabularEncoder(Module):
    """MLP over a flattened time window."""

    def __init__(self, modality: ModalityKind, rng, out_dim: int = ENC_DIM):
        n_in = int(np.prod(RAW_SHAPES[modality]))
        self.mlp = MLP([n_in, 32, out_dim], rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.mlp(x.reshape(x.shape[0], -1))


class Encoder(Module):
    def __init__(self, modality: ModalityKind, seed: int, out_dim: int = ENC_DIM):
        rng = rng_for(seed, "init", "encoder", modality.value)
        self.modality = modality
        self.output_dim = out_dim
        if modality is ModalityKind.IMAGE:
            self.net = ImageEncoder(rng, out_dim)
        elif modality is ModalityKind.SIGNAL:
            self.net = SignalEncoder(rng, out_dim)
        else:
            self.net = TabularEncoder(modality, rng, out_dim)

    def __call__(self, x) -> Tensor:
        x = T.as_tensor(x)
        if x.shape[1:] != RAW_SHAPES[self.modality]:
            raise InputError(f"{self.modality.value}: expected raw shape "
                             f"{RAW_SHAPES[self.modality]}, got {x.shape[1:]}")
        return self.net(x)


class Decoder(Module):
    def __init__(self, task: TaskSpec, input_dim: int, seed: int, hidden: int = DEC_HIDDEN):
        rng = rng_for(seed, "init", "decoder", task.name)
        self.task_id = task.task_id
        self.input_dim = input_dim
        self.mlp = MLP([input_dim, hidden, task.num_classes], rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.mlp(x)


class ClientModel(Module):
    """One encoder per modality used by any task, one decoder per task.

    Parameter names are ``enc.<modality>.…`` and ``dec.<task>.…``; they are
    the keys of the wire format and of aggregation.
    """

    def __init__(self, tasks: Sequence[TaskSpec], seed: int, client_id: int = 0,
                 enc_dim: int = ENC_DIM, dec_hidden: int = DEC_HIDDEN):
        self.client_id = client_id
        self.tasks = {t.name: t for t in tasks}
        mods = sorted({m for t in tasks for m in t.modalities}, key=lambda m: m.index)
        self.enc = {m.value: Encoder(m, seed, enc_dim) for m in mods}
        self.dec = {t.name: Decoder(t, enc_dim * len(t.modalities), seed, dec_hidden)
                    for t in tasks}
        for name, p in self.named_parameters():
            p.name = name

    def encoder(self, m: ModalityKind) -> Encoder:
        return self.enc[m.value]

    def encoder_state(self) -> Dict[str, np.ndarray]:
        return {n: v for n, v in self.state_dict().items() if n.startswith("enc.")}

    def decoder_state(self) -> Dict[str, np.ndarray]:
        return {n: v for n, v in self.state_dict().items() if n.startswith("dec.")}

    def task_parameters(self, task: TaskSpec) -> List[T.Parameter]:
        """Parameters that a forward pass for ``task`` touches."""
        params = [p for m in task.modalities for p in self.encoder(m).parameters()]
        return params + self.dec[task.name].parameters()

    def load_partial(self, state: Mapping[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        for n, v in state.items():
            if n not in own:
                raise ContractError(f"unknown parameter {n!r}")
            if own[n].shape != v.shape:
                raise ContractError(f"shape mismatch for {n}: {own[n].shape} vs {v.shape}")
            own[n].data = np.array(v, dtype=np.float64, copy=True)


def _check_task(model: ClientModel, task: TaskSpec) -> None:
    if task.name not in model.tasks:
        raise InputError(f"model has no decoder for task {task.name!r} (id {task.task_id})")


def encode_concat(encoders: Mapping[str, Encoder], task: TaskSpec, sample: Sample) -> Tensor:
    """Concatenate per-modality encoder outputs in ``task.modalities`` order."""
    parts = []
    for m in task.modalities:
        if m not in sample:
            raise InputError(f"sample is missing modality {m.value!r} required by {task.name!r}")
        if m.value not in encoders:
            raise InputError(f"no encoder for modality {m.value!r}")
        parts.append(encoders[m.value](sample[m]))
    return parts[0] if len(parts) == 1 else T.concat(parts, axis=1)


def client_forward(model: ClientModel, task: TaskSpec, sample: Sample) -> Tensor:
    _check_task(model, task)
    return model.dec[task.name](encode_concat(model.enc, task, sample))


Batch = Tuple[Sample, np.ndarray]


def local_loss(model: ClientModel, batches: Mapping[str, Batch]) -> Tensor:
    """Unweighted mean over tasks of each task's mean cross-entropy."""
    if not batches:
        raise InputError("local_loss needs at least one task batch")
    losses = []
    for name, (sample, labels) in batches.items():
        if len(labels) == 0:
            raise InputError(f"empty batch for task {name!r}")
        task = model.tasks.get(name)
        if task is None:
            raise InputError(f"unknown task {name!r}")
        losses.append(T.cross_entropy(client_forward(model, task, sample), labels))
    total = losses[0]
    for l in losses[1:]:
        total = total + l
    return total * (1.0 / len(losses))


def fedprox_penalty(model: ClientModel, global_state, lam: float,
                    params: Optional[Sequence[T.Parameter]] = None) -> Tensor:
    """(lam / 2) * squared distance between model and global parameters.

    ``global_state`` is a ``ClientModel`` or a name -> array mapping. With
    ``params`` given, only those parameters enter the sum.
    """
    ref = global_state.state_dict() if isinstance(global_state, Module) else global_state
    own = dict(model.named_parameters())
    if set(ref) != set(own):
        raise ContractError(f"structure mismatch: {sorted(set(ref) ^ set(own))}")
    chosen = list(own.values()) if params is None else list(params)
    total = T.Tensor(0.0)
    for p in chosen:
        g = ref[p.name]
        if g.shape != p.shape:
            raise ContractError(f"shape mismatch for {p.name}: {p.shape} vs {g.shape}")
        total = total + T.square(p - g).sum()
    return total * (lam / 2.0)


@dataclass
class LocalConfig:
    epochs: int = 1
    batch_size: int = 32
    lr: float = 1e-4
    algo: str = "fedavg"      # "fedavg" | "fedprox"
    lam: float = 0.0


def task_batches(data, batch_size: int, rng: np.random.Generator) -> List[Batch]:
    order = rng.permutation(len(data))
    out = []
    for s in range(0, len(order), batch_size):
        idx = order[s:s + batch_size]
        out.append(({m: a[idx] for m, a in data.features.items()}, data.labels[idx]))
    return out


def train_local(model: ClientModel, shard: Mapping[str, object], config: LocalConfig,
                global_state: Optional[Mapping[str, np.ndarray]] = None, seed: int = 0,
                stream: Tuple = ()) -> List[float]:
    """Minibatch Adam on the client's shard; returns the mean step loss per epoch.

    Tasks are visited round-robin, one optimizer step per task batch, so a
    step only moves the parameters its task touches. The FedProx term is
    applied to the same parameters. ``stream`` extends the RNG path (client,
    round) so batch order is reproducible.
    """
    prox = config.algo.lower() == "fedprox"
    if prox and global_state is None:
        global_state = model.state_dict()
    opt = Optimizer(model.parameters(), "adam", config.lr)
    trace = []
    for epoch in range(config.epochs):
        schedules = {name: task_batches(data, config.batch_size,
                                        rng_for(seed, "batches", *stream, epoch, name))
                     for name, data in shard.items() if len(data) > 0}
        if not schedules:
            raise InputError("shard has no samples for any task")
        longest = max(len(b) for b in schedules.values())
        losses = []
        for k in range(longest):
            for name, batches in schedules.items():
                if k >= len(batches):
                    continue
                loss = local_loss(model, {name: batches[k]})
                if prox:
                    task = model.tasks[name]
                    loss = loss + fedprox_penalty(model, global_state, config.lam,
                                                  model.task_parameters(task))
                T.backward(loss)
                opt.step()
                losses.append(loss.item())
        trace.append(float(np.mean(losses)))
    return trace


def predict(model: ClientModel, task: TaskSpec, data) -> Tuple[np.ndarray, np.ndarray]:
    """Argmax labels and positive-class probabilities for every sample of ``data``."""
    logits = client_forward(model, task, data.features).data
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    return logits.argmax(axis=1), p[:, -1]

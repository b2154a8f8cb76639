"""Frozen foundation-model stub and the knowledge-injection periphery.

The stub has a frozen token embedding table, frozen residual MLP blocks and
a frozen classification head. Around it sit the trainable parts: an
alignment map from encoder features to the embedding width, LoRA experts on
every block, and an attention router that turns a task's prompt and its
modality description into mixing weights over the experts.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import List, Mapping, Optional, Set, Tuple

import numpy as np

from . import tensor as T
from .client import ENC_DIM, Encoder, Sample, encode_concat
from .errors import CapabilityError, DimensionError, InputError
from .nn import MLP, Linear, Module
from .optim import Optimizer
from .rng import rng_for
from .tasks import MODALITY_ORDER, ModalityKind, TaskSpec
from .tensor import Parameter, Tensor


@dataclass
class StubConfig:
    vocab_size: int = 512
    d_k: int = 32
    n_blocks: int = 2
    block_hidden: int = 64
    rank: int = 4
    n_experts: int = 4
    n_classes: int = 2
    router_hidden: int = 16
    router_mlp: bool = True      # False: single linear map after pooling
    enc_dim: int = ENC_DIM
    lora_init_std: float = 0.1


class FrozenBlock(Module):
    """x + relu(x W1 + b1) W2 + b2, all frozen."""

    def __init__(self, width: int, hidden: int, rng):
        self.w1 = Parameter(rng.normal(0, np.sqrt(2.0 / width), (width, hidden)), trainable=False)
        self.b1 = Parameter(rng.normal(0, 0.1, hidden), trainable=False)
        self.w2 = Parameter(rng.normal(0, np.sqrt(1.0 / hidden), (hidden, width)), trainable=False)
        self.b2 = Parameter(np.zeros(width), trainable=False)

    def __call__(self, x: Tensor) -> Tensor:
        return x + (T.matmul(T.relu(T.matmul(x, self.w1) + self.b1), self.w2) + self.b2)


class LoraExpert(Module):
    """Low-rank update x -> x A B with A: width x r, B: r x width (B zero at init)."""

    def __init__(self, width: int, rank: int, rng, std: float):
        self.A = Parameter(rng.normal(0, std, (width, rank)))
        self.B = Parameter(np.zeros((rank, width)))

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(T.matmul(x, self.A), self.B)


class Router(Module):
    def __init__(self, cfg: StubConfig, rng):
        d = cfg.d_k
        s = 1.0 / np.sqrt(d)
        self.W_q = Parameter(rng.normal(0, s, (d, d)))
        self.W_k = Parameter(rng.normal(0, s, (d, d)))
        self.W_v = Parameter(rng.normal(0, s, (d, d)))
        if cfg.router_mlp:
            self.mlp = MLP([d, cfg.router_hidden, cfg.n_experts], rng, activation="tanh")
        else:
            self.mlp = Linear(d, cfg.n_experts, rng)


@dataclass
class RouterOutput:
    alpha: Tensor

    @property
    def values(self) -> np.ndarray:
        return self.alpha.data


class FoundationStub(Module):
    def __init__(self, cfg: StubConfig = StubConfig(), seed: int = 0):
        self.cfg = cfg
        frozen_rng = rng_for(seed, "init", "foundation", "frozen")
        width = 2 * cfg.d_k
        self.emb = Parameter(frozen_rng.normal(0, 1.0, (cfg.vocab_size, cfg.d_k)), trainable=False)
        self.blocks = [FrozenBlock(width, cfg.block_hidden, frozen_rng) for _ in range(cfg.n_blocks)]
        self.head = Linear(width, cfg.n_classes, frozen_rng)
        self.head.freeze()
        rng = rng_for(seed, "init", "foundation", "periphery")
        # one shared linear over the canonical per-modality slot layout
        self.align = Linear(cfg.enc_dim * len(MODALITY_ORDER), cfg.d_k, rng,
                            scale=1.0 / np.sqrt(cfg.enc_dim))
        self.experts = [[LoraExpert(width, cfg.rank, rng, cfg.lora_init_std)
                         for _ in range(cfg.n_experts)] for _ in range(cfg.n_blocks)]
        self.router = Router(cfg, rng)
        self.trained_modalities: Set[ModalityKind] = set()
        for name, p in self.named_parameters():
            p.name = name

    @property
    def width(self) -> int:
        return 2 * self.cfg.d_k

    def frozen_parameters(self) -> List[Tuple[str, Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if not p.trainable]

    def periphery_parameters(self) -> List[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def frozen_bytes(self) -> bytes:
        from .wire import encode_tensors
        return encode_tensors({n: p.data for n, p in self.frozen_parameters()})

    def zero_router(self) -> None:
        for p in self.router.parameters():
            p.data = np.zeros_like(p.data)


# ------------------------------------------------------------------ embedding

def tokenize(text: str, vocab_size: int) -> List[int]:
    toks = text.lower().split()
    if not toks:
        raise InputError("cannot embed empty text")
    return [zlib.crc32(t.encode("utf-8")) % vocab_size for t in toks]


def embed_text(stub: FoundationStub, text: str) -> Tensor:
    """(L, d_k) rows of the frozen embedding table, one per whitespace token."""
    return T.take_rows(stub.emb, tokenize(text, stub.cfg.vocab_size))


# ------------------------------------------------------------------ alignment

def align_features(stub: FoundationStub, encoders: Mapping[str, Encoder], task: TaskSpec,
                   sample: Sample) -> Tensor:
    """[aligned encoder features ; mean-pooled prompt embedding], shape (B, 2 d_k).

    The alignment weight rows used are the slots of the task's modalities, in
    the task's modality order, so the result equals one linear map over a
    zero-filled six-slot feature vector.
    """
    feats = encode_concat(encoders, task, sample)
    e = stub.cfg.enc_dim
    rows = np.concatenate([np.arange(m.index * e, (m.index + 1) * e) for m in task.modalities])
    w = T.take_rows(stub.align.weight, rows)
    aligned = T.matmul(feats, w) + stub.align.bias
    prompt = embed_text(stub, task.prompt_text).mean(axis=0, keepdims=True)
    batch = feats.shape[0]
    prompt_rows = T.matmul(Tensor(np.ones((batch, 1))), prompt)
    return T.concat([aligned, prompt_rows], axis=1)


# --------------------------------------------------------------------- router

def router_logits(stub: FoundationStub, task: TaskSpec) -> Tensor:
    r = stub.router
    m = embed_text(stub, task.modality_description)   # queries
    t = embed_text(stub, task.prompt_text)            # keys and values
    q = T.matmul(m, r.W_q)
    k = T.matmul(t, r.W_k)
    v = T.matmul(t, r.W_v)
    att = T.softmax(T.matmul(q, T.transpose(k)) * (1.0 / np.sqrt(stub.cfg.d_k)), axis=1)
    pooled = T.matmul(att, v).mean(axis=0, keepdims=True)   # mean over query tokens
    return T.reshape(r.mlp(pooled), (stub.cfg.n_experts,))


def route(stub: FoundationStub, task: TaskSpec, scale: float = 1.0) -> RouterOutput:
    logits = router_logits(stub, task)
    if scale != 1.0:
        logits = logits * scale
    return RouterOutput(T.softmax(logits, axis=0))


# ---------------------------------------------------------------- LoRA + MoE

def frozen_forward(stub: FoundationStub, h: Tensor) -> Tensor:
    """The stub with no adapters at all."""
    if h.shape[-1] != stub.width:
        raise DimensionError(f"input width {h.shape[-1]} does not match backbone {stub.width}")
    x = h
    for block in stub.blocks:
        x = block(x)
    return stub.head(x)


def lora_moe_forward(h: Tensor, alpha: RouterOutput, stub: FoundationStub) -> Tensor:
    if h.shape[-1] != stub.width:
        raise DimensionError(f"input width {h.shape[-1]} does not match backbone {stub.width}")
    a = alpha.alpha
    P = stub.cfg.n_experts
    if a.shape != (P,):
        raise DimensionError(f"alpha has shape {a.shape}, expected ({P},)")
    x = h
    for block, experts in zip(stub.blocks, stub.experts):
        delta = None
        for p, expert in enumerate(experts):
            term = expert(x) * T.index(a, p)
            delta = term if delta is None else delta + term
        x = block(x) + delta
    return stub.head(x)


def foundation_forward(stub: FoundationStub, encoders: Mapping[str, Encoder], task: TaskSpec,
                       sample: Sample) -> Tensor:
    h = align_features(stub, encoders, task, sample)
    return lora_moe_forward(h, route(stub, task), stub)


# ------------------------------------------------------------------ injection

def injection_parameters(stub: FoundationStub, encoders: Mapping[str, Encoder]) -> List[Parameter]:
    enc = [p for k in sorted(encoders) for p in encoders[k].parameters()]
    return enc + stub.periphery_parameters()


def injection_loss(stub: FoundationStub, encoders: Mapping[str, Encoder],
                   batches: Mapping[str, Tuple[TaskSpec, Sample, np.ndarray]]) -> Tensor:
    losses = [T.cross_entropy(foundation_forward(stub, encoders, task, sample), labels)
              for task, sample, labels in batches.values()]
    total = losses[0]
    for l in losses[1:]:
        total = total + l
    return total * (1.0 / len(losses))


def injection_step(stub: FoundationStub, encoders: Mapping[str, Encoder],
                   batches: Mapping[str, Tuple[TaskSpec, Sample, np.ndarray]],
                   lr: float = 5e-4, opt: Optional[Optimizer] = None) -> float:
    """One Adam step on the public batches; only encoders and periphery move."""
    if not batches:
        raise InputError("injection needs at least one public batch")
    if opt is None:
        opt = Optimizer(injection_parameters(stub, encoders), "adam", lr)
    loss = injection_loss(stub, encoders, batches)
    T.backward(loss)
    opt.step()
    for task, _, _ in batches.values():
        stub.trained_modalities.update(task.modalities)
    return loss.item()


def zero_shot_infer(stub: FoundationStub, encoders: Mapping[str, Encoder], task: TaskSpec,
                    sample: Sample) -> Tuple[np.ndarray, np.ndarray]:
    """Predicted labels and positive-class scores for a (possibly unseen) task."""
    missing = [m.value for m in task.modalities
               if m not in stub.trained_modalities or m.value not in encoders]
    if missing:
        raise CapabilityError(f"cannot handle task {task.name!r}: modalities {missing} "
                              f"were never injected")
    logits = foundation_forward(stub, encoders, task, sample).data
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    return logits.argmax(axis=1), p[:, -1]

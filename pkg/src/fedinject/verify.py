"""Self-check suite behind ``fedinject verify``.

Gradient checks cover every layer type plus the full client and injection
forward passes, each over many seeds; smooth maps must agree with central
differences to 1e-4, maps containing ReLU kinks or attention to 1e-3. A
handful of cheap invariants (aggregation, freezing, routing, wire format)
run afterwards.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from . import tensor as T
from .client import ClientModel, Encoder, local_loss, fedprox_penalty
from .errors import ParseError
from .federation import aggregate
from .foundation import (FoundationStub, RouterOutput, StubConfig, align_features,
                         frozen_forward, injection_loss, injection_step, lora_moe_forward, route)
from .gradcheck import grad_check
from .nn import MLP, Conv1d, Conv2d, Linear
from .rng import rng_for
from .tasks import RAW_SHAPES, TRAINING_TASKS, ModalityKind
from .tensor import Parameter, Tensor
from .wire import ModelUpdate, deserialize_update, serialize_update

SMOOTH_TOL = 1e-4
KINK_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def random_sample(task, batch: int, rng):
    return {m: rng.normal(size=(batch,) + RAW_SHAPES[m]) for m in task.modalities}


# ----------------------------------------------------------- gradient cases
# each case builds (scalar closure, params) for one seed; a random read-out
# weight makes every output entry carry gradient

def _case_linear(seed):
    rng = rng_for(seed, "verify", "linear")
    layer = Linear(5, 3, rng)
    x = Tensor(rng.normal(size=(4, 5)))
    w = rng.normal(size=(4, 3))
    return lambda: (layer(x) * w).sum(), layer.parameters()


def _case_tanh_mlp(seed):
    rng = rng_for(seed, "verify", "tanh")
    net = MLP([4, 6, 3], rng, activation="tanh")
    x = Tensor(rng.normal(size=(3, 4)))
    w = rng.normal(size=(3, 3))
    return lambda: (net(x) * w).sum(), net.parameters()


def _case_cross_entropy(seed):
    rng = rng_for(seed, "verify", "ce")
    logits = Parameter(rng.normal(size=(5, 4)), name="logits")
    labels = rng.integers(0, 4, size=5)
    return lambda: T.cross_entropy(logits, labels), [logits]


def _case_softmax(seed):
    rng = rng_for(seed, "verify", "softmax")
    x = Parameter(rng.normal(size=(3, 5)), name="x")
    w = rng.normal(size=(3, 5))
    return lambda: (T.softmax(x, axis=1) * w).sum() + (T.log_softmax(x, axis=0) * w).sum(), [x]


def _case_conv1d(seed):
    rng = rng_for(seed, "verify", "conv1d")
    layer = Conv1d(2, 3, 3, rng)
    x = Tensor(rng.normal(size=(2, 2, 9)))
    w = rng.normal(size=(2, 3, 7))
    return lambda: (layer(x) * w).sum(), layer.parameters()


def _case_conv2d(seed):
    rng = rng_for(seed, "verify", "conv2d")
    layer = Conv2d(2, 3, 3, rng)
    x = Tensor(rng.normal(size=(2, 2, 5, 5)))
    w = rng.normal(size=(2, 3, 3, 3))
    return lambda: (layer(x) * w).sum(), layer.parameters()


def _case_relu_mlp(seed):
    rng = rng_for(seed, "verify", "relu")
    net = MLP([4, 8, 3], rng)
    x = Tensor(rng.normal(size=(3, 4)))
    w = rng.normal(size=(3, 3))
    return lambda: (net(x) * w).sum(), net.parameters()


def _encoder_case(modality):
    def case(seed):
        enc = Encoder(modality, seed)
        rng = rng_for(seed, "verify", "enc", modality.value)
        x = rng.normal(size=(2,) + RAW_SHAPES[modality])
        w = rng.normal(size=(2, enc.output_dim))
        return lambda: (enc(x) * w).sum(), enc.parameters()
    return case


def _case_client(seed):
    tasks = TRAINING_TASKS
    model = ClientModel(tasks, seed)
    rng = rng_for(seed, "verify", "client")
    batches = {t.name: (random_sample(t, 3, rng), rng.integers(0, 2, size=3)) for t in tasks}
    ref = {k: v + rng.normal(0, 0.1, v.shape) for k, v in model.state_dict().items()}
    return (lambda: local_loss(model, batches) + fedprox_penalty(model, ref, 0.5),
            model.parameters())


def _small_stub(seed):
    return FoundationStub(StubConfig(d_k=8, block_hidden=12, rank=2, n_experts=3,
                                     router_hidden=6, vocab_size=64), seed)


def _randomize_b(stub, rng):
    for row in stub.experts:
        for e in row:
            e.B.data = rng.normal(0, 0.3, e.B.shape)


def _case_router(seed):
    stub = _small_stub(seed)
    task = TRAINING_TASKS[seed % len(TRAINING_TASKS)]
    w = rng_for(seed, "verify", "router").normal(size=stub.cfg.n_experts)
    return lambda: (route(stub, task).alpha * w).sum(), stub.router.parameters()


def _case_lora(seed):
    stub = _small_stub(seed)
    rng = rng_for(seed, "verify", "lora")
    _randomize_b(stub, rng)
    h = Tensor(rng.normal(size=(3, stub.width)))
    alpha = Parameter(rng.dirichlet(np.ones(stub.cfg.n_experts)), name="alpha")
    w = rng.normal(size=(3, stub.cfg.n_classes))
    params = [p for row in stub.experts for e in row for p in e.parameters()] + [alpha]

    def f():
        return (lora_moe_forward(h, RouterOutput(alpha), stub) * w).sum()
    return f, params


def _case_injection(seed):
    stub = _small_stub(seed)
    model = ClientModel(TRAINING_TASKS, seed, enc_dim=stub.cfg.enc_dim)
    rng = rng_for(seed, "verify", "inject")
    _randomize_b(stub, rng)
    batches = {t.name: (t, random_sample(t, 2, rng), rng.integers(0, 2, size=2))
               for t in TRAINING_TASKS}
    params = [p for k in sorted(model.enc) for p in model.enc[k].parameters()]
    params += stub.periphery_parameters()
    return lambda: injection_loss(stub, model.enc, batches), params


GRAD_CASES = [
    ("linear", _case_linear, SMOOTH_TOL),
    ("tanh_mlp", _case_tanh_mlp, SMOOTH_TOL),
    ("softmax", _case_softmax, SMOOTH_TOL),
    ("cross_entropy", _case_cross_entropy, SMOOTH_TOL),
    ("conv1d", _case_conv1d, SMOOTH_TOL),
    ("conv2d", _case_conv2d, SMOOTH_TOL),
    ("relu_mlp", _case_relu_mlp, KINK_TOL),
    *[(f"encoder_{m.value}", _encoder_case(m), KINK_TOL) for m in ModalityKind],
    ("client_loss_fedprox", _case_client, KINK_TOL),
    ("router", _case_router, KINK_TOL),
    ("lora_moe", _case_lora, KINK_TOL),
    ("injection", _case_injection, KINK_TOL),
]


def check_gradients(n_seeds: int = 20, max_entries: int = 4) -> List[CheckResult]:
    out = []
    for name, build, tol in GRAD_CASES:
        worst, where = 0.0, ""
        for seed in range(n_seeds):
            f, params = build(seed)
            rep = grad_check(f, params, tolerance=tol, max_entries=max_entries,
                             rng=rng_for(seed, "verify", "entries", name))
            if rep.max_rel_error > worst:
                worst, where = rep.max_rel_error, f"seed {seed} {rep.worst_param}"
        out.append(CheckResult(f"grad:{name}", worst < tol,
                               f"max rel err {worst:.2e} (tol {tol:.0e}) {where}".strip()))
    return out


# ---------------------------------------------------------------- invariants

def check_aggregation() -> CheckResult:
    rng = rng_for(0, "verify", "agg")
    w = rng.normal(size=(3, 4))
    same = aggregate([ModelUpdate(c, 0, {"enc.w": w.copy()}) for c in range(5)])[0]["enc.w"]
    two = aggregate([ModelUpdate(0, 0, {"enc.w": np.array([1.0])}),
                     ModelUpdate(1, 0, {"enc.w": np.array([3.0])})])[0]["enc.w"]
    ups = [ModelUpdate(c, 0, {"enc.w": rng.normal(size=50) * 10 ** rng.uniform(-3, 3)})
           for c in range(7)]
    a = aggregate(ups, compensated=True)[0]["enc.w"]
    perm = [ModelUpdate(i, 0, ups[j].tensors) for i, j in enumerate(rng.permutation(7))]
    b = aggregate(perm, compensated=True)[0]["enc.w"]
    diff = float(np.max(np.abs(a - b)))
    ok = np.array_equal(same, w) and two[0] == 2.0 and diff < 1e-12
    return CheckResult("aggregation", ok, f"permutation diff {diff:.1e}")


def check_freeze_and_zero_init() -> List[CheckResult]:
    stub = _small_stub(0)
    model = ClientModel(TRAINING_TASKS, 0, enc_dim=stub.cfg.enc_dim)
    rng = rng_for(0, "verify", "freeze")
    task = TRAINING_TASKS[3]
    sample = random_sample(task, 5, rng)
    h = align_features(stub, model.enc, task, sample)
    zero_ok = np.array_equal(lora_moe_forward(h, route(stub, task), stub).data,
                             frozen_forward(stub, h).data)
    before = stub.frozen_bytes()
    batches = {t.name: (t, random_sample(t, 4, rng), rng.integers(0, 2, size=4))
               for t in TRAINING_TASKS}
    for _ in range(3):
        injection_step(stub, model.enc, batches, lr=1e-2)
    return [CheckResult("lora_zero_init", bool(zero_ok)),
            CheckResult("freeze", stub.frozen_bytes() == before)]


def check_router(draws: int = 200) -> CheckResult:
    stub = _small_stub(0)
    rng = rng_for(0, "verify", "route")
    worst = 0.0
    ok = True
    for i in range(draws):
        for p in stub.router.parameters():
            p.data = rng.normal(0, rng.uniform(0.1, 3.0), p.shape)
        a = route(stub, TRAINING_TASKS[i % len(TRAINING_TASKS)]).values
        ok &= bool(np.all(a >= 0))
        worst = max(worst, abs(a.sum() - 1.0))
    stub.zero_router()
    uniform = route(stub, TRAINING_TASKS[0]).values
    ok &= bool(np.all(uniform == 1.0 / stub.cfg.n_experts))
    return CheckResult("router", ok and worst < 1e-9, f"max |sum-1| {worst:.1e}")


def check_wire(iterations: int = 300) -> CheckResult:
    rng = rng_for(0, "verify", "wire")
    for i in range(iterations):
        tensors = {f"enc.p{j}": rng.normal(size=tuple(rng.integers(1, 4, rng.integers(0, 3))))
                   for j in range(rng.integers(0, 4))}
        u = ModelUpdate(int(rng.integers(100)), i, tensors, int(rng.integers(1000)))
        buf = serialize_update(u)
        if deserialize_update(buf) != u:
            return CheckResult("wire", False, f"roundtrip mismatch at iteration {i}")
        bad = bytearray(buf)
        if rng.random() < 0.5:
            bad = bad[:rng.integers(0, len(bad))]
        else:
            k = rng.integers(len(bad))
            bad[k] ^= 1 << rng.integers(8)
        try:
            deserialize_update(bytes(bad))
        except ParseError:
            continue
        return CheckResult("wire", False, f"corruption accepted at iteration {i}")
    return CheckResult("wire", True, f"{iterations} roundtrips")


def run_all(n_seeds: int = 20, log: Optional[Callable[[str], None]] = None) -> List[CheckResult]:
    t0 = time.perf_counter()
    results = check_gradients(n_seeds)
    results.append(check_aggregation())
    results += check_freeze_and_zero_init()
    results.append(check_router())
    results.append(check_wire())
    if log is not None:
        for r in results:
            log(f"{'PASS' if r.passed else 'FAIL'} {r.name} {r.detail}")
        log(f"{sum(r.passed for r in results)}/{len(results)} checks passed "
            f"in {time.perf_counter() - t0:.1f}s")
    return results

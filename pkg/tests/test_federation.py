import math
import struct

import numpy as np
import pytest

from fedinject import federation as F
from fedinject.client import ClientModel, LocalConfig, train_local
from fedinject.errors import ContractError, ParseError, RoundError
from fedinject.federation import (GlobalState, SimClient, aggregate, broadcast, load_checkpoint,
                                  run_experiment, run_round, save_checkpoint)
from fedinject.tasks import get_task
from fedinject.wire import (ModelUpdate, decode_tensors, deserialize_update, encode_tensors,
                            serialize_update)

from conftest import fast_config


def _upd(cid, **tensors):
    return ModelUpdate(cid, 0, {k: np.asarray(v, dtype=float) for k, v in tensors.items()}, 1)


# --------------------------------------------------------------- aggregate

def test_aggregate_two_clients():
    enc, dec = aggregate([_upd(0, **{"enc.a": [1.0], "dec.t": [5.0]}),
                          _upd(1, **{"enc.a": [3.0], "dec.t": [7.0]})])
    assert enc["enc.a"].tolist() == [2.0] and dec["dec.t"].tolist() == [6.0]


@pytest.mark.parametrize("compensated", [False, True])
def test_aggregate_identical_is_bit_exact(compensated):
    w = np.random.default_rng(0).normal(size=(3, 4)) * 1e3
    enc, _ = aggregate([_upd(c, **{"enc.w": w}) for c in range(7)], compensated=compensated)
    assert enc["enc.w"].tobytes() == w.tobytes()


@pytest.mark.parametrize("compensated,tol", [(False, 1e-14), (True, 1e-15)])
def test_aggregate_matches_fsum(compensated, tol):
    rng = np.random.default_rng(1)
    ws = [rng.normal(size=6) for _ in range(9)]
    enc, _ = aggregate([_upd(c, **{"enc.w": w}) for c, w in enumerate(ws)], compensated=compensated)
    ref = [math.fsum(w[i] for w in ws) / 9 for i in range(6)]
    np.testing.assert_allclose(enc["enc.w"], ref, rtol=0, atol=tol)


def test_compensated_mean_is_order_insensitive():
    rng = np.random.default_rng(2)
    ws = [rng.normal(size=5) * 10 ** rng.integers(-3, 4) for _ in range(8)]
    a, _ = aggregate([_upd(c, **{"enc.w": w}) for c, w in enumerate(ws)], compensated=True)
    perm = rng.permutation(8)
    b, _ = aggregate([_upd(c, **{"enc.w": ws[p]}) for c, p in enumerate(perm)], compensated=True)
    assert np.max(np.abs(a["enc.w"] - b["enc.w"])) < 1e-12


def test_aggregate_contract_errors():
    with pytest.raises(ContractError):
        aggregate([])
    with pytest.raises(ContractError, match="names differ"):
        aggregate([_upd(0, **{"enc.a": [1.0]}), _upd(1, **{"enc.b": [1.0]})])
    with pytest.raises(ContractError, match="shape"):
        aggregate([_upd(0, **{"enc.a": [1.0]}), _upd(1, **{"enc.a": [1.0, 2.0]})])


# -------------------------------------------------------------------- wire

def _sample_update():
    rng = np.random.default_rng(3)
    return ModelUpdate(4, 7, {"enc.image.w": rng.normal(size=(2, 3)), "dec.covid19.b": rng.normal(size=2),
                              "enc.x.scalar": np.array(1.5)}, 33)


def test_wire_roundtrip():
    u = _sample_update()
    assert deserialize_update(serialize_update(u)) == u


def test_wire_empty_tensor_list():
    assert decode_tensors(encode_tensors({}, 2, 9)) == (2, 9, {})


def test_wire_rejects_truncation_and_flips():
    buf = serialize_update(_sample_update())
    rng = np.random.default_rng(4)
    for n in range(len(buf)):
        with pytest.raises(ParseError):
            deserialize_update(buf[:n])
    for _ in range(200):
        b = bytearray(buf)
        i = int(rng.integers(len(b)))
        b[i] ^= 1 << int(rng.integers(8))
        with pytest.raises(ParseError):
            deserialize_update(bytes(b))


def test_wire_rejects_a_tampered_length_field():
    buf = bytearray(encode_tensors({"enc.a": np.ones(3)}))
    off = 20 + 2 + len("enc.a") + 1      # header, name length, name, rank
    struct.pack_into("<I", buf, off, 4)
    with pytest.raises(ParseError):
        decode_tensors(bytes(buf))


def test_update_carries_no_raw_samples(small_dataset):
    # mark one sample with a sentinel value and make sure its bytes never leave
    cfg = fast_config(num_clients=1, scope="single", task="covid19")
    task = get_task("covid19")
    shard = {"covid19": small_dataset.training["covid19"].shard(0)}
    x = shard["covid19"].features[task.modalities[0]]
    x[0] = 1234.5678
    client = SimClient(0, ClientModel([task], 0, 0), shard)
    msg, _ = F._client_update(client, client.model.state_dict(), cfg, 0)
    assert np.float64(1234.5678).tobytes() not in msg
    assert x[1].tobytes()[:64] not in msg


# --------------------------------------------------------------- broadcast

def test_broadcast_gives_every_client_the_global_state():
    tasks = [get_task("lung_opacity"), get_task("mortality")]
    clients = [SimClient(c, ClientModel(tasks, 0, c), {}) for c in range(3)]
    server = ClientModel(tasks, 0, 99)
    state = GlobalState(1, server.encoder_state(), server.decoder_state())
    broadcast(state, clients)
    ref = state.tensors()
    for c in clients:
        got = c.model.state_dict()
        assert list(got) == list(ref)
        assert all(got[k].tobytes() == ref[k].tobytes() for k in ref)


# ------------------------------------------------------------------ rounds

def test_single_client_round_is_plain_local_training(small_dataset):
    cfg = fast_config(num_clients=1, scope="single", task="ecg_abnormal")
    task = get_task("ecg_abnormal")
    shard = {"ecg_abnormal": small_dataset.training["ecg_abnormal"].shard(0)}
    server = ClientModel([task], 0, F.BROADCAST_ID)
    state = GlobalState(0, server.encoder_state(), server.decoder_state())
    client = SimClient(0, ClientModel([task], 0, 0), shard)
    broadcast(state, [client])
    new, _ = run_round(state, [client], cfg, server, {})

    ref = ClientModel([task], 0, 0)
    ref.load_state_dict(state.tensors())
    f = cfg.federation
    train_local(ref, shard, LocalConfig(f.local_epochs, f.batch_size, f.local_lr, f.algo, f.lam),
                state.tensors(), seed=cfg.seed, stream=(0, 0))
    want = ref.state_dict()
    assert all(new.tensors()[k].tobytes() == want[k].tobytes() for k in want)


def _state_bytes(res):
    t = res.state.tensors()
    return b"".join(t[k].tobytes() for k in sorted(t))


def test_experiment_is_deterministic(small_dataset):
    cfg = fast_config(variant="global_finetune")
    a, b = run_experiment(cfg, small_dataset), run_experiment(cfg, small_dataset)
    assert _state_bytes(a) == _state_bytes(b) and a.rows == b.rows


def test_threads_do_not_change_results(small_dataset):
    a = run_experiment(fast_config(threads=1), small_dataset)
    b = run_experiment(fast_config(threads=3), small_dataset)
    assert _state_bytes(a) == _state_bytes(b)


def test_fedprox_with_zero_lambda_equals_fedavg(small_dataset):
    a = run_experiment(fast_config(algo="fedavg"), small_dataset)
    b = run_experiment(fast_config(algo="fedprox", lam=0.0), small_dataset)
    assert _state_bytes(a) == _state_bytes(b)
    assert [r.accuracy for r in a.rows] == [r.accuracy for r in b.rows]


def test_injection_run_freezes_stub_and_moves_encoders(small_dataset, monkeypatch):
    seen = {}
    real = F.FoundationStub

    def spy(*a, **k):
        stub = real(*a, **k)
        seen["frozen"] = stub.frozen_bytes()
        return stub
    monkeypatch.setattr(F, "FoundationStub", spy)
    base = run_experiment(fast_config(), small_dataset)
    res = run_experiment(fast_config(variant="llm_finetune"), small_dataset)
    assert res.stub.frozen_bytes() == seen["frozen"]
    assert _state_bytes(res) != _state_bytes(base)   # injection moved the encoders
    labels = {r.config for r in res.rows}
    assert labels == {"FedAvg_m^*", "FedAvg_m^F"}
    assert len(res.rows) == 8


def test_round_error_names_round_and_client(small_dataset, monkeypatch):
    real = F.train_local

    def flaky(*a, **k):
        if k.get("stream") == (2, 1):
            raise ValueError("disk on fire")
        return real(*a, **k)
    monkeypatch.setattr(F, "train_local", flaky)
    with pytest.raises(RoundError) as e:
        run_experiment(fast_config(num_rounds=3), small_dataset)
    assert (e.value.round_index, e.value.client_id) == (1, 2)
    assert "disk on fire" in str(e.value)


def test_single_scope_needs_a_task(small_dataset):
    cfg = fast_config()
    cfg.federation.scope = "single"
    with pytest.raises(ContractError):
        run_experiment(cfg, small_dataset)


@pytest.mark.parametrize("variant", ["base", "llm_finetune"])
def test_checkpoint_resume_is_bit_exact(small_dataset, tmp_path, variant):
    full = run_experiment(fast_config(variant=variant, num_rounds=2), small_dataset)
    half = run_experiment(fast_config(variant=variant, num_rounds=1), small_dataset)
    path = save_checkpoint(str(tmp_path / "g.fmki"), half.state)
    ckpt = load_checkpoint(path)
    assert ckpt[0] == 1
    rest = run_experiment(fast_config(variant=variant, num_rounds=1), small_dataset, checkpoint=ckpt)
    assert rest.state.round_index == 2
    assert _state_bytes(rest) == _state_bytes(full)
    assert rest.rows == full.rows


def test_zero_rounds_only_evaluates(small_dataset):
    res = run_experiment(fast_config(num_rounds=0), small_dataset)
    assert res.logs == [] and len(res.rows) == 4

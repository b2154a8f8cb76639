"""Per-round test accuracy of the global model and the injected stub on one task.

    python3 scripts/learning_curve.py --task ecg_abnormal --rounds 10
"""
import argparse

from fedinject.config import parse_config
from fedinject.datagen import build_dataset
from fedinject.federation import (checkpoint_tensors, evaluate_foundation, evaluate_global,
                                  run_experiment)

ap = argparse.ArgumentParser()
ap.add_argument("--config", default="configs/desk.yaml")
ap.add_argument("--task", default="lung_opacity")
ap.add_argument("--rounds", type=int, default=10)
ap.add_argument("--algo", default="fedavg")
args = ap.parse_args()

cfg = parse_config(args.config, {"scope": "single", "task": args.task, "algo": args.algo,
                                 "variant": "llm_finetune", "rounds": 1})
ds = build_dataset(cfg.seed, cfg.data.n_per_task, cfg.federation.num_clients, cfg.data.margin,
                   cfg.data.n_validation, [args.task])

print(f"{'round':>5s} {'client loss':>12s} {'inject loss':>12s} {'global acc':>11s} {'stub acc':>9s}")
checkpoint = None
for r in range(args.rounds):
    res = run_experiment(cfg, ds, checkpoint=checkpoint)
    # resume the next single round from this one's global state
    checkpoint = (res.state.round_index, checkpoint_tensors(res.state))
    rlog = res.logs[-1]
    client_loss = sum(t[-1] for t in rlog.client_traces) / len(rlog.client_traces)
    inject_loss = sum(rlog.server_trace) / max(len(rlog.server_trace), 1)
    g = evaluate_global(res.global_model, ds, "g")[0].accuracy
    s = evaluate_foundation(res.stub, res.global_model, ds, "s")[0].accuracy
    print(f"{r:5d} {client_loss:12.4f} {inject_loss:12.4f} {g:11.3f} {s:9.3f}")

"""Train MAT-CENet and XLCNet on the desk profile and compare them with LS.

Same data, seeds and epoch budget for both networks. Takes a few minutes
on one core. Pass --epochs N for a quicker look.
"""

import argparse
import time

from xlmimo import cli
from xlmimo.harness import SNR_GRID, ExperimentConfig, desk_model_configs, init_model, make_training_sets, train

parser = argparse.ArgumentParser()
parser.add_argument("--epochs", type=int)
args = parser.parse_args()

cfg = cli.resolve_config("train", profile="desk")
if args.epochs:
    cfg["n_epochs"] = args.epochs
tcfg = cli.train_config(cfg)
train_set, val_set = make_training_sets(cfg["M"], tcfg)

models = {}
for name, mcfg in zip(("matcenet", "xlcnet"), desk_model_configs(cfg["M"], cfg["F"])):
    t0 = time.perf_counter()
    models[name] = init_model(mcfg, tcfg.seed)
    res = train(models[name], train_set, val_set, tcfg)
    print(f"{name}: best epoch {res.best_epoch}, val {res.best_val_nmse_db:.2f} dB "
          f"(init {res.init_val_nmse_db:.2f} dB), {time.perf_counter() - t0:.0f} s")

from xlmimo.harness import run_experiment  # noqa: E402

exp = ExperimentConfig(scenario="hybrid", M=cfg["M"], n_test=1000, estimators=("ls", "xlcnet", "matcenet"),
                       seed=tcfg.seed + 1)
report = run_experiment(exp, models=models)
print(f"{'SNR':>5s}" + "".join(f"{e:>10s}" for e in exp.estimators))
for snr in SNR_GRID:
    print(f"{snr:5.0f}" + "".join(f"{report.lookup(e, snr).nmse_db:10.2f}" for e in exp.estimators))

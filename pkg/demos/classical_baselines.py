"""LS, LMMSE, angular OMP and hybrid OMP on the desk hybrid-field channel.

M=64, six paths of which one is far-field, sources between 0.1 and 0.8
Rayleigh distances. Prints NMSE (dB) against SNR.
"""

from xlmimo.harness import SNR_GRID, ExperimentConfig, run_experiment

exp = ExperimentConfig(scenario="hybrid", M=64, L=6, L0=1, n_test=500, n_cov=5000,
                       estimators=("ls", "lmmse", "omp", "hyomp"), seed=0)
report = run_experiment(exp)

print(f"{'SNR':>5s}" + "".join(f"{e:>10s}" for e in exp.estimators))
for snr in SNR_GRID:
    print(f"{snr:5.0f}" + "".join(f"{report.lookup(e, snr).nmse_db:10.2f}" for e in exp.estimators))
for key, value in report.metadata.items():
    print(f"# {key}: {value}")

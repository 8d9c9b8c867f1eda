"""
A small benchmark table
=======================

The harness runs every method on every held-out domain and seed, and prints a
table shaped like the literature's, next to the literature values themselves
(which are constants, not reproduced here). The full desk profile is what
``crossdepict bench`` runs; this script uses a shortened schedule.
"""

from crossdepict.data import SyntheticConfig, generate_synthetic
from crossdepict.evaluation import RunSettings, literature_table, run_benchmark
from crossdepict.trainers import MetaRegConfig, profile_config

ds = generate_synthetic(SyntheticConfig(per_class=100))
settings = RunSettings(train=profile_config("desk", iterations=300, eval_interval=100),
                       metareg=MetaRegConfig(phase1_iterations=50, phase2_iterations=30))
# 300 steps is a tenth of the desk profile; the fixed head is far from converged here
report = run_benchmark(ds, ["baseline", "fixed-head", "mldg"], seeds=[0], settings=settings)
print(report.to_text())
print(literature_table())

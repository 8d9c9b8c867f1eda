"""
One leave-one-domain-out scenario, five methods
===============================================

Hold out the sketch style, train on the other three, pick the checkpoint with
the best source validation accuracy and deploy it on sketches. Iterations are
cut to 600 so the script finishes in well under a minute. The fixed head
converges slowest, so it pays most for the short schedule.
"""

from crossdepict.data import SyntheticConfig, generate_synthetic
from crossdepict.evaluation import RunSettings, run_cell
from crossdepict.trainers import MetaRegConfig, profile_config

ds = generate_synthetic(SyntheticConfig())
settings = RunSettings(train=profile_config("desk", iterations=600, eval_interval=150),
                       metareg=MetaRegConfig(phase1_iterations=100, phase2_iterations=60))

print(f"{'method':24s} {'source val':>10s} {'sketch':>8s} {'best step':>9s}")
for method in ("baseline", "fixed-head", "fixed-orthogonal-head", "mldg", "metareg"):
    cell, result, _ = run_cell(ds, method, "sketch", seed=0, settings=settings, return_result=True)
    print(f"{method:24s} {cell.val_accuracy:10.2f} {cell.test_accuracy:8.2f} {cell.best_step:9d}")
    if method == "metareg":
        phi = result.extra["phi"]
        print("  learned L1 weights: mean", {k: float(v.mean()) for k, v in phi.items()})

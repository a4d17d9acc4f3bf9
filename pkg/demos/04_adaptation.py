# Few-shot adaptation end to end on one seed: frozen head, fine-tune and all four losses.
#
# The same run is available from the command line:
#   fewshot-adapt pipeline --seed 1 --out runs/seed1

import time

from fewshot_adapt.evaluation import format_table
from fewshot_adapt.losses import TERMS
from fewshot_adapt.pipeline import ExperimentConfig, build_source_model, build_target_data, evaluate_head, train_arm

cfg = ExperimentConfig(seed=1).with_seed(1)
t0 = time.perf_counter()
model = build_source_model(cfg)
data = build_target_data(cfg, model, 0.6)
print(f"{len(data.training)}/{len(data.train_views)} training views registered, "
      f"{sum(len(c) for c, _ in data.training)} pairs")
print("loss weights:", {t: round(data.weights[t], 4) for t in TERMS})

# %% train both arms from the same initialization and seed
reports = [evaluate_head(cfg, model, data, model.head, "frozen")]
for label, terms in (("Corres (fine-tune)", ("corres",)), ("all four losses", TERMS)):
    res = train_arm(cfg, model, data, terms)
    print(f"{label}: best validation epoch {res.best_epoch}, "
          f"training loss {res.state.loss_history[0]:.3f} -> {res.state.loss_history[-1]:.3f}")
    reports.append(evaluate_head(cfg, model, data, res.head, label))

# %% recall on the 62 held-out target queries
print(format_table(reports))
print(f"{time.perf_counter() - t0:.0f}s")

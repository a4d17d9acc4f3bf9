# The four adaptation losses, their hand-checkable values and gradient checks.

import numpy as np

from fewshot_adapt import checks
from fewshot_adapt.losses import (SoftMatchConfig, calibrate_from_values, cd_sos_loss, correspondence_loss,
                                  softmatch_loss, vw_coral_loss)

# %% closed-form examples
print("VW-CORAL, one word, covariances diag(2,0) vs diag(0,2):",
      vw_coral_loss([[1, 0], [-1, 0]], [[0, 1], [0, -1]], [0, 0]).value)
print("CD-SOS, pair distance 1 vs 1.5:", cd_sos_loss([[0, 0], [1, 0]], [[0, 0], [1.5, 0]], [0, 0]).value)
print("SoftMatch, prediction (0,0) vs target (3,4), l = 100:",
      softmatch_loss([[1.0, 0.0]], [[1.0, 0.0]], [[0.0, 0.0]], [[3.0, 4.0]], SoftMatchConfig(10.0, 100.0)).value)
xs, xp, xn = [1.0, 0.0], [0.25, np.sqrt(1 - 0.25 ** 2)], [0.75, np.sqrt(1 - 0.75 ** 2)]
print("triplet, d_pos^2 1.5, d_neg^2 0.5, margin 1:", correspondence_loss([xs], [0.7], [xp], [0.3], [xn]).value)

# %% analytic gradients through the descriptor head vs central differences
for r in checks.run_all(n_instances=20):
    print(r.line())

# %% loss weights: lambda = 1 / (4 (mu + 3 sigma)) per term
per_view = {"corres": [0.8, 1.1, 0.9], "vwcoral": [0.002, 0.004, 0.003]}
w = calibrate_from_values(per_view)
for t in per_view:
    mu, sigma = w.stats[t]
    print(f"{t:8s} mu {mu:.4f} sigma {sigma:.4f} lambda {w[t]:.3f}  lambda*4(mu+3sigma) = {w[t] * 4 * (mu + 3 * sigma):.12f}")

# %% [markdown]
# # Exit times from a ball
#
# A one-mode Ornstein-Uhlenbeck process started at 0 leaves the interval
# ``(-0.35, 0.35)`` after a time whose logarithm grows like ``V / eps`` with
# ``V = alpha r^2 = 0.1225``.  At desk-scale noise the prefactor still matters,
# so each Monte Carlo estimate is compared with the exact mean exit time.

# %%
import math

import numpy as np

from skld.exit import ExitDomain, ExitProblem, estimate_exit_scaling, exit_place_histogram, ou_mean_exit_time
from skld.spectral import build_config

prob = ExitProblem(build_config(n_modes=1), ExitDomain.ball(0.35), dt=1e-3, seed=12345, target=0.1225)

# %%
print("eps    eps log E tau   95% interval        exact")
for st in estimate_exit_scaling(prob, [0.1, 0.06, 0.04], 400):
    exact = st.eps * math.log(ou_mean_exit_time(1.0, 1.0, st.eps, 0.35))
    print(f"{st.eps:<5g}  {st.eps_log_mean:.4f}          [{st.ci_low:.4f}, {st.ci_high:.4f}]  {exact:.4f}")

# %% [markdown]
# With two modes, ``alpha = (1, 4)``, leaving through the mode-2 poles costs four
# times more, so exits concentrate around ``+-e1`` as the noise weakens.

# %%
prob2 = ExitProblem(build_config(n_modes=2), ExitDomain.ball(0.5), dt=1e-3, seed=7)
for eps in (0.2, 0.1, 0.07):
    rep = exit_place_histogram(prob2, eps, 300, potential=lambda p: np.sum([1, 4] * p ** 2, axis=-1))
    print(f"eps={eps:<5g}", {k: round(v, 3) for k, v in rep.fractions.items()},
          f"min V on boundary {rep.v_boundary:.3f}")

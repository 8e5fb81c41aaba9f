# %% [markdown]
# # Damped modes and the small-mass limit
#
# Each sine mode of the damped wave system is a damped oscillator
# ``mu q'' + q' + alpha_k q = 0``.  Small masses make the low modes overdamped and
# bring them close to the heat-equation decay ``exp(-alpha_k t)``; the high modes
# stay oscillatory.  This script tabulates both effects with the closed-form
# propagator.

# %%
import numpy as np

from skld.spectral import build_config, mode_propagator, measured_decay

cfg = build_config(n_modes=8)
print("alpha_k:", cfg.alpha)

# %% [markdown]
# Which branch does each mode take for a few masses?  The critical mass of mode
# ``k`` is ``1 / (4 alpha_k)``.

# %%
for mu in (1.0, 0.1, 0.01, 1 / (4 * cfg.alpha[2])):
    branches = mode_propagator(cfg.alpha, mu, 0.1).branch
    print(f"mu={mu:<8.4g}", " ".join(b[:4] for b in branches))

# %% [markdown]
# Position response of mode 1 released from rest at ``u = 1``, against the
# first-order response ``exp(-t)``.

# %%
ts = np.linspace(0, 3, 7)
print("t      " + "  ".join(f"{t:6.2f}" for t in ts))
print("heat   " + "  ".join(f"{np.exp(-t):6.3f}" for t in ts))
for mu in (1.0, 0.1, 0.01):
    row = [mode_propagator(cfg.alpha[:1], mu, t).matrices[0, 0, 0] for t in ts]
    print(f"mu={mu:<4g}" + "  ".join(f"{x:6.3f}" for x in row))

# %% [markdown]
# Measured decay constants ``|S_mu(t)| <= M exp(-omega t)``: the rate tends to
# ``alpha_1 = 1`` as the mass shrinks.

# %%
for mu in (1.0, 0.1, 0.01):
    big_m, omega = measured_decay(cfg, mu)
    print(f"mu={mu:<5g} M={big_m:.3f} omega={omega:.4f}")

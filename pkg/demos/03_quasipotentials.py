# %% [markdown]
# # Quasi-potentials by minimum action
#
# For gradient systems the quasi-potential of the wave system with free terminal
# velocity does not depend on the mass and equals the heat quasi-potential.
# Without gradient structure the two can differ, and the gap closes as the mass
# shrinks.

# %%
import warnings

import numpy as np

from skld.quasipotential import MamProblem, mam_minimize, sk_limit_study, v_exact_gradient
from skld.spectral import GradientPotential, Nonlinearity, basis_vector, build_config

cfg = build_config(n_modes=8)
B = Nonlinearity.nemytskii(lambda xi, s: 0.5 * np.sin(s), 0.5, db=lambda xi, s: 0.5 * np.cos(s))
F = GradientPotential.nemytskii(cfg, lambda xi, s: 0.5 * (np.cos(s) - 1), lambda xi, s: 0.5 * np.sin(s))
F = F.certify(B, cfg)
x = basis_vector(cfg, 1)

# %% [markdown]
# Gradient case: the closed form ``|(-A)^{1/2} Q^-1 x|^2 + 2 F(x)`` against the optimizer.

# %%
print("closed form", v_exact_gradient(cfg, x, None, 1.0, F))
for mu in (1.0, 0.1, 0.01):
    res = mam_minimize(MamProblem(cfg, x, mu, B))
    print(f"mu={mu:<5g} V_mu={res.action:.6f} |y*|={np.linalg.norm(res.terminal_velocity):.1e} "
          f"horizons={[round(t, 2) for t, _ in res.horizon_ladder]}")
print("heat", mam_minimize(MamProblem(cfg, x, None, B)).action)

# %% [markdown]
# Non-gradient case: coloured noise (``beta = 0.5``) with a linear damping of
# mode 1 plus a sine term.  A Nemytskii term with white noise is always a
# gradient, hence the coloured noise.

# %%
cfg2 = build_config(n_modes=4, beta=0.5)
B2 = Nonlinearity.sum(Nonlinearity.linear(np.array([0.2, 0, 0, 0])),
                      Nonlinearity.nemytskii(lambda xi, s: 0.3 * np.sin(s), 0.3))
x2 = basis_vector(cfg2, 1) + 0.3 * basis_vector(cfg2, 2)
with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    tab = sk_limit_study(cfg2, x2, [1.0, 0.3, 0.1, 0.03], B2)
print("mu      V_mu       gap")
for mu, v, vh, gap in tab.rows():
    print(f"{mu:<6g}  {v:.6f}  {gap:.2e}")
print("V (heat)", tab.v_heat)

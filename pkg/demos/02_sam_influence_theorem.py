"""
Why SAM helps the backdoor
==========================

On a synthetic problem the clean gradient is beta*u_b + r and the backdoor
state's gradient is alpha*u_b. Upweighting the backdoor state moves the
parameters along u_b. Under plain gradient descent the rate is -eta*alpha.
Under SAM it is larger by 1 + rho*lambda_b*|r|^2/|g|^3. Here the
closed form is compared with finite differences of a real SAM step.
"""

import numpy as np

from plastidoor import theoremlab

rng = np.random.Generator(np.random.Philox(0))
inst = theoremlab.make_instance(n=6, alpha=1.0, beta=0.5, r_norm=1.5, lam_b=4.0, rho=0.05, eta=0.01, rng=rng)

print("ERM influence          ", theoremlab.erm_influence(inst))
print("SAM influence, formula ", theoremlab.sam_influence_analytic(inst))
print("SAM influence, numeric ", theoremlab.sam_influence_numeric(inst))
print("SAM influence, optimizer", theoremlab.sam_step_influence(inst))
print("amplification factor   ", theoremlab.amplification_factor(inst))

# The factor grows with curvature along u_b and with the clean residual.
for lam in (0.5, 2.0, 8.0):
    i = theoremlab.make_instance(6, 1.0, 0.5, 1.5, lam, 0.05, 0.01, rng)
    print(f"lambda_b = {lam:>4}: factor {theoremlab.amplification_factor(i):.4f}")

# A batch of random instances, as the `plastidoor theorem` command writes it.
table = theoremlab.verification_table(200, seed=1).splitlines()
print(f"{sum(l.endswith(',1') for l in table[1:])}/200 random instances agree with the formula")

"""Two ways to combine multiple imputation with the bootstrap.

MI-Boot imputes first (M datasets), bootstraps within each completed dataset
for its variance, and pools with Rubin's rules.  Boot-MI bootstraps first
(B samples), imputes each a couple of times, and uses a method-of-moments
variance built from a one-way ANOVA over the bootstrap groups.  Points agree;
the variance decompositions differ.
"""

import numpy as np

from medmiss import (
    MissingMethod,
    boot_mi,
    cca_boot,
    default_analysis_spec,
    default_dgm_params,
    default_mdag,
    generate_complete,
    impose_missingness,
    make_estimator,
    mi_boot,
)

rng = np.random.default_rng(21)
data = generate_complete(2000, default_dgm_params(), rng)
masked = impose_missingness(data, default_mdag("A"), rng)
estimator = make_estimator("dr", default_analysis_spec())
method = MissingMethod("mi-noint", m=20, cycles=10)


def show(label, pooled):
    r = pooled["indirect"]
    print(f"{label:<22} indirect {r.point:+.4f}  se {r.se:.4f}  "
          f"95% CI ({r.ci_low:+.4f}, {r.ci_high:+.4f})")
    return r


print("one masked dataset (mechanism A, n=2000):\n")
cca = show("complete cases + boot", cca_boot(masked, estimator, np.random.default_rng(1), b=200))

mb = show("MI-Boot (M=20, B=100)", mi_boot(masked, method, estimator,
                                           np.random.default_rng(2), m=20, b=100))
print(f"{'':<22} within {mb.within:.6f}  between {mb.between:.6f}  "
      f"total = within + (1+1/M)*between")

bm = show("Boot-MI (B=100, M=2)", boot_mi(masked, method, estimator,
                                          np.random.default_rng(3), b=100, m=2))
print(f"{'':<22} MSB {bm.msb:.6f}  MSW {bm.msw:.6f}  "
      f"sigma2_inf {bm.sigma2_inf:.6f}  sigma2_wb {bm.sigma2_wb:.6f}")

print("\npoint estimates agree up to imputation noise: |diff| = %.4f"
      % abs(mb.point - bm.point))

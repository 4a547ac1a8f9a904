"""
A failing Brunn-Minkowski inequality on the Heisenberg group
============================================================

The full pipeline near the origin: pick an ample geodesic, find the ratio r
where the inverse-geodesic map preserves volume, shrink a ball B around the
end point, build its image A, bound the mid set from above and compare with
BM(K, N) for a grid of curvature and dimension parameters. A negative margin
means the inequality is violated. Runs in a couple of minutes.
"""

import numpy as np

from srbm.counterexample import PipelineConfig, run_pipeline
from srbm.structures import load_structure

H = load_structure("heisenberg")
report = run_pipeline(H, np.zeros(3), PipelineConfig(seed=1))
print("status:", report.status, report.failed_stage or "")

# The geodesic and the ratio
print("geodesic dimension", report.geodesic_dimension, "growth vector", report.growth_vector)
print(f"ratio r = {report.ratio:.6f}, inverse Jacobian {report.inverse_jacobian:.8f}")

# Volumes: A and B agree to first order, the mid set is much smaller
print(f"rho = {report.rho:.3e}")
print(f"vol A = {report.vol_A:.4e}  vol B = {report.vol_B:.4e}")
print(f"vol M in [{report.vol_M_lower:.4e}, {report.vol_M_upper:.4e}]")
print(f"vol M / vol B <= {report.vol_M_upper / report.vol_B:.4f}, 2^(n - N) = {2.0 ** (3 - report.geodesic_dimension)}")

# Margins: left side minus right side of BM(K, N); all should be negative
for row in report.margins:
    print(f"K = {row['K']:6.1f}  N = {row['N']:5.1f}  margin {row['margin']:+.3e}")
print("all negative:", report.all_margins_negative)

# Stage timings are kept apart from the reproducible report
print({k: round(v, 1) for k, v in report.timings.items()})

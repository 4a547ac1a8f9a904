"""
Growth vectors along Martinet geodesics
=======================================

The flag of a geodesic records how fast the pulled-back frame fills the tangent
space. Away from the Martinet surface {x = 0} one bracket is enough and the
growth vector is (2, 3). On the surface it takes two, and the geodesic
dimension jumps from 5 to 7 for geodesics crossing it. The line x = z = 0
inside the surface never fills the tangent space at all.
"""

import numpy as np

from srbm.flag import ampleness_on_grid, geodesic_dimension_formula, growth_vector, minimal_geodesic_covector
from srbm.geodesy import GeodesicSegment
from srbm.structures import load_structure

M = load_structure("martinet")

# Sum of (2i - 1)(k_i - k_{i-1}) over the flag
for ks in [(2, 3), (2, 2, 3), (3,)]:
    print(ks, "->", geodesic_dimension_formula(ks))

# A geodesic running along the x = 0 line, then one crossing the surface
along = GeodesicSegment(M, [0.0, 0.0, 0.0], [0.0, 1.0, 0.3], -0.5, 0.5)
across = GeodesicSegment(M, [0.0, 0.0, 0.0], [1.0, 0.5, 0.0], -0.5, 0.5)
for name, seg in (("along", along), ("across", across)):
    g = growth_vector(M, seg, 0.0)
    print(f"{name:7s} growth vector {g.growth_vector}, ample {g.ample}, N = {g.geodesic_dimension}")

# Ampleness is an open condition: on a grid of times the growth vector is locally constant
seg = GeodesicSegment(M, [-0.3, 0.0, 0.0], [1.0, 0.2, 0.0], 0.0, 0.6)
for g in ampleness_on_grid(M, seg, 7):
    print(f"t = {g.time:.2f}  x = {seg.point(g.time)[0]:+.3f}  {g.growth_vector}")

# The geodesic dimension at a point is the minimum over covectors
for x in ([0.5, 0.1, 0.0], [0.0, 0.0, 0.0]):
    p, g = minimal_geodesic_covector(M, x, count=32)
    print(f"N_x at {x} = {g.geodesic_dimension}  via p = {np.round(p, 3)}")

"""
Geodesics and midpoint contraction on the Heisenberg group
==========================================================

Normal geodesics come from integrating the Hamiltonian flow. Here we follow a
few of them, locate the first conjugate point, and watch the midpoint map
squeeze volume like t^5 rather than the Euclidean t^3.
"""

import numpy as np

from srbm.counterexample import contraction_fit, find_unit_ratio
from srbm.geodesy import first_conjugate_time, midpoint_jacobian, smooth_pair
from srbm.hamiltonian import exp_map
from srbm.structures import load_structure

H = load_structure("heisenberg")
E = load_structure("euclidean_test")
x = np.zeros(3)

# A covector with p_z = 0 gives a straight horizontal line
print("straight line:", exp_map(H, x, [1.0, 0.0, 0.0]))

# Turning on p_z bends the projection into a circle; it closes at |p_z| t = 2 pi
p = np.array([1.0, 0.0, 1.5])
for t in (0.5, 1.0, 2 * np.pi / 1.5):
    print(f"t = {t:.3f}  E(t p) = {np.round(exp_map(H, x, p, t), 6)}")
print("first conjugate time:", first_conjugate_time(H, x, p))

# Before that time (a, b) is a smooth pair: the exponential is a submersion there
cert = smooth_pair(H, x, p)
print("submersion:", cert.submersion, " singular values in", (cert.min_singular, cert.max_singular))

# The midpoint Jacobian on the plane-like model grows like t^3 ...
p = np.array([0.6, 0.2, 1.0])
for t in (0.1, 0.2, 0.4):
    print(f"t = {t}  euclid {midpoint_jacobian(E, x, p, t):.3e}  heisenberg {midpoint_jacobian(H, x, p, t):.3e}")

# ... and a log-log fit recovers the geodesic dimension as the exponent
fit = contraction_fit(H, x, p)
print(f"fitted exponent {fit.exponent:.4f}, constant {fit.C:.4f}, residual {fit.residual:.1e}")
fit = contraction_fit(E, x, p)
print(f"euclidean exponent {fit.exponent:.4f}")

# Along the reversed direction the inverse-geodesic map has unit Jacobian at some r <= 1/2
u = find_unit_ratio(H, x, p)
print(f"unit ratio r = {u.r:.6f}, jacobian there {u.jacobian:.8f}, swapped {u.swapped}")

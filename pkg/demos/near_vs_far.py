"""How far out does a spherical wavefront start to look planar?

Prints the correlation between the near-field and far-field steering
vectors at a fixed angle as the source moves away from a 256-element
half-wavelength array, in units of the Rayleigh distance.
"""

import numpy as np

from xlmimo import channel as ch

arr = ch.ArrayConfig(256)
d_ray = ch.rayleigh_distance(arr)
phi = np.deg2rad(30.0)
far = ch.far_field_steering(arr, phi)

print(f"M={arr.M}  aperture={arr.M * arr.d:.2f} m  D_Ray={d_ray:.2f} m")
print(f"{'r / D_Ray':>10s} {'r (m)':>10s} {'|<a_near, a_far>|':>18s}")
for frac in (0.01, 0.03, 0.1, 0.3, 1.0, 3.0, 10.0):
    near = ch.near_field_steering(arr, phi, frac * d_ray)
    print(f"{frac:10.2f} {frac * d_ray:10.2f} {abs(np.vdot(far, near)):18.4f}")

"""
The 2D temporal map, cell by cell
=================================

Row i, column j of the map stands for the moment that starts at clip i and
ends at clip j. Short moments are kept densely; long ones are thinned out.
Run with ``python demos/candidate_maps.py``.
"""
import numpy as np

from tan2d.temporal_map import MomentSpan, candidate_mask, label_map

# %% Which cells are candidates?
mask = candidate_mask(16)
print(f"N=16 keeps {mask.count} of {16 * 17 // 2} upper-triangle cells")
for row in mask.valid.astype(int):
    print(" ".join("#" if v else "." for v in row))

# %% Growth with N
for n in (16, 32, 64, 128):
    m = candidate_mask(n)
    print(f"N={n:4d}  sparse={m.count:5d}  dense={candidate_mask(n, dense=True).count:5d}")

# %% Soft labels around a ground-truth moment
lm = label_map(MomentSpan(4, 9), mask, t_min=0.5, t_max=1.0)
np.set_printoptions(precision=2, suppress=True, linewidth=140)
print(lm.y[2:12, 6:14])

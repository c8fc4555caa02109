"""
Executing command sequences
===========================

Build the bundled fixtures, sample their surfaces and compare clouds.
Run with ``python3 demos/shapes.py``.
"""

import numpy as np

from p2cad import cad_lang as cl
from p2cad import fixtures
from p2cad import geometry as g

# a sequence is plain data: commands with quantized parameters
cube = fixtures.bundled("cube")
print(cl.serialize_sequence(cube))

# token matrix: one row per command, 60 rows, EOS padding
m = cl.to_token_matrix(cube)
print(m.shape, m[:7, :3])

for name in ("cube", "cylinder", "cut_block"):
    solid = g.execute(fixtures.bundled(name))
    pc = g.sample_surface(solid, 2048, seed=0)
    lo, hi = pc.points.min(axis=0), pc.points.max(axis=0)
    print(f"{name:10s} bounds {np.round(lo, 3)} .. {np.round(hi, 3)}")

# membership queries
solid = g.execute(fixtures.bundled("cut_block"))
print(g.contains(solid, [(0.0, 0.0, 0.0), (0.5, 0.0, 0.0), (2.0, 0.0, 0.0)]))

# chamfer distance between two samplings of the same shape shrinks with density
for n in (256, 1024, 4096):
    a = g.normalize(g.sample_surface(solid, n, seed=1))
    b = g.normalize(g.sample_surface(solid, n, seed=2))
    print(n, g.chamfer_distance(a, b))

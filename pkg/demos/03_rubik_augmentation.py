"""Turn a box into a synthetic anomaly with Rubik moves, then compare with scaling.

Writes two PLY files next to the working directory so the result can be
inspected in any point-cloud viewer.

    python3 demos/03_rubik_augmentation.py [out_dir]
"""

import sys
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist

from pcad.augment import RubikMove, rubik_augment, scale_augment, split_eighths
from pcad.data import ClassMap, PrimitiveSpec, SceneRecipe, generate_synthetic_scene
from pcad.export import write_ply

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(".")
recipe = SceneRecipe((PrimitiveSpec("box", 1, (1, 1), (2.0, 2.0)),), n_points=(2000, 2000))
cloud, labels = generate_synthetic_scene(1, recipe, ClassMap({1}))
box = cloud.positions

moves = [RubikMove("+Z", 1), RubikMove("-X", 2)]
turned = rubik_augment(box, moves)
print("moves:", [m.to_dict() for m in moves])
print("octant sizes before:", [len(g) for g in split_eighths(box)])
print("centroid shift:", np.abs(turned.mean(0) - box.mean(0)).max())
print(f"mean pairwise distance {pdist(box).mean():.3f} -> {pdist(turned).mean():.3f}")

scaled = scale_augment(box, 2.5)
print(f"bounding diagonal {np.linalg.norm(np.ptp(box, 0)):.2f} -> {np.linalg.norm(np.ptp(scaled, 0)):.2f} after scaling")

colors = np.tile([[31, 119, 180]], (len(box), 1))
for name, pts in (("box_original.ply", box), ("box_rubik.ply", turned), ("box_scaled.ply", scaled)):
    write_ply(out / name, pts, colors)
    print("wrote", out / name)

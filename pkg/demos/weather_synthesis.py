"""Synthesize degraded and stylized variants of a small shapes set.

Writes a grid image (clean | fog | gamma | stylized alpha 0.5 | alpha 1.0)
per content image to ./out_weather/.
"""

import sys
from pathlib import Path

import numpy as np

from sdnia.imagery import degrade_dataset, write_image
from sdnia.shapes import make_shapes_dataset
from sdnia.stylizer import ProceduralBackend, make_style_images, stylize

out = Path(sys.argv[1] if len(sys.argv) > 1 else "out_weather")
out.mkdir(parents=True, exist_ok=True)

clean = make_shapes_dataset(4, 96, seed=0)
fog = degrade_dataset(clean, "fog", seed=1)      # beta ~ U[1,3], A ~ U[0.7,0.9]
gamma = degrade_dataset(clean, "gamma", seed=2)  # gamma ~ U[1.5,5]
styles = make_style_images(96, seed=0)
backend = ProceduralBackend()

for c, f, g in zip(clean.entries, fog.entries, gamma.entries):
    row = [c.load(), f.load(), g.load()]
    for alpha in (0.5, 1.0):
        row.append(stylize(backend, c, styles["fog0"], alpha, "fog0").load())
    write_image(out / f"{c.image_id}.png", np.concatenate(row, axis=1))
    print(c.image_id, "mean luma per column:", " ".join(f"{im.mean():.3f}" for im in row))

# alpha = 0 is the identity
same = stylize(backend, clean.entries[0], styles["dark0"], 0.0, "dark0").load()
print("alpha 0 identity:", np.array_equal(same, clean.entries[0].load()))

"""Synthetic complementary data.

Each lesion shows up in the two modalities in different ways: the body
modality (AP) lights up its interior, the rim modality (VP) lights up a thin
shell around it. The mask is the whole lesion. Each case also contains one
decoy per modality (a solid blob in AP only, a hollow shell in VP only), so a
lesion is where a bright interior in AP meets a bright rim in VP.

    python3 demos/01_synthetic_data.py
"""

import numpy as np

from mamlseg.data import SynthSpec, generate_synthetic

spec = SynthSpec(num_cases=4, seed=0)
cases = generate_synthetic(spec)

for case in cases:
    mask = case.mask.data.astype(bool)
    interior, rim = case.meta["interior"], case.meta["rim"]
    ap, vp = case.volumes["AP"].data, case.volumes["VP"].data
    print(f"{case.case_id}: {case.meta['num_lesions']} lesion(s), {mask.sum()} voxels")
    print(f"  AP  interior {ap[interior].mean():+.2f}  rim {ap[rim].mean():+.2f}  background {ap[~mask].mean():+.2f}")
    print(f"  VP  interior {vp[interior].mean():+.2f}  rim {vp[rim].mean():+.2f}  background {vp[~mask].mean():+.2f}")

# Thresholding either modality alone also picks up its decoy.
case = cases[0]
mask = case.mask.data.astype(bool)
for m in ("AP", "VP"):
    bright = case.volumes[m].data > 0.5
    print(f"{m} > 0.5: {np.sum(bright & mask)} voxels inside the mask, {np.sum(bright & ~mask)} outside")

# A middle slice as ASCII art: '#' bright in AP, 'o' bright in VP, '.' mask only.
z = int(np.argmax(mask.sum(axis=(1, 2))))
for y in range(0, spec.shape[1], 2):
    row = ""
    for x in range(spec.shape[2]):
        if case.volumes["AP"].data[z, y, x] > 0.5:
            row += "#"
        elif case.volumes["VP"].data[z, y, x] > 0.5:
            row += "o"
        else:
            row += "." if mask[z, y, x] else " "
    print(row)

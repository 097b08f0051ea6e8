"""Where does each modality get attention?

The fusion module gives every modality a voxel-wise weight in (0, 1). The rim
modality only carries signal on the lesion shell, so its weight should be
higher there than inside the lesion. Run 02_train_and_evaluate.py first.

    python3 demos/04_attention_maps.py
"""

from pathlib import Path

import numpy as np

from mamlseg.core import preprocess_case
from mamlseg.data import SynthSpec, generate_synthetic
from mamlseg.engine import load_checkpoint, predict_multimodal
from mamlseg.fusion import export_attention

out = Path("demo_runs")
maml = load_checkpoint(out / "maml.pt")
cases = [preprocess_case(c) for c in generate_synthetic(SynthSpec(num_cases=8, seed=200))]

print(f"{'case':<10}{'modality':>9}{'rim':>8}{'interior':>10}{'background':>12}")
for case in cases:
    _, attention = predict_multimodal(case, maml)
    background = ~case.mask.data.astype(bool)
    for m, a in attention.items():
        print(f"{case.case_id:<10}{m:>9}{a[case.meta['rim']].mean():>8.3f}"
              f"{a[case.meta['interior']].mean():>10.3f}{a[background].mean():>12.3f}")

# maps can be opened next to the volumes in any NIfTI viewer
case = cases[0]
_, attention = predict_multimodal(case, maml)
for m, a in attention.items():
    print("wrote", export_attention(a, case, out / f"{case.case_id}_attention_{m}.nii.gz"))
print("attention range:", min(a.min() for a in attention.values()), max(a.max() for a in attention.values()))
assert all(np.all((a > 0) & (a < 1)) for a in attention.values())

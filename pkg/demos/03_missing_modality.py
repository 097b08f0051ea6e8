"""Missing-modality inference.

A MAML checkpoint can segment from one modality: only that modality's
backbone and its own head run. We compare it with a baseline trained on that
modality alone, with the same cases and settings. Run
02_train_and_evaluate.py first.

    python3 demos/03_missing_modality.py
"""

from pathlib import Path

from mamlseg.core import preprocess_case
from mamlseg.data import PatchSpec, SynthSpec, generate_synthetic
from mamlseg.engine import TrainConfig, evaluate, load_checkpoint, predict_single, train

out = Path("demo_runs")
maml = load_checkpoint(out / "maml.pt")
train_cases = [preprocess_case(c) for c in generate_synthetic(SynthSpec(num_cases=16, seed=100))]
test_cases = [preprocess_case(c) for c in generate_synthetic(SynthSpec(num_cases=8, seed=200))]
config = TrainConfig(epochs=40, patch=PatchSpec((16, 16, 16), foreground_bias=0.5), seed=0)

# predict_single takes one volume, nothing else
mask = predict_single(test_cases[0].volumes["VP"], "VP", maml)
print(f"{test_cases[0].case_id}: {mask.sum()} voxels predicted from VP alone\n")

fused = evaluate(test_cases, maml, "multimodal").dice_mean
print(f"{'':<6}{'MAML branch':>12}{'baseline':>10}   (MAML with both: {fused:.3f})")
for modality in ("AP", "VP"):
    baseline = train(train_cases, config, baseline_modality=modality).checkpoint
    branch = evaluate(test_cases, maml, f"single:{modality}").dice_mean
    alone = evaluate(test_cases, baseline, f"single:{modality}").dice_mean
    print(f"{modality:<6}{branch:>12.3f}{alone:>10.3f}")

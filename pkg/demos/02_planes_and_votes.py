"""Slicing a phantom three ways and voting the planes back together.

Each plane gets a noisy copy of the true mask as its "prediction". Voting
with a threshold of 3 keeps only voxels all planes agree on, which removes
most of the independent noise.

    python3 demos/02_planes_and_votes.py
"""
import numpy as np

from vrunet.aggregation import AggregationRule, PlanePrediction, aggregate_planes, per_plane_mask
from vrunet.data_io import LesionSpec, synth_volume
from vrunet.metrics import evaluate_volume
from vrunet.volume import PLANES, slice_volume

v = synth_volume(seed=7, dims=(40, 48, 36), lesion_spec=LesionSpec(3, (3.0, 7.0)))
print("volume", v.dims, "lesion voxels", int(v.mask.sum()))
for plane in PLANES:
    s = slice_volume(v, plane, use_mask=True)
    n_lesion = int(s.slices.reshape(len(s), -1).any(axis=1).sum())
    print(f"  {plane:<9} {len(s):>3} slices of {s.slices.shape[1]}x{s.slices.shape[2]}, {n_lesion} with lesion")

rng = np.random.default_rng(1)
preds = []
for plane in PLANES:
    stack = slice_volume(v, plane, use_mask=True).slices.astype(float)
    noisy = np.clip(stack * 0.8 + rng.normal(scale=0.25, size=stack.shape), 0, 1)
    preds.append(PlanePrediction(plane, noisy))

for plane, p in zip(PLANES, preds):
    m = evaluate_volume(per_plane_mask(p, v.dims), v.mask)
    print(f"{plane:<9} alone:   Dice {m.dice:.3f}  FP {m.fp}")
for t in (1, 2, 3):
    m = evaluate_volume(aggregate_planes(*preds, v.dims, AggregationRule(t)), v.mask)
    print(f"vote >= {t}:        Dice {m.dice:.3f}  FP {m.fp}")

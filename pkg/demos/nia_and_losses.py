"""NIA adapter and the joint loss on one batch.

Prints the NIA size, the loss breakdown for a fog batch, and the size of
the gradient that reaches the NIA from each branch.
"""

import torch

from sdnia import training
from sdnia.experiments import toy_detector_config
from sdnia.imagery import degrade_dataset
from sdnia.losses import LossWeights
from sdnia.nia import NIANetwork, nia_param_count
from sdnia.shapes import make_shapes_dataset

torch.manual_seed(0)
print("NIA parameters:", nia_param_count(NIANetwork()))

clean = make_shapes_dataset(4, 64, seed=0)
fog = degrade_dataset(clean, "fog", seed=1)
refs = {e.image_id: e for e in clean.entries}
model = training.SDNIAModel(toy_detector_config())

for name, w in [("joint", LossWeights()), ("detection only", LossWeights(p4=0.0)),
                ("restoration only", LossWeights(p1=0, p2=0, p3=0))]:
    ctx = training.StepContext(model, None, w, refs, None, True, 64)
    _, x, r, boxes, is_orig = training.prepare_batch(list(fog.entries), ctx)
    model.zero_grad()
    total, det, res = training.compute_losses(ctx, x, r, boxes, is_orig)
    total.backward()
    gnorm = torch.sqrt(sum((p.grad ** 2).sum() for p in model.nia.parameters())).item()
    print(f"{name:17s} l_total {total.item():.4f}  l_box {det['l_box'].item():.4f}  "
          f"l_obj {det['l_obj'].item():.4f}  l_res {res['l_res'].item():.4f}  |grad NIA| {gnorm:.2e}")

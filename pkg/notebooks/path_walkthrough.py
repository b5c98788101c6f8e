# Walk through the layer-by-layer probability path of a small backbone.
# Run with: python notebooks/path_walkthrough.py
import numpy as np

from pathcal import tensor as tn
from pathcal.backbone import BackboneConfig, backbone_forward, init_backbone
from pathcal.data import gen_data
from pathcal.pathify import layer_correlations, path_logits, repartition, simulate_path, transition_eval

ds = gen_data("blobs", 120, seed=0, layout="grid")
X, y = ds.split("train")
print("inputs", X.shape, "labels", np.bincount(y))

model = init_backbone(BackboneConfig(mode="kep", depth=4), 0)
path = repartition(model)
print("path length T =", path.T)

# with the noise switched off the path reproduces the forward pass exactly
with tn.no_grad():
    direct = backbone_forward(model, X, noise=False)[0].data
print("max |path - forward|:", np.abs(path_logits(path, X) - direct).max())

# one transition: the mean and the per-token factor of the covariance
X_T = path.embed(X[:2])
tr = transition_eval(path, path.T, X_T)
print("transition at t=T:", type(tr).__name__, "mean", tr.mean.shape)

trace = simulate_path(path, X_T, noise=True, seed=1)
for t, s in zip(range(path.T, -1, -1), trace.states):
    print(f"  X_{t}: norm {np.linalg.norm(s):.3f}")

print("noise-off layer correlations", np.round(layer_correlations(path, X, noise=False), 6))
print("noise-on layer correlations ", np.round(layer_correlations(path, X, noise=True, seed=0), 4))

"""
Looking at the two feature streams
==================================

Each cascading layer keeps the channels it inherits (modulated by the
block) and appends new ones.  Exporting one grid per layer, with one row
per generation of channels, shows the rows accumulating: the first grid
has one row, the sixth has six.
"""

import tempfile

import numpy as np

from ecn import ECN, CascadeConfig, Tensor, plan_network
from ecn.visualize import export_feature_maps

# 8 stem channels, 8 new channels per layer, stopping at 6 pixels:
# five cascading layers, hence six feature stages.
plan = plan_network(CascadeConfig(init_channels=8, scale="3/4", growth=8, stop_threshold_px=6))
net = ECN(plan, seed=0)
print("channels per stage:", plan.level_boundaries())

# A smooth colour gradient as input.
yy, xx = np.mgrid[0:32, 0:32] / 31.0
image = np.stack([yy, xx, 1 - yy])[None].astype(np.float32)

outdir = tempfile.mkdtemp(prefix="ecn-maps-")
for path in export_feature_maps(net.features(Tensor(image)), outdir):
    print(path)

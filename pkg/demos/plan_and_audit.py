"""
Planning a cascade and counting its parameters
==============================================

A cascade is fully determined by a handful of integers: the width of the
stem, the spatial scale factor, the block kind and the class count.  This
walk-through builds a few plans and checks the closed-form counts against
an instantiated network.
"""

from fractions import Fraction

from ecn import ECN, CascadeConfig, audit_params, plan_network

# The scale factor fixes the depth: feature maps shrink by floor(size * s)
# until the next size would drop below the 4-pixel threshold.
for scale in ("1/2", "3/4", "7/8"):
    plan = plan_network(CascadeConfig(init_channels=16, scale=scale))
    sizes = [layer.out_hw[0] for layer in plan.layers]
    print(f"scale {scale}: {plan.depth} cascading layers, sizes {sizes}")

# Growth defaults to init * 2 * (1 - s), so the final width is the same
# (4x the stem) whatever the scale.
cfg = CascadeConfig(init_channels=32, scale=Fraction(3, 4), block=4, class_count=100)
print("growth:", cfg.growth)

# The plan table lists every layer's channels, spatial size and cost.
plan = plan_network(cfg)
print(plan.table())

# Instantiating the network and counting its tensors element by element
# must agree with the plan, component by component.
report = audit_params(plan, ECN(plan))
for name, planned, counted in report.components:
    print(f"{name:<8} planned {planned:>8} counted {counted:>8}")
print("audit ok:", report.ok)

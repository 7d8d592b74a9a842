"""Merge schedules and what they cost.

Solves decreasing schedules for a few target ratios, compares them with the
constant and published schedules, and prints the per-layer MAC breakdown.
"""

# %%
from pyra.arch import ArchSpec
from pyra.schedule import (
    PUBLISHED,
    ScheduleSpec,
    constant_schedule,
    decreasing_schedule,
    effective_schedule,
    token_counts,
    vit_flops,
)

vit_b = ArchSpec.preset("vit_b")
print("tokens entering block 1:", vit_b.N0, "mergeable:", vit_b.T)

# %% decreasing schedules for a range of target ratios
for ratio in (1.0, 1.5, 2.0, 3.0):
    s = decreasing_schedule(vit_b, ScheduleSpec(ratio, final_tokens=4))
    print(f"F/f={ratio:<4} r={list(s.r)} merged={s.R}")

# %% the r=16 constant schedule hits the bipartite limit in the last block
const = constant_schedule(vit_b, 16)
print("requested ", list(const.r))
print("effective ", list(effective_schedule(const, vit_b).r))
print("tokens    ", token_counts(vit_b, const))

# %% MAC reports
base = vit_flops(vit_b)
print(f"uncompressed: {base.total_macs / 1e9:.2f} GMACs")
for name in sorted(PUBLISHED):
    arch = ArchSpec.preset(name.rsplit("_", 1)[0])
    rep = vit_flops(arch, PUBLISHED[name], include_pyra=True)
    print(f"{name:12s} ratio={100 * rep.ratio:6.2f}%  modulation MACs={rep.pyra_macs}")

# %% per-layer CSV, ready for an external plotting tool
print(vit_flops(vit_b, PUBLISHED["vit_b_high"]).to_csv())

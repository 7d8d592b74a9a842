"""Bipartite matching and modulated merging on a handful of tokens."""

# %%
import numpy as np

from pyra.merge import group_matrices, match_pairs, merge_pairs, partition_tokens
from pyra.modulation import PyraConfig, apply_modulation, init_generators, modulation_scale
from pyra.numerics import Rng

rng = np.random.default_rng(0)
x = rng.normal(size=(8, 6))

# %% alternating split, then the r most similar pairs
part = partition_tokens(len(x))
print("G1:", part.g1_indices, "G2:", part.g2_indices)
m = match_pairs(x, part, 3)
print("pairs (src -> dst):", m.pairs)
print("scores:", np.round(m.scores, 4))

# %% plain size-weighted merge
merged, sizes = merge_pairs(x, np.ones(len(x), int), m)
print("tokens after merge:", merged.shape[0], "sizes:", sizes)

# %% modulation: fresh generators change nothing
M_s, M_t = group_matrices(x, m)
gen = init_generators(x.shape[1], m.r, PyraConfig(), Rng(0))
mod = apply_modulation(M_s, M_t, gen, PyraConfig())
print("identity at init:", np.array_equal(mod.data, M_s.data))

# %% after a nudge to W_D the sources are rescaled elementwise
gen.W_D.data = rng.normal(size=gen.W_D.shape)
mod = apply_modulation(M_s, M_t, gen, PyraConfig())
ratio = mod.data / M_s.data
print("scale range:", ratio.min().round(3), ratio.max().round(3))

# %% the scale factor never leaves (-1, 3)
s = modulation_scale(rng.normal(scale=10, size=100_000), rng.normal(scale=10, size=100_000))
print("min/max over 1e5 draws:", s.min(), s.max())

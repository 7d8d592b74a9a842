"""Parallel-yielding re-activation of merge-source tokens.

Token matrices use the column layout ``(..., D, r)``: column ``k`` is the
``k``-th selected pair. Per layer, a pair of generators turns the normalised
pair information into a channel weight ``delta_D`` (D x 1) and a token weight
``delta_r`` (1 x r); a two-step sigmoid gate then rescales the source tokens,
leaving them untouched while the channel generator is still zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .merge import MatchResult, ScheduleError, group_matrices
from .numerics import Rng, Tensor, gaussian

MODES = ("full", "only_Wr", "only_WD", "no_activation", "direct_W", "gated")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PyraConfig:
    """Generator variant.

    ``full`` is the paired generator with re-activation; the remaining modes
    are the ablations. ``activation=False`` with ``only_Wr``/``only_WD`` gives
    the plain single-generator rows; ``no_activation`` is ``full`` without the
    sigmoid. ``rank_s > 1`` applies only to ``full``.
    """

    mode: str = "full"
    rank_s: int = 1
    gated_hidden: int = 4
    gated_bias: bool = True
    activation: bool = True
    init_std: float = 0.02
    enabled: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown PYRA mode {self.mode!r}; choose from {MODES}")
        if self.rank_s < 1:
            raise ConfigError("rank_s must be >= 1")
        if self.rank_s > 1 and self.mode != "full":
            raise ConfigError("rank_s > 1 is only defined for mode 'full'")
        if self.gated_hidden < 1:
            raise ConfigError("gated_hidden must be >= 1")
        if self.init_std < 0:
            raise ConfigError("init_std must be non-negative")

    @property
    def uses_activation(self) -> bool:
        return self.activation and self.mode != "no_activation"


@dataclass
class Generators:
    """Learnable modulation parameters for one layer, sized to its ``r``."""

    layer_index: int
    r: int
    params: dict[str, Tensor] = field(default_factory=dict)

    @property
    def W_r(self) -> Tensor | None:
        return self.params.get("W_r")

    @property
    def W_D(self) -> Tensor | None:
        return self.params.get("W_D")

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())


@dataclass
class ModulationWeights:
    delta_D: Tensor  # (..., D, s)
    delta_r: Tensor  # (..., s, r)


def init_generators(D: int, r: int, config: PyraConfig, rng: Rng, layer_index: int = 0) -> Generators:
    """Build one layer's generators so that modulation is an identity at step 0."""
    s = config.rank_s
    g = Generators(layer_index=layer_index, r=r)
    mode = config.mode
    if mode in ("full", "no_activation"):
        g.params["W_r"] = gaussian(rng, (r, s), std=config.init_std, requires_grad=True)
        g.params["W_D"] = Tensor(np.zeros((s, D)), requires_grad=True)
    elif mode == "only_Wr":
        # alone, a Gaussian W_r would modulate from step 0
        g.params["W_r"] = Tensor(np.zeros((r, 1)), requires_grad=True)
    elif mode == "only_WD":
        g.params["W_D"] = Tensor(np.zeros((1, D)), requires_grad=True)
    elif mode == "direct_W":
        g.params["W"] = Tensor(np.zeros((D, r)), requires_grad=True)
    elif mode == "gated":
        d = config.gated_hidden
        g.params["fc1"] = gaussian(rng, (d, D), std=config.init_std, requires_grad=True)
        g.params["fc2"] = Tensor(np.zeros((D, d)), requires_grad=True)
        if config.gated_bias:
            g.params["fc1_bias"] = Tensor(np.zeros((d, 1)), requires_grad=True)
            g.params["fc2_bias"] = Tensor(np.zeros((D, 1)), requires_grad=True)
    for name, p in g.params.items():
        p.name = f"pyra.{layer_index}.{name}"
    return g


def generator_param_count(config: PyraConfig, D: int, r: int) -> int:
    """Closed-form trainable parameter count of one layer's generators."""
    mode = config.mode
    if mode in ("full", "no_activation"):
        return config.rank_s * (D + r)
    if mode == "only_Wr":
        return r
    if mode == "only_WD":
        return D
    if mode == "direct_W":
        return D * r
    d = config.gated_hidden
    return 2 * D * d + (d + D if config.gated_bias else 0)


def build_info_matrix(M_s, M_t, eps: float = 1e-6) -> Tensor:
    """Affine-free layernorm of ``M_s + M_t`` over the channel axis of each column."""
    M_s, M_t = nx.as_tensor(M_s), nx.as_tensor(M_t)
    if M_s.shape != M_t.shape:
        raise nx.DimensionError(f"M_s {M_s.shape} and M_t {M_t.shape} differ")
    return nx.layernorm(M_s + M_t, eps=eps, axis=-2)


def yield_weights(M_info, gen: Generators) -> ModulationWeights:
    """``delta_D = M_info @ W_r`` and ``delta_r = W_D @ M_info``.

    The two products read only ``M_info`` and their own generator, so they can
    be evaluated in either order or concurrently.
    """
    M_info = nx.as_tensor(M_info)
    r = M_info.shape[-1]
    if gen.W_r is None or gen.W_D is None:
        raise ConfigError("yield_weights needs both W_r and W_D")
    if gen.W_r.shape[0] != r:
        raise ScheduleError(f"layer {gen.layer_index}: W_r sized for r={gen.W_r.shape[0]}, got r={r}")
    return ModulationWeights(delta_D=M_info @ gen.W_r, delta_r=gen.W_D @ M_info)


def _gate(z: Tensor, activation: bool) -> Tensor:
    # 2*sigma(z) - 1, or 2z - 1 with the sigmoid dropped
    return 2.0 * (nx.sigmoid(z) if activation else z) - 1.0


def reactivate(M_s, weights: ModulationWeights, activation: bool = True) -> Tensor:
    """Two-step modulation of the source tokens.

    ``M_hat = 2 sigma(delta_D) * M_s`` then ``M_s + (2 sigma(delta_r) - 1) * M_hat``
    with both weights broadcast to ``D x r``. Each element is scaled by a
    factor in (-1, 3); the result equals ``M_s`` exactly when ``delta_r == 0``.
    """
    M_s = nx.as_tensor(M_s)
    if weights.delta_D.shape[-1] != 1 or weights.delta_r.shape[-2] != 1:
        raise nx.DimensionError("reactivate expects rank-1 weights; use the rank-s path")
    scale_D = 2.0 * (nx.sigmoid(weights.delta_D) if activation else weights.delta_D)
    M_hat = scale_D * M_s
    return M_s + _gate(weights.delta_r, activation) * M_hat


def modulation_scale(delta_D, delta_r) -> np.ndarray:
    """Elementwise factor ``1 + (2 sigma(delta_r) - 1) * 2 sigma(delta_D)`` (numpy, for checks)."""
    sig = lambda z: 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))  # noqa: E731
    return 1.0 + (2.0 * sig(delta_r) - 1.0) * 2.0 * sig(delta_D)


def apply_modulation(M_s, M_t, gen: Generators, config: PyraConfig) -> Tensor:
    """Modulate source tokens with the variant chosen by ``config.mode``."""
    M_s, M_t = nx.as_tensor(M_s), nx.as_tensor(M_t)
    if not config.enabled or M_s.shape[-1] == 0:
        return M_s
    if gen.r != M_s.shape[-1]:
        raise ScheduleError(f"layer {gen.layer_index}: generators sized for r={gen.r}, got r={M_s.shape[-1]}")
    act = config.uses_activation
    mode = config.mode
    if mode == "direct_W":
        return M_s + _gate(gen.params["W"], act) * M_s
    M_info = build_info_matrix(M_s, M_t)
    if mode == "gated":
        h = gen.params["fc1"] @ M_info
        if "fc1_bias" in gen.params:
            h = h + gen.params["fc1_bias"]
        delta = gen.params["fc2"] @ nx.gelu(h)
        if "fc2_bias" in gen.params:
            delta = delta + gen.params["fc2_bias"]
        return M_s + _gate(delta, act) * M_s
    if mode == "only_Wr":
        return M_s + _gate(M_info @ gen.W_r, act) * M_s
    if mode == "only_WD":
        return M_s + _gate(gen.W_D @ M_info, act) * M_s
    weights = yield_weights(M_info, gen)
    if config.rank_s > 1:
        W = weights.delta_D @ weights.delta_r
        return M_s + _gate(W, act) * M_s
    return reactivate(M_s, weights, activation=act)


def modulate_for_merge(x, match: MatchResult, gen: Generators | None, config: PyraConfig | None) -> Tensor:
    """Group the matched tokens and return the modulated source matrix ``(..., D, r)``.

    Destination tokens are never modified.
    """
    M_s, M_t = group_matrices(x, match)
    if gen is None or config is None or not config.enabled:
        return M_s
    return apply_modulation(M_s, M_t, gen, config)


def pyra_complexity(arch, schedule) -> tuple[int, int]:
    """Extra (trainable parameters, FLOPs) of the paired generators: ``L*D + R`` and ``4*R*D``."""
    r = list(getattr(schedule, "r", schedule))
    if len(r) not in (0, arch.L):
        raise ScheduleError(f"schedule has {len(r)} layers, architecture has {arch.L}")
    R = int(sum(r))
    return arch.L * arch.D + R, 4 * R * arch.D

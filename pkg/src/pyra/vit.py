"""A small pre-norm Vision Transformer with fused-QKV low-rank adapters.

Each block optionally merges token pairs at its input (after PYRA modulation
of the merge sources), then runs multi-head self-attention and the FFN. The
backbone is frozen; trainable tensors are the adapters, generators and head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .arch import ArchSpec
from .merge import MERGE_MODES, PARTITION_MODES, match_pairs, merge_pairs, partition_tokens
from .modulation import Generators, PyraConfig, generator_param_count, init_generators, modulate_for_merge
from .numerics import DimensionError, Rng, Tensor, gaussian
from .schedule import MergeSchedule, validate_schedule

LN_EPS = 1e-6

# Rng streams, one per parameter group, so enabling adapters or generators
# never shifts the backbone draws.
_STREAM_BACKBONE, _STREAM_ADAPTERS, _STREAM_GENERATORS, _STREAM_HEAD, _STREAM_PARTITION = range(5)


@dataclass
class BlockWeights:
    qkv: Tensor  # (3D, D)
    qkv_bias: Tensor
    attn_out: Tensor  # (D, D)
    attn_out_bias: Tensor
    ffn_in: Tensor  # (hidden, D)
    ffn_in_bias: Tensor
    ffn_out: Tensor  # (D, hidden)
    ffn_out_bias: Tensor
    norm1_weight: Tensor
    norm1_bias: Tensor
    norm2_weight: Tensor
    norm2_bias: Tensor


@dataclass
class LoRAAdapter:
    A: Tensor  # (h, D), Gaussian
    B: Tensor  # (3D, h), zeros

    @property
    def rank(self) -> int:
        return self.A.shape[0]


@dataclass
class ModelState:
    arch: ArchSpec
    blocks: list[BlockWeights]
    adapters: list[LoRAAdapter]
    patch_weight: Tensor
    patch_bias: Tensor
    cls_token: Tensor | None
    pos_embed: Tensor
    norm_weight: Tensor
    norm_bias: Tensor
    head_weight: Tensor
    head_bias: Tensor
    schedule: MergeSchedule
    generators: list[Generators] | None = None
    pyra: PyraConfig | None = None
    merge_mode: str = "weighted"
    partition_mode: str = "alternating"
    seed: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def pyra_active(self) -> bool:
        return self.generators is not None and self.pyra is not None and self.pyra.enabled

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"patch.weight": self.patch_weight, "patch.bias": self.patch_bias}
        if self.cls_token is not None:
            out["cls_token"] = self.cls_token
        out["pos_embed"] = self.pos_embed
        for i, b in enumerate(self.blocks):
            for name in BlockWeights.__dataclass_fields__:
                out[f"blocks.{i}.{name}"] = getattr(b, name)
        for i, a in enumerate(self.adapters):
            out[f"lora.{i}.A"] = a.A
            out[f"lora.{i}.B"] = a.B
        for g in self.generators or ():
            for name, p in g.params.items():
                out[f"pyra.{g.layer_index}.{name}"] = p
        out["norm.weight"] = self.norm_weight
        out["norm.bias"] = self.norm_bias
        out["head.weight"] = self.head_weight
        out["head.bias"] = self.head_bias
        return out

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items() if v.requires_grad}

    def backbone_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items() if component_of(k) == "backbone"}


def component_of(name: str) -> str:
    if name.startswith("lora."):
        return "adapters"
    if name.startswith("pyra."):
        return "generators"
    if name.startswith("head."):
        return "head"
    return "backbone"


# --------------------------------------------------------------------------- construction


def _frozen(rng: Rng, shape, std: float) -> Tensor:
    return gaussian(rng, shape, std=std)


def init_model(
    arch: ArchSpec,
    lora_rank: int | None = 8,
    schedule=None,
    pyra: PyraConfig | None = None,
    seed: int = 0,
    merge_mode: str = "weighted",
    partition_mode: str = "alternating",
    backbone_std: float | None = None,
    lora_std: float = 0.02,
    head_std: float = 0.02,
    pos_std: float = 1.0,
) -> ModelState:
    """Randomly initialised frozen backbone plus trainable adapters/generators/head.

    Backbone matrices are Gaussian with std ``backbone_std`` (default
    ``fan_in ** -0.5``); biases are zero and layernorms are the identity.
    Position embeddings use ``pos_std`` so that a random backbone still
    carries where each patch came from.
    """
    if merge_mode not in MERGE_MODES:
        raise ValueError(f"merge_mode must be one of {MERGE_MODES}")
    if partition_mode not in PARTITION_MODES:
        raise ValueError(f"partition_mode must be one of {PARTITION_MODES}")
    sched = validate_schedule(schedule if schedule is not None else MergeSchedule.identity(arch.L), arch, strict=True)
    root = Rng(seed)
    rb = root.child(_STREAM_BACKBONE)
    D, hid = arch.D, arch.hidden

    def std(fan_in):
        return backbone_std if backbone_std is not None else fan_in ** -0.5

    zeros = lambda *s: Tensor(np.zeros(s))  # noqa: E731
    ones = lambda *s: Tensor(np.ones(s))  # noqa: E731

    patch_weight = _frozen(rb, (D, arch.patch_dim), std(arch.patch_dim))
    cls_token = _frozen(rb, (1, D), 0.02) if arch.use_cls else None
    pos_embed = _frozen(rb, (arch.N0, D), pos_std)
    blocks = []
    for _ in range(arch.L):
        blocks.append(
            BlockWeights(
                qkv=_frozen(rb, (3 * D, D), std(D)),
                qkv_bias=zeros(3 * D),
                attn_out=_frozen(rb, (D, D), std(D)),
                attn_out_bias=zeros(D),
                ffn_in=_frozen(rb, (hid, D), std(D)),
                ffn_in_bias=zeros(hid),
                ffn_out=_frozen(rb, (D, hid), std(hid)),
                ffn_out_bias=zeros(D),
                norm1_weight=ones(D),
                norm1_bias=zeros(D),
                norm2_weight=ones(D),
                norm2_bias=zeros(D),
            )
        )

    adapters = []
    if lora_rank:
        ra = root.child(_STREAM_ADAPTERS)
        for _ in range(arch.L):
            adapters.append(
                LoRAAdapter(
                    A=gaussian(ra, (lora_rank, D), std=lora_std, requires_grad=True),
                    B=Tensor(np.zeros((3 * D, lora_rank)), requires_grad=True),
                )
            )

    generators = None
    if pyra is not None and pyra.enabled:
        rg = root.child(_STREAM_GENERATORS)
        generators = [init_generators(D, r, pyra, rg, layer_index=l) for l, r in enumerate(sched.r)]

    rh = root.child(_STREAM_HEAD)
    state = ModelState(
        arch=arch,
        blocks=blocks,
        adapters=adapters,
        patch_weight=patch_weight,
        patch_bias=zeros(D),
        cls_token=cls_token,
        pos_embed=pos_embed,
        norm_weight=ones(D),
        norm_bias=zeros(D),
        head_weight=gaussian(rh, (arch.num_classes, D), std=head_std, requires_grad=True),
        head_bias=Tensor(np.zeros(arch.num_classes), requires_grad=True),
        schedule=sched,
        generators=generators,
        pyra=pyra,
        merge_mode=merge_mode,
        partition_mode=partition_mode,
        seed=seed,
    )
    for name, p in state.named_parameters().items():
        p.name = name
    return state


# --------------------------------------------------------------------------- forward


def _as_batch(images) -> tuple[np.ndarray, bool]:
    arr = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=nx.get_default_dtype())
    if arr.ndim == 3:
        return arr[None], True
    if arr.ndim == 4:
        return arr, False
    raise DimensionError(f"expected (C, H, W) or (B, C, H, W) images, got shape {arr.shape}")


def patch_embed(images, state: ModelState) -> Tensor:
    """Project non-overlapping patches to tokens, prepend CLS, add positions.

    Returns ``(N0, D)`` for one image or ``(B, N0, D)`` for a batch.
    """
    arch = state.arch
    batch, single = _as_batch(images)
    B, C, Hh, W = batch.shape
    if C != arch.channels or Hh != arch.img or W != arch.img:
        raise DimensionError(
            f"image shape {(C, Hh, W)} does not match architecture {(arch.channels, arch.img, arch.img)}"
        )
    g, P = arch.img // arch.P, arch.P
    patches = batch.reshape(B, C, g, P, g, P).transpose(0, 2, 4, 1, 3, 5).reshape(B, g * g, C * P * P)
    tokens = nx.matmul(Tensor(patches), nx.transpose(state.patch_weight)) + state.patch_bias
    if state.cls_token is not None:
        cls = nx.broadcast(nx.reshape(state.cls_token, (1, 1, arch.D)), (B, 1, arch.D))
        tokens = nx.concat([cls, tokens], axis=1)
    tokens = tokens + state.pos_embed
    return nx.reshape(tokens, tokens.shape[1:]) if single else tokens


def lora_qkv_forward(x, block: BlockWeights, adapter: LoRAAdapter | None) -> Tensor:
    """Fused QKV projection ``W0 x + B A x`` (no scaling on the low-rank branch)."""
    x = nx.as_tensor(x)
    base = x @ nx.transpose(block.qkv) + block.qkv_bias
    if adapter is None:
        return base
    return base + (x @ nx.transpose(adapter.A)) @ nx.transpose(adapter.B)


def attention(x, block: BlockWeights, adapter: LoRAAdapter | None, heads: int) -> Tensor:
    B, n, D = x.shape
    dh = D // heads
    qkv = lora_qkv_forward(x, block, adapter)
    qkv = nx.transpose(nx.reshape(qkv, (B, n, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    attn = nx.softmax((q @ nx.transpose(k)) * (dh ** -0.5), axis=-1)
    out = nx.reshape(nx.transpose(attn @ v, (0, 2, 1, 3)), (B, n, D))
    return out @ nx.transpose(block.attn_out) + block.attn_out_bias


def ffn(x, block: BlockWeights) -> Tensor:
    h = nx.gelu(x @ nx.transpose(block.ffn_in) + block.ffn_in_bias)
    return h @ nx.transpose(block.ffn_out) + block.ffn_out_bias


def _partition_rng(state: ModelState, layer_index: int, rng: Rng | None) -> Rng | None:
    if state.partition_mode != "random":
        return None
    return rng if rng is not None else Rng(state.seed, _STREAM_PARTITION + 1 + layer_index)


def merge_step(x: Tensor, sizes: np.ndarray, layer_index: int, state: ModelState, rng: Rng | None = None):
    """Match, optionally modulate, and merge ``schedule[layer_index]`` pairs."""
    r = state.schedule[layer_index]
    if r == 0:
        return x, sizes
    protected = state.arch.protected
    part = partition_tokens(
        x.shape[-2] - protected, state.partition_mode, _partition_rng(state, layer_index, rng), offset=protected
    )
    match = match_pairs(x, part, r)
    modulated = None
    if state.pyra_active:
        modulated = modulate_for_merge(x, match, state.generators[layer_index], state.pyra)
    return merge_pairs(x, sizes, match, modulated, mode=state.merge_mode)


def block_forward(x, layer_index: int, state: ModelState, sizes=None, rng: Rng | None = None):
    """One encoder block on ``(B, n, D)`` tokens; returns ``(tokens, sizes)`` with ``n - r`` tokens."""
    x = nx.as_tensor(x)
    if sizes is None:
        sizes = np.ones(x.shape[:-1], dtype=np.int64)
    x, sizes = merge_step(x, sizes, layer_index, state, rng)
    block = state.blocks[layer_index]
    adapter = state.adapters[layer_index] if state.adapters else None
    h = nx.layernorm(x, block.norm1_weight, block.norm1_bias, eps=LN_EPS)
    x = x + attention(h, block, adapter, state.arch.H)
    h = nx.layernorm(x, block.norm2_weight, block.norm2_bias, eps=LN_EPS)
    x = x + ffn(h, block)
    return x, sizes


def forward_tokens(images, state: ModelState, rng: Rng | None = None):
    """Final-layer tokens ``(B, n_L, D)`` and their sizes, before the final norm."""
    batch, _ = _as_batch(images)
    x = patch_embed(batch, state)
    sizes = np.ones(x.shape[:-1], dtype=np.int64)
    for l in range(state.arch.L):
        x, sizes = block_forward(x, l, state, sizes, rng)
    return x, sizes


def forward(images, state: ModelState, rng: Rng | None = None) -> Tensor:
    """Class logits: ``(num_classes,)`` for one image, ``(B, num_classes)`` for a batch."""
    _, single = _as_batch(images)
    x, _ = forward_tokens(images, state, rng)
    if state.arch.use_cls:
        pooled = x[:, 0, :]
    else:
        pooled = nx.mean(x, axis=1)
    pooled = nx.layernorm(pooled, state.norm_weight, state.norm_bias, eps=LN_EPS)
    logits = pooled @ nx.transpose(state.head_weight) + state.head_bias
    return nx.reshape(logits, logits.shape[1:]) if single else logits


# --------------------------------------------------------------------------- parameter accounting


@dataclass
class ParamReport:
    backbone: int
    head: int
    adapters: int
    generators: int

    @property
    def trainable(self) -> int:
        return self.adapters + self.generators + self.head

    @property
    def trainable_excl_head(self) -> int:
        return self.adapters + self.generators

    @property
    def total(self) -> int:
        return self.backbone + self.head + self.adapters + self.generators

    @property
    def percent(self) -> float:
        """Added trainables (adapters + generators) relative to the backbone without head."""
        return 100.0 * self.trainable_excl_head / self.backbone

    @property
    def percent_with_head(self) -> float:
        return 100.0 * self.trainable_excl_head / (self.backbone + self.head)

    def to_dict(self) -> dict:
        return {
            "backbone": self.backbone,
            "head": self.head,
            "adapters": self.adapters,
            "generators": self.generators,
            "trainable": self.trainable,
            "trainable_excl_head": self.trainable_excl_head,
            "percent": self.percent,
            "percent_with_head": self.percent_with_head,
        }


def count_params(state: ModelState) -> ParamReport:
    counts = {"backbone": 0, "head": 0, "adapters": 0, "generators": 0}
    for name, p in state.named_parameters().items():
        counts[component_of(name)] += p.size
    return ParamReport(**counts)


def count_params_for(
    arch: ArchSpec, lora_rank: int | None = 8, schedule=None, pyra: PyraConfig | None = None
) -> ParamReport:
    """Same accounting as :func:`count_params` from shapes alone (no allocation)."""
    D, hid = arch.D, arch.hidden
    block = 3 * D * D + 3 * D + D * D + D + hid * D + hid + D * hid + D + 4 * D
    backbone = arch.patch_dim * D + D + (D if arch.use_cls else 0) + arch.N0 * D + arch.L * block + 2 * D
    head = arch.num_classes * D + arch.num_classes
    adapters = arch.L * (lora_rank * D + 3 * D * lora_rank) if lora_rank else 0
    generators = 0
    if pyra is not None and pyra.enabled:
        r = list(schedule) if schedule is not None else [0] * arch.L
        generators = sum(generator_param_count(pyra, D, rl) for rl in r)
    return ParamReport(backbone=backbone, head=head, adapters=adapters, generators=generators)

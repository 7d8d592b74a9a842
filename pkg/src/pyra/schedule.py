"""Merge schedules and the FLOP model.

A schedule lists how many token pairs each block merges. The FLOP model counts
multiply-accumulates (MACs) of the matrix products in every block given the
number of tokens each block actually processes.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

from .arch import ArchSpec
from .merge import ScheduleError

PUBLISHED = {
    "vit_b_high": (40, 34, 30, 24, 18, 14, 10, 8, 4, 4, 3, 3),
    "vit_l_high": (20, 19, 18, 17, 15, 13, 13, 12, 10, 9, 8, 6, 6, 4, 4, 4, 3, 3, 2, 2, 1, 1, 1, 1),
    "vit_b_low": (16,) * 12,
    "vit_l_low": (8,) * 24,
    "deit_b_high": (40, 34, 30, 24, 18, 14, 10, 8, 4, 4, 3, 3),
}

MERGE_POINTS = ("block_input", "after_attention")
CSV_COLUMNS = ("layer", "tokens", "mac_attn_linear", "mac_attn_quad", "mac_ffn", "mac_total")

# guards floor() against representation error, e.g. (1/12) * 192 = 15.999...
_FLOOR_SLACK = 1e-9


@dataclass(frozen=True)
class MergeSchedule:
    r: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "r", tuple(int(v) for v in self.r))

    @property
    def R(self) -> int:
        return sum(self.r)

    def __len__(self) -> int:
        return len(self.r)

    def __iter__(self):
        return iter(self.r)

    def __getitem__(self, i):
        return self.r[i]

    def to_json(self) -> str:
        return json.dumps(list(self.r))

    @classmethod
    def from_json(cls, text) -> "MergeSchedule":
        data = json.loads(text) if isinstance(text, (str, bytes)) else text
        if isinstance(data, dict):
            data = data.get("r", data.get("schedule"))
        if not isinstance(data, list) or not all(isinstance(v, int) and v >= 0 for v in data):
            raise ScheduleError("a schedule must be a JSON array of non-negative integers")
        return cls(tuple(data))

    @classmethod
    def identity(cls, L: int) -> "MergeSchedule":
        return cls((0,) * L)


@dataclass(frozen=True)
class ScheduleSpec:
    """Target FLOP ratio ``F/f`` and number of tokens left after the last block."""

    target_ratio: float
    final_tokens: int = 4

    def __post_init__(self):
        if not self.target_ratio >= 1:
            raise ScheduleError(f"target ratio F/f must be >= 1, got {self.target_ratio}")
        if self.final_tokens < 1:
            raise ScheduleError("final_tokens must be >= 1")


def validate_schedule(schedule, arch: ArchSpec, strict: bool = False) -> MergeSchedule:
    """Check a schedule against an architecture and return it as a MergeSchedule.

    Always enforced: one entry per layer, non-negative entries, and at least
    one mergeable token left after every layer. ``strict`` also requires each
    layer to fit the bipartite split (``r_l <= remaining // 2``), which is what
    an executable model needs. Errors name the first violating layer (1-based).
    """
    sched = schedule if isinstance(schedule, MergeSchedule) else MergeSchedule(tuple(schedule))
    if len(sched) != arch.L:
        raise ScheduleError(f"schedule has {len(sched)} layers, architecture has {arch.L}")
    remaining = arch.T
    for layer, r in enumerate(sched.r, start=1):
        if r < 0:
            raise ScheduleError(f"layer {layer}: negative merge count {r}")
        if strict and r > remaining // 2:
            raise ScheduleError(
                f"layer {layer}: merging {r} pairs needs {2 * r} mergeable tokens, only {remaining} left"
            )
        remaining -= r
        if remaining < 1:
            raise ScheduleError(f"layer {layer}: cumulative merges leave {remaining} tokens (need >= 1)")
    return sched


def effective_schedule(schedule, arch: ArchSpec) -> MergeSchedule:
    """Clip every layer to its bipartite limit ``remaining // 2``."""
    out, remaining = [], arch.T
    for r in schedule:
        r = min(int(r), remaining // 2)
        out.append(r)
        remaining -= r
    return MergeSchedule(tuple(out))


def constant_schedule(arch: ArchSpec, r_per_layer: int) -> MergeSchedule:
    """Merge ``r_per_layer`` pairs in every block."""
    return validate_schedule((r_per_layer,) * arch.L, arch)


def decreasing_schedule(arch: ArchSpec, spec: ScheduleSpec) -> MergeSchedule:
    """Floor solution ``r_l = floor((g(l-1) - g(l)) (T - t))`` with ``g(x) = (1 - x/L)^(F/f - 1)``.

    The raw values telescope, so ``T - t - L <= sum(r) <= T - t``. Per-layer
    feasibility is not enforced here; pass the result through
    :func:`validate_schedule`.
    """
    L, T, t = arch.L, arch.T, spec.final_tokens
    if not 1 <= t < T:
        raise ScheduleError(f"final_tokens must satisfy 1 <= t < T={T}, got {t}")
    exponent = spec.target_ratio - 1.0

    def g(x: float) -> float:
        return (1.0 - x / L) ** exponent

    r = [math.floor((g(l - 1) - g(l)) * (T - t) + _FLOOR_SLACK) for l in range(1, L + 1)]
    return MergeSchedule(tuple(r))


def published_schedule(name: str) -> MergeSchedule:
    try:
        return MergeSchedule(PUBLISHED[name])
    except KeyError:
        raise ScheduleError(f"unknown published schedule {name!r}; known: {sorted(PUBLISHED)}") from None


def token_counts(arch: ArchSpec, schedule) -> list[int]:
    """Tokens (CLS included) each block processes after its own merge."""
    counts, n = [], arch.N0
    for r in schedule:
        n -= r
        counts.append(n)
    return counts


# --------------------------------------------------------------------------- FLOPs


@dataclass
class LayerFlops:
    layer: int
    tokens: int
    mac_attn_linear: int
    mac_attn_quad: int
    mac_ffn: int

    @property
    def mac_total(self) -> int:
        return self.mac_attn_linear + self.mac_attn_quad + self.mac_ffn


@dataclass
class FlopsReport:
    arch: dict
    schedule: list[int]
    effective_schedule: list[int]
    layers: list[LayerFlops]
    patch_embed_macs: int
    head_macs: int
    pyra_macs: int
    baseline_macs: int
    merge_point: str = "block_input"
    notes: list[str] = field(default_factory=list)

    @property
    def total_macs(self) -> int:
        return sum(l.mac_total for l in self.layers) + self.patch_embed_macs + self.head_macs + self.pyra_macs

    @property
    def total_flops_2x(self) -> int:
        return 2 * self.total_macs

    @property
    def ratio(self) -> float:
        return self.total_macs / self.baseline_macs

    @property
    def speedup(self) -> float:
        return self.baseline_macs / self.total_macs

    def to_dict(self) -> dict:
        return {
            "arch": self.arch,
            "schedule": self.schedule,
            "effective_schedule": self.effective_schedule,
            "merge_point": self.merge_point,
            "layers": [{**asdict(l), "mac_total": l.mac_total} for l in self.layers],
            "patch_embed_macs": self.patch_embed_macs,
            "head_macs": self.head_macs,
            "pyra_macs": self.pyra_macs,
            "total_macs": self.total_macs,
            "total_gmacs": self.total_macs / 1e9,
            "total_flops_2x": self.total_flops_2x,
            "baseline_macs": self.baseline_macs,
            "ratio": self.ratio,
            "ratio_percent": 100.0 * self.ratio,
            "speedup": self.speedup,
            "notes": self.notes,
        }

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    @classmethod
    def from_dict(cls, d: dict) -> "FlopsReport":
        layers = [
            LayerFlops(
                layer=l["layer"],
                tokens=l["tokens"],
                mac_attn_linear=l["mac_attn_linear"],
                mac_attn_quad=l["mac_attn_quad"],
                mac_ffn=l["mac_ffn"],
            )
            for l in d["layers"]
        ]
        return cls(
            arch=d["arch"],
            schedule=list(d["schedule"]),
            effective_schedule=list(d.get("effective_schedule", d["schedule"])),
            layers=layers,
            patch_embed_macs=d["patch_embed_macs"],
            head_macs=d["head_macs"],
            pyra_macs=d["pyra_macs"],
            baseline_macs=d["baseline_macs"],
            merge_point=d.get("merge_point", "block_input"),
            notes=list(d.get("notes", [])),
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for l in self.layers:
            w.writerow([l.layer, l.tokens, l.mac_attn_linear, l.mac_attn_quad, l.mac_ffn, l.mac_total])
        return buf.getvalue()


def _block_macs(arch: ArchSpec, layer: int, n_attn: int, n_ffn: int) -> LayerFlops:
    D = arch.D
    return LayerFlops(
        layer=layer,
        tokens=n_attn,
        mac_attn_linear=4 * n_attn * D * D,  # fused QKV (3) + output projection (1)
        mac_attn_quad=2 * n_attn * n_attn * D,  # QK^T and AV
        mac_ffn=2 * n_ffn * D * arch.hidden,
    )


def _layers(arch: ArchSpec, r: tuple[int, ...], merge_point: str) -> list[LayerFlops]:
    out, n = [], arch.N0
    for layer, rl in enumerate(r, start=1):
        if merge_point == "block_input":
            n -= rl
            out.append(_block_macs(arch, layer, n, n))
        else:
            out.append(_block_macs(arch, layer, n, n - rl))
            n -= rl
    return out


def vit_flops(
    arch: ArchSpec,
    schedule=None,
    include_pyra: bool = False,
    count_patch_embed: bool = True,
    count_head: bool = True,
    merge_point: str = "block_input",
) -> FlopsReport:
    """MAC count of a ViT forward pass under a merge schedule.

    Layernorm, softmax and GELU are not counted. ``merge_point`` selects where
    tokens disappear: at the block input (the model in this package) or between
    attention and FFN.
    """
    if merge_point not in MERGE_POINTS:
        raise ValueError(f"merge_point must be one of {MERGE_POINTS}")
    sched = validate_schedule(schedule if schedule is not None else MergeSchedule.identity(arch.L), arch)
    eff = effective_schedule(sched, arch)
    patch = arch.T * arch.patch_dim * arch.D if count_patch_embed else 0
    head = arch.D * arch.num_classes if count_head else 0
    layers = _layers(arch, eff.r, merge_point)
    base_layers = _layers(arch, (0,) * arch.L, merge_point)
    baseline = sum(l.mac_total for l in base_layers) + patch + head
    pyra = 4 * eff.R * arch.D if include_pyra else 0
    notes = [
        "MACs counted once; total_flops_2x doubles them",
        "layernorm/softmax/GELU excluded",
        f"patch embed {'included' if count_patch_embed else 'excluded'}, head {'included' if count_head else 'excluded'}",
    ]
    for layer, (want, got) in enumerate(zip(sched.r, eff.r), start=1):
        if want != got:
            notes.append(f"layer {layer}: {want} pairs requested, bipartite limit {got}")
    return FlopsReport(
        arch=arch.to_dict(),
        schedule=list(sched.r),
        effective_schedule=list(eff.r),
        layers=layers,
        patch_embed_macs=patch,
        head_macs=head,
        pyra_macs=pyra,
        baseline_macs=baseline,
        merge_point=merge_point,
        notes=notes,
    )


def speedup_estimate(report_base: FlopsReport, report_compressed: FlopsReport) -> float:
    """FLOP-proxy speedup: ratio of total MACs."""
    if report_base.arch != report_compressed.arch:
        raise ValueError("reports describe different architectures")
    return report_base.total_macs / report_compressed.total_macs

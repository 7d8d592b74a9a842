"""Static ViT architecture descriptions."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace


@dataclass(frozen=True)
class ArchSpec:
    L: int
    D: int
    H: int
    P: int
    img: int
    channels: int = 3
    num_classes: int = 1000
    mlp_ratio: int = 4
    use_cls: bool = True

    def __post_init__(self):
        if self.L < 1:
            raise ValueError("L must be >= 1")
        if self.D < 1 or self.H < 1 or self.D % self.H:
            raise ValueError(f"width D={self.D} must be divisible by heads H={self.H}")
        if self.P < 1 or self.img % self.P:
            raise ValueError(f"image size {self.img} must be divisible by patch size {self.P}")
        if self.num_classes < 1 or self.channels < 1 or self.mlp_ratio < 1:
            raise ValueError("num_classes, channels and mlp_ratio must be positive")

    @property
    def T(self) -> int:
        """Patch tokens (excluding CLS)."""
        return (self.img // self.P) ** 2

    @property
    def protected(self) -> int:
        return 1 if self.use_cls else 0

    @property
    def N0(self) -> int:
        return self.T + self.protected

    @property
    def head_dim(self) -> int:
        return self.D // self.H

    @property
    def hidden(self) -> int:
        return self.mlp_ratio * self.D

    @property
    def patch_dim(self) -> int:
        return self.channels * self.P * self.P

    def replace(self, **changes) -> "ArchSpec":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def preset(cls, name: str) -> "ArchSpec":
        key = PRESET_ALIASES.get(name.lower(), name.lower())
        try:
            return PRESETS[key]
        except KeyError:
            raise ValueError(f"unknown architecture preset {name!r}; known: {sorted(PRESETS)}") from None


PRESETS = {
    "vit_b": ArchSpec(L=12, D=768, H=12, P=16, img=224),
    "vit_l": ArchSpec(L=24, D=1024, H=16, P=16, img=224),
    "deit_b": ArchSpec(L=12, D=768, H=12, P=16, img=224),
    "tiny": ArchSpec(L=4, D=32, H=4, P=4, img=16, channels=1, num_classes=4),
}

PRESET_ALIASES = {
    "vit-b/16": "vit_b",
    "vit_b16": "vit_b",
    "vit-l/16": "vit_l",
    "vit_l16": "vit_l",
    "deit-b/16": "deit_b",
}

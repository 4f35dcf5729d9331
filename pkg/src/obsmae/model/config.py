from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace


@dataclass(frozen=True)
class ModelConfig:
    token_dim: int = 768
    backbone_blocks: int = 12
    backbone_heads: int = 12
    decoder_blocks: int = 6
    decoder_heads: int = 8
    context_dim: int = 384
    patch: tuple[int, int, int] = (1, 16, 16)
    vae_latent_dim: int = 32
    kl_weight: float = 1e-4
    tokenizer_heads: int = 6
    mlp_ratio: float = 4.0
    window: int = 144
    hours: int = 12
    mask_budget: int = 128
    dirichlet_alpha: float = 1.0
    preset: str = "paper"

    def __post_init__(self):
        object.__setattr__(self, "patch", tuple(int(p) for p in self.patch))
        if self.token_dim % self.backbone_heads:
            raise ValueError(f"token_dim {self.token_dim} not divisible by backbone_heads {self.backbone_heads}")
        if self.token_dim % self.tokenizer_heads:
            raise ValueError(f"token_dim {self.token_dim} not divisible by tokenizer_heads {self.tokenizer_heads}")
        if self.context_dim % self.decoder_heads:
            raise ValueError(f"context_dim {self.context_dim} not divisible by decoder_heads {self.decoder_heads}")
        pt, ph, pw = self.patch
        if pt != 1:
            raise ValueError("temporal patch size must be 1 (frame-by-frame tokens)")
        if self.window % ph or self.window % pw:
            raise ValueError(f"patch {self.patch} does not divide window {self.window}")
        if self.mask_budget < 1:
            raise ValueError("mask_budget must be >= 1")

    @property
    def patch_side(self) -> int:
        return self.patch[1]

    @property
    def grid_side(self) -> int:
        return self.window // self.patch[1]

    @classmethod
    def paper(cls, **overrides) -> "ModelConfig":
        return replace(cls(), **overrides)

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        base = cls(
            token_dim=96,
            backbone_blocks=2,
            backbone_heads=4,
            decoder_blocks=2,
            decoder_heads=4,
            context_dim=48,
            vae_latent_dim=16,
            tokenizer_heads=2,
            window=48,
            mask_budget=32,
            preset="tiny",
        )
        return replace(base, **overrides)

    @classmethod
    def from_dict(cls, d) -> "ModelConfig":
        d = dict(d)
        preset = d.pop("preset", "paper")
        fields = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls.tiny(**fields) if preset == "tiny" else cls.paper(**fields)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch"] = list(self.patch)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

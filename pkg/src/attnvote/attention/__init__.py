"""Attention modules with the uniform FeatureMap -> FeatureMap contract."""

from .attn2d import CBAM, CrissCross, DualAttention, NonLocal, SqueezeExcite
from .attn3d import ASCN, ChannelAffinity, OffsetAttention, PointAttention, PointTransformer
from .base import AttentionConfig, AttentionModule

REGISTRY = {
    "nonlocal": NonLocal,
    "crisscross": CrissCross,
    "se": SqueezeExcite,
    "cbam": CBAM,
    "dual": DualAttention,
    "ascn": ASCN,
    "point_attn": PointAttention,
    "caa": ChannelAffinity,
    "offset_attn": OffsetAttention,
    "point_transformer": PointTransformer,
}

ATTENTION_KINDS = ("none",) + tuple(REGISTRY)


def build_attention(kind: str, channels: int, reduction: int = 8, k: int = 16, rng=None, **extra):
    """Instantiate an attention block by name; ``"none"`` returns None."""
    if kind == "none":
        return None
    if kind not in REGISTRY:
        raise ValueError(f"unknown attention kind {kind!r}; choose from {', '.join(ATTENTION_KINDS)}")
    return REGISTRY[kind](AttentionConfig(channels, reduction, k, **extra), rng=rng)


__all__ = [
    "ASCN", "ATTENTION_KINDS", "AttentionConfig", "AttentionModule", "CBAM", "ChannelAffinity",
    "CrissCross", "DualAttention", "NonLocal", "OffsetAttention", "PointAttention",
    "PointTransformer", "REGISTRY", "SqueezeExcite", "build_attention",
]

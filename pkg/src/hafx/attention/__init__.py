from .backend import (
    BACKEND,
    linear_attention_streaming,
    softmax_attention_full_np,
    streaming_state_bytes,
)
from .ops import (
    LA_EPS,
    AblationMode,
    Activation,
    FeatureMapParams,
    HybridSpec,
    RoPEParams,
    WindowSpec,
    apply_rope,
    feature_map_apply,
    guard_count,
    hybrid_attention,
    linear_attention_causal,
    linear_attention_masked,
    linear_attention_quadratic_oracle,
    reset_guard_count,
    sinks_attention,
    sliding_window_attention,
    softmax_attention_causal,
)

__all__ = [
    "BACKEND",
    "LA_EPS",
    "AblationMode",
    "Activation",
    "FeatureMapParams",
    "HybridSpec",
    "RoPEParams",
    "WindowSpec",
    "apply_rope",
    "feature_map_apply",
    "guard_count",
    "hybrid_attention",
    "linear_attention_causal",
    "linear_attention_masked",
    "linear_attention_quadratic_oracle",
    "linear_attention_streaming",
    "reset_guard_count",
    "sinks_attention",
    "sliding_window_attention",
    "softmax_attention_causal",
    "softmax_attention_full_np",
    "streaming_state_bytes",
]

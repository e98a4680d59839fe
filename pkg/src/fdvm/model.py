"""The C-SSM block and the dual-path frequency-domain network.

One path processes the (log-compressed) amplitude spectrum, the other the
(pi-normalized) phase spectrum. Blocks at the same depth exchange attention
maps: each path's merged features are gated by the partner's re-softmaxed
map. Residual structure is deliberate: per-block shortcuts plus a global
per-path residual, with the output projections and heads zero-initialized,
so a fresh model is the identity map and training starts from "change
nothing".

All heavy lifting happens at a fixed low resolution (`ssm_fixed_hw`^2
positions): features are bilinearly resized down before the flattened stage
and back up after it, which keeps the scan cost resolution-independent and
makes the exchanged maps shape-compatible for any input size.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import spectral
from .errors import ConfigError, ShapeError
from .seeding import substream
from .ssm import SsmParams, init_ssm, selective_scan
from .tensor import (Tensor, add, bilinear_resize, conv1d_depthwise, conv2d,
                     expm1, flatten_spatial, hadamard, layer_norm, linear,
                     relu, scale, softmax, unflatten_spatial)

__all__ = [
    "ABLATIONS", "ModelConfig", "CssmBlockWeights", "ModelWeights",
    "build_model", "cssm_block", "fdvm_forward", "fdvm_forward_maps",
    "named_parameters", "parameter_count", "expected_parameter_count",
]

ABLATIONS = ("full", "no_cross_attention", "no_ssm")

LN_EPS = 1e-5


@dataclass
class ModelConfig:
    channels: int = 32
    blocks_per_path: int = 8
    ssm_state_dim: int = 16
    ssm_fixed_hw: int = 64
    ablation: str = "full"

    def validate(self):
        if self.channels < 1:
            raise ConfigError(f"channels must be >= 1, got {self.channels}")
        if self.blocks_per_path < 1:
            raise ConfigError(f"blocks_per_path must be >= 1, got {self.blocks_per_path}")
        if self.ssm_state_dim < 1:
            raise ConfigError(f"ssm_state_dim must be >= 1, got {self.ssm_state_dim}")
        if self.ssm_fixed_hw < 8:
            raise ConfigError(f"ssm_fixed_hw must be >= 8, got {self.ssm_fixed_hw}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; one of {ABLATIONS}")
        return self

    def to_dict(self):
        return {"channels": self.channels, "blocks_per_path": self.blocks_per_path,
                "ssm_state_dim": self.ssm_state_dim, "ssm_fixed_hw": self.ssm_fixed_hw,
                "ablation": self.ablation}

    @classmethod
    def from_dict(cls, d):
        return cls(**d).validate()


@dataclass
class CssmBlockWeights:
    conv_in_w: Tensor       # (C,C,3,3)
    conv_in_b: Tensor       # (C,)
    ln_gamma: Tensor        # (C,)
    ln_beta: Tensor         # (C,)
    ssm: Optional[SsmParams]            # None under no_ssm
    ssm_linear_w: Optional[Tensor]      # (C,C), only under no_ssm
    ssm_linear_b: Optional[Tensor]      # (C,)
    conv_b1_w: Tensor       # (C,3) depthwise, scan branch
    conv_b1_b: Tensor
    conv_b2_w: Tensor       # (C,3) depthwise, attention branch
    conv_b2_b: Tensor
    conv_cross_w: Tensor    # (C,3) depthwise, cross-map re-extraction
    conv_cross_b: Tensor
    proj_w: Tensor          # (C,C)
    proj_b: Tensor          # (C,)


@dataclass
class ModelWeights:
    lift_amp_w: Tensor      # (C,3,3,3)
    lift_amp_b: Tensor
    lift_phase_w: Tensor
    lift_phase_b: Tensor
    blocks_amp: list = field(default_factory=list)
    blocks_phase: list = field(default_factory=list)
    head_amp_w: Tensor = None       # (3,C,3,3)
    head_amp_b: Tensor = None
    head_phase_w: Tensor = None
    head_phase_b: Tensor = None
    config: ModelConfig = None


def _kaiming_conv(rng, c_out, c_in):
    # fan-in uniform with ReLU gain sqrt(2): bound = sqrt(6 / fan_in)
    fan_in = c_in * 9
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, (c_out, c_in, 3, 3)), requires_grad=True)


def _kaiming_depthwise(rng, c):
    bound = np.sqrt(6.0 / 3.0)
    return Tensor(rng.uniform(-bound, bound, (c, 3)), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def _build_block(cfg: ModelConfig, rng) -> CssmBlockWeights:
    C = cfg.channels
    if cfg.ablation == "no_ssm":
        ssm = None
        bound = np.sqrt(6.0 / C)
        lin_w = Tensor(rng.uniform(-bound, bound, (C, C)), requires_grad=True)
        lin_b = _zeros((C,))
    else:
        ssm = init_ssm(C, cfg.ssm_state_dim, rng)
        lin_w = lin_b = None
    return CssmBlockWeights(
        conv_in_w=_kaiming_conv(rng, C, C),
        conv_in_b=_zeros((C,)),
        ln_gamma=Tensor(np.ones(C), requires_grad=True),
        ln_beta=_zeros((C,)),
        ssm=ssm,
        ssm_linear_w=lin_w,
        ssm_linear_b=lin_b,
        conv_b1_w=_kaiming_depthwise(rng, C),
        conv_b1_b=_zeros((C,)),
        conv_b2_w=_kaiming_depthwise(rng, C),
        conv_b2_b=_zeros((C,)),
        conv_cross_w=_kaiming_depthwise(rng, C),
        conv_cross_b=_zeros((C,)),
        proj_w=_zeros((C, C)),      # zero-init: block starts as the identity
        proj_b=_zeros((C,)),
    )


def build_model(cfg: ModelConfig, seed: int) -> ModelWeights:
    """Create reproducible weights; residual projections and heads start at zero."""
    cfg.validate()
    rng = substream(seed, "init")
    C = cfg.channels
    w = ModelWeights(
        lift_amp_w=_kaiming_conv(rng, C, 3),
        lift_amp_b=_zeros((C,)),
        lift_phase_w=_kaiming_conv(rng, C, 3),
        lift_phase_b=_zeros((C,)),
        config=cfg,
    )
    for _ in range(cfg.blocks_per_path):
        w.blocks_amp.append(_build_block(cfg, rng))
    for _ in range(cfg.blocks_per_path):
        w.blocks_phase.append(_build_block(cfg, rng))
    w.head_amp_w = _zeros((3, C, 3, 3))
    w.head_amp_b = _zeros((3,))
    w.head_phase_w = _zeros((3, C, 3, 3))
    w.head_phase_b = _zeros((3,))
    return w


# ---------------------------------------------------------------------------
# forward pass


def _block_features(f_in: Tensor, w: CssmBlockWeights, cfg: ModelConfig):
    """Steps 1-5: conv+ReLU, fix to low res, LayerNorm, two branches, merge.

    Returns (merged, attn) at the flattened (B, L', C) stage.
    """
    s = cfg.ssm_fixed_hw
    x = relu(conv2d(f_in, w.conv_in_w, w.conv_in_b))
    seq = flatten_spatial(bilinear_resize(x, s, s))
    n = layer_norm(seq, w.ln_gamma, w.ln_beta, LN_EPS)
    b1 = conv1d_depthwise(n, w.conv_b1_w, w.conv_b1_b)
    if cfg.ablation == "no_ssm":
        b1 = linear(b1, w.ssm_linear_w, w.ssm_linear_b)
    else:
        b1 = selective_scan(b1, w.ssm)
    attn = softmax(conv1d_depthwise(n, w.conv_b2_w, w.conv_b2_b), axis=2)
    merged = hadamard(b1, attn)
    return merged, attn


def _block_cross_map(attn: Tensor, w: CssmBlockWeights) -> Tensor:
    """Step 7: re-extract the attention map for the partner path."""
    return softmax(conv1d_depthwise(attn, w.conv_cross_w, w.conv_cross_b), axis=2)


def _block_residual(merged: Tensor, cross_in: Optional[Tensor],
                    w: CssmBlockWeights, cfg: ModelConfig,
                    out_h: int, out_w: int) -> Tensor:
    """Steps 6, 8-9: cross gate, project, back to (B,C,out_h,out_w)."""
    s = cfg.ssm_fixed_hw
    if cross_in is not None:
        if cross_in.dims != merged.dims:
            raise ShapeError(
                f"cross_in dims {cross_in.dims} != internal stage dims {merged.dims}")
        merged = hadamard(merged, cross_in)
    p = linear(merged, w.proj_w, w.proj_b)
    return bilinear_resize(unflatten_spatial(p, s, s), out_h, out_w)


def _block_finish(merged: Tensor, cross_in: Optional[Tensor], f_in: Tensor,
                  w: CssmBlockWeights, cfg: ModelConfig) -> Tensor:
    """Steps 6, 8-10: residual branch plus the unscaled additive shortcut."""
    _, _, H, W = f_in.dims
    up = _block_residual(merged, cross_in, w, cfg, H, W)
    return add(up, f_in)


def cssm_block(f_in: Tensor, cross_in: Optional[Tensor], w: CssmBlockWeights,
               cfg: ModelConfig):
    """One block: (B,C,H,W) -> same shape, plus the cross map for the partner.

    Under the no_cross_attention ablation, cross_in is ignored and cross_out
    is None.
    """
    merged, attn = _block_features(f_in, w, cfg)
    if cfg.ablation == "no_cross_attention":
        f_out = _block_finish(merged, None, f_in, w, cfg)
        return f_out, None
    cross_out = _block_cross_map(attn, w)
    f_out = _block_finish(merged, cross_in, f_in, w, cfg)
    return f_out, cross_out


def fdvm_forward_maps(img: Tensor, w: ModelWeights):
    """Full forward pass; returns (output image, amplitude map, phase map).

    The returned maps are the raw per-path outputs (decompressed amplitude,
    radians phase) before reconstruction, which the ablation tests inspect.
    """
    if len(img.dims) != 4 or img.dims[1] != 3:
        raise ShapeError(f"input must be (B,3,H,W), got {img.dims}")
    cfg = w.config
    pair = spectral.image_to_pair(img)
    amp_in, ph_in = pair.amplitude, pair.phase

    fa = conv2d(amp_in, w.lift_amp_w, w.lift_amp_b)
    fp = conv2d(ph_in, w.lift_phase_w, w.lift_phase_b)
    for ba, bp in zip(w.blocks_amp, w.blocks_phase):
        merged_a, attn_a = _block_features(fa, ba, cfg)
        merged_p, attn_p = _block_features(fp, bp, cfg)
        if cfg.ablation == "no_cross_attention":
            cross_for_a = cross_for_p = None
        else:
            cross_for_p = _block_cross_map(attn_a, ba)
            cross_for_a = _block_cross_map(attn_p, bp)
        fa = _block_finish(merged_a, cross_for_a, fa, ba, cfg)
        fp = _block_finish(merged_p, cross_for_p, fp, bp, cfg)

    amp_c = add(amp_in, conv2d(fa, w.head_amp_w, w.head_amp_b))
    ph_n = add(ph_in, conv2d(fp, w.head_phase_w, w.head_phase_b))
    amp_out = expm1(amp_c)
    ph_out = scale(ph_n, np.pi)
    out = spectral.recompose(amp_out, ph_out)
    return out, amp_out, ph_out


def fdvm_forward(img: Tensor, w: ModelWeights) -> Tensor:
    """Exposure-corrected image, same (B,3,H,W) shape for any H, W."""
    out, _, _ = fdvm_forward_maps(img, w)
    return out


# ---------------------------------------------------------------------------
# parameter registry


def _block_named(prefix: str, b: CssmBlockWeights):
    items = [
        (f"{prefix}.conv_in.weight", b.conv_in_w),
        (f"{prefix}.conv_in.bias", b.conv_in_b),
        (f"{prefix}.ln.gamma", b.ln_gamma),
        (f"{prefix}.ln.beta", b.ln_beta),
    ]
    if b.ssm is not None:
        items += [(f"{prefix}.ssm.{k}", t) for k, t in b.ssm.tensors()]
    else:
        items += [
            (f"{prefix}.ssm_linear.weight", b.ssm_linear_w),
            (f"{prefix}.ssm_linear.bias", b.ssm_linear_b),
        ]
    items += [
        (f"{prefix}.conv_b1.weight", b.conv_b1_w),
        (f"{prefix}.conv_b1.bias", b.conv_b1_b),
        (f"{prefix}.conv_b2.weight", b.conv_b2_w),
        (f"{prefix}.conv_b2.bias", b.conv_b2_b),
        (f"{prefix}.conv_cross.weight", b.conv_cross_w),
        (f"{prefix}.conv_cross.bias", b.conv_cross_b),
        (f"{prefix}.proj.weight", b.proj_w),
        (f"{prefix}.proj.bias", b.proj_b),
    ]
    return items


def named_parameters(w: ModelWeights):
    """Stable (name, Tensor) list covering every trainable parameter."""
    items = [
        ("lift_amp.weight", w.lift_amp_w), ("lift_amp.bias", w.lift_amp_b),
        ("lift_phase.weight", w.lift_phase_w), ("lift_phase.bias", w.lift_phase_b),
    ]
    for i, b in enumerate(w.blocks_amp):
        items += _block_named(f"amp.block{i}", b)
    for i, b in enumerate(w.blocks_phase):
        items += _block_named(f"phase.block{i}", b)
    items += [
        ("head_amp.weight", w.head_amp_w), ("head_amp.bias", w.head_amp_b),
        ("head_phase.weight", w.head_phase_w), ("head_phase.bias", w.head_phase_b),
    ]
    return items


def parameter_count(w: ModelWeights) -> int:
    return sum(t.numel for _, t in named_parameters(w))


def expected_parameter_count(cfg: ModelConfig) -> int:
    """Closed-form count from the declared shapes; must match the registry."""
    C, N = cfg.channels, cfg.ssm_state_dim
    lift = 27 * C + C                       # (C,3,3,3) + bias, per path
    head = 27 * C + 3                       # (3,C,3,3) + bias, per path
    if cfg.ablation == "no_ssm":
        inner = C * C + C                   # substitute linear layer
    else:
        inner = 3 * C * N + 2 * C + 1       # a_log, w_b, w_c, d_skip, w_dt, b_dt
    block = (9 * C * C + C) + 2 * C + inner + 3 * (3 * C + C) + (C * C + C)
    return 2 * lift + 2 * cfg.blocks_per_path * block + 2 * head

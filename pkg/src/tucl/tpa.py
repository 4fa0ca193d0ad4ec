"""Task-oriented prompt attention and the cyclic prompt-consistency loss.

Seven learned prompt vectors (four contrasts, three regions) are projected to
the token width, refined by their own self-attention block, and then serve as
keys/values for cross-attention from the segmentation tokens, which are refined
by a separate self-attention block first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, ParameterError
from .rng import Stream
from .tensor import Tensor, parameter
from .volume_io import MODALITIES, REGIONS, RegionMask

PROMPT_NAMES = MODALITIES + REGIONS
N_CONTRAST = len(MODALITIES)


@dataclass
class PromptSet:
    embeddings: Tensor
    names: tuple[str, ...] = PROMPT_NAMES

    def __post_init__(self):
        if tuple(self.names) != PROMPT_NAMES:
            raise ParameterError(f"prompt names must be {PROMPT_NAMES}, got {self.names}")
        e = self.embeddings
        if e.ndim != 2 or e.shape[0] != len(PROMPT_NAMES):
            raise DimensionError(f"prompt embeddings must be 7×d_p, got {e.shape}")
        if not np.all(np.isfinite(e.data)):
            raise ParameterError("prompt embeddings contain non-finite values")

    @property
    def width(self) -> int:
        return self.embeddings.shape[1]

    @classmethod
    def init(cls, stream: Stream, width: int = 32, std: float = 0.02) -> "PromptSet":
        data = stream.generator.normal(0.0, std, (len(PROMPT_NAMES), width))
        return cls(parameter(data, "prompts"))


@dataclass
class AttentionBlock:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int
    ln_gain: Tensor
    ln_bias: Tensor

    def __post_init__(self):
        d = self.width
        for name in ("wq", "wk", "wv", "wo"):
            if getattr(self, name).shape != (d, d):
                raise DimensionError(f"{name} must be {d}×{d}, got {getattr(self, name).shape}")
        if self.heads < 1 or d % self.heads:
            raise ParameterError(f"width {d} not divisible by head count {self.heads}")

    @property
    def width(self) -> int:
        return self.wq.shape[0]

    @classmethod
    def init(cls, stream: Stream, width: int, heads: int) -> "AttentionBlock":
        g = stream.generator
        scale = 1.0 / math.sqrt(width)
        ws = [parameter(g.normal(0.0, scale, (width, width))) for _ in range(4)]
        return cls(*ws, heads=heads, ln_gain=parameter(np.ones(width)),
                   ln_bias=parameter(np.zeros(width)))

    def parameters(self) -> list[Tensor]:
        return [self.wq, self.wk, self.wv, self.wo, self.ln_gain, self.ln_bias]


class Attended(NamedTuple):
    out: Tensor                 # LN(query + mixed @ wo)
    weights: list[Tensor]       # one n_q × n_kv row-stochastic matrix per head
    mixed: Tensor               # concatenated head outputs before the output projection


def attend(queries: Tensor, context: Tensor, block: AttentionBlock) -> Attended:
    """Multi-head scaled dot-product attention with residual and layer norm."""
    d = block.width
    for name, t in (("queries", queries), ("context", context)):
        if t.ndim != 2 or t.shape[1] != d:
            raise DimensionError(f"{name} width {t.shape} does not match block width {d}")
    q = queries @ block.wq
    k = context @ block.wk
    v = context @ block.wv
    dh = d // block.heads
    scale = 1.0 / math.sqrt(dh)
    heads, weights = [], []
    for h in range(block.heads):
        cols = (slice(None), slice(h * dh, (h + 1) * dh))
        a = T.softmax((q[cols] @ k[cols].T) * scale, axis=1)
        weights.append(a)
        heads.append(a @ v[cols])
    mixed = heads[0] if len(heads) == 1 else T.concat(heads, axis=1)
    out = T.layer_norm(queries + mixed @ block.wo, block.ln_gain, block.ln_bias)
    return Attended(out, weights, mixed)


def intra_attn(tokens: Tensor, block: AttentionBlock) -> Tensor:
    return attend(tokens, tokens, block).out


def cross_attn(seg_tokens: Tensor, prompt_tokens: Tensor, block: AttentionBlock) -> Tensor:
    return attend(seg_tokens, prompt_tokens, block).out


@dataclass
class TPABlocks:
    prompt_proj: Tensor         # d_p × d
    prompt_bias: Tensor         # d
    intra_seg: AttentionBlock
    intra_prompt: AttentionBlock
    cross: AttentionBlock

    @classmethod
    def init(cls, stream: Stream, prompt_width: int = 32, width: int = 64, heads: int = 2) -> "TPABlocks":
        g = stream.split("prompt-proj").generator
        return cls(
            prompt_proj=parameter(g.normal(0.0, 1.0 / math.sqrt(prompt_width), (prompt_width, width))),
            prompt_bias=parameter(np.zeros(width)),
            intra_seg=AttentionBlock.init(stream.split("intra-seg"), width, heads),
            intra_prompt=AttentionBlock.init(stream.split("intra-prompt"), width, heads),
            cross=AttentionBlock.init(stream.split("cross"), width, heads),
        )

    def parameters(self) -> list[Tensor]:
        return ([self.prompt_proj, self.prompt_bias] + self.intra_seg.parameters()
                + self.intra_prompt.parameters() + self.cross.parameters())


class TPAOutput(NamedTuple):
    fused: Tensor       # f_TPA, m × d
    prompt_features: Tensor   # intra-attended prompt stream, 7 × d


def tpa_apply(f_seg: Tensor, prompts: PromptSet, blocks: TPABlocks) -> TPAOutput:
    if prompts.width != blocks.prompt_proj.shape[0]:
        raise DimensionError(
            f"prompt width {prompts.width} does not match projection {blocks.prompt_proj.shape}")
    x_prompt = prompts.embeddings @ blocks.prompt_proj + blocks.prompt_bias
    seg = intra_attn(f_seg, blocks.intra_seg)
    pf = intra_attn(x_prompt, blocks.intra_prompt)
    return TPAOutput(cross_attn(seg, pf, blocks.cross), pf)


def tpa_forward(f_seg: Tensor, prompts: PromptSet, blocks: TPABlocks) -> Tensor:
    """``CrossAttn(IntraAttn(f_seg), IntraAttn(X_prompt))``."""
    return tpa_apply(f_seg, prompts, blocks).fused


# ------------------------------------------------------------------ cycle loss


@dataclass
class PhiWeights:
    """Linear remap from ``[prompt feature | pooled prediction]`` to prompt space."""
    weight: Tensor      # (d + 1) × d_p
    bias: Tensor        # d_p

    @classmethod
    def init(cls, stream: Stream, feature_width: int = 64, prompt_width: int = 32) -> "PhiWeights":
        fan_in = feature_width + 1
        w = stream.generator.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, prompt_width))
        return cls(parameter(w), parameter(np.zeros(prompt_width)))

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


def pooled_prediction(y_hat: Tensor) -> Tensor:
    """Per-prompt-row statistic: region rows get their region's mean probability,
    contrast rows the mean over the three regions.  Shape 7 × 1."""
    pooled = T.mean(y_hat, axis=tuple(range(1, y_hat.ndim)))      # (3,)
    overall = T.broadcast_to(T.mean(pooled, keepdims=True), (N_CONTRAST,))
    return T.concat([overall, pooled], axis=0).reshape(len(PROMPT_NAMES), 1)


def phi_remap(f_prompt: Tensor, y_hat: Tensor, phi: PhiWeights) -> Tensor:
    if f_prompt.shape[0] != len(PROMPT_NAMES):
        raise DimensionError(f"prompt features must have 7 rows, got {f_prompt.shape}")
    if phi.weight.shape[0] != f_prompt.shape[1] + 1:
        raise DimensionError(f"phi weight {phi.weight.shape} does not fit features {f_prompt.shape}")
    joined = T.concat([f_prompt, pooled_prediction(y_hat)], axis=1)
    return joined @ phi.weight + phi.bias


def cycle_loss(prompts: PromptSet, f_prompt: Tensor, y_hat: RegionMask, phi: PhiWeights) -> Tensor:
    """Mean squared distance between the prompt embeddings and their remap."""
    if y_hat.binarized:
        raise ContractError("cycle loss needs a probabilistic prediction, got a binarized mask")
    values = T.as_tensor(y_hat.values)
    remapped = phi_remap(f_prompt, values, phi)
    if remapped.shape != prompts.embeddings.shape:
        raise DimensionError(f"remap {remapped.shape} vs prompts {prompts.embeddings.shape}")
    return T.mean(T.square(prompts.embeddings - remapped))

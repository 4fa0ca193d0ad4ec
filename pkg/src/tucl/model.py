"""Toy encoder-decoder over 4-contrast volumes with prompt attention at the bottleneck.

    x[4,W,H,D] -conv/2-> 8 -conv/2-> 16 @ W/4 --tokens--> TPA --> +residual
               -up×2,conv-> 8 (+ encoder stage 1) -up×2,conv-> 3 -> sigmoid  [WT, TC, ET]

Dropout follows every hidden stage.  With ``use_tpa=False`` the bottleneck is
passed straight to the decoder.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .errors import CorruptFileError, DimensionError, ParameterError
from .rng import Stream
from .tensor import Tensor, parameter
from .tpa import PhiWeights, PromptSet, TPABlocks, tpa_apply
from .volume_io import MultiContrastVolume, RegionMask, read_container, write_container

CHECKPOINT_FORMAT = "tucl-checkpoint/1"


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 4
    widths: tuple[int, int] = (8, 16)
    out_channels: int = 3
    kernel: int = 3
    token_width: int = 64
    heads: int = 2
    prompt_width: int = 32
    dropout: float = 0.1
    use_tpa: bool = True
    skip: bool = True           # add encoder stage 1 features to decoder stage 1

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(self.widths))
        if len(self.widths) != 2:
            raise ParameterError("the backbone has exactly two encoder stages")
        if not 0 <= self.dropout < 1:
            raise ParameterError(f"dropout rate must be in [0, 1), got {self.dropout}")
        if self.token_width % self.heads:
            raise ParameterError(f"token width {self.token_width} not divisible by {self.heads} heads")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


class ForwardOut(NamedTuple):
    prob: Tensor                        # 3 × W × H × D, sigmoid outputs
    prompt_features: Tensor | None      # 7 × d intra-attended prompt stream (None without TPA)


class TuclModel:
    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0):
        self.config = config
        self.seed = seed
        c = config
        s = Stream(seed, "init")
        c1, c2 = c.widths

        def conv(name, c_out, c_in):
            fan_in = c_in * c.kernel ** 3
            w = s.split(name).generator.normal(0.0, math.sqrt(2.0 / fan_in),
                                               (c_out, c_in, c.kernel, c.kernel, c.kernel))
            return parameter(w, name), parameter(np.zeros(c_out), name + ".b")

        def dense(name, n_in, n_out):
            w = s.split(name).generator.normal(0.0, 1.0 / math.sqrt(n_in), (n_in, n_out))
            return parameter(w, name), parameter(np.zeros(n_out), name + ".b")

        self.enc1 = conv("enc1", c1, c.in_channels)
        self.enc2 = conv("enc2", c2, c1)
        self.dec1 = conv("dec1", c1, c2)
        self.dec2 = conv("dec2", c.out_channels, c1)
        self.tok_in = dense("tok_in", c2, c.token_width)
        self.tok_out = dense("tok_out", c.token_width, c2)
        self.prompts = PromptSet.init(s.split("prompts"), c.prompt_width)
        self.tpa = TPABlocks.init(s.split("tpa"), c.prompt_width, c.token_width, c.heads)
        self.phi = PhiWeights.init(s.split("phi"), c.token_width, c.prompt_width)

    # ---------------------------------------------------------------- params

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """All parameters in fixed declaration order (checkpoint layout)."""
        out = []
        for stage in ("enc1", "enc2", "dec1", "dec2", "tok_in", "tok_out"):
            w, b = getattr(self, stage)
            out += [(f"{stage}.w", w), (f"{stage}.b", b)]
        out.append(("prompts", self.prompts.embeddings))
        t = self.tpa
        out += [("tpa.prompt_proj", t.prompt_proj), ("tpa.prompt_bias", t.prompt_bias)]
        for blk_name in ("intra_seg", "intra_prompt", "cross"):
            blk = getattr(t, blk_name)
            for field in ("wq", "wk", "wv", "wo", "ln_gain", "ln_bias"):
                out.append((f"tpa.{blk_name}.{field}", getattr(blk, field)))
        out += [("phi.weight", self.phi.weight), ("phi.bias", self.phi.bias)]
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def tpa_parameters(self) -> list[Tensor]:
        return ([self.tok_in[0], self.tok_in[1], self.tok_out[0], self.tok_out[1],
                 self.prompts.embeddings] + self.tpa.parameters() + self.phi.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def set_flat(self, flat: np.ndarray) -> None:
        i = 0
        for name, p in self.named_parameters():
            n = p.data.size
            if i + n > flat.size:
                raise CorruptFileError(f"parameter payload too short at {name}")
            p.data = flat[i:i + n].reshape(p.shape).copy()
            i += n
        if i != flat.size:
            raise CorruptFileError(f"parameter payload has {flat.size - i} trailing values")

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.data.reshape(-1) for p in self.parameters()])

    # --------------------------------------------------------------- forward

    def run(self, x, stochastic: bool = False, seed: int | Stream = 0) -> ForwardOut:
        c = self.config
        if isinstance(x, MultiContrastVolume):
            x = x.intensities
        x = T.as_tensor(x)
        if x.ndim != 4 or x.shape[0] != c.in_channels:
            raise DimensionError(f"expected {c.in_channels}×W×H×D input, got {x.shape}")
        if any(n % 4 for n in x.shape[1:]):
            raise DimensionError(f"spatial dims {x.shape[1:]} must each be a multiple of 4")
        stream = seed if isinstance(seed, Stream) else Stream(seed, "dropout")

        def drop(t, name):
            return T.dropout(t, c.dropout, stream.split(name), active=stochastic)

        def conv(t, stage, stride=1):
            w, b = stage
            return T.conv3d(t, w, stride=stride) + b.reshape(-1, 1, 1, 1)

        e1 = drop(T.relu(conv(x, self.enc1, 2)), "enc1")
        h = drop(T.relu(conv(e1, self.enc2, 2)), "enc2")
        prompt_features = None
        if c.use_tpa:
            ch, spatial = h.shape[0], h.shape[1:]
            tokens = h.reshape(ch, -1).T @ self.tok_in[0] + self.tok_in[1]
            res = tpa_apply(tokens, self.prompts, self.tpa)
            prompt_features = res.prompt_features
            back = res.fused @ self.tok_out[0] + self.tok_out[1]
            h = h + back.T.reshape(ch, *spatial)
        h = T.relu(conv(T.upsample_nearest(h, 2), self.dec1))
        if c.skip:
            h = h + e1
        h = drop(h, "dec1")
        logits = conv(T.upsample_nearest(h, 2), self.dec2)
        return ForwardOut(T.sigmoid(logits), prompt_features)

    def forward(self, x, stochastic: bool = False, seed: int | Stream = 0) -> RegionMask:
        return RegionMask(self.run(x, stochastic, seed).prob)

    __call__ = forward

    # ------------------------------------------------------------ checkpoint

    def save(self, path, step: int = 0, extra: dict | None = None) -> None:
        header = {
            "format": CHECKPOINT_FORMAT,
            "kind": "checkpoint",
            "architecture": self.config.to_dict(),
            "seed": self.seed,
            "step": int(step),
            "parameters": [[name, list(p.shape)] for name, p in self.named_parameters()],
        }
        if extra:
            header["extra"] = extra
        write_container(path, header, self.get_flat())

    @classmethod
    def load(cls, path) -> tuple["TuclModel", dict]:
        header, flat = read_container(path)
        if header.get("format") != CHECKPOINT_FORMAT:
            raise CorruptFileError(f"{path}: not a checkpoint ({header.get('format')!r})")
        model = cls(ModelConfig(**header["architecture"]), seed=header.get("seed", 0))
        expected = [[n, list(p.shape)] for n, p in model.named_parameters()]
        if header.get("parameters") != expected:
            raise CorruptFileError(f"{path}: parameter layout does not match architecture")
        model.set_flat(flat)
        return model, header


def forward(model: TuclModel, x, stochastic: bool = False, seed: int | Stream = 0) -> RegionMask:
    return model.forward(x, stochastic, seed)


def binarize(y_hat: RegionMask, threshold: float = 0.5) -> RegionMask:
    """Threshold (strictly above) each region, then enforce ET ⊆ TC ⊆ WT."""
    v = y_hat.array > threshold
    out = np.empty(v.shape, dtype=np.float64)
    out[0] = v[0]
    for i in range(1, v.shape[0]):
        out[i] = v[i] & (out[i - 1] > 0)
    return RegionMask(out, binarized=True, regions=y_hat.regions)

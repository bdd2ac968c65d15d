"""Four-stage patch-mixing backbone with per-stage hash exits.

The backbone is a stack of strided patch-mixing linear layers: a stem that
downsamples 4x into the first stage's channel width, then three 2x stages.
Each stage feeds a hash exit: stages 1-2 run FC-BN-tanh-FC-BN (bridging fine
and coarse features), stages 3-4 run BN alone, and every exit ends in a sign
activation at inference or its soft surrogate during training. Stage 1 pools
with four horizontal bands (head / upper torso / lower torso / feet) instead
of a global mean, which is where early-stage discriminability comes from.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import hamming
from .autodiff import Tensor, as_tensor, patchify, require_finite
from .errors import ConfigError, DimensionError, PipelineError
from .numerics import (
    LayerParams,
    batch_norm,
    init_batch_norm,
    init_linear,
    linear,
)

N_STAGES = 4
STEM_PATCH = 4
STAGE_PATCH = 2
N_BANDS = 4


@dataclass(frozen=True)
class EncoderConfig:
    """Stage widths, input geometry and per-exit code lengths.

    Code lengths follow the [c, c, 4c, 8c] stage ratio from `base_code_len`
    unless `code_lens` overrides them. `hidden_scale` sizes the bottleneck FC
    of the first two exits as hidden = hidden_scale * code length.
    """

    channel_dims: tuple[int, int, int, int] = (32, 64, 128, 256)
    spatial_in: tuple[int, int] = (32, 16)
    in_channels: int = 3
    base_code_len: int = 32
    code_lens: tuple[int, int, int, int] | None = None
    hidden_scale: int = 2

    def __post_init__(self):
        if len(self.channel_dims) != N_STAGES:
            raise ConfigError("channel_dims must have four entries")
        if any(b <= a for a, b in zip(self.channel_dims, self.channel_dims[1:])):
            raise ConfigError("channel_dims must be strictly increasing")
        h, w = self.spatial_in
        if h % (STEM_PATCH * N_BANDS):
            raise ConfigError(
                f"input height {h} must divide by {STEM_PATCH * N_BANDS} "
                "(stem stride then four part-pool bands)"
            )
        if w % STEM_PATCH:
            raise ConfigError(f"input width {w} must divide by the stem stride")
        if self.base_code_len < 1:
            raise ConfigError("base_code_len must be positive")
        if self.code_lens is not None and len(self.code_lens) != N_STAGES:
            raise ConfigError("code_lens override must have four entries")

    @property
    def exit_code_lens(self) -> tuple[int, int, int, int]:
        if self.code_lens is not None:
            return tuple(self.code_lens)
        c = self.base_code_len
        return (c, c, 4 * c, 8 * c)

    @property
    def dim_scale(self) -> float:
        """Channel width relative to the 2048-wide reference preset."""
        return self.channel_dims[3] / 2048.0

    def spatial_trace(self) -> list[tuple[int, int]]:
        """(H, W) after the stem and after each subsequent stage.

        Stage patches clamp to the remaining extent, so tiny inputs collapse
        to 1x1 instead of failing.
        """
        h, w = self.spatial_in
        trace = [(h // STEM_PATCH, w // STEM_PATCH)]
        for _ in range(N_STAGES - 1):
            h, w = trace[-1]
            trace.append((h // min(STAGE_PATCH, h), w // min(STAGE_PATCH, w)))
        return trace

    def stage_patch(self, k: int) -> tuple[int, int]:
        """Patch extents consumed by stage k (1-based)."""
        if k == 1:
            return (STEM_PATCH, STEM_PATCH)
        h, w = self.spatial_trace()[k - 2]
        return (min(STAGE_PATCH, h), min(STAGE_PATCH, w))


def toy_config(base_code_len: int = 32, **overrides) -> EncoderConfig:
    return EncoderConfig(
        channel_dims=(32, 64, 128, 256),
        spatial_in=(32, 16),
        base_code_len=base_code_len,
        **overrides,
    )


def paper_dims_config(base_code_len: int = 256, **overrides) -> EncoderConfig:
    return EncoderConfig(
        channel_dims=(256, 512, 1024, 2048),
        spatial_in=(256, 128),
        base_code_len=base_code_len,
        **overrides,
    )


PRESETS = {"toy": toy_config, "paper-dims": paper_dims_config}


@dataclass
class FeatureMap:
    """Dense N x H x W x C activation grid tagged with its producing stage."""

    tensor: Tensor
    stage: int


@dataclass
class ExitOutput:
    """Everything one hash exit emits for a batch.

    `embedding` is the continuous pre-sign activation (the BN output).
    `code` packs sign(embedding). Train mode adds `hash_feature`
    (softsign(embedding), strictly inside (-1, 1)) and classifier `logits`
    over the hash feature.
    """

    stage: int
    embedding: Tensor
    code: hamming.PackedCodes
    hash_feature: Tensor | None = None
    logits: Tensor | None = None


def part_pool(fmap: FeatureMap) -> Tensor:
    """Split the map into four equal horizontal bands, mean-pool each band
    over its full spatial extent and concatenate: N x H x W x C -> N x 4C."""
    x = fmap.tensor
    n, h, w, c = x.shape
    if h % N_BANDS:
        raise ConfigError(f"part pooling needs height divisible by {N_BANDS}, got {h}")
    bands = x.reshape(n, N_BANDS, h // N_BANDS, w, c)
    return bands.mean(axis=(2, 3)).reshape(n, N_BANDS * c)


def global_pool(fmap: FeatureMap) -> Tensor:
    """Mean over both spatial axes: N x H x W x C -> N x C."""
    return fmap.tensor.mean(axis=(1, 2))


class MultiExitEncoder:
    """Backbone + four hash exits + per-exit training classifiers.

    Training mutates parameters and batch-norm running statistics and is
    single-threaded; with frozen parameters the inference path is a pure
    function and safe to call concurrently.
    """

    def __init__(self, cfg: EncoderConfig, n_classes: int, rng: np.random.Generator):
        self.cfg = cfg
        self.n_classes = n_classes
        dims = cfg.channel_dims
        lens = cfg.exit_code_lens

        self.stages: list[LayerParams] = []
        c_in = cfg.in_channels
        for k in range(1, N_STAGES + 1):
            ph, pw = cfg.stage_patch(k)
            self.stages.append(init_linear(rng, ph * pw * c_in, dims[k - 1]))
            c_in = dims[k - 1]

        # exit blocks; stages 1-2 see the bridging FC-BN-tanh-FC-BN stack
        self.exits: list[dict[str, LayerParams]] = []
        exit_inputs = [N_BANDS * dims[0], dims[1], dims[2], dims[3]]
        for k in range(1, N_STAGES + 1):
            d_in, code_len = exit_inputs[k - 1], lens[k - 1]
            if k <= 2:
                hidden = cfg.hidden_scale * code_len
                block = {
                    "fc1": init_linear(rng, d_in, hidden),
                    "bn1": init_batch_norm(hidden),
                    "fc2": init_linear(rng, hidden, code_len),
                    "bn2": init_batch_norm(code_len),
                }
            elif code_len == d_in:
                block = {"bn": init_batch_norm(code_len)}
            else:
                # requested code length differs from the stage width: insert
                # a width-matching FC before the final BN
                block = {
                    "fc": init_linear(rng, d_in, code_len),
                    "bn": init_batch_norm(code_len),
                }
            self.exits.append(block)

        self.classifiers = [
            init_linear(rng, lens[k], n_classes) for k in range(N_STAGES)
        ]

    # -- parameter plumbing -------------------------------------------------

    def named_params(self) -> dict[str, Tensor]:
        """Every tensor needed to reconstruct the model, running stats included."""
        out: dict[str, Tensor] = {}
        for k, p in enumerate(self.stages, start=1):
            out[f"stage{k}.weights"] = p.weights
            out[f"stage{k}.bias"] = p.bias
        for k, block in enumerate(self.exits, start=1):
            for layer_name, p in block.items():
                out[f"he{k}.{layer_name}.weights"] = p.weights
                out[f"he{k}.{layer_name}.bias"] = p.bias
                if p.is_batch_norm:
                    out[f"he{k}.{layer_name}.running_mean"] = p.running_mean
                    out[f"he{k}.{layer_name}.running_var"] = p.running_var
        for k, p in enumerate(self.classifiers, start=1):
            out[f"cls{k}.weights"] = p.weights
            out[f"cls{k}.bias"] = p.bias
        return out

    def trainable_params(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.named_params().items() if t.requires_grad}

    # -- forward paths --------------------------------------------------------

    def run_stage(self, k: int, inputs: FeatureMap) -> FeatureMap:
        """Patch-mix one stage: 2x2 (stem: 4x4) patches -> linear -> ReLU."""
        if inputs.stage != k - 1:
            raise PipelineError(
                f"stage {k} expects a stage-{k - 1} map, got stage {inputs.stage}"
            )
        x = inputs.tensor
        require_finite(x, f"stage {k}")
        if x.ndim != 4:
            raise DimensionError("stage input must be N x H x W x C")
        ph, pw = self.cfg.stage_patch(k)
        patches = patchify(x, ph, pw)
        n, hh, ww, d = patches.shape
        flat = patches.reshape(n * hh * ww, d)
        mixed = linear(flat, self.stages[k - 1]).relu()
        return FeatureMap(mixed.reshape(n, hh, ww, -1), stage=k)

    def hash_exit(self, stage: int, feat: Tensor, mode: str = "infer") -> ExitOutput:
        """Map a pooled stage feature to its exit embedding, code and (in
        train mode) soft hash feature plus classifier logits."""
        block = self.exits[stage - 1]
        if "fc1" in block:
            h = linear(feat, block["fc1"])
            h = batch_norm(h, block["bn1"], mode).tanh()
            h = linear(h, block["fc2"])
            embedding = batch_norm(h, block["bn2"], mode)
        else:
            h = linear(feat, block["fc"]) if "fc" in block else feat
            embedding = batch_norm(h, block["bn"], mode)

        signs = np.where(embedding.data > 0.0, 1, -1).astype(np.int8)
        code = hamming.pack_matrix(signs, stage=stage)
        if mode != "train":
            return ExitOutput(stage=stage, embedding=embedding, code=code)
        hash_feature = embedding.softsign()
        logits = linear(hash_feature, self.classifiers[stage - 1])
        return ExitOutput(
            stage=stage,
            embedding=embedding,
            code=code,
            hash_feature=hash_feature,
            logits=logits,
        )

    def forward_all(self, x, mode: str = "infer") -> tuple[list[ExitOutput], list[Tensor]]:
        """Run every stage and exit.

        Returns the four ExitOutputs and the four pooled continuous stage
        features (part-pooled for stage 1, global means after that) in stage
        order.
        """
        x = as_tensor(x)
        n, h, w, c = x.shape
        if (h, w) != self.cfg.spatial_in or c != self.cfg.in_channels:
            raise DimensionError(
                f"input {h}x{w}x{c} does not match configured "
                f"{self.cfg.spatial_in[0]}x{self.cfg.spatial_in[1]}x{self.cfg.in_channels}"
            )
        fmap = FeatureMap(x, stage=0)
        exits: list[ExitOutput] = []
        pooled: list[Tensor] = []
        for k in range(1, N_STAGES + 1):
            fmap = self.run_stage(k, fmap)
            feat = part_pool(fmap) if k == 1 else global_pool(fmap)
            pooled.append(feat)
            exits.append(self.hash_exit(k, feat, mode))
        return exits, pooled

    def encode(self, maps: np.ndarray) -> tuple[list[hamming.PackedCodes], np.ndarray]:
        """Inference helper: per-stage packed codes plus the part-pooled
        stage-1 features cast to float32 (the policy's working precision)."""
        exits, pooled = self.forward_all(maps, mode="infer")
        s1 = pooled[0].data.astype(np.float32)
        return [e.code for e in exits], s1


def stage_flops(cfg: EncoderConfig) -> list[int]:
    """Rough incremental multiply-add count per stage, exit block included.

    Informational only; budget accounting runs on configured cost fractions.
    """
    counts = []
    trace = cfg.spatial_trace()
    c_in = cfg.in_channels
    lens = cfg.exit_code_lens
    for k in range(1, N_STAGES + 1):
        ph, pw = cfg.stage_patch(k)
        h, w = trace[k - 1]
        c_out = cfg.channel_dims[k - 1]
        flops = 2 * h * w * ph * pw * c_in * c_out
        d_in = N_BANDS * c_out if k == 1 else c_out
        if k <= 2:
            hidden = cfg.hidden_scale * lens[k - 1]
            flops += 2 * (d_in * hidden + hidden * lens[k - 1])
        elif lens[k - 1] != d_in:
            flops += 2 * d_in * lens[k - 1]
        counts.append(flops)
        c_in = c_out
    return counts

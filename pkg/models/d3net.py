"""
Two-branch restoration network.

Restoration branch: a depth-3 U-Net with channel doubling and concatenation
skips. Decomposition branch: the first encoder block's output x goes through
the dynamic decomposition stages (conditioned by the cross-domain prompts of
the raw image) and a refinement module; the refined map I' is fed back into
every decoder scale (average-pooled, 1x1-projected, added). The head predicts
a residual added to the input.
"""
from dataclasses import dataclass
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from models.cdda import CrossDomainAnalyzer, attention_preset
from models.ddm import INFERENCE_TAU, DecompositionStage, flop_report, run_decomposition, temperature_at
from models.errors import AlignmentError, CheckpointError, NonFiniteError, ShapeError
from models.layers import RESIDUAL_GAIN, Conv2d, Module
from models.log import get_logger
from models.optim import Adam, cosine_lr
from models.tensor import (Tensor, abs_, add, avg_pool2d, backward, concat_channels, max_pool2d, mean,
                           no_grad, scale, upsample_bilinear)

logger = get_logger(__name__)


class NetworkConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    base_channels: int = Field(16, ge=1)
    unet_depth: int = Field(3, ge=1)
    N_stages: int = Field(12, ge=1)
    attention_preset: Literal["a", "b", "c", "d", "e", "f"] = "f"
    gate_mode: Literal["hard", "soft"] = "hard"
    in_channels: int = Field(3, ge=1)
    freq_channels: int = Field(16, ge=1)
    prompt_dim: int = Field(32, ge=1)
    strategy_dim: int = Field(32, ge=1)
    du_width: int = Field(0, ge=0)
    adb_width: int = Field(0, ge=0)
    adb_kernel: int = Field(3, ge=1)
    gnconv_order: int = Field(3, ge=1)
    use_frequency: bool = True
    use_cross_attention: bool = True
    use_correction_prompt: bool = True
    use_strategy_prompt: bool = True
    use_decision_units: bool = True
    seed: int = Field(0, ge=0)

    @property
    def multiple(self):
        return 2 ** self.unet_depth


class ConvBlock(Module):
    """ conv3x3 -> ReLU -> conv3x3 -> ReLU """

    def __init__(self, c_in, c_out, rng):
        self.conv1 = Conv2d(c_in, c_out, 3, rng)
        self.conv2 = Conv2d(c_out, c_out, 3, rng)

    def __call__(self, x):
        return self.conv2(self.conv1(x).relu()).relu()


class UpBlock(Module):
    """ bilinear x2 -> 1x1 conv -> concat skip -> ConvBlock """

    def __init__(self, c_in, c_out, rng):
        self.reduce = Conv2d(c_in, c_out, 1, rng, gain=1.0)
        self.block = ConvBlock(2 * c_out, c_out, rng)

    def __call__(self, x, skip):
        _, h, w = skip.shape
        x = self.reduce(upsample_bilinear(x, h, w))
        return self.block(concat_channels(x, skip))


class Refinement(Module):
    """ conv3x3 -> ReLU -> conv3x3, shape preserving """

    def __init__(self, channels, rng):
        self.conv1 = Conv2d(channels, channels, 3, rng)
        self.conv2 = Conv2d(channels, channels, 3, rng, gain=1.0)

    def __call__(self, x):
        return self.conv2(self.conv1(x).relu())


class D3Net(Module):
    def __init__(self, cfg, rng=None):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        C = cfg.base_channels
        widths = [C * 2 ** level for level in range(cfg.unet_depth + 1)]

        self.encoders = [ConvBlock(cfg.in_channels, C, rng)]
        self.encoders += [ConvBlock(widths[i - 1], widths[i], rng) for i in range(1, cfg.unet_depth + 1)]
        self.decoders = [UpBlock(widths[i], widths[i - 1], rng) for i in range(cfg.unet_depth, 0, -1)]
        # feedback projections, one per decoder output scale (coarse to fine)
        self.feedback = [Conv2d(C, widths[i - 1], 1, rng, bias=False, gain=1.0)
                         for i in range(cfg.unet_depth, 0, -1)]
        self.head = Conv2d(C, cfg.in_channels, 3, rng, gain=RESIDUAL_GAIN)

        self.cdda = CrossDomainAnalyzer(
            attention_preset(cfg.attention_preset), cfg.in_channels, C, cfg.freq_channels, cfg.prompt_dim,
            cfg.strategy_dim, rng, use_frequency=cfg.use_frequency,
            use_cross_attention=cfg.use_cross_attention, use_correction_prompt=cfg.use_correction_prompt,
            use_strategy_prompt=cfg.use_strategy_prompt,
        )
        self.stages = [
            DecompositionStage(i, C, cfg.strategy_dim, rng, cfg.du_width or None, cfg.adb_width or None,
                               cfg.gnconv_order, cfg.adb_kernel)
            for i in range(cfg.N_stages)
        ]
        self.refine = Refinement(C, rng)

    def check_extent(self, image):
        if image.ndim != 3 or image.shape[0] != self.cfg.in_channels:
            raise ShapeError(f"expected a [{self.cfg.in_channels},H,W] image, got {image.shape}")
        _, h, w = image.shape
        if h % self.cfg.multiple or w % self.cfg.multiple:
            raise AlignmentError(h, w, self.cfg.multiple)

    def encode_shallow(self, image):
        """ x = first encoder block output, [C,H,W] """
        self.check_extent(image)
        return self.encoders[0](image)

    def decompose(self, image, x, tau, mode, rng=None, gate_mode=None, rho_override=None, noise=None):
        """ Prompts, gated decomposition stages and refinement; returns (I', traces) """
        prompts = self.cdda(image)
        if not self.cfg.use_decision_units and rho_override is None:
            rho_override = 1.0
        Y, traces = run_decomposition(x, prompts, self.stages, tau, mode, rng,
                                      gate_mode or self.cfg.gate_mode, rho_override, noise)
        return self.refine(Y), traces

    def reconstruct(self, image, x=None, feedback=None):
        """ U-Net pass; `feedback` (I') is injected at every decoder scale when given """
        if not isinstance(image, Tensor):
            image = Tensor(image)
        if x is None:
            x = self.encode_shallow(image)
        skips = [x]
        for encoder in self.encoders[1:]:
            skips.append(encoder(max_pool2d(skips[-1], 2, 2)))
        y = skips[-1]
        for level, (decoder, proj) in enumerate(zip(self.decoders, self.feedback)):
            skip = skips[-2 - level]
            y = decoder(y, skip)
            if feedback is not None:
                factor = image.shape[1] // skip.shape[1]
                pooled = feedback if factor == 1 else avg_pool2d(feedback, factor)
                y = add(y, proj(pooled))
        return add(image, self.head(y))

    def forward(self, image, mode="infer", rng=None, tau=None, gate_mode=None, rho_override=None, noise=None):
        """ Returns (restored image, per-stage traces) """
        if not isinstance(image, Tensor):
            image = Tensor(image)
        if tau is None:
            tau = INFERENCE_TAU if mode == "infer" else 1.0
        x = self.encode_shallow(image)
        feedback, traces = self.decompose(image, x, tau, mode, rng, gate_mode, rho_override, noise)
        return self.reconstruct(image, x, feedback), traces

    __call__ = forward

    def decomposition_flops(self, traces, height, width):
        return flop_report(traces, self.stages, height, width)


def loss_l1(restored, target):
    """ Mean absolute error over all elements """
    if not isinstance(target, Tensor):
        target = Tensor(target)
    if restored.shape != target.shape:
        raise ShapeError(f"loss_l1: prediction {restored.shape} vs target {target.shape}")
    return mean(abs_(restored - target))


@dataclass
class ModelState:
    network: D3Net
    optimizer: Adam

    @classmethod
    def create(cls, cfg, beta1=0.9, beta2=0.999, eps=1e-8):
        network = D3Net(cfg)
        return cls(network, Adam(network.parameters(), beta1, beta2, eps))

    def tensors(self):
        """ Every weight and optimizer buffer keyed by a stable hierarchical name """
        out = {name: p.data for name, p in self.network.named_parameters()}
        out.update(self.optimizer.state_tensors())
        return out

    def load(self, tensors):
        params = self.network.parameters()
        for name, p in params.items():
            if name not in tensors:
                raise CheckpointError(f"checkpoint is missing {name}")
            if tensors[name].shape != p.shape:
                raise CheckpointError(f"{name} has shape {tensors[name].shape}, expected {p.shape}")
            p.data = np.array(tensors[name], dtype=np.float64)
        self.optimizer.load_state_tensors(tensors)
        unknown = set(tensors) - set(self.tensors())
        if unknown:
            raise CheckpointError(f"checkpoint has unknown tensors: {sorted(unknown)[:5]}")


@dataclass
class StepResult:
    step: int
    loss: float
    lr: float
    tau: float
    active_stage_rate: float


def train_step(batch, state, step, total_steps, rng, lr_init=1e-4, lr_final=1e-6):
    """
    One optimization step over a batch of (degraded, clean) pairs: train-mode
    forward at tau = temperature_at(step), mean L1 loss, backward, Adam update
    at the cosine learning rate.
    """
    if not batch:
        raise ValueError("train_step needs a nonempty batch")
    tau = temperature_at(step, total_steps)
    lr = cosine_lr(step, total_steps, lr_init, lr_final)
    state.optimizer.zero_grad()

    total, active, stages = None, 0, 0
    for degraded, clean in batch:
        restored, traces = state.network.forward(degraded, "train", rng, tau)
        loss = loss_l1(restored, clean)
        total = loss if total is None else add(total, loss)
        active += sum(t.activated for t in traces)
        stages += len(traces)
    total = scale(total, 1.0 / len(batch))
    value = total.item()
    if not np.isfinite(value):
        raise NonFiniteError(f"non-finite loss {value} at step {step}")

    backward(total)
    state.optimizer.step(lr)
    logger.debug("step %d loss=%.6f lr=%.3e tau=%.3f", step, value, lr, tau)
    return StepResult(step, value, lr, tau, active / stages)


def pad_to_multiple(image, multiple):
    _, h, w = image.shape
    pad_h, pad_w = (-h) % multiple, (-w) % multiple
    return np.pad(image, ((0, 0), (0, pad_h), (0, pad_w)), mode="edge"), (h, w)


def restore_image(network, image, gate_mode=None):
    """ Inference on an arbitrary-sized [C,H,W] array: edge-pad, restore, crop, clip to [0,1] """
    padded, (h, w) = pad_to_multiple(np.asarray(image, dtype=np.float64), network.cfg.multiple)
    with no_grad():
        restored, traces = network.forward(Tensor(padded), "infer", gate_mode=gate_mode)
    return np.clip(restored.data[:, :h, :w], 0.0, 1.0), traces

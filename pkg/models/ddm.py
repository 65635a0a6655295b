"""
Dynamic decomposition mechanism: N sequential stages, each a decision unit
(two gate logits) gating an adaptive decomposition block through a
Gumbel-Softmax probability.

Training uses the soft product Y + ADB(Y) * rho_1. Inference with the hard
gate skips the ADB when rho_1 <= 0.5, which is where the MAC savings come from.
"""
from dataclasses import dataclass, field

import numpy as np

from models.errors import ShapeError
from models.layers import RESIDUAL_GAIN, Conv2d, DepthwiseConv2d, Linear, Module
from models.tensor import (Tensor, add, concat_channels, index, linear, max_pool2d, mean, mul, reshape,
                           scale, slice_channels, softmax, tile_spatial)

TAU_START = 1.0
TAU_END = 0.1
INFERENCE_TAU = TAU_END


@dataclass
class GateState:
    h: np.ndarray
    rho: np.ndarray
    g: np.ndarray
    tau: float


@dataclass
class StageTrace:
    stage: int
    gate: GateState
    activated: bool
    flops: int
    forced: bool = False


@dataclass
class FlopReport:
    total_flops: int
    total_if_all_active: int
    active_stage_count: int
    savings_fraction: float
    per_stage: list = field(default_factory=list)
    per_stage_full: list = field(default_factory=list)


class DecisionUnit(Module):
    """ [Y, tile(S_t)] -> conv3x3 -> ReLU -> maxpool2 -> conv3x3 -> ReLU -> GAP -> linear -> 2 logits """

    def __init__(self, channels, strategy_dim, width, rng):
        self.conv1 = Conv2d(channels + strategy_dim, width, 3, rng)
        self.conv2 = Conv2d(width, width, 3, rng)
        self.fc = Linear(width, 2, rng)

    def __call__(self, Y_prev, S_t):
        _, h, w = Y_prev.shape
        if h < 2 or w < 2:
            raise ShapeError(f"decision unit needs at least 2x2 features, got {h}x{w}")
        x = concat_channels(Y_prev, tile_spatial(S_t, h, w))
        x = max_pool2d(self.conv1(x).relu(), 2, 2)
        x = self.conv2(x).relu()
        pooled = reshape(mean(x, axis=(1, 2)), (1, x.shape[0]))
        return reshape(linear(pooled, self.fc.weight, self.fc.bias), (2,))

    def macs(self, h, w):
        return self.conv1.macs(h, w) + self.conv2.macs(h // 2, w // 2) + self.fc.macs(1)


def decision_unit(Y_prev, S_t, unit):
    return unit(Y_prev, S_t)


def sample_gumbel(rng, size=2):
    u = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=size)
    return -np.log(-np.log(u))


def gumbel_softmax(h, tau, mode, rng=None, noise=None):
    """
    rho_m = softmax((h_m + g_m) / tau). Training draws g from Gumbel(0, 1)
    unless `noise` fixes it; inference uses g = 0. Returns (rho, g).
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if not isinstance(h, Tensor):
        h = Tensor(h)
    if mode == "infer":
        g = np.zeros(h.shape)
    elif mode == "train":
        g = np.asarray(noise, dtype=np.float64) if noise is not None else sample_gumbel(rng, h.shape[0])
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    rho = softmax(scale(add(h, Tensor(g)), 1.0 / tau), axis=0)
    return rho, g


def temperature_at(step, total_steps):
    """ Linear anneal from 1.0 to 0.1; steps past the end stay at 0.1 """
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if step >= total_steps:
        return TAU_END
    return TAU_START + (TAU_END - TAU_START) * step / total_steps


class GatedConvBlock(Module):
    """
    Prompt-conditioned recursive gated convolution:
    [p_0, q_0] = proj_in([Y_g, C_t]); p_j = f_j(q_{j-1}) * p_{j-1}; q_j = pw_j(p_j);
    output = proj_out(p_order).
    """

    def __init__(self, channels, prompt_channels, rng, order=3, kernel_size=3):
        self.channels = channels
        self.order = order
        self.proj_in = Conv2d(channels + prompt_channels, 2 * channels, 1, rng, gain=1.0)
        self.dwconvs = [DepthwiseConv2d(channels, kernel_size, rng) for _ in range(order)]
        self.pwconvs = [Conv2d(channels, channels, 1, rng, gain=1.0) for _ in range(order - 1)]
        self.proj_out = Conv2d(channels, channels, 1, rng, gain=1.0)

    def split(self, Y_g, C_t):
        pq = self.proj_in(concat_channels(Y_g, C_t))
        return slice_channels(pq, 0, self.channels), slice_channels(pq, self.channels, 2 * self.channels)

    def __call__(self, Y_g, C_t):
        p, q = self.split(Y_g, C_t)
        for j in range(self.order):
            p = mul(self.dwconvs[j](q), p)
            if j < self.order - 1:
                q = self.pwconvs[j](p)
        return self.proj_out(p)

    def first_order(self, Y_g, C_t):
        """ (p_0, q_0, p_1) of the recursion """
        p0, q0 = self.split(Y_g, C_t)
        return p0, q0, mul(self.dwconvs[0](q0), p0)

    def macs(self, h, w):
        total = self.proj_in.macs(h, w) + self.proj_out.macs(h, w)
        total += sum(dw.macs(h, w) for dw in self.dwconvs)
        total += sum(pw.macs(h, w) for pw in self.pwconvs)
        return total


class AdaptiveDecompositionBlock(Module):
    """ gated block -> 1x1 -> gated block -> 1x1 -> 3x3 output layer, ReLU between sub-blocks """

    def __init__(self, channels, rng, width=None, order=3, kernel_size=3):
        width = width or channels
        self.gated1 = GatedConvBlock(channels, channels, rng, order, kernel_size)
        self.mix1 = Conv2d(channels, width, 1, rng)
        self.gated2 = GatedConvBlock(width, channels, rng, order, kernel_size)
        self.mix2 = Conv2d(width, width, 1, rng)
        self.out = Conv2d(width, channels, 3, rng, gain=RESIDUAL_GAIN)

    def __call__(self, Y_g, C_t):
        if Y_g.shape != C_t.shape:
            raise ShapeError(f"ADB input {Y_g.shape} and correction prompt {C_t.shape} differ")
        x = self.gated1(Y_g, C_t).relu()
        x = self.mix1(x).relu()
        x = self.gated2(x, C_t).relu()
        x = self.mix2(x).relu()
        return self.out(x)

    def macs(self, h, w):
        return (self.gated1.macs(h, w) + self.mix1.macs(h, w) + self.gated2.macs(h, w)
                + self.mix2.macs(h, w) + self.out.macs(h, w))


def adb_forward(Y_g, C_t, block):
    return block(Y_g, C_t)


class DecompositionStage(Module):
    def __init__(self, index_, channels, strategy_dim, rng, du_width=None, adb_width=None, order=3,
                 kernel_size=3):
        self.index = index_
        self.unit = DecisionUnit(channels, strategy_dim, du_width or channels, rng)
        self.block = AdaptiveDecompositionBlock(channels, rng, adb_width, order, kernel_size)


def stage_update(Y_prev, C_t, S_t, stage, tau, mode, rng=None, gate_mode="hard", rho_override=None,
                 noise=None):
    """
    One stage: Y_next = Y_prev + ADB(Y_prev, C_t) * rho_1.
    With mode="infer" and gate_mode="hard" the ADB runs only when rho_1 > 0.5
    and then contributes with weight 1. `rho_override` fixes rho_1 and skips the
    decision unit.
    """
    _, h, w = Y_prev.shape
    adb_macs = stage.block.macs(h, w)
    if rho_override is not None:
        rho1 = Tensor(float(rho_override))
        gate = GateState(np.zeros(2), np.array([1.0 - rho_override, rho_override]), np.zeros(2), tau)
        flops = 0
    else:
        logits = decision_unit(Y_prev, S_t, stage.unit)
        rho, g = gumbel_softmax(logits, tau, mode, rng, noise)
        rho1 = index(rho, 1)
        gate = GateState(logits.numpy(), rho.numpy(), g, tau)
        flops = stage.unit.macs(h, w)

    activated = bool(gate.rho[1] > 0.5)
    if mode == "infer" and gate_mode == "hard":
        if not activated:
            return Y_prev, StageTrace(stage.index, gate, False, flops, rho_override is not None)
        Y_next = add(Y_prev, adb_forward(Y_prev, C_t, stage.block))
    else:
        Y_next = add(Y_prev, mul(adb_forward(Y_prev, C_t, stage.block), rho1))
    return Y_next, StageTrace(stage.index, gate, activated, flops + adb_macs, rho_override is not None)


def run_decomposition(Y0, prompts, stages, tau, mode, rng=None, gate_mode="hard", rho_override=None,
                      noise=None):
    """ Apply every stage in order; returns (Y_N, traces) """
    if not stages:
        raise ValueError("run_decomposition needs at least one stage")
    Y, traces = Y0, []
    for i, stage in enumerate(stages):
        override = rho_override[i] if isinstance(rho_override, (list, tuple)) else rho_override
        stage_noise = noise[i] if noise is not None else None
        Y, trace = stage_update(Y, prompts.C_t, prompts.S_t, stage, tau, mode, rng, gate_mode, override,
                                stage_noise)
        traces.append(trace)
    return Y, traces


def flop_report(traces, stages, height, width):
    """ MACs actually executed vs. the all-stages-active count for the same stages and extent """
    if not traces:
        raise ValueError("flop_report needs at least one stage trace")
    total = sum(t.flops for t in traces)
    full = []
    for trace, stage in zip(traces, stages):
        du = 0 if trace.forced else stage.unit.macs(height, width)
        full.append(du + stage.block.macs(height, width))
    active = sum(1 for t in traces if t.activated)
    return FlopReport(total, sum(full), active, 1.0 - total / sum(full), [t.flops for t in traces], full)

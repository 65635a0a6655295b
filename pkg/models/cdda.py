"""
Cross-domain degradation analyzer.

Frequency features D_f come from the log-compressed amplitude spectrum through
two conv/ReLU/max-pool stages (spatial /4). The image is average-pooled to the
same grid, both maps become token sequences (one token per position), and two
single-head cross-attentions produce the correction prompt C_t (per pixel,
bilinearly upsampled back to full size) and the strategy prompt S_t (global
vector).
"""
from dataclasses import dataclass

import numpy as np

from models.errors import ShapeError
from models.layers import Conv2d, Linear, Module
from models.spectral import log_amplitude, to_luminance
from models.tensor import (Tensor, avg_pool2d, from_tokens, linear, matmul, max_pool2d, mean, no_grad,
                           reshape, scale, softmax, to_tokens, transpose, upsample_bilinear)

SPATIAL = "spatial"
FREQUENCY = "frequency"


@dataclass(frozen=True)
class PromptRouting:
    """ Source domain of Q, K and V for one prompt, and which role gets the projection phi """
    q: str
    k: str
    v: str
    projected: str

    def source(self, role):
        return getattr(self, role)


@dataclass(frozen=True)
class AttentionConfig:
    name: str
    correction: PromptRouting
    strategy: PromptRouting


def _routing(q, k, v, projected):
    names = {"I": SPATIAL, "D": FREQUENCY}
    return PromptRouting(names[q], names[k], names[v], projected)


# C_t takes phi on V (correction), S_t takes phi on Q (strategy).
PRESETS = {
    "a": AttentionConfig("a", _routing("I", "I", "D", "v"), _routing("I", "D", "D", "q")),
    "b": AttentionConfig("b", _routing("D", "D", "I", "v"), _routing("I", "D", "D", "q")),
    "c": AttentionConfig("c", _routing("I", "I", "D", "v"), _routing("D", "I", "I", "q")),
    "d": AttentionConfig("d", _routing("I", "I", "D", "v"), _routing("I", "I", "D", "q")),
    "e": AttentionConfig("e", _routing("D", "D", "I", "v"), _routing("D", "D", "I", "q")),
    "f": AttentionConfig("f", _routing("D", "D", "I", "v"), _routing("D", "I", "I", "q")),
}


def attention_preset(name):
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown attention preset {name!r}; expected one of {sorted(PRESETS)}") from None


@dataclass
class FrequencyFeatures:
    D_f: Tensor

    @property
    def shape(self):
        return self.D_f.shape


@dataclass
class PromptPair:
    C_t: Tensor
    S_t: Tensor


class FrequencyAnalyzer(Module):
    """ conv3x3 -> ReLU -> maxpool2 -> conv3x3 -> ReLU -> maxpool2, channels 1 -> C_f -> C_f """

    def __init__(self, channels, rng):
        self.conv1 = Conv2d(1, channels, 3, rng)
        self.conv2 = Conv2d(channels, channels, 3, rng)

    def __call__(self, M):
        _, h, w = M.shape
        if h < 4 or w < 4:
            raise ShapeError(f"frequency analysis needs at least 4x4 input, got {h}x{w}")
        x = max_pool2d(self.conv1(M).relu(), 2, 2)
        x = max_pool2d(self.conv2(x).relu(), 2, 2)
        return FrequencyFeatures(x)

    def macs(self, h, w):
        return self.conv1.macs(h, w) + self.conv2.macs(h // 2, w // 2)


def freq_feature_extract(M, analyzer):
    return analyzer(M)


class NonlinearProjection(Module):
    """ phi: three 3x3 convolutions with ReLU between, spatial size preserved """

    def __init__(self, c_in, c_out, rng):
        self.conv1 = Conv2d(c_in, c_out, 3, rng)
        self.conv2 = Conv2d(c_out, c_out, 3, rng)
        self.conv3 = Conv2d(c_out, c_out, 3, rng, gain=1.0)

    def __call__(self, x):
        x = self.conv1(x).relu()
        x = self.conv2(x).relu()
        return self.conv3(x)

    def macs(self, h, w):
        return self.conv1.macs(h, w) + self.conv2.macs(h, w) + self.conv3.macs(h, w)


def nonlinear_proj(x, phi):
    return phi(x)


def cross_attention(Q, K, V, scale_factor=None):
    """ softmax(Q K^T * scale) V, single head; scale defaults to 1/sqrt(d) """
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise ShapeError(f"cross_attention expects token matrices, got {Q.shape}, {K.shape}, {V.shape}")
    d = Q.shape[1]
    if K.shape[1] != d or V.shape[1] != d:
        raise ShapeError(f"head dimension mismatch: Q {Q.shape}, K {K.shape}, V {V.shape}")
    if K.shape[0] != V.shape[0]:
        raise ShapeError(f"K and V token counts differ: {K.shape[0]} vs {V.shape[0]}")
    factor = 1.0 / np.sqrt(d) if scale_factor is None else scale_factor
    weights = softmax(scale(matmul(Q, transpose(K)), factor), axis=1)
    return matmul(weights, V)


def attention_macs(t_q, t_k, d):
    return 2 * t_q * t_k * d


class PromptHead(Module):
    """ One cross-attention prompt: per-role token projections plus phi on the projected role """

    def __init__(self, routing, channels, d_model, d_out, rng):
        self.routing = routing
        src = routing.source(routing.projected)
        self.phi = NonlinearProjection(channels[src], channels[src], rng)
        self.q_proj = Linear(channels[routing.q], d_model, rng)
        self.k_proj = Linear(channels[routing.k], d_model, rng)
        self.v_proj = Linear(channels[routing.v], d_model, rng)
        self.out_proj = Linear(d_model, d_out, rng)

    def tokens(self, maps):
        """ Q, K, V token matrices routed from the spatial / frequency maps """
        out = {}
        for role, proj in (("q", self.q_proj), ("k", self.k_proj), ("v", self.v_proj)):
            fmap = maps[self.routing.source(role)]
            if role == self.routing.projected:
                fmap = nonlinear_proj(fmap, self.phi)
            out[role] = proj(to_tokens(fmap))
        return out["q"], out["k"], out["v"]

    def attend(self, maps, use_attention=True):
        q, k, v = self.tokens(maps)
        return cross_attention(q, k, v) if use_attention else v

    def macs(self, h, w, use_attention=True):
        t = h * w
        total = self.phi.macs(h, w)
        total += self.q_proj.macs(t) + self.k_proj.macs(t) + self.v_proj.macs(t)
        if use_attention:
            total += attention_macs(t, t, self.q_proj.d_out)
        return total


class CrossDomainAnalyzer(Module):
    def __init__(self, cfg, image_channels, prompt_channels, freq_channels, d_model, strategy_dim, rng,
                 use_frequency=True, use_cross_attention=True, use_correction_prompt=True,
                 use_strategy_prompt=True):
        self.cfg = cfg
        self.prompt_channels = prompt_channels
        self.strategy_dim = strategy_dim
        self.use_frequency = use_frequency
        self.use_cross_attention = use_cross_attention
        self.use_correction_prompt = use_correction_prompt
        self.use_strategy_prompt = use_strategy_prompt
        channels = {SPATIAL: image_channels, FREQUENCY: freq_channels}
        self.analyzer = FrequencyAnalyzer(freq_channels, rng)
        self.correction = PromptHead(cfg.correction, channels, d_model, prompt_channels, rng)
        self.strategy = PromptHead(cfg.strategy, channels, d_model, strategy_dim, rng)

    def frequency_input(self, image):
        """ log(1+M) of the centered spectrum, or plain luminance when frequency analysis is off """
        # the frequency branch is a constant of the image: no gradient flows back through it
        with no_grad():
            M = log_amplitude(image) if self.use_frequency else to_luminance(image)
        return M.detach()

    def __call__(self, image):
        feats = freq_feature_extract(self.frequency_input(image), self.analyzer)
        return generate_prompts(image, feats, self)

    def macs(self, h, w):
        hq, wq = h // 4, w // 4
        total = self.analyzer.macs(h, w)
        total += self.correction.macs(hq, wq, self.use_cross_attention)
        total += self.correction.out_proj.macs(hq * wq)
        total += self.strategy.macs(hq, wq, self.use_cross_attention)
        total += self.strategy.out_proj.macs(1)
        return total


def generate_prompts(I_feat, D_f, cdda):
    """
    Route spatial (I_feat average-pooled to D_f's grid) and frequency maps
    through the configured Q/K/V assignment. C_t is upsampled back to the
    I_feat resolution; S_t is the global token average.
    """
    freq = D_f.D_f if isinstance(D_f, FrequencyFeatures) else D_f
    _, h, w = I_feat.shape
    _, hq, wq = freq.shape
    pooled = avg_pool2d(I_feat, 4) if h >= 4 and w >= 4 else None
    if pooled is None or pooled.shape[1:] != freq.shape[1:]:
        raise ShapeError(f"spatial map {I_feat.shape} pooled by 4 does not match D_f {freq.shape}")
    maps = {SPATIAL: pooled, FREQUENCY: freq}

    if cdda.use_correction_prompt:
        tokens = cdda.correction.attend(maps, cdda.use_cross_attention)
        c_small = from_tokens(cdda.correction.out_proj(tokens), hq, wq)
        C_t = upsample_bilinear(c_small, h, w)
    else:
        C_t = Tensor(np.zeros((cdda.prompt_channels, h, w)))

    if cdda.use_strategy_prompt:
        tokens = cdda.strategy.attend(maps, cdda.use_cross_attention)
        pooled_tokens = reshape(mean(tokens, axis=0), (1, tokens.shape[1]))
        head = cdda.strategy.out_proj
        S_t = reshape(linear(pooled_tokens, head.weight, head.bias), (cdda.strategy_dim,))
    else:
        S_t = Tensor(np.zeros(cdda.strategy_dim))
    return PromptPair(C_t, S_t)

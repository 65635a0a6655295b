import numpy as np

from models.tensor import Tensor, conv2d, depthwise_conv2d, linear


class Module:
    """ Parameter container; parameters are discovered from attributes in definition order """

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self):
        return dict(self.named_parameters())

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None


# weight variance gain^2 / fan_in: RELU_GAIN (He) for layers feeding a ReLU, 1 for linear outputs,
# RESIDUAL_GAIN for the last layer of a residual branch
RELU_GAIN = np.sqrt(2.0)
RESIDUAL_GAIN = 0.25


def _uniform(rng, shape, fan_in, gain):
    bound = gain * np.sqrt(3.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel_size, rng, padding=None, stride=1, bias=True, gain=RELU_GAIN):
        self.c_in = c_in
        self.c_out = c_out
        self.kernel_size = kernel_size
        self.padding = kernel_size // 2 if padding is None else padding
        self.stride = stride
        fan_in = c_in * kernel_size * kernel_size
        self.weight = _uniform(rng, (c_out, c_in, kernel_size, kernel_size), fan_in, gain)
        self.bias = _zeros((c_out,)) if bias else None

    def __call__(self, x):
        return conv2d(x, self.weight, self.padding, self.stride, self.bias)

    def output_extent(self, h, w):
        k, p, s = self.kernel_size, self.padding, self.stride
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def macs(self, h, w):
        ho, wo = self.output_extent(h, w)
        return self.c_out * ho * wo * self.c_in * self.kernel_size ** 2


class DepthwiseConv2d(Module):
    """ Bias-free per-channel convolution, spatial size preserved """

    def __init__(self, channels, kernel_size, rng, gain=1.0):
        self.channels = channels
        self.kernel_size = kernel_size
        self.weight = _uniform(rng, (channels, kernel_size, kernel_size), kernel_size * kernel_size, gain)

    def __call__(self, x):
        return depthwise_conv2d(x, self.weight, self.kernel_size // 2)

    def macs(self, h, w):
        return self.channels * h * w * self.kernel_size ** 2


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True, gain=1.0):
        self.d_in = d_in
        self.d_out = d_out
        self.weight = _uniform(rng, (d_in, d_out), d_in, gain)
        self.bias = _zeros((d_out,)) if bias else None

    def __call__(self, x):
        return linear(x, self.weight, self.bias)

    def macs(self, tokens):
        return tokens * self.d_in * self.d_out

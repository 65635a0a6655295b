import math

import numpy as np

from models.errors import CheckpointError


def cosine_lr(step, total_steps, lr_init=1e-4, lr_final=1e-6):
    """ lr_final + 0.5 (lr_init - lr_final)(1 + cos(pi * step / total_steps)) """
    if total_steps < 0 or not 0 <= step <= max(total_steps, 0):
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step == 0 or total_steps == 0:
        return lr_init
    if step == total_steps:
        return lr_final
    return lr_final + 0.5 * (lr_init - lr_final) * (1.0 + math.cos(math.pi * step / total_steps))


class Adam:
    """ Adam with bias correction over a name -> Tensor parameter dict """

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, lr):
        self.step_count += 1
        t = self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / (1.0 - self.beta1 ** t)
            v_hat = self.v[name] / (1.0 - self.beta2 ** t)
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_tensors(self):
        out = {}
        for name in self.params:
            out[f"optimizer.m.{name}"] = self.m[name]
            out[f"optimizer.v.{name}"] = self.v[name]
        out["optimizer.step"] = np.array(float(self.step_count))
        return out

    def load_state_tensors(self, tensors):
        for name, p in self.params.items():
            for buf, key in ((self.m, f"optimizer.m.{name}"), (self.v, f"optimizer.v.{name}")):
                if key not in tensors:
                    raise CheckpointError(f"checkpoint is missing {key}")
                if tensors[key].shape != p.shape:
                    raise CheckpointError(f"{key} has shape {tensors[key].shape}, expected {p.shape}")
                buf[name] = np.array(tensors[key], dtype=np.float64)
        if "optimizer.step" not in tensors:
            raise CheckpointError("checkpoint is missing optimizer.step")
        self.step_count = int(tensors["optimizer.step"])

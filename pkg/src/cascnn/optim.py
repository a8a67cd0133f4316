"""Optimizers operating in place on :class:`~cascnn.tensor.Parameter` objects."""
import numpy as np


def adam_step(params, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update. A missing grad counts as zero."""
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.values)
        p.step += 1
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * g * g
        m_hat = p.m / (1.0 - beta1 ** p.step)
        v_hat = p.v / (1.0 - beta2 ** p.step)
        p.values -= lr * m_hat / (np.sqrt(v_hat) + eps)


def sgd_step(params, lr=0.001):
    for p in params:
        p.step += 1
        if p.grad is not None:
            p.values -= lr * p.grad


class Adam:
    def __init__(self, params, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps

    def step(self):
        adam_step(self.params, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class SGD:
    def __init__(self, params, lr=0.001):
        self.params = list(params)
        self.lr = lr

    def step(self):
        sgd_step(self.params, self.lr)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def make_optimizer(name, params, lr):
    if name == "adam":
        return Adam(params, lr=lr)
    if name == "sgd":
        return SGD(params, lr=lr)
    raise ValueError(f"unknown optimizer {name!r}")

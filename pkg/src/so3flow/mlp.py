"""Small fully connected conditioner networks."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter

DEFAULT_HIDDEN = (64, 64, 64, 64)


class Mlp:
    """ReLU net over widths [in, *hidden, out] with one residual skip.

    The first hidden activation is added to the last hidden layer's
    pre-activation (requires hidden[0] == hidden[-1]).  Hidden weights
    are He-normal; the output layer starts at zero when zero_last is
    set, which makes a freshly built flow the identity map.
    """

    def __init__(self, in_dim, out_dim, rng, hidden=DEFAULT_HIDDEN,
                 name="mlp", zero_last=True):
        if not hidden:
            raise ValueError("need at least one hidden layer")
        if len(hidden) >= 2 and hidden[0] != hidden[-1]:
            raise ValueError("residual skip needs hidden[0] == hidden[-1]")
        widths = [in_dim] + list(hidden) + [out_dim]
        self.name = name
        self.weights = []
        self.biases = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            last = i == len(widths) - 2
            if last and zero_last:
                w = np.zeros((a, b))
            else:
                w = rng.standard_normal((a, b)) * np.sqrt(2.0 / a)
            self.weights.append(Parameter(f"{name}.w{i}", w))
            self.biases.append(Parameter(f"{name}.b{i}", np.zeros(b)))
        self.n_hidden = len(hidden)

    def parameters(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def __call__(self, x, tape=None):
        def p(param):
            return tape.param(param) if tape is not None else param.data

        h = ad.relu(ad.add(ad.matmul(x, p(self.weights[0])), p(self.biases[0])))
        first = h
        for i in range(1, self.n_hidden):
            pre = ad.add(ad.matmul(h, p(self.weights[i])), p(self.biases[i]))
            if i == self.n_hidden - 1:
                pre = ad.add(pre, first)
            h = ad.relu(pre)
        return ad.add(ad.matmul(h, p(self.weights[-1])), p(self.biases[-1]))

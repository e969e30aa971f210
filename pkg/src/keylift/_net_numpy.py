"""Reference numpy kernels for the MLP core.

These are the fallback implementations selected when the compiled
extension is unavailable; both backends share these exact semantics.
Activation codes: 0 linear, 1 tanh, 2 relu. The backward pass derives
activation slopes from the cached activations (tanh' = 1 - a^2,
relu' = [a > 0]), so the cache is just the per-layer activation list
with the raw input at index 0 and the network output last.
"""

from __future__ import annotations

import numpy as np

ACT_LINEAR = 0
ACT_TANH = 1
ACT_RELU = 2


def mlp_forward(x, weights, biases, act_codes):
    """Run the affine+activation stack; returns (output, activations list)."""
    acts = [x]
    a = x
    for W, b, code in zip(weights, biases, act_codes):
        z = a @ W + b
        if code == ACT_TANH:
            a = np.tanh(z)
        elif code == ACT_RELU:
            a = np.maximum(z, 0.0)
        else:
            a = z
        acts.append(a)
    return a, acts


def mlp_backward(grad_out, weights, act_codes, acts):
    """Exact reverse-mode gradients of mlp_forward.

    Returns (weight grads, bias grads, input grad); grads match the
    parameter shapes, grad_out and all cached activations must come from
    one matching forward call.
    """
    n_layers = len(weights)
    d_weights = [None] * n_layers
    d_biases = [None] * n_layers
    g = grad_out
    for l in range(n_layers - 1, -1, -1):
        a_out = acts[l + 1]
        code = act_codes[l]
        if code == ACT_TANH:
            g = g * (1.0 - a_out * a_out)
        elif code == ACT_RELU:
            g = g * (a_out > 0.0)
        d_weights[l] = acts[l].T @ g
        d_biases[l] = g.sum(axis=0)
        g = g @ weights[l].T
    return d_weights, d_biases, g


def adam_update(arrays, grads, m, v, step, lr, beta1, beta2, eps):
    """One bias-corrected Adam step, in place over a flat list of arrays.

    ``step`` is the 1-based count including this update.
    """
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    for p, g, mi, vi in zip(arrays, grads, m, v):
        mi *= beta1
        mi += (1.0 - beta1) * g
        vi *= beta2
        vi += (1.0 - beta2) * g * g
        p -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)

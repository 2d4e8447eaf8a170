"""Pure-numpy MLP kernels, interface-identical to the compiled extension.

All arrays are float64 and C-contiguous. Weight matrices are stored
(out_features, in_features) row-major; hidden layers apply tanh, the final
layer is linear.
"""

import numpy as np


def mlp_forward(feats, weights, biases):
    """Batched forward pass.

    feats: (B, D0). Returns (out, hiddens) where hiddens is the list of
    post-tanh hidden activations, cached for the backward pass.
    """
    h = feats
    hiddens = []
    last = len(weights) - 1
    for l in range(last):
        h = np.tanh(h @ weights[l].T + biases[l])
        hiddens.append(h)
    out = h @ weights[last].T + biases[last]
    return out, hiddens


def mlp_backward(feats, hiddens, weights, upstream):
    """Gradients of sum_i <upstream[i], out[i]> with respect to weights and biases.

    feats and hiddens must come from mlp_forward on the same inputs.
    Returns (grad_weights, grad_biases) matching the shapes of the parameters.
    """
    n_layers = len(weights)
    grad_w = [None] * n_layers
    grad_b = [None] * n_layers
    dz = upstream
    for l in range(n_layers - 1, -1, -1):
        below = feats if l == 0 else hiddens[l - 1]
        grad_w[l] = dz.T @ below
        grad_b[l] = dz.sum(axis=0)
        if l > 0:
            # tanh' = 1 - tanh^2, using the cached activation
            dz = (dz @ weights[l]) * (1.0 - hiddens[l - 1] ** 2)
    return grad_w, grad_b

"""End-to-end finite-difference check shared by the model and acceptance suites."""

import numpy as np

from finegrain import tensor_core as tc
from finegrain.model import FineGrainNet, ModelConfig
from finegrain.tensor_core import Tape, numerical_gradient_smooth, relative_error


def model_gradient_errors(channels, length, n_fields, n_blocks, seed=1, eps=1e-4):
    """Per-parameter norm-wise relative error plus the count of kinked coordinates.

    Coordinates whose +/-eps step flips a ReLU mask or a max-pool argmax are
    excluded; the loss is not differentiable inside that window.
    """
    cfg = ModelConfig(channels=channels, length=length, n_fields=n_fields, vocab_size=10,
                      n_blocks=n_blocks, dropout=0.5)
    net = FineGrainNet(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    ids = rng.integers(2, 10, size=(2, length))
    lengths = np.array([length, length // 2])
    ids[1, length // 2:] = 0
    values = rng.normal(size=(2, n_fields))
    y = np.array([[1, 0, 1, 0], [0, 1, 0, 0]])

    def loss():
        logits, _ = net.forward(ids, lengths, values, train=True, rng=np.random.default_rng(5))
        return tc.bce_with_logits(logits, y)

    net.store.zero_grad()
    with Tape() as tape:
        value = loss()
    tape.backward(value)

    errors, kinked, elementwise = {}, 0, 0.0
    for name, p in net.store:
        numeric, kink = numerical_gradient_smooth(lambda: float(loss().data), p, eps=eps)
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        if name == "embedding.table":
            # the pad row is frozen at zero and never receives gradient
            analytic, numeric, kink = analytic[1:], numeric[1:], kink[1:]
        kinked += int(kink.sum())
        errors[name] = relative_error(analytic[~kink], numeric[~kink], mode="norm")
        elementwise = max(elementwise, relative_error(analytic[~kink], numeric[~kink]))
    return errors, kinked, elementwise

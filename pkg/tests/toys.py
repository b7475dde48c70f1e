"""Small models shared by the unit tests and the acceptance suite."""

import itertools

import numpy as np

import pstbln.tensor as tc
from pstbln.gradcheck import grad_check
from pstbln.model import NetworkSpec, build_model

KINK_MARGIN = 1e-3


class ReluRecorder:
    """Temporarily wraps ``relu_forward`` to record the smallest |pre-activation| seen."""

    def __init__(self):
        self.min_abs = np.inf
        self._orig = tc.relu_forward

    def __enter__(self):
        def wrapped(H):
            self.min_abs = min(self.min_abs, float(np.min(np.abs(H))))
            return self._orig(H)

        tc.relu_forward = wrapped
        return self

    def __exit__(self, *exc):
        tc.relu_forward = self._orig


def end_to_end_gradcheck(seed=0, widths=(3, 4), E=5, T=4, C=3, N=4, p=0.2, tolerance=1e-3):
    """Grad-check the training loss of a small model against every parameter.

    Dropout masks are drawn once and held fixed.  Inputs are resampled (by
    bumping the seed) until no ReLU sees a pre-activation within
    ``KINK_MARGIN`` of zero, so the loss is smooth around the checked point.
    """
    spec = NetworkSpec.from_widths(list(widths), E, C, T, k=3, p=p)
    for attempt in range(200):
        rng = np.random.default_rng([seed, attempt])
        model = build_model(spec, seed + attempt)
        X = rng.normal(size=(N, 2, T, E))
        y = rng.integers(0, C, N)
        masks = [tc.dropout(np.ones((N, f, T, E)), p, rng)[1] for f in widths]
        with ReluRecorder() as rec:
            model.forward(X, "train", masks=masks)
        if rec.min_abs > KINK_MARGIN:
            break
    else:
        raise RuntimeError("could not find a kink-free sample")

    model.zero_grad()
    model.loss_and_grad(X, y, "train", masks=masks)
    named = model.named_parameters()
    analytic = {name: p.grad.copy() for name, p in named}
    inputs = {name: p.value for name, p in named}

    def loss():
        logits = model.forward(X, "train", masks=masks)
        return tc.softmax_cross_entropy(logits, y)[0]

    return grad_check(loss, inputs, analytic, tolerance)


def two_unit_model(seed=5):
    """One layer of width 1 over one frame and two edges: exactly two dropout units per sample."""
    spec = NetworkSpec.from_widths([1], edge_count=2, classes=3, frames=1, k=1, p=0.5)
    model = build_model(spec, seed)
    rng = np.random.default_rng(seed)
    model.fc_weight.value[:] = rng.normal(0, 2, model.fc_weight.shape)
    model.fc_bias.value[:] = rng.normal(0, 0.5, model.fc_bias.shape)
    # keep the layer output positive so each mask pattern changes the logits
    model.layers[0].params["bn2_beta"].value[:] = 1.0
    model.layers[0].params["res2_bias"].value[:] = 0.5
    x = rng.normal(size=(2, 1, 2))
    return model, x


def exhaustive_expectation(model, x):
    """Exact expected softmax over all 2^units masks of a single-layer model."""
    p = model.layers[0].spec.p
    shape = (1, model.spec.layers[0].f, model.spec.frames, model.spec.edge_count)
    units = int(np.prod(shape))
    total = np.zeros(model.spec.classes)
    outputs = []
    for keep in itertools.product([0, 1], repeat=units):
        bits = np.array(keep, dtype=float)
        weight = np.prod(np.where(bits == 1, 1 - p, p))
        mask = (bits / (1 - p)).reshape(shape)
        probs = tc.softmax(model.forward(x[None], "mc", masks=[mask]))[0]
        outputs.append(probs)
        total += weight * probs
    return total, outputs

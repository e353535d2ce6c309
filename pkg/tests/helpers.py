"""Independent oracles shared by the test modules."""

import numpy as np

from trojandam import engine

FD_STEP = 1e-3
FD_RTOL = 1e-4
FD_ATOL = FD_STEP ** 2  # truncation order of the central difference


def tiny_cnn(in_channels=1, n_classes=3, size=5, widths=(2, 3)):
    """SmallCNN shape with at most 100 trainable coordinates."""
    return engine.small_cnn(in_channels, n_classes, size, widths)


def net50():
    """2-conv / 1-linear network with exactly 50 trainable coordinates."""
    spec = engine.NetworkSpec((1, 5, 5), (
        engine.Conv2d(1, 2, 3, 1, 1), engine.BatchNorm(2), engine.ReLU(),
        engine.Conv2d(2, 1, 3, 1, 1), engine.BatchNorm(1), engine.ReLU(),
        engine.GlobalAvgPool(), engine.Linear(1, 4)))
    assert engine.layout_for(spec).size == 50
    return spec


def _relu_masks(model, x):
    _, cache = engine.forward(model, x, train=True, update_stats=False, keep_cache=True)
    return [c for c, layer in zip(cache, model.spec.layers) if isinstance(layer, engine.ReLU)]


def finite_difference_check(model, x, y, h=FD_STEP):
    """Compare analytic gradients with central differences, coordinate by coordinate.

    Coordinates whose +/-h perturbation flips any ReLU (the loss is not
    differentiable across the stencil there) are skipped. Returns
    ``(worst_violation, n_checked, n_skipped)`` where a violation > 1 means
    ``|a - n| > FD_RTOL * max(|a|, |n|) + FD_ATOL``.
    """
    _, grad = engine.compute_gradient(model, x, y, update_stats=False)
    data = model.params.data
    worst, checked, skipped = 0.0, 0, 0
    for i in range(data.size):
        old = data[i]
        data[i] = old + h
        lp = engine.loss_value(model, x, y)
        mp = _relu_masks(model, x)
        data[i] = old - h
        lm = engine.loss_value(model, x, y)
        mm = _relu_masks(model, x)
        data[i] = old
        if not all(np.array_equal(a, b) for a, b in zip(mp, mm)):
            skipped += 1
            continue
        num = (lp - lm) / (2 * h)
        ana = float(grad.data[i])
        allowed = FD_RTOL * max(abs(num), abs(ana)) + FD_ATOL
        worst = max(worst, abs(num - ana) / allowed)
        checked += 1
    return worst, checked, skipped

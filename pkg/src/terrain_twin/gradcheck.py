"""Central finite-difference checks of every hand-written backward pass."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nnet

EPS = 1e-5
TOLERANCE = 1e-5


def rel_error(analytic, numeric) -> float:
    """Largest elementwise ``|a - n| / max(|a| + |n|, 1e-8)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), 1e-8)))


def numerical_gradient(f, x: np.ndarray, eps: float = EPS) -> np.ndarray:
    """d f / d x for scalar ``f`` by central differences, perturbing ``x`` in place."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<24} max rel err {self.max_rel_error:.3e}"


def _check_layer(name, forward, backward, inputs, out_shape, rng):
    """Compare backward against d<g, forward(inputs)>/d input for every input."""
    g = rng.standard_normal(out_shape)
    analytic = backward(g)
    worst = 0.0
    for x, ga in zip(inputs, analytic):
        num = numerical_gradient(lambda: float(np.sum(forward() * g)), x)
        worst = max(worst, rel_error(ga, num))
    return CheckResult(name, worst)


def check_conv(rng, k=3):
    x = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((k, k, 2, 3))
    b = rng.standard_normal(3)
    return _check_layer(
        f"conv{k}x{k}",
        lambda: nnet.conv2d_forward(x, w, b)[0],
        lambda g: nnet.conv2d_backward(x, w, g),
        (x, w, b), (1, 3, 4, 4), rng)


def check_relu(rng):
    x = rng.standard_normal((1, 2, 4, 4))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    return _check_layer("relu", lambda: nnet.relu(x),
                        lambda g: (nnet.relu_backward(x, g),), (x,), x.shape, rng)


def check_maxpool(rng):
    x = rng.permutation(16).reshape(1, 1, 4, 4).astype(np.float64) + rng.random((1, 1, 4, 4)) * 0.1
    _, idx = nnet.maxpool2(x)
    return _check_layer("maxpool2", lambda: nnet.maxpool2(x)[0],
                        lambda g: (nnet.maxpool2_backward(idx, g),), (x,), (1, 1, 2, 2), rng)


def check_tconv(rng):
    x = rng.standard_normal((1, 2, 3, 3))
    w = rng.standard_normal((2, 2, 2, 3))
    b = rng.standard_normal(3)
    return _check_layer("tconv2", lambda: nnet.tconv2(x, w, b),
                        lambda g: nnet.tconv2_backward(x, w, g), (x, w, b), (1, 3, 6, 6), rng)


def check_concat(rng):
    a = rng.standard_normal((1, 2, 4, 4))
    b = rng.standard_normal((1, 3, 4, 4))
    return _check_layer("concat", lambda: nnet.concat_channels(a, b),
                        lambda g: nnet.split_channels(g, 2), (a, b), (1, 5, 4, 4), rng)


def check_dropout_off(rng):
    x = rng.standard_normal((1, 2, 4, 4))
    _, keep = nnet.dropout(x, 0.5, None, training=False)
    return _check_layer("dropout (off)", lambda: nnet.dropout(x, 0.5, None, False)[0],
                        lambda g: (nnet.dropout_backward(keep, g),), (x,), x.shape, rng)


def check_softmax_ce(rng):
    logits = rng.standard_normal((1, 7, 2, 2))
    labels = rng.integers(0, 7, size=(1, 2, 2))
    _, grad = nnet.softmax_ce(logits, labels)
    num = numerical_gradient(lambda: nnet.softmax_ce(logits, labels)[0], logits)
    return CheckResult("softmax_ce", rel_error(grad, num))


def check_unet(rng, seed=0):
    cfg = nnet.UNetConfig(in_channels=3, depth=1, base_filters=4)
    model = nnet.init_params(cfg, seed, dtype=np.float64)
    for name in model.params:
        if name.endswith(".b"):
            model.params[name] = rng.standard_normal(model.params[name].shape) * 0.1
    x = rng.standard_normal((1, 3, 8, 8))
    labels = rng.integers(0, 7, size=(1, 8, 8))
    _, grads, _ = nnet.unet_loss_and_grads(model, x, labels, training=False)

    def loss():
        return nnet.softmax_ce(nnet.unet_forward(model, x), labels)[0]

    worst = 0.0
    for name, value in model.params.items():
        worst = max(worst, rel_error(grads[name], numerical_gradient(loss, value)))
    worst = max(worst, rel_error(nnet.unet_input_grad(model, x, labels),
                                 numerical_gradient(loss, x)))
    return CheckResult("unet depth1/base4", worst)


def run_suite(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return [
        check_conv(rng, 3),
        check_conv(rng, 1),
        check_relu(rng),
        check_maxpool(rng),
        check_tconv(rng),
        check_concat(rng),
        check_dropout_off(rng),
        check_softmax_ce(rng),
        check_unet(rng, seed),
    ]

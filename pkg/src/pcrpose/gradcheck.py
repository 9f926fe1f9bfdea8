"""Central finite-difference checks for every differentiable op and the model."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .cam import Cam, CamConfig, cam_forward
from .model import PcrConfig, PcrModel, multi_task_loss, pcr_forward
from .tensor import Tensor

TOLERANCE = 1e-4
STEP = 1e-5
MAX_SKIPPED_FRACTION = 0.1


@dataclass
class CheckResult:
    name: str
    rel_error: float
    checked: int
    seconds: float
    skipped: int = 0

    @property
    def ok(self) -> bool:
        total = self.checked + self.skipped
        return (self.checked > 0 and self.rel_error < TOLERANCE
                and self.skipped <= MAX_SKIPPED_FRACTION * total)


def _leaf(rng, shape, low=None):
    data = rng.normal(size=shape)
    if low is not None:
        # keep away from the kink at zero
        data = np.sign(data) * (np.abs(data) + low)
    return Tensor(data, requires_grad=True)


def _sample_indices(rng, shape, limit):
    total = int(np.prod(shape))
    if limit is None or total <= limit:
        return list(np.ndindex(*shape))
    flat = rng.choice(total, size=limit, replace=False)
    return [np.unravel_index(i, shape) for i in flat]


def check(name: str, loss_fn: Callable[[], Tensor], leaves: list[Tensor], rng=None,
          limit: int | None = None, h: float = STEP) -> CheckResult:
    """Compare backprop against central differences on (a sample of) every leaf entry.

    Entries whose difference stencil flips a ReLU are excluded and counted
    as skipped; the relative error is taken over all remaining entries at once.
    """
    rng = rng or np.random.default_rng(0)
    start = time.perf_counter()
    for leaf in leaves:
        leaf.grad = None
    loss_fn().backward()
    value = lambda: loss_fn().item()  # noqa: E731
    analytic, numeric = [], []
    skipped = 0
    for leaf in leaves:
        ana = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        for idx in _sample_indices(rng, leaf.shape, limit):
            if not T.smooth_stencil(value, leaf.data, idx, h):
                skipped += 1
                continue
            analytic.append(ana[idx])
            numeric.append(T.numerical_grad(value, leaf.data, h, [idx])[idx])
    err = T.relative_error(np.array(analytic), np.array(numeric))
    return CheckResult(name, err, len(analytic), time.perf_counter() - start, skipped)


def _mse_probe(out: Tensor, rng) -> Callable[[Tensor], Tensor]:
    target = rng.normal(size=out.shape)
    weights = rng.uniform(0.5, 1.5, size=out.shape[:2])
    return lambda y: T.weighted_mse(y, target, weights)


def op_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []

    def run(name, build, leaves, limit=None):
        probe = _mse_probe(build(), rng)
        results.append(check(name, lambda: probe(build()), leaves, rng, limit))

    x = _leaf(rng, (2, 3, 7, 5))
    w = _leaf(rng, (4, 3, 3, 3))
    b = _leaf(rng, (4,))
    spec = T.ConvSpec(3, 3, 3, 4, stride=1, dilation=3, padding=3)
    run("conv2d dilation 3", lambda: T.conv2d(x, w, b, spec), [x, w, b])
    spec2 = T.ConvSpec(3, 3, 3, 4, stride=2, dilation=1, padding=1)
    run("conv2d stride 2", lambda: T.conv2d(x, w, b, spec2), [x, w, b])

    xd = _leaf(rng, (2, 4, 3, 4))
    wd = _leaf(rng, (4, 3, 4, 4))
    bd = _leaf(rng, (3,))
    run("deconv2d", lambda: T.deconv2d(xd, wd, bd, T.deconv_spec(4, 3)), [xd, wd, bd])

    xb = _leaf(rng, (3, 2, 4, 3))
    g = _leaf(rng, (2,))
    be = _leaf(rng, (2,))
    st = T.BatchNormState.fresh(2)
    run("batch_norm train", lambda: T.batch_norm(xb, g, be, st, "train"), [xb, g, be])
    st_inf = T.BatchNormState(rng.normal(size=2), rng.uniform(0.5, 2.0, size=2))
    run("batch_norm infer", lambda: T.batch_norm(xb, g, be, st_inf, "infer"), [xb, g, be])

    xe = _leaf(rng, (2, 3, 4, 4), low=0.01)
    run("relu", lambda: T.relu(xe), [xe])
    run("sigmoid", lambda: T.sigmoid(xe), [xe])
    run("global_avg_pool", lambda: T.global_avg_pool(xe), [xe])
    s = _leaf(rng, (2, 3, 1, 1))
    run("channel_scale", lambda: T.channel_scale(xe, s), [xe, s])
    p1, p2 = _leaf(rng, (2, 1, 4, 4)), _leaf(rng, (2, 2, 4, 4))
    run("concat_channels", lambda: T.concat_channels([p1, p2, p1]), [p1, p2])
    run("upsample2x_nearest", lambda: T.upsample2x_nearest(xe), [xe])
    ya, yb = _leaf(rng, (2, 3, 4, 4)), _leaf(rng, (2, 3, 4, 4))
    run("add", lambda: T.add(ya, yb), [ya, yb])

    pred = _leaf(rng, (2, 3, 4, 4))
    tgt = rng.normal(size=pred.shape)
    wts = rng.uniform(0, 1, size=(2, 3))
    results.append(check("weighted_mse", lambda: T.weighted_mse(pred, tgt, wts), [pred], rng))

    for stride in (1, 2):
        cam = Cam(CamConfig(1, 4, 8, stride, init_std=0.5), rng)
        xc = _leaf(rng, (2, 4, 4, 3))
        run(f"cam_forward stride {stride}", lambda: cam_forward(cam, xc), [xc] + cam.parameters(), limit=24)
    return results


def model_check(seed: int = 0, input_hw=(64, 48), limit: int = 16) -> CheckResult:
    """Full micro-model (K=1, L=1, C=8) gradient w.r.t. a sample of every parameter."""
    rng = np.random.default_rng(seed)
    cfg = PcrConfig(K=1, L=1, channels=(8,), joints=3, input_h=input_hw[0], input_w=input_hw[1],
                    init_std=0.3, cam_strides=None if input_hw[0] % 8 == 0 and input_hw[1] % 8 == 0 else (1,))
    model = PcrModel(cfg, seed=seed)
    images = rng.normal(size=(2, 3, cfg.input_h, cfg.input_w))
    hh, hw = cfg.heatmap_size
    target = rng.uniform(0, 1, size=(2, cfg.joints, hh, hw))
    weights = np.ones((2, cfg.joints))

    def loss():
        return multi_task_loss(pcr_forward(model, images, "train"), target, weights)[0]

    return check("pcr micro-model", loss, model.parameters(), rng, limit=limit)


def run_all(seed: int = 0) -> list[CheckResult]:
    return op_checks(seed) + [model_check(seed)]

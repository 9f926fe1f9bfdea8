import itertools
import math

import numpy as np
import pytest

from pcrpose import tensor as T
from pcrpose.evaluation import EvalConfig, GroundTruth, PoseResult


def _at_similarity(gt_xy, area, target):
    """A point whose single-joint OKS (kappa 1) against ``gt_xy`` is ``target``."""
    d = math.sqrt(-2.0 * area * math.log(target))
    return np.array([[gt_xy[0] + d, gt_xy[1], 2.0]])


def micro_dataset():
    """Two images, three ground truths, four predictions with chosen similarities.

    Score order is P1 (0.97 to G1), P4 (false positive), P2 (0.72 to G2),
    P3 (0.57 to G3). G1, G2 and the 2000-area predictions are medium; G3 and
    P3 are large.
    """
    gts = [
        GroundTruth(1, [[0.0, 0.0, 2.0]], 2000.0),
        GroundTruth(1, [[500.0, 500.0, 2.0]], 2000.0),
        GroundTruth(2, [[0.0, 0.0, 2.0]], 10000.0),
    ]
    one = np.ones(1)
    preds = [
        PoseResult(1, _at_similarity((0, 0), 2000.0, 0.97), one, 0.9, area=2000.0),
        PoseResult(2, [[1000.0, 1000.0, 2.0]], one, 0.85, area=2000.0),
        PoseResult(1, _at_similarity((500, 500), 2000.0, 0.72), one, 0.8, area=2000.0),
        PoseResult(2, _at_similarity((0, 0), 10000.0, 0.57), one, 0.7, area=10000.0),
    ]
    # 101 recall samples: 34 lie at or below 1/3, 51 at or below 1/2.
    expected = {
        "AP": (2 * 84.25 + 3 * 56 + 5 * 34) / 1010,
        "AP@.5": 84.25 / 101,
        "AP@.75": 34 / 101,
        "AP^M": (5 * (51 + 100 / 3) + 5 * 51) / 1010,
        "AP^L": 0.2,
        "AR": (2 * 1 + 3 * (2 / 3) + 5 * (1 / 3)) / 10,
    }
    return preds, gts, EvalConfig.uniform(1, 1.0), expected


@pytest.fixture
def micro():
    return micro_dataset()


def brute_force_nms(results, threshold, kappas):
    """Enumerate every subset and return the one consistent with greedy keeping.

    A subset S is consistent when each result is in S exactly if no
    higher-ranked member of S on the same image is more similar than
    ``threshold``. Exactly one such subset exists.
    """
    n = len(results)
    rank = {i: r for r, i in enumerate(sorted(range(n), key=lambda i: (-results[i].score, i)))}
    kappas = np.asarray(kappas, dtype=float)

    def similar(i, j):
        a, b = results[i], results[j]
        if a.image_id != b.image_id:
            return False
        total = 0.0
        for p, q, k in zip(a.keypoints, b.keypoints, kappas):
            d2 = (p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2
            total += math.exp(-d2 / (2.0 * b.area * k * k))
        return total / len(kappas) > threshold

    found = []
    for bits in itertools.product([False, True], repeat=n):
        members = [i for i in range(n) if bits[i]]
        ok = all(bits[i] == (not any(rank[j] < rank[i] and similar(i, j) for j in members))
                 for i in range(n))
        if ok:
            found.append(sorted(members, key=rank.get))
    assert len(found) == 1
    return found[0]


def random_instance_set(rng, joints=3):
    n = int(rng.integers(0, 7))
    base = rng.uniform(0, 50, size=(2, joints, 2))
    out = []
    for _ in range(n):
        img = int(rng.integers(1, 3))
        xy = base[img - 1] + rng.normal(scale=rng.choice([0.5, 3.0, 10.0]), size=(joints, 2))
        kps = np.column_stack([xy, np.full(joints, 2.0)])
        score = float(rng.choice([0.3, 0.5, 0.7, 0.9]) if rng.random() < 0.3 else rng.uniform())
        out.append(PoseResult(img, kps, np.ones(joints), score, area=float(rng.uniform(20, 400))))
    return out


def manual_cam(cam, x, mode):
    """Branch-by-branch composition from raw tensor ops, independent of cam.py helpers."""
    parts = []
    for conv, bn in zip(cam.hdc_convs, cam.hdc_bns):
        y = T.conv2d(x, conv.weight, conv.bias, conv.spec)
        parts.append(T.relu(T.batch_norm(y, bn.gamma, bn.beta, bn.state, mode)))
    cat = T.concat_channels(parts)
    fuse_op = T.deconv2d if cam.cfg.stride == 2 else T.conv2d
    hdc = T.batch_norm(fuse_op(cat, cam.hdc_fuse.weight, cam.hdc_fuse.bias, cam.hdc_fuse.spec),
                       cam.hdc_bn.gamma, cam.hdc_bn.beta, cam.hdc_bn.state, mode)
    z = T.conv2d(T.global_avg_pool(cat), cam.se_reduce.weight, cam.se_reduce.bias, cam.se_reduce.spec)
    if cam.se_bn is not None:
        z = T.batch_norm(z, cam.se_bn.gamma, cam.se_bn.beta, cam.se_bn.state, mode)
    gate = T.sigmoid(T.conv2d(T.relu(z), cam.se_expand.weight, cam.se_expand.bias, cam.se_expand.spec))
    xr = T.upsample2x_nearest(x) if cam.cfg.stride == 2 else x
    res = T.batch_norm(T.conv2d(xr, cam.res_conv.weight, cam.res_conv.bias, cam.res_conv.spec),
                       cam.res_bn.gamma, cam.res_bn.beta, cam.res_bn.state, mode)
    return T.relu(T.add(T.channel_scale(hdc, gate), res))

import numpy as np
import pytest

from sensorcal import synth

SMALL_COUNTS = (8, 10, 2)


def small_scene(seed=0, noise=None, **kw):
    return synth.default_scene("sim_train", seed=seed, noise=noise or synth.NoiseModel.none(),
                               counts=SMALL_COUNTS, n_candidates=200, **kw)


@pytest.fixture(scope="session")
def small_noiseless():
    """(dataset, ground truth) of an 8-collection noiseless scene, raw data in memory."""
    return synth.generate(small_scene(0), with_raw=True)


@pytest.fixture(scope="session")
def small_noisy():
    return synth.generate(small_scene(0, synth.NoiseModel()), with_raw=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_transform(rng, max_angle=np.pi - 0.01, trans_scale=2.0):
    from sensorcal.geometry import RigidTransform, exp_so3

    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    return RigidTransform(exp_so3(angle * axis), rng.uniform(-trans_scale, trans_scale, 3))


NORM_KINDS = ("range_longitudinal",)


def gradient_check(prob, x, step=1e-5, margin=100.0):
    """Worst column relative error of ``prob.jacobian`` against central differences.

    Norm-type residuals are not differentiable at zero, and their curvature
    blows up next to it. Rows whose stencil comes within ``margin`` times its
    own movement of zero are left out of the comparison. Returns (worst
    relative error, number of excluded row entries, kinds compared).
    """
    J = prob.jacobian(x).toarray()
    r0 = prob.residuals(x)
    norm_row = np.zeros(prob.n_residuals, dtype=bool)
    for b in prob.blocks:
        norm_row[b.rows] = b.kind in NORM_KINDS
    worst, excluded = 0.0, 0
    for j in range(len(x)):
        d = np.zeros(len(x))
        d[j] = step
        rp, rm = prob.residuals(x + d), prob.residuals(x - d)
        C = (rp - rm) / (2 * step)
        move = np.maximum(np.abs(rp - r0), np.abs(rm - r0))
        near = np.minimum.reduce([np.abs(r0), np.abs(rp), np.abs(rm)]) < margin * move
        keep = ~(norm_row & near)
        excluded += int((~keep).sum())
        den = max(np.linalg.norm(C[keep]), 1e-8)
        worst = max(worst, float(np.linalg.norm(J[keep, j] - C[keep]) / den))
    return worst, excluded

import os
import sys

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_camera(rng, width=None, height=None):
    from trimip.geometry import Camera, look_at

    width = width or int(rng.integers(4, 64))
    height = height or int(rng.integers(4, 64))
    f = float(rng.uniform(0.5, 2.0)) * width
    eye = rng.normal(size=3)
    eye = 3.0 * eye / np.linalg.norm(eye)
    return Camera(width, height, f, f * float(rng.uniform(0.8, 1.25)),
                  width * float(rng.uniform(0.3, 0.7)), height * float(rng.uniform(0.3, 0.7)),
                  look_at(eye, rng.uniform(-0.3, 0.3, 3)))


def tiny_dataset(scene="single-sphere", n=2, res=16, spp=4, seed=0, multiscale=True):
    from trimip.data import Dataset, Frame, compile_multiscale
    from trimip.scenes import generate_scene, oracle_render, orbit_cameras

    sc = generate_scene(scene)
    frames = [Frame(c, oracle_render(sc, c, spp=spp, seed=seed + k), 1.0, f"r_{k}")
              for k, c in enumerate(orbit_cameras(sc, n, res, seed=seed))]
    if multiscale:
        frames = compile_multiscale(frames, (1, 2))
    return Dataset(frames, sc.aabb)


def gradient_errors(state, cones, gt, weight, eps=1e-6, per_tensor=6, seed=0):
    """Worst relative error between analytic and central-difference gradients per tensor.

    Entries are chosen among the largest-magnitude analytic gradients so the
    comparison is not dominated by round-off on near-zero components.
    """
    from trimip.train import loss_and_grads

    rng = np.random.default_rng(seed)
    _, grads, _, _ = loss_and_grads(state, cones, gt, weight, use_grid=False)
    tensors = state.tensors()
    errors = {}
    for name, g in grads.items():
        flat_g = g.reshape(-1)
        order = np.argsort(-np.abs(flat_g), kind="stable")
        picks = order[:per_tensor * 4]
        picks = rng.choice(picks, min(per_tensor, picks.size), replace=False)
        worst = 0.0
        for k in picks:
            flat = tensors[name].reshape(-1)
            old = flat[k]
            flat[k] = old + eps
            state.enc.rebuild()
            fp = loss_and_grads(state, cones, gt, weight, use_grid=False)[0]
            flat[k] = old - eps
            state.enc.rebuild()
            fm = loss_and_grads(state, cones, gt, weight, use_grid=False)[0]
            flat[k] = old
            state.enc.rebuild()
            fd = (fp - fm) / (2 * eps)
            an = float(flat_g[k])
            scale = max(abs(an), abs(fd), 1e-12)
            worst = max(worst, abs(fd - an) / scale)
        errors[name] = worst
    return errors


ACCEPTANCE = []


def report_criterion(number, ok, detail):
    """Record one acceptance line; printed again in the terminal summary."""
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

import numpy as np
import pytest
import torch

from bgvae.config import toy_arch
from bgvae.model import BgVae


@pytest.fixture(autouse=True)
def _deterministic_torch():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def toy_student():
    torch.manual_seed(7)
    model = BgVae(toy_arch("student"))
    model.eval()
    return model


@pytest.fixture(scope="session")
def toy_teacher():
    torch.manual_seed(7)
    model = BgVae(toy_arch("teacher"))
    model.eval()
    return model


def max_rel_grad_err(fn, inputs, eps=1e-4, floor=1e-6):
    """Worst relative error between autograd and central finite differences.

    ``fn`` must be a pure scalar function of the float64 ``inputs`` so it can
    be re-evaluated after in-place perturbations.
    """
    for x in inputs:
        assert x.dtype == torch.float64
        x.requires_grad_(True)
    out = fn(*inputs)
    grads = torch.autograd.grad(out, inputs)
    worst = 0.0
    with torch.no_grad():
        for x, g in zip(inputs, grads):
            flat = x.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                hi = fn(*inputs).item()
                flat[i] = orig - eps
                lo = fn(*inputs).item()
                flat[i] = orig
                fd = (hi - lo) / (2 * eps)
                denom = max(abs(fd), abs(gflat[i].item()), floor)
                worst = max(worst, abs(fd - gflat[i].item()) / denom)
    return worst


def random_rng(seed=0) -> np.random.Generator:
    return np.random.default_rng(seed)

import numpy as np
import pytest
import torch

from misnet import ModelConfig

TOY = ModelConfig(backbone_id="toy", train_size=32)


def central_difference_error(fn, inputs, eps=1e-6, seed=0):
    """Max over ``inputs`` of ||analytic - numeric||_inf / ||numeric||_inf.

    ``fn`` maps the input tensors to a tensor (or tuple of tensors); it is
    reduced to a scalar with fixed random weights so every output element
    contributes to the gradient.
    """
    gen = torch.Generator().manual_seed(seed)
    inputs = [x.detach().clone().double().requires_grad_(True) for x in inputs]
    outs = fn(*inputs)
    outs = outs if isinstance(outs, (tuple, list)) else (outs,)
    weights = [torch.randn(o.shape, generator=gen, dtype=torch.float64) for o in outs]

    def scalar(*xs):
        res = fn(*xs)
        res = res if isinstance(res, (tuple, list)) else (res,)
        return sum((w * r).sum() for w, r in zip(weights, res))

    analytic = torch.autograd.grad(scalar(*inputs), inputs, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for idx, x in enumerate(inputs):
            numeric = torch.zeros_like(x)
            flat, nflat = x.view(-1), numeric.view(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + eps
                up = scalar(*inputs).item()
                flat[j] = orig - eps
                down = scalar(*inputs).item()
                flat[j] = orig
                nflat[j] = (up - down) / (2 * eps)
            a = analytic[idx] if analytic[idx] is not None else torch.zeros_like(x)
            scale = numeric.abs().max().item()
            assert scale > 0, "numeric gradient vanished; the check would be vacuous"
            worst = max(worst, (a - numeric).abs().max().item() / scale)
    return worst


def randomize_batchnorm(module, seed=0):
    """Give every batch-norm layer non-trivial running statistics and affine terms."""
    gen = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (torch.nn.BatchNorm1d, torch.nn.BatchNorm2d)):
            n = m.num_features
            m.running_mean.copy_(0.1 * torch.randn(n, generator=gen))
            m.running_var.copy_(0.5 + torch.rand(n, generator=gen))
            m.weight.data.copy_(0.5 + torch.rand(n, generator=gen))
            m.bias.data.copy_(0.1 * torch.randn(n, generator=gen))
    return module


@pytest.fixture
def toy_cfg():
    return TOY


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    yield


# -- acceptance summary -----------------------------------------------------------

ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for status, name, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{status} {name}: {detail}")

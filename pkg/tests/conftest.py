import numpy as np
import pytest
import torch

from sidiff.network import ModelConfig, build_model


def tiny_model(seed=0, n=3, M=4, d_m=8, heads=2, layers=1, L_input=6, std=0.5, dtype=torch.float64):
    """Small random model in eval mode with weights large enough to be context dependent."""
    cfg = ModelConfig(
        d_m=d_m, d_ff=2 * d_m, heads=heads, encoder_layers=layers, decoder_layers=layers,
        n=n, M=M, L_input=L_input, dropout=0.0,
    )
    model = build_model(cfg, seed=seed, dtype=dtype)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if "norm" in name or "ln" in name:
                continue
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)
    return model.eval()


def random_context(rng, n, M, length):
    return [tuple(int(v) for v in rng.integers(0, M, size=n)) for _ in range(length)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def finite_difference_errors(model, contexts, targets, views, alpha, coords, eps=1e-3, floor=1e-8):
    """Relative error of autograd vs central differences at sampled (name, flat index) coords.

    ``floor`` keeps exactly-zero gradients (e.g. attention key biases, which
    softmax shift invariance cancels) from turning round-off into error 1.
    """
    from sidiff.network import loss_and_grad, view_loss

    _, grads = loss_and_grad(model, contexts, targets, views, alpha)
    params = dict(model.named_parameters())
    t = torch.tensor([list(s) for s in targets])
    errors = []
    for name, i in coords:
        flat = params[name].data.view(-1)
        orig = float(flat[i])
        vals = []
        for sign in (1, -1):
            flat[i] = orig + sign * eps
            with torch.no_grad():
                vals.append(float(view_loss(model, model.encode(contexts), t, views, alpha)))
        flat[i] = orig
        fd = (vals[0] - vals[1]) / (2 * eps)
        an = float(grads[name].view(-1)[i])
        errors.append(abs(an - fd) / max(abs(an), abs(fd), floor))
    return np.array(errors)


def sample_coords(model, count, rng):
    """Coordinates drawn uniformly over all scalar parameters."""
    named = list(model.named_parameters())
    sizes = np.array([p.numel() for _, p in named])
    flat = rng.choice(int(sizes.sum()), size=count, replace=False)
    bounds = np.cumsum(sizes)
    out = []
    for f in flat:
        j = int(np.searchsorted(bounds, f, side="right"))
        out.append((named[j][0], int(f - (bounds[j] - sizes[j]))))
    return out

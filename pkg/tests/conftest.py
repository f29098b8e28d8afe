import pytest
import torch

from artinv import data as data_mod
from artinv.features import stub_backend
from artinv.training import prepare_examples


def central_difference_check(fn, params, h=1e-5) -> float:
    """Compare autograd gradients of a scalar-valued ``fn`` against central
    differences over every entry of ``params`` (float64 tensors with
    requires_grad). Returns the worst |analytic - numeric| normalized by the
    numeric gradient's scale.
    """
    loss = fn()
    grads = torch.autograd.grad(loss, params)
    worst = 0.0
    for p, g in zip(params, grads):
        numeric = torch.zeros_like(p)
        flat = p.data.view(-1)
        nflat = numeric.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            f_plus = fn().detach().item()
            flat[i] = orig - h
            f_minus = fn().detach().item()
            flat[i] = orig
            nflat[i] = (f_plus - f_minus) / (2.0 * h)
        scale = max(numeric.abs().max().item(), 1e-8)
        worst = max(worst, (g - numeric).abs().max().item() / scale)
    return worst


@pytest.fixture(scope="session")
def synth_corpus():
    """Small raw synthetic corpus: 2 speakers x 2 utterances x 2 s."""
    return data_mod.synth_dataset(2, 2, 2.0, seed=7)


@pytest.fixture(scope="session")
def normalized_corpus(synth_corpus):
    return data_mod.normalize_corpus(synth_corpus)


@pytest.fixture(scope="session")
def tiny_examples(normalized_corpus):
    utts, stats = normalized_corpus
    backend = stub_backend(48)
    return prepare_examples(utts, backend), stats, backend

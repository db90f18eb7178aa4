import numpy as np
import pytest
import torch

from ulsad.features import BackboneConfig
from ulsad.global_branch import GlobalAEConfig
from ulsad.local_branch import FRNConfig
from ulsad.trainer import ModelConfig

torch.set_num_threads(1)


def tiny_model_config(width=32, image_size=64, arch="resnet18"):
    bb = BackboneConfig(arch=arch, image_size=image_size, width=width, weights="random", seed=3)
    return ModelConfig(
        backbone=bb,
        frn=FRNConfig(in_channels=width, encoder_channels=(32, 48, 48), decoder_channels=(32, 32)),
        gae=GlobalAEConfig(image_size=image_size, out_channels=width, out_size=bb.feature_size,
                           encoder_channels=(8, 8, 16, 16, 16, 16), decoder_channels=16),
    )


@pytest.fixture
def tiny_config():
    return tiny_model_config()


@pytest.fixture
def tiny_images():
    gen = torch.Generator().manual_seed(11)
    return torch.rand(6, 3, 64, 64, generator=gen)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion; printed in the terminal summary."""
    store = request.config.__dict__.setdefault("_ulsad_acceptance", {})

    def record(number, ok, detail):
        store[number] = (bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    store = config.__dict__.get("_ulsad_acceptance")
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(store):
        ok, detail = store[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")

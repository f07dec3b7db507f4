import numpy as np
import pytest

from camseg.network import LayerSpec, NetworkSpec, build_network


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def toy_spec(head="gap", size=6, channels=2):
    """Tiny conv -> relu -> GAP -> head network for gradient checks."""
    layers = [LayerSpec("conv", out=channels, kernel=3, padding=1), LayerSpec("relu"), LayerSpec("gap")]
    if head == "deep":
        layers += [LayerSpec("dense", out=3), LayerSpec("relu")]
    layers.append(LayerSpec("dense", out=2))
    return NetworkSpec(f"toy-{head}", tuple(layers), input_size=(size, size))


@pytest.fixture
def toy_gap_net():
    return build_network(toy_spec("gap"), seed=3, precision="double")


@pytest.fixture
def toy_deep_net():
    return build_network(toy_spec("deep"), seed=4, precision="double")

import numpy as np
import pytest

from irpipe.frames import FrameStack, RawFrame
from irpipe.simulator import NoiseParams, build_noise_model


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def default_model():
    return build_noise_model(11, NoiseParams(width=96, height=64))


@pytest.fixture(scope="session")
def ideal_model():
    return build_noise_model(3, NoiseParams.ideal(width=64, height=48))


def make_frame(values, fpa=25.0, depth=14):
    return RawFrame(np.asarray(values), fpa_temp_c=fpa, bit_depth=depth)


def make_stack(arrays, fpa=25.0, depth=14):
    return FrameStack(tuple(make_frame(a, fpa, depth) for a in arrays))

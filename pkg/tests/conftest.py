import numpy as np
import pytest

from slice_model import ImagingSetup, build_slice_kernels


def small_setup(**overrides) -> ImagingSetup:
    """8x8 grid, 4 elements, 32 samples: every operator here fits in a dense matrix."""
    kw = dict(num_elements=4, element_pitch=1.0e-3, grid_nz=8, grid_nx=8, grid_pitch_z=0.5e-3,
              grid_pitch_x=0.5e-3, grid_origin=-0.5e-3, grid_depth_offset=2.0e-3, sound_speed=1500.0,
              sampling_rate=3.0e6, pulse_center_freq=0.75e6, pulse_sigma=0.5e-6, num_samples=32)
    kw.update(overrides)
    return ImagingSetup(**kw)


@pytest.fixture(scope="session")
def setup():
    return small_setup()


@pytest.fixture(scope="session")
def model(setup):
    return build_slice_kernels(setup)


@pytest.fixture(scope="session")
def desk_model():
    return build_slice_kernels(ImagingSetup())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

import numpy as np
import pytest

from obsmae.core import GridSpec, ModalityKind, ModalitySpec

START = np.datetime64("2024-02-01T00", "h")


@pytest.fixture
def small_grid():
    """1-degree band, 48 rows x 96 columns, 48-cell windows of 16-cell patches."""
    return GridSpec(resolution_deg=1.0, n_lat=48, n_lon=96, window=48, patch=16, lat_origin=-23.5, lon_origin=-180.0)


@pytest.fixture
def specs():
    return [
        ModalitySpec("geo", ModalityKind.GEO, 2, coverage_target=0.6),
        ModalitySpec("sounder", ModalityKind.PROFILE, 2, levels=(500.0, 850.0), coverage_target=0.2),
        ModalitySpec("surface", ModalityKind.STATIC, 2, temporal=False, channel_labels=("elevation", "land")),
    ]


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """24 hours on the small grid: imager, sounder and surface fields, with stats."""
    from obsmae.core import compute_norm_stats
    from obsmae.datastore import write_dataset
    from obsmae.synthgen import generate_latent, observe

    grid = GridSpec(resolution_deg=1.0, n_lat=48, n_lon=96, window=48, patch=16, lat_origin=-23.5, lon_origin=-180.0)
    specs = [
        ModalitySpec("geo", ModalityKind.GEO, 2, coverage_target=0.6),
        ModalitySpec("sounder", ModalityKind.PROFILE, 2, levels=(500.0, 850.0), coverage_target=0.3),
        ModalitySpec("surface", ModalityKind.STATIC, 2, temporal=False, channel_labels=("elevation", "land")),
    ]
    lat = generate_latent(0, grid, 24, 4, pressures=[200, 500, 700, 850])
    cubes = [observe(lat, s, 0, {"noise_sigma": 0.1}) for s in specs]
    man = write_dataset(cubes, tmp_path_factory.mktemp("tiny") / "ds", grid, specs, START)
    stats = {n: compute_norm_stats(man, n) for n in man.names}
    return man, stats

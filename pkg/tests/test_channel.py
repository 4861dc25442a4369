import numpy as np
import pytest
from scipy import stats

from epcnet.channel import (
    ChannelSample,
    Dataset,
    GeometryConfig,
    SystemConfig,
    _geometry_parts,
    esn0_to_noise,
    load_dataset,
    sample_geometry,
    sample_rayleigh,
    sample_rayleigh_batch,
    sample_rician,
    sample_rician_batch,
    save_dataset,
)


def test_esn0_to_noise_examples():
    assert esn0_to_noise(10.0, 1.0) == pytest.approx(0.1, rel=1e-12)
    assert esn0_to_noise(0.0, 1.0) == 1.0
    assert esn0_to_noise(5.0, 2.0) == pytest.approx(2.0 / 10 ** 0.5, rel=1e-12)


def test_esn0_to_noise_rejects_bad_input():
    with pytest.raises(ValueError):
        esn0_to_noise(float("nan"), 1.0)
    with pytest.raises(ValueError):
        esn0_to_noise(10.0, float("inf"))
    with pytest.raises(ValueError):
        esn0_to_noise(10.0, 0.0)


def test_system_config_validation():
    with pytest.raises(ValueError):
        SystemConfig(k=0, noise_power=0.1)
    with pytest.raises(ValueError):
        SystemConfig(k=2, noise_power=-1.0)
    with pytest.raises(ValueError):
        SystemConfig(k=2, noise_power=0.2, esn0_db=10.0)  # inconsistent
    cfg = SystemConfig.from_esn0(4, 10.0)
    assert cfg.noise_power == pytest.approx(0.1, rel=1e-13)


def test_channel_sample_validation():
    with pytest.raises(ValueError):
        ChannelSample(np.array([[1.0, 0.1]]), 0.1)  # not square
    with pytest.raises(ValueError):
        ChannelSample(np.array([[1.0, -0.1], [0.1, 1.0]]), 0.1)
    with pytest.raises(ValueError):
        ChannelSample(np.array([[0.0, 0.1], [0.1, 1.0]]), 0.1)  # zero direct link
    with pytest.raises(ValueError):
        ChannelSample(np.eye(2), 0.0)


@pytest.fixture(scope="module")
def rayleigh_big():
    cfg = SystemConfig.from_esn0(10, 10.0)
    return sample_rayleigh_batch(cfg, 10_000, np.random.default_rng(1234))


def test_rayleigh_mean_is_one(rayleigh_big):
    assert rayleigh_big.size == 1_000_000
    assert rayleigh_big.mean() == pytest.approx(1.0, abs=0.01)


def test_rayleigh_exponential_tail(rayleigh_big):
    tail = (rayleigh_big > 1.0).mean()
    assert tail == pytest.approx(np.exp(-1.0), abs=0.005)


def test_rayleigh_ks_against_exponential(rayleigh_big):
    draws = rayleigh_big.ravel()[:100_000]
    result = stats.kstest(draws, "expon")
    assert result.pvalue > 0.01


def test_rayleigh_determinism():
    cfg = SystemConfig.from_esn0(3, 10.0)
    a = sample_rayleigh(cfg, np.random.default_rng(7))
    b = sample_rayleigh(cfg, np.random.default_rng(7))
    assert np.array_equal(a.gains, b.gains)
    assert a.noise_power == cfg.noise_power


def test_rician_zero_los_limit_matches_rayleigh_stats():
    cfg = SystemConfig.from_esn0(10, 10.0)
    gains = sample_rician_batch(cfg, -200.0, 10_000, np.random.default_rng(5))
    assert gains.mean() == pytest.approx(1.0, abs=0.01)
    # kappa ~ 1e-20: the line-of-sight part is negligible, so the gains
    # must look exponential.
    result = stats.kstest(gains.ravel()[:100_000], "expon")
    assert result.pvalue > 0.01


def test_rician_unit_mean_at_0db_factor():
    cfg = SystemConfig.from_esn0(10, 10.0)
    gains = sample_rician_batch(cfg, 0.0, 10_000, np.random.default_rng(6))
    assert gains.mean() == pytest.approx(1.0, abs=0.01)


def test_rician_determinism():
    cfg = SystemConfig.from_esn0(4, 0.0)
    a = sample_rician(cfg, 0.0, np.random.default_rng(9))
    b = sample_rician(cfg, 0.0, np.random.default_rng(9))
    assert np.array_equal(a.gains, b.gains)


def test_geometry_gain_composition():
    cfg = SystemConfig.from_esn0(5, 10.0)
    geo = GeometryConfig(area_side=10.0)
    dist, fading, gains = _geometry_parts(cfg, geo, 2000, np.random.default_rng(11))
    assert np.array_equal(gains, fading / (1.0 + dist * dist))
    # Pathloss never exceeds one, so the fading draw dominates samplewise.
    assert np.all(gains <= fading)
    # d = 3 with unit fading power gives exactly 1 / 10.
    assert 1.0 / (1.0 + 3.0 ** 2) == pytest.approx(0.1, rel=1e-15)


def test_geometry_zero_distance_is_exponential():
    cfg = SystemConfig.from_esn0(5, 10.0)
    geo = GeometryConfig()
    _, fading, _ = _geometry_parts(cfg, geo, 4000, np.random.default_rng(12))
    # With d = 0 the gain equals the small-scale fading power; that draw
    # must be exponential(1).
    result = stats.kstest(fading.ravel(), "expon")
    assert result.pvalue > 0.01


def test_geometry_determinism_and_bounds():
    cfg = SystemConfig.from_esn0(3, 10.0)
    geo = GeometryConfig(area_side=10.0)
    a = sample_geometry(cfg, geo, np.random.default_rng(2))
    b = sample_geometry(cfg, geo, np.random.default_rng(2))
    assert np.array_equal(a.gains, b.gains)
    assert np.all(a.gains >= 0.0)


def test_geometry_config_validation():
    with pytest.raises(ValueError):
        GeometryConfig(area_side=0.0)
    with pytest.raises(ValueError):
        GeometryConfig(pathloss="free-space")


def test_dataset_roundtrip(tmp_path):
    cfg = SystemConfig.from_esn0(4, 10.0)
    gains = sample_rayleigh_batch(cfg, 50, np.random.default_rng(3))
    ds = Dataset(gains, np.full(50, cfg.noise_power),
                 {"model": "rayleigh", "seed": 3, "esn0_db": 10.0})
    path = tmp_path / "ds.chan"
    save_dataset(path, ds)
    loaded = load_dataset(path)
    assert np.array_equal(loaded.gains, ds.gains)
    assert np.array_equal(loaded.noise_powers, ds.noise_powers)
    assert loaded.meta["model"] == "rayleigh"
    assert loaded.meta["seed"] == 3
    assert loaded.meta["count"] == 50
    assert loaded.meta["k"] == 4
    # Re-saving the loaded dataset reproduces the file byte for byte.
    path2 = tmp_path / "ds2.chan"
    save_dataset(path2, loaded)
    assert path.read_bytes() == path2.read_bytes()


def test_dataset_rejects_corrupt_file(tmp_path):
    path = tmp_path / "bad.chan"
    path.write_bytes(b"NOTADATASET")
    with pytest.raises(ValueError):
        load_dataset(path)


def test_dataset_sample_view():
    gains = np.abs(np.random.default_rng(0).standard_normal((3, 2, 2))) + 0.1
    ds = Dataset(gains, np.array([0.1, 0.2, 0.3]), {})
    s = ds.sample(1)
    assert s.noise_power == 0.2
    assert np.array_equal(s.gains, gains[1])
    assert ds.subset([0, 2]).count == 2

import numpy as np
import pytest

from epcnet.channel import ChannelSample, Dataset, SystemConfig, sample_rayleigh_batch
from epcnet.ensemble import (
    Ensemble,
    FALLBACK_INDEX,
    evaluate_prefixes,
    hit_rate,
    load_ensemble,
    save_manifest,
    select,
    select_batch,
    selection_histogram,
)
from epcnet.metrics import QosSpec, check_profile_feasible_batch, sum_rate
from epcnet.pcnet import build_model, infer, round_binary, save_pcnet


def rigged_member(k, bias, seed=0, task="srm", qos=None, lam=None):
    """Member whose sigmoid outputs sit at sigmoid(bias) for every user."""
    m = build_model(k, np.random.default_rng(seed), task=task, qos=qos,
                    penalty_weight=lam, shape=(2 * k, k))
    m.params.layers[-1].weight[:] = 0.0
    m.params.layers[-1].bias[:] = bias
    return m


def random_members(k, n, seed=0, **kwargs):
    return [
        build_model(k, np.random.default_rng(seed + i), shape=(2 * k, 4 * k, k),
                    **kwargs)
        for i in range(n)
    ]


def srm_dataset(k, n, seed=0, esn0=10.0):
    cfg = SystemConfig.from_esn0(k, esn0)
    gains = sample_rayleigh_batch(cfg, n, np.random.default_rng(seed))
    return Dataset(gains, np.full(n, cfg.noise_power), {"model": "rayleigh"})


def test_ensemble_validation():
    members = random_members(3, 2)
    assert Ensemble(members).size == 2
    with pytest.raises(ValueError):
        Ensemble([])
    with pytest.raises(ValueError):
        Ensemble([members[0], build_model(3, np.random.default_rng(9),
                                          shape=(9, 3))])


def test_select_argmax_over_raw_outputs():
    # srm_qc with zero targets: raw outputs compete, no rounding, so the
    # member with the largest output wins (single-user rate is monotone).
    qos = QosSpec(np.zeros(1))
    members = [rigged_member(1, b, seed=i, task="srm_qc", qos=qos, lam=1.0)
               for i, b in enumerate([-1.0, 2.0, 0.5])]
    e = Ensemble(members)
    s = ChannelSample(np.array([[1.0]]), 0.1)
    profile, record = select(e, s, np.random.default_rng(0))
    assert record.chosen == 1
    assert not record.tie
    assert record.member_rates.argmax() == 1
    assert profile == pytest.approx(infer(members[1], s))


def test_select_breaks_exact_ties_uniformly():
    # Three SRM members whose rounded profiles coincide pairwise: outputs
    # 0.9 and 0.6 both round to full power.
    members = [rigged_member(1, b, seed=i) for i, b in enumerate([2.0, 0.5, -3.0])]
    e = Ensemble(members)
    s = ChannelSample(np.array([[1.0]]), 0.1)
    rng = np.random.default_rng(1)
    picks = [select(e, s, rng)[1] for _ in range(300)]
    assert all(r.tie for r in picks)
    counts = np.bincount([r.chosen for r in picks], minlength=3)
    assert counts[2] == 0  # rounded to zero power, strictly worse
    assert counts[0] > 60 and counts[1] > 60  # roughly uniform between ties


def test_select_single_member_identity():
    members = random_members(3, 1, seed=5)
    e = Ensemble(members)
    s = ChannelSample(srm_dataset(3, 1, seed=6).gains[0], 0.1)
    profile, record = select(e, s, np.random.default_rng(2))
    expected = round_binary(infer(members[0], s), 1.0)
    assert np.array_equal(profile, expected)
    assert record.chosen == 0


def test_selected_rate_equals_max_member_rate():
    ds = srm_dataset(4, 64, seed=7)
    e = Ensemble(random_members(4, 3, seed=8))
    profiles, chosen, member_rates, _ = select_batch(
        e, ds.gains, ds.noise_powers, np.random.default_rng(3)
    )
    for i in range(ds.count):
        assert member_rates[i, chosen[i]] == member_rates[i].max()
        assert sum_rate(ds.sample(i), profiles[i]) == pytest.approx(
            member_rates[i].max(), rel=1e-12
        )


def test_prefix_rates_monotone_in_m():
    ds = srm_dataset(4, 128, seed=9)
    e = Ensemble(random_members(4, 5, seed=10))
    ev = evaluate_prefixes(e, ds.gains, ds.noise_powers, np.random.default_rng(4))
    means = ev.selected_rates.mean(axis=1)
    assert np.all(np.diff(means) >= 0.0)
    # per-sample monotonicity is exact
    assert np.all(np.diff(ev.selected_rates, axis=0) >= 0.0)


def qc_setup(k=2, n=50, r=0.35, seed=11):
    qos = QosSpec(np.full(k, r))
    cfg = SystemConfig.from_esn0(k, 10.0)
    from epcnet.pcnet import FadingStream, FeasibleStream

    stream = FeasibleStream(FadingStream(cfg), qos, 1.0)
    gains, noise = stream(n, np.random.default_rng(seed))
    return qos, Dataset(gains, noise, {})


def test_hit_rate_counts_raw_coverage():
    qos, ds = qc_setup()
    # one member outputs ~full power (almost always feasible), one ~zero
    good = rigged_member(2, 4.0, seed=12, task="srm_qc", qos=qos, lam=10.0)
    bad = rigged_member(2, -8.0, seed=13, task="srm_qc", qos=qos, lam=10.0)
    hr_bad = hit_rate(Ensemble([bad]), ds, qos)
    hr_both = hit_rate(Ensemble([bad, good]), ds, qos)
    assert hr_bad < 0.5
    assert hr_both >= hr_bad  # union of hit sets
    manual = 0
    from epcnet.metrics import check_profile_feasible

    for i in range(ds.count):
        s = ds.sample(i)
        ok = any(
            check_profile_feasible(s, infer(m, s), qos, 1.0) for m in (bad, good)
        )
        manual += ok
    assert hr_both == pytest.approx(manual / ds.count)


def test_hit_rate_zero_targets_is_one():
    qos = QosSpec(np.zeros(2))
    ds = srm_dataset(2, 40, seed=14)
    members = [rigged_member(2, -5.0, seed=15, task="srm_qc", qos=qos, lam=1.0)]
    assert hit_rate(Ensemble(members), ds, qos) == 1.0


def test_hit_rate_rejects_infeasible_dataset():
    qos = QosSpec(np.array([5.0, 5.0]))
    gains = np.array([[[1.0, 1.0], [1.0, 1.0]]])
    ds = Dataset(gains, np.array([0.1]), {})
    members = [rigged_member(2, 0.0, task="srm_qc", qos=qos, lam=1.0)]
    with pytest.raises(ValueError):
        hit_rate(Ensemble(members), ds, qos)


def test_qc_selection_always_feasible():
    qos, ds = qc_setup(n=80, seed=16)
    # members biased toward zero output: most instances need the fallback
    members = [rigged_member(2, -6.0 + i, seed=17 + i, task="srm_qc",
                             qos=qos, lam=10.0) for i in range(3)]
    e = Ensemble(members)
    profiles, chosen, _, _ = select_batch(
        e, ds.gains, ds.noise_powers, np.random.default_rng(5)
    )
    ok = check_profile_feasible_batch(ds.gains, ds.noise_powers, profiles, qos, 1.0)
    assert np.all(ok)
    assert np.any(chosen == FALLBACK_INDEX)  # the fallback really fired


def test_selection_histogram_counts():
    ds = srm_dataset(3, 200, seed=18)
    e1 = Ensemble(random_members(3, 1, seed=19))
    counts = selection_histogram(e1, ds, np.random.default_rng(6))
    assert counts.tolist() == [200]

    e3 = Ensemble(random_members(3, 3, seed=20))
    counts = selection_histogram(e3, ds, np.random.default_rng(7))
    assert counts.sum() == 200
    assert counts.shape == (3,)


def test_manifest_roundtrip(tmp_path):
    members = random_members(2, 3, seed=21)
    paths = []
    for i, m in enumerate(members):
        p = tmp_path / f"member_{i}.model"
        save_pcnet(p, m)
        paths.append(p)
    manifest = tmp_path / "ensemble.manifest.json"
    save_manifest(manifest, paths, meta={"k": 2})
    loaded = load_ensemble(manifest)
    assert loaded.size == 3
    s = ChannelSample(srm_dataset(2, 1, seed=22).gains[0], 0.1)
    for orig, back in zip(members, loaded.members):
        assert np.array_equal(infer(orig, s), infer(back, s))
    # tampering with a member file breaks the combined hash
    paths[1].write_bytes(paths[1].read_bytes() + b"x")
    with pytest.raises(ValueError):
        load_ensemble(manifest)

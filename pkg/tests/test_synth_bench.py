import math

import numpy as np
import pytest

from fusebench.bench import (
    METRIC_NAMES, SPLITS, VARIANTS, build_data, gen_trials, run_benchmark, split_identities,
)
from fusebench.core import DataError
from fusebench.synth import SynthConfig, gen_identities, gen_observations, observe

SMALL = SynthConfig(n_identities=70, samples_per_identity=12, quality_identities=20, cohort_identities=10,
                    trials=300, quality_epochs=2, top_k=50)


def test_observe_zero_noise_is_prototype():
    rng = np.random.default_rng(0)
    p = gen_identities(SynthConfig(n_identities=3), "face", rng)[0]
    assert np.array_equal(observe(p, 0.0, rng), p)
    assert np.linalg.norm(observe(p, 0.5, rng)) == pytest.approx(1.0, abs=1e-12)


def test_observations_two_tier_and_named():
    cfg = SynthConfig(n_identities=5, p_degraded=0.5)
    rng = np.random.default_rng(1)
    obs = gen_observations(cfg, gen_identities(cfg, "speaker", rng), "speaker", rng)
    assert len(obs) == 5 * cfg.samples_per_identity
    assert obs[0].id == "id00000/0" and obs[0].identity == "id00000"
    sig = np.array([e.true_noise for e in obs])
    low = sig == cfg.noise_low
    assert 0 < low.sum() < sig.size
    assert np.all((sig[~low] >= cfg.noise_low) & (sig[~low] <= cfg.noise_high))
    assert all(e.values.shape == (cfg.dim_speaker,) for e in obs)


def test_generation_deterministic():
    a, b = build_data(SMALL), build_data(SMALL)
    ea = a["observations"]["face"]["id00003"]
    eb = b["observations"]["face"]["id00003"]
    assert ea == eb


def test_config_validation():
    with pytest.raises(DataError):
        SynthConfig(noise_low=1.0, noise_high=0.5)
    with pytest.raises(DataError):
        SynthConfig.from_mapping({"nonsense": 1})
    assert SynthConfig.from_mapping({"seed": 3}).seed == 3


def test_splits_disjoint():
    split = split_identities(SMALL, np.random.default_rng(0))
    names = [i for v in split.values() for i in v]
    assert len(names) == len(set(names)) == SMALL.n_identities


def test_trials_labels_and_target_count():
    data = build_data(SMALL)
    trials = gen_trials(SMALL, "dev", data["split"]["dev"], data["observations"], data["rng"])
    assert len(trials) == SMALL.trials
    assert sum(t.label == "target" for t in trials) == round(SMALL.target_fraction * SMALL.trials)
    for t in trials:
        assert (t.enroll in t.members) == (t.label == "target")
        assert 1 <= len(t.members) <= SMALL.k_max
        assert len(t.segments["face"]) == len(t.members) * SMALL.segments_per_identity


@pytest.fixture(scope="module")
def small_report():
    return run_benchmark(SMALL)


def test_report_shape(small_report):
    assert set(small_report.rows) == set(VARIANTS)
    for v in VARIANTS:
        for s in SPLITS:
            for m in METRIC_NAMES:
                assert math.isfinite(small_report.rows[v][s][m])
    lines = small_report.to_tsv().splitlines()
    assert lines[0].split("\t") == ["variant"] + [f"{s}_{m}" for s in SPLITS for m in METRIC_NAMES]
    assert [ln.split("\t")[0] for ln in lines[1:]] == list(VARIANTS)
    assert small_report.extras["target_fraction"]["dev"] == pytest.approx(SMALL.target_fraction)


def test_report_deterministic_and_thread_invariant(small_report):
    again = run_benchmark(SMALL, threads=4)
    assert again.to_tsv() == small_report.to_tsv()
    assert again.to_json() == small_report.to_json()
    for s in SPLITS:
        assert again.raw[s] == small_report.raw[s]


def test_prototypes_unit_and_spread():
    cfg = SynthConfig(n_identities=50, dim_face=64)
    a = gen_identities(cfg, "face", np.random.default_rng(4))
    b = gen_identities(cfg, "face", np.random.default_rng(4))
    assert np.array_equal(a, b)
    np.testing.assert_allclose(np.linalg.norm(a, axis=1), 1.0, atol=1e-12)
    c = np.abs(a @ a.T)[np.triu_indices(50, 1)]
    assert c.mean() < 0.3


def test_cosine_to_prototype_falls_with_noise():
    rng = np.random.default_rng(5)
    p = gen_identities(SynthConfig(n_identities=2), "speaker", rng)[0]
    means = [np.mean([observe(p, s, rng) @ p for _ in range(10000)]) for s in (0.1, 0.5, 1.0, 2.0)]
    assert all(a > b for a, b in zip(means, means[1:]))


def test_single_identity_targets():
    cfg = SMALL.with_(k_max=1)
    data = build_data(cfg)
    trials = gen_trials(cfg, "dev", data["split"]["dev"], data["observations"], data["rng"])
    for t in trials:
        if t.label == "target":
            assert t.members == (t.enroll,)
    again = build_data(cfg)
    trials2 = gen_trials(cfg, "dev", again["split"]["dev"], again["observations"], again["rng"])
    assert [t.label for t in trials] == [t.label for t in trials2]


def test_zero_noise_separates_perfectly():
    from fusebench import metrics

    cfg = SMALL.with_(noise_low=0.0, noise_high=0.1, p_degraded=0.0, nuisance_shift=0.0, k_max=1)
    data = build_data(cfg)
    trials = gen_trials(cfg, "dev", data["split"]["dev"], data["observations"], data["rng"])
    obs = data["observations"]["face"]
    scores = {"target": [], "nontarget": []}
    for t in trials:
        enroll = np.mean([e.values for e in obs[t.enroll][:cfg.enroll_size]], axis=0)
        test = np.mean([e.values for e in t.segments["face"]], axis=0)
        scores[t.label].append(enroll @ test / (np.linalg.norm(enroll) * np.linalg.norm(test)))
    assert metrics.eer(scores["target"], scores["nontarget"]) == 0.0


def test_lr_at_least_as_good_as_best_single_on_training_split(small_report):
    rows = small_report.rows
    best = min(rows["audio-only"]["dev"]["act_c"], rows["visual-only"]["dev"]["act_c"])
    assert rows["lr"]["dev"]["act_c"] <= best


def test_single_modality_eer_grows_with_noise():
    means = []
    for noise_high in (0.6, 1.0, 1.5):
        eers = []
        for seed in range(5):
            rows = run_benchmark(SMALL.with_(noise_high=noise_high, seed=seed)).rows
            eers.append([rows["audio-only"]["eval"]["eer"], rows["visual-only"]["eval"]["eer"]])
        means.append(np.mean(eers, axis=0))
    assert np.all(means[0] < means[1]) and np.all(means[1] < means[2])

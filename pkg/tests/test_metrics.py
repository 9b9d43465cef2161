import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpcss.config import ARCHS, SeparatorConfig
from dpcss.metrics import (
    BUCKETS,
    MetricError,
    count_macs,
    count_params,
    overlap_bucket,
    overlap_ratio,
    pit_loss,
    pit_snr_objective,
    psm_target,
    snr,
    window_overlap_ratios,
    window_snr_report,
    workload_frames,
)
from dpcss.pipeline import Separator
from dpcss.tensor import ShapeError, Tensor, grad_check


def test_snr_closed_form():
    ref = np.array([3.0, 4.0])
    assert snr(ref * 0.9, ref) == pytest.approx(20.0)  # error is 10% of the amplitude
    assert snr(np.zeros(2), ref) == pytest.approx(0.0)
    assert snr(ref, ref) == pytest.approx(100.0)  # floored error energy


def test_snr_errors():
    with pytest.raises(MetricError):
        snr(np.ones(3), np.zeros(3))
    with pytest.raises(ShapeError):
        snr(np.ones(3), np.ones(4))


def test_pit_picks_swapped_pairing():
    rng = np.random.default_rng(0)
    r = rng.normal(size=(2, 100))
    res = pit_loss([r[1] + 0.01, r[0]], list(r))
    assert res.permutation == (1, 0) and res.swapped


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_pit_is_swap_invariant(seed):
    rng = np.random.default_rng(seed)
    e, r = rng.normal(size=(2, 50)), rng.normal(size=(2, 50))
    a, b = pit_loss(list(e), list(r)), pit_loss(list(e[::-1]), list(r))
    assert a.loss == pytest.approx(b.loss, abs=1e-12)


def brute_force_objective(est, refs, floor):
    total = 0.0
    for e, r in zip(est, refs):
        tau = floor * (r ** 2).sum()
        best = -np.inf
        for perm in itertools.permutations(range(2)):
            vals = []
            for c in range(2):
                re = (r[perm[c]] ** 2).sum()
                err = ((r[perm[c]] - e[c]) ** 2).sum()
                vals.append(10 * np.log10((re + tau) / (err + 1e-10 * re + tau)))
            best = max(best, np.mean(vals))
        total -= best
    return total / len(est)


def test_objective_matches_enumeration_and_gradient():
    rng = np.random.default_rng(1)
    refs = rng.normal(size=(4, 2, 30))
    refs[1, 1] = 0.0  # silent reference
    est = Tensor(refs[:, ::-1] + 0.3 * rng.normal(size=refs.shape))
    loss, perms = pit_snr_objective(est, refs)
    assert loss.item() == pytest.approx(brute_force_objective(est.data, refs, 1e-4), abs=1e-10)
    assert np.all(np.isfinite(loss.data))
    assert tuple(perms[0]) == (1, 0)
    assert grad_check(lambda t: pit_snr_objective(t, refs)[0], est, max_coords=30) < 1e-5


def test_psm_target_values():
    y = np.array([[2.0 + 0j, 1.0 + 0j, 1.0 + 0j]])
    s = np.array([[1.0 + 0j, -1.0 + 0j, 3.0 + 0j]])
    np.testing.assert_allclose(psm_target(s, y), [[0.5, 0.0, 1.0]])
    np.testing.assert_allclose(psm_target(s, y, clip=False), [[0.5, -1.0, 3.0]])


def test_overlap_ratio_and_buckets():
    act = np.array([[1, 1, 1, 0, 0], [0, 1, 1, 1, 0]], bool)
    assert overlap_ratio(act) == pytest.approx(0.5)
    with pytest.raises(MetricError):
        overlap_ratio(np.zeros((2, 3), bool))
    assert [overlap_bucket(x) for x in (0.0, 0.1, 0.25, 0.5, 0.75, 1.0)] == [
        "0", "0-25", "25-50", "50-75", "75-100", "75-100"]


def test_bucket_counts_sum_to_non_silent_windows():
    rng = np.random.default_rng(2)
    act = rng.random((2, 300)) < 0.3
    act[:, 100:160] = False
    ratios = window_overlap_ratios(act, 50, 25)
    report = window_snr_report(rng.normal(size=len(ratios)), ratios)
    assert sum(report.counts.values()) + report.silent_windows == len(ratios)
    assert report.silent_windows >= 1
    assert [row["bucket"] for row in report.rows()] == list(BUCKETS)
    with pytest.raises(MetricError):
        window_overlap_ratios(np.ones(10), 5, 2)


def test_tiny_transformer_baseline_parameter_count():
    # embed 257*32+32, two layers of 4*32^2+3*32+2*32*64+64+32+4*32, head 32*514+514
    cfg = SeparatorConfig(arch="transformer-baseline", feature_dim=32, n_heads=2, ff_dim=64, repeats=2)
    assert count_params(cfg).total_params == 42242
    assert Separator(cfg).num_parameters() == 42242


def test_full_transformer_baseline_parameter_count():
    cfg = SeparatorConfig(arch="transformer-baseline")
    assert count_params(cfg).total_params == 66048 + 10 * 789504 + 132098


@pytest.mark.parametrize("arch", ARCHS)
@pytest.mark.parametrize("online", [False, True])
def test_analytic_counts_match_built_models(arch, online):
    if online and arch != "dp-blstm":
        return
    kw = dict(arch=arch, feature_dim=8, rnn_hidden=6, n_heads=2, ff_dim=12, fft_size=32, online=online)
    if arch == "dp-transformer-boosted":
        kw["repeats"] = 4
    cfg = SeparatorConfig(**kw)
    assert count_params(cfg).total_params == Separator(cfg).num_parameters()


def test_lambda_one_mac_ratio_is_exactly_one():
    frames = workload_frames(60.0)
    plain = count_macs(SeparatorConfig(arch="dp-transformer"), frames).total_macs
    boosted = count_macs(SeparatorConfig(arch="dp-transformer-boosted", sampling_factor=1), frames).total_macs
    assert plain == boosted


def test_embedding_macs_follow_convention():
    cfg = SeparatorConfig(arch="transformer-baseline", feature_dim=8, n_heads=2, ff_dim=12, fft_size=32,
                          window_frames=10, hop_frames=5, repeats=1)
    rep = count_macs(cfg, 30)
    assert rep.workload["windows"] == 5
    embed = rep.layers[0]
    assert embed.name == "embed" and embed.macs == 5 * 10 * 17 * 8
    # one layer: 4Td^2 + 2T^2 d + 2 T d ff per window
    assert rep.layers[1].macs == 5 * (4 * 10 * 64 + 2 * 100 * 8 + 2 * 10 * 8 * 12)
    assert workload_frames(1.0) == 63

import math

import numpy as np
import pytest
from scipy import stats

from ratelab import inference, simenc
from ratelab.inference import (
    BoundsFitError,
    BoundsModel,
    FeedbackConfig,
    FeedbackController,
    LogBound,
    feedback_adjust,
    fit_bounds,
    load_bounds,
    save_bounds,
    truncated_keep,
    truncated_sample,
)

from conftest import FAST_CONFIG


# ---------------------------------------------------------------------------
# Truncated sampling
# ---------------------------------------------------------------------------

def test_keep_set_ties_toward_lower_qp(rng):
    logits = np.zeros(256)
    kept = truncated_keep(logits, 15)
    assert list(kept) == list(range(15))


def test_dominant_logit_always_sampled(rng):
    logits = np.zeros(256)
    logits[77] = 100.0
    samples = {truncated_sample(logits, rng) for _ in range(200)}
    assert samples == {77}


def test_samples_stay_in_keep_set(rng):
    logits = rng.normal(size=256)
    kept = set(truncated_keep(logits, 15))
    for _ in range(2000):
        assert truncated_sample(logits, rng) in kept


def test_kept_probabilities_match_renormalized_softmax(rng):
    logits = rng.normal(size=256) * 2.0
    kept = truncated_keep(logits, 15)
    z = logits[kept] - logits[kept].max()
    expected = np.exp(z) / np.exp(z).sum()
    n = 100_000
    counts = np.zeros(15)
    lookup = {int(q): i for i, q in enumerate(kept)}
    for _ in range(n):
        counts[lookup[truncated_sample(logits, rng)]] += 1
    chi2 = stats.chisquare(counts, expected * n)
    assert chi2.pvalue > 0.01


def test_non_finite_logits_rejected(rng):
    logits = np.zeros(256)
    logits[3] = np.inf
    with pytest.raises(ValueError):
        truncated_sample(logits, rng)
    with pytest.raises(ValueError):
        truncated_keep(np.zeros(100), 15)


# ---------------------------------------------------------------------------
# Envelope fitting
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def envelope_traces():
    """Policy-like trajectories: baseline QPs with mild per-episode drift,
    so final bitrates cluster around the 512 kbps target."""
    from ratelab.baseline import run_baseline

    videos = simenc.generate_corpus(25, master_seed=31, config=FAST_CONFIG)
    rng = np.random.default_rng(4)
    traces = []
    for v in videos:
        gop = simenc.plan_gop(v)
        base = run_baseline(v, gop, 512.0)
        shift = rng.integers(-2, 3)
        qps = [
            int(np.clip(q + shift + rng.normal(0, 1.5), 0, 255)) for q in base.qps
        ]
        traces.append(simenc.replay_qp_sequence(v, gop, qps, 512.0))
    return traces


def test_fit_bounds_brackets_trajectories(envelope_traces):
    model = fit_bounds(envelope_traces, 512.0)
    xs = np.linspace(0.0, 1.0, 101)
    lower = model.lower(xs)
    upper = model.upper(xs)
    assert np.all(lower < upper)
    # Per-position coverage should hold at roughly the envelope quantiles
    # away from the tightened end.
    mid = xs <= 0.9
    per_step = []
    for trace in envelope_traces:
        cum = np.concatenate([[0.0], np.cumsum(trace.bits)])
        duration = math.fsum(trace.bits) / trace.bitrate_kbps / 1000.0
        cum_kbps = np.interp(xs, np.linspace(0, 1, trace.num_frames + 1), cum / duration / 1000.0)
        per_step.append((cum_kbps >= lower - 1e-9) & (cum_kbps <= upper + 1e-9))
    coverage = np.mean(np.vstack(per_step), axis=0)
    assert np.all(coverage[mid] >= 0.8)


def test_fit_bounds_end_gap(envelope_traces):
    model = fit_bounds(envelope_traces, 512.0)
    gap = model.upper(1.0) - model.lower(1.0)
    assert gap <= 0.10 * 512.0 + 1e-9
    assert model.lower(1.0) <= 512.0 + 1e-6
    assert model.upper(1.0) >= 512.0 - 1e-6


def test_fit_bounds_degenerate_straight_line():
    # All traces identical, heading straight to the target.
    v = simenc.generate_corpus(1, master_seed=5, config=FAST_CONFIG)[0]
    gop = simenc.plan_gop(v)
    base = simenc.replay_qp_sequence(v, gop, [150] * v.num_frames, 512.0)
    target = base.bitrate_kbps
    traces = [simenc.replay_qp_sequence(v, gop, [150] * v.num_frames, target)] * 30
    model = fit_bounds(traces, target)
    xs = np.linspace(0, 1, 50)
    duration = math.fsum(base.bits) / base.bitrate_kbps / 1000.0
    cum = np.interp(xs, np.linspace(0, 1, v.num_frames + 1), np.concatenate([[0], np.cumsum(base.bits)]) / duration / 1000.0)
    assert np.all(model.lower(xs) <= cum + 1e-6)
    assert np.all(model.upper(xs) >= cum - 1e-6)
    assert abs(model.upper(1.0) - model.lower(1.0)) <= 0.10 * target + 1e-9


def test_fit_bounds_needs_enough_traces(envelope_traces):
    with pytest.raises(BoundsFitError):
        fit_bounds(envelope_traces[:5], 512.0)


def test_fit_bounds_rejects_mixed_targets(envelope_traces):
    with pytest.raises(ValueError):
        fit_bounds(envelope_traces, 480.0)


def test_bounds_serialization_roundtrip(tmp_path, envelope_traces):
    model = fit_bounds(envelope_traces, 512.0)
    path = tmp_path / "bounds.json"
    save_bounds(path, model)
    loaded = load_bounds(path)
    assert loaded.lower.coefficients() == model.lower.coefficients()
    assert loaded.upper.coefficients() == model.upper.coefficients()
    assert loaded.target_bitrate_kbps == model.target_bitrate_kbps


def test_bounds_schema_guard(tmp_path):
    from ratelab.io import SchemaError

    path = tmp_path / "bounds.json"
    path.write_text('{"schema": "bounds.v9"}')
    with pytest.raises(SchemaError):
        load_bounds(path)


# ---------------------------------------------------------------------------
# Feedback adjustment
# ---------------------------------------------------------------------------

def test_adjust_identity_inside_bounds():
    for i in (1, 10, 40):
        assert feedback_adjust(i, 500.0, 400.0, 600.0, alpha=0.5) == i


def test_adjust_overshoot_direct():
    # i=10, alpha=0.01/kbps, 500 kbps over -> j = 15.
    assert feedback_adjust(10, 1100.0, 0.0, 600.0, alpha=0.01) == 15


def test_adjust_undershoot_clamps_low():
    # i=3, alpha=0.01, 1000 kbps under -> clamp at 1.
    assert feedback_adjust(3, 0.0, 1000.0, 2000.0, alpha=0.01) == 1


def test_adjust_zero_alpha_inert():
    assert feedback_adjust(10, 10_000.0, 0.0, 600.0, alpha=0.0) == 10
    assert feedback_adjust(10, 0.0, 500.0, 600.0, alpha=0.0) == 10


def test_adjust_monotone_in_violation():
    prev = None
    for overshoot in np.linspace(0, 3000, 40):
        j = feedback_adjust(20, 600.0 + overshoot, 0.0, 600.0, alpha=0.02)
        if prev is not None:
            assert j >= prev
        prev = j
    prev = None
    for undershoot in np.linspace(0, 3000, 40):
        j = feedback_adjust(20, 400.0 - undershoot, 400.0, 600.0, alpha=0.02)
        if prev is not None:
            assert j <= prev
        prev = j


def test_adjust_index_validation():
    with pytest.raises(ValueError):
        feedback_adjust(0, 500.0, 400.0, 600.0, alpha=0.1)
    with pytest.raises(ValueError):
        feedback_adjust(41, 500.0, 400.0, 600.0, alpha=0.1)


def test_feedback_config_validation():
    with pytest.raises(ValueError):
        FeedbackConfig(alpha=-1.0)
    with pytest.raises(ValueError):
        FeedbackConfig(sample_pool=50, candidate_pool=40)


# ---------------------------------------------------------------------------
# Controller wiring
# ---------------------------------------------------------------------------

def _wide_bounds(target=512.0):
    return BoundsModel(
        lower=LogBound(0.0, 1.0, 1.0, 0.0, -1e12),
        upper=LogBound(0.0, 1.0, 1.0, 0.0, 1e12),
        target_bitrate_kbps=target,
        quantiles=(0.025, 0.975),
    )


def test_controller_never_leaves_candidate_set(rng, video, gop):
    tight = BoundsModel(
        lower=LogBound(0.0, 1.0, 1.0, 480.0, 0.0),
        upper=LogBound(0.0, 1.0, 1.0, 482.0, 1.0),
        target_bitrate_kbps=512.0,
        quantiles=(0.025, 0.975),
    )
    controller = FeedbackController(bounds=tight, config=FeedbackConfig(alpha=0.1))
    logit_rng = np.random.default_rng(8)

    def policy(obs):
        logits = logit_rng.normal(size=256)
        qp = truncated_sample(logits, rng)
        adjusted = controller(obs, logits, qp)
        assert adjusted in set(truncated_keep(logits, 40))
        return adjusted

    simenc.run_episode(video, gop, 512.0, policy)
    assert any(e.triggered for e in controller.events)


def test_infinite_bounds_noop(rng, video, gop):
    controller = FeedbackController(bounds=_wide_bounds(), config=FeedbackConfig(alpha=0.5))
    logit_rng = np.random.default_rng(8)
    picked = []

    def policy(obs):
        logits = logit_rng.normal(size=256)
        qp = truncated_sample(logits, rng)
        picked.append(qp)
        return controller(obs, logits, qp)

    trace = simenc.run_episode(video, gop, 512.0, policy)
    assert list(trace.qps) == picked
    assert not any(e.triggered for e in controller.events)

"""Two-pass VBR heuristic policy over the surrogate encoder.

Mirrors the qualitative behavior of a production VBR rate controller:
per-frame bit targets proportional to first-pass frame weights with strong
boosts for key and alternate-reference frames, realized frame by frame via a
binary search over QP, with the remaining budget recomputed after every
frame so the episode closes on its total budget.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import simenc
from .simenc import (
    DEFAULT_MODEL,
    EncodeState,
    EncoderModel,
    EpisodeTrace,
    FrameType,
    GopPlan,
    Observation,
    QP_MAX,
    RewardConfig,
    SyntheticVideo,
    encode_frame,
)

__all__ = [
    "BaselineConfig",
    "AllocationError",
    "allocate_frame_targets",
    "qp_for_target_bits",
    "BaselinePolicy",
    "run_baseline",
]


class AllocationError(ValueError):
    """Frame weights sum to zero; no budget split is possible."""


@dataclass(frozen=True)
class BaselineConfig:
    key_boost: float = 4.0
    alt_ref_boost: float = 3.0
    inter_boost: float = 1.0
    recompute_budget: bool = True
    max_search_iters: int = 16

    def __post_init__(self) -> None:
        if self.key_boost < 1.0 or self.alt_ref_boost < 1.0:
            raise ValueError("KEY and ALT_REF boosts must be >= 1")
        if self.inter_boost != 1.0:
            raise ValueError("INTER boost is fixed at 1")
        if self.max_search_iters < 8:
            raise ValueError("binary search needs at least 8 iterations for 256 QPs")


def _boost(config: BaselineConfig, frame_type: FrameType) -> float:
    if frame_type is FrameType.KEY:
        return config.key_boost
    if frame_type is FrameType.ALT_REF_HIDDEN:
        return config.alt_ref_boost
    return config.inter_boost


def allocate_frame_targets(
    video: SyntheticVideo,
    gop: GopPlan,
    target_bitrate_kbps: float,
    config: BaselineConfig = BaselineConfig(),
) -> list[float]:
    """Split the total bit budget into per-frame targets.

    Each frame's share is its first-pass coded-error weight times its frame
    type boost, normalized so the targets sum to the full budget.
    """
    budget = target_bitrate_kbps * 1000.0 * video.duration
    if budget <= 0:
        raise ValueError("total bit budget must be positive")
    weights = [
        fp.coded_error * _boost(config, ft)
        for fp, ft in zip(video.first_pass, gop.frame_types)
    ]
    total = sum(weights)
    if total <= 0.0:
        raise AllocationError("frame weights sum to zero")
    return [budget * w / total for w in weights]


def qp_for_target_bits(
    video: SyntheticVideo,
    gop: GopPlan,
    state: EncodeState,
    target_bits: float,
    config: BaselineConfig = BaselineConfig(),
    model: EncoderModel = DEFAULT_MODEL,
) -> int:
    """Binary-search the QP whose trial encode meets ``target_bits``.

    Frame bits are nonincreasing in QP, so the search finds the largest QP
    still spending at least the target (the least-overspending choice; exact
    hits resolve to the highest QP achieving them). Clamps to 0 when even
    the finest quantizer cannot reach the target and to 255 when the
    coarsest one already exceeds it. Trial encodes never commit ``state``.
    """
    if target_bits <= 0:
        raise ValueError("target_bits must be positive")

    def trial(qp: int) -> float:
        bits, _, _ = encode_frame(video, gop, state, qp, model)
        return bits

    if trial(0) < target_bits:
        return 0
    if trial(QP_MAX) >= target_bits:
        return QP_MAX
    # Invariant: bits(lo) >= target > bits(hi).
    lo, hi = 0, QP_MAX
    for _ in range(config.max_search_iters):
        if hi - lo <= 1:
            break
        mid = (lo + hi) // 2
        if trial(mid) >= target_bits:
            lo = mid
        else:
            hi = mid
    return lo


class BaselinePolicy:
    """Stateful per-episode callback for :func:`ratelab.simenc.run_episode`.

    Keeps a shadow copy of the encoder state (the environment is
    deterministic, so replaying its own QP choices reproduces it exactly)
    to drive trial encodes, and rescales the remaining per-frame targets to
    the remaining budget before every frame.
    """

    def __init__(
        self,
        video: SyntheticVideo,
        gop: GopPlan,
        target_bitrate_kbps: float,
        config: BaselineConfig = BaselineConfig(),
        model: EncoderModel = DEFAULT_MODEL,
    ) -> None:
        self._video = video
        self._gop = gop
        self._config = config
        self._model = model
        self._budget = target_bitrate_kbps * 1000.0 * video.duration
        self._targets = allocate_frame_targets(video, gop, target_bitrate_kbps, config)
        self._state = EncodeState()

    def __call__(self, obs: Observation) -> int:
        t = self._state.cursor
        if obs.frame_index != t:
            raise RuntimeError(
                f"baseline shadow state at frame {t} but observation is for {obs.frame_index}"
            )
        target = self._targets[t]
        if self._config.recompute_budget:
            remaining_budget = self._budget - self._state.cum_bits
            remaining_weight = sum(self._targets[t:])
            target = max(1.0, self._targets[t] * remaining_budget / remaining_weight)
        qp = qp_for_target_bits(
            self._video, self._gop, self._state, target, self._config, self._model
        )
        _, _, self._state = encode_frame(self._video, self._gop, self._state, qp, self._model)
        return qp


def run_baseline(
    video: SyntheticVideo,
    gop: GopPlan | None = None,
    target_bitrate_kbps: float = 512.0,
    config: BaselineConfig = BaselineConfig(),
    reward_config: RewardConfig | None = None,
    model: EncoderModel = DEFAULT_MODEL,
) -> EpisodeTrace:
    """Encode one video with the heuristic VBR policy."""
    if gop is None:
        gop = simenc.plan_gop(video)
    policy = BaselinePolicy(video, gop, target_bitrate_kbps, config, model)
    return simenc.run_episode(
        video, gop, target_bitrate_kbps, policy, reward_config=reward_config, model=model
    )

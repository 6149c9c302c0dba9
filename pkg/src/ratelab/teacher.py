"""Evolution-strategies search over QP sequences and teacher dataset assembly.

Each (video, target bitrate) pair is optimized independently: the search
treats the QP sequence itself as the parameter vector, perturbs it with
Gaussian noise, and follows the reward-weighted update

    theta <- theta + alpha * (1 / (n * sigma)) * sum_i F(round(theta + sigma * eps_i)) * eps_i

with the learning rate decaying exponentially. The search is initialized
from the heuristic VBR policy's QP sequence so the solutions stay coherent
across videos and remain predictable from the observations.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from . import baseline as baseline_mod
from . import simenc
from .io import read_jsonl, write_jsonl
from .simenc import EpisodeTrace, GopPlan, RewardConfig, SyntheticVideo

__all__ = [
    "TEACHER_SCHEMA",
    "EsConfig",
    "EsState",
    "EsResult",
    "TeacherRecord",
    "TeacherDataError",
    "es_step",
    "run_es",
    "TeacherConfig",
    "build_teacher_dataset",
    "save_teacher_dataset",
    "load_teacher_dataset",
]

TEACHER_SCHEMA = "teacher.v1"


class TeacherDataError(RuntimeError):
    """Teacher records failed replay verification or the learnability guard."""


@dataclass(frozen=True)
class EsConfig:
    sigma: float = 4.0              # QP units of Gaussian perturbation
    batch_size: int = 16
    learning_rate: float = 16.0
    decay_rate: float = 0.5         # multiplicative decay ...
    decay_every: float = 100.0      # ... per this many steps
    max_steps: int = 100
    reward_lambda: float = 0.02     # overshoot penalty per kbps
    seed: int = 0
    antithetic: bool = False
    fitness_shaping: str = "none"   # "none" (raw rewards) or "centered_rank"
    drift_bound: float = 64.0       # learnability guard on mean |label - baseline| QP

    def __post_init__(self) -> None:
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.antithetic and self.batch_size % 2:
            raise ValueError("antithetic sampling needs an even batch size")
        if self.fitness_shaping not in ("none", "centered_rank"):
            raise ValueError("fitness_shaping must be 'none' or 'centered_rank'")

    def step_learning_rate(self, step: int) -> float:
        return self.learning_rate * self.decay_rate ** (step / self.decay_every)


@dataclass(frozen=True)
class EsState:
    theta: np.ndarray               # float QP parameters, clamped to [0, 255]
    step: int
    best_reward: float
    best_qps: np.ndarray            # rounded integer sequence of the best candidate


def _round_clamp(theta: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(theta), 0, simenc.QP_MAX).astype(np.int64)


def es_step(
    state: EsState,
    config: EsConfig,
    reward_fn: Callable[[np.ndarray], float],
    noise_batch: np.ndarray,
) -> EsState:
    """One ES update from an injected batch of Gaussian perturbations.

    ``noise_batch`` has shape (batch_size, T). Candidates are rounded and
    clamped to valid QPs before evaluation; rewards are reduced in
    perturbation order, so the update is deterministic given the noise.
    """
    noise = np.asarray(noise_batch, dtype=np.float64)
    if noise.shape != (config.batch_size, state.theta.size):
        raise ValueError(
            f"noise batch shape {noise.shape} != {(config.batch_size, state.theta.size)}"
        )
    best_reward = state.best_reward
    best_qps = state.best_qps
    rewards = np.empty(config.batch_size)
    for i in range(config.batch_size):
        candidate = _round_clamp(state.theta + config.sigma * noise[i])
        rewards[i] = reward_fn(candidate)
        if rewards[i] > best_reward:
            best_reward = float(rewards[i])
            best_qps = candidate
    alpha = config.step_learning_rate(state.step)
    if config.fitness_shaping == "centered_rank":
        # Scale-free weights in [-0.5, 0.5]; the raw rule keeps reward units.
        ranks = np.argsort(np.argsort(rewards))
        weights = ranks / (config.batch_size - 1) - 0.5 if config.batch_size > 1 else ranks * 0.0
    else:
        weights = rewards
    update = alpha / (config.batch_size * config.sigma) * (weights @ noise)
    theta = np.clip(state.theta + update, 0.0, float(simenc.QP_MAX))
    return EsState(theta=theta, step=state.step + 1, best_reward=best_reward, best_qps=best_qps)


@dataclass(frozen=True)
class EsResult:
    best_qps: tuple[int, ...]
    best_trace: EpisodeTrace        # canonical replay of the best sequence
    baseline_trace: EpisodeTrace
    steps_run: int
    best_reward_history: tuple[float, ...]  # best-so-far after each step


def _draw_noise(rng: np.random.Generator, config: EsConfig, length: int) -> np.ndarray:
    if config.antithetic:
        half = rng.standard_normal((config.batch_size // 2, length))
        return np.concatenate([half, -half], axis=0)
    return rng.standard_normal((config.batch_size, length))


def run_es(
    video: SyntheticVideo,
    target_bitrate_kbps: float,
    config: EsConfig,
    gop: GopPlan | None = None,
    baseline_config: baseline_mod.BaselineConfig | None = None,
) -> EsResult:
    """Search QP sequences for one (video, target bitrate) pair.

    Initializes from the heuristic policy's QP sequence and returns the
    best-reward rounded sequence seen during the whole search (not the final
    parameter vector).
    """
    if gop is None:
        gop = simenc.plan_gop(video)
    reward_config = RewardConfig(
        penalty_per_kbps=config.reward_lambda, bitrate_target_kbps=target_bitrate_kbps
    )
    base_trace = baseline_mod.run_baseline(
        video,
        gop,
        target_bitrate_kbps,
        config=baseline_config or baseline_mod.BaselineConfig(),
        reward_config=reward_config,
    )

    def reward_fn(qps: np.ndarray) -> float:
        trace = simenc.replay_qp_sequence(
            video, gop, [int(q) for q in qps], target_bitrate_kbps, reward_config
        )
        return trace.reward

    theta0 = np.asarray(base_trace.qps, dtype=np.float64)
    state = EsState(
        theta=theta0,
        step=0,
        best_reward=base_trace.reward,
        best_qps=_round_clamp(theta0),
    )
    rng = np.random.Generator(np.random.PCG64(config.seed))
    history = []
    for _ in range(config.max_steps):
        noise = _draw_noise(rng, config, state.theta.size)
        state = es_step(state, config, reward_fn, noise)
        # Also evaluate the rounded mean itself: it averages out the
        # perturbation noise and yields smoother, easier-to-imitate labels.
        mean_qps = _round_clamp(state.theta)
        mean_reward = reward_fn(mean_qps)
        if mean_reward > state.best_reward:
            state = replace(state, best_reward=float(mean_reward), best_qps=mean_qps)
        history.append(state.best_reward)

    best_qps = tuple(int(q) for q in state.best_qps)
    best_trace = simenc.replay_qp_sequence(
        video, gop, best_qps, target_bitrate_kbps, reward_config
    )
    return EsResult(
        best_qps=best_qps,
        best_trace=best_trace,
        baseline_trace=base_trace,
        steps_run=state.step,
        best_reward_history=tuple(history),
    )


# ---------------------------------------------------------------------------
# Teacher dataset
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TeacherRecord:
    """One imitation example set for a (video, target bitrate) pair.

    Labels are replayable: re-encoding ``label_qps`` reproduces
    ``label_bits`` and the final metrics exactly. Observations are not
    stored; they are regenerated deterministically by replaying the labels.
    """

    video_id: str
    target_bitrate_kbps: float
    provenance: str                 # "ES" or "HER"
    label_qps: tuple[int, ...]
    label_bits: tuple[float, ...]
    baseline_qps: tuple[int, ...]   # empty for HER records
    psnr_db: float
    bitrate_kbps: float
    reward: float


@dataclass(frozen=True)
class TeacherConfig:
    bitrates_per_video: int = 4
    bitrate_min_kbps: float = 256.0
    bitrate_max_kbps: float = 768.0
    es: EsConfig = EsConfig()
    seed: int = 0
    gop_interval: int = 16

    def __post_init__(self) -> None:
        if self.bitrates_per_video < 1:
            raise ValueError("bitrates_per_video must be >= 1")
        if not 0 < self.bitrate_min_kbps <= self.bitrate_max_kbps:
            raise ValueError("bitrate range must be positive and ordered")


def record_from_result(
    video: SyntheticVideo, result: EsResult, gop: GopPlan, drift_bound: float
) -> TeacherRecord:
    """Build and verify one ES teacher record."""
    trace = result.best_trace
    reward_config = RewardConfig(bitrate_target_kbps=trace.target_bitrate_kbps)
    verify = simenc.replay_qp_sequence(
        video, gop, trace.qps, trace.target_bitrate_kbps, reward_config
    )
    if verify.bits != trace.bits or verify.mse != trace.mse:
        raise TeacherDataError(f"{video.video_id}: label replay mismatch")
    drift = float(
        np.mean(np.abs(np.asarray(trace.qps) - np.asarray(result.baseline_trace.qps)))
    )
    if drift > drift_bound:
        raise TeacherDataError(
            f"{video.video_id}: label drift {drift:.1f} exceeds bound {drift_bound}"
        )
    return TeacherRecord(
        video_id=video.video_id,
        target_bitrate_kbps=trace.target_bitrate_kbps,
        provenance="ES",
        label_qps=trace.qps,
        label_bits=trace.bits,
        baseline_qps=result.baseline_trace.qps,
        psnr_db=trace.psnr_db,
        bitrate_kbps=trace.bitrate_kbps,
        reward=trace.reward,
    )


def build_teacher_dataset(
    videos: Sequence[SyntheticVideo], config: TeacherConfig = TeacherConfig()
) -> list[TeacherRecord]:
    """Run ES per (video, sampled target bitrate) and collect verified records."""
    records = []
    for vi, video in enumerate(videos):
        gop = simenc.plan_gop(video, config.gop_interval)
        video_seq = np.random.SeedSequence(entropy=config.seed, spawn_key=(vi,))
        rng = np.random.Generator(np.random.PCG64(video_seq))
        targets = rng.uniform(
            config.bitrate_min_kbps, config.bitrate_max_kbps, size=config.bitrates_per_video
        )
        for bi, target in enumerate(sorted(float(t) for t in targets)):
            es_seed = int(
                np.random.SeedSequence(entropy=config.seed, spawn_key=(vi, bi))
                .generate_state(1, dtype=np.uint64)[0]
            )
            es_config = replace(config.es, seed=es_seed)
            result = run_es(video, target, es_config, gop)
            records.append(record_from_result(video, result, gop, config.es.drift_bound))
    return records


def record_to_dict(rec: TeacherRecord) -> dict:
    return {
        "video_id": rec.video_id,
        "target_bitrate_kbps": rec.target_bitrate_kbps,
        "provenance": rec.provenance,
        "label_qps": list(rec.label_qps),
        "label_bits": list(rec.label_bits),
        "baseline_qps": list(rec.baseline_qps),
        "psnr_db": rec.psnr_db,
        "bitrate_kbps": rec.bitrate_kbps,
        "reward": rec.reward,
    }


def record_from_dict(d: dict) -> TeacherRecord:
    return TeacherRecord(
        video_id=d["video_id"],
        target_bitrate_kbps=d["target_bitrate_kbps"],
        provenance=d["provenance"],
        label_qps=tuple(int(q) for q in d["label_qps"]),
        label_bits=tuple(d["label_bits"]),
        baseline_qps=tuple(int(q) for q in d["baseline_qps"]),
        psnr_db=d["psnr_db"],
        bitrate_kbps=d["bitrate_kbps"],
        reward=d["reward"],
    )


def save_teacher_dataset(path, records: Iterable[TeacherRecord]) -> int:
    return write_jsonl(path, (record_to_dict(r) for r in records), TEACHER_SCHEMA)


def load_teacher_dataset(path) -> list[TeacherRecord]:
    return [record_from_dict(d) for d in read_jsonl(path, TEACHER_SCHEMA)]

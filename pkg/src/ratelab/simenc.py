"""Surrogate two-pass video encoder environment.

Generates synthetic videos whose per-frame latent complexity drives a set of
first-pass statistics, and exposes a deterministic sequential encoding
environment: choosing a quantization parameter (QP) for each frame yields
frame bits and frame MSE, with reference-quality state propagating forward.

The rate-distortion core is an explicit closed-form stand-in for a real
codec, chosen to be monotone in QP and to carry per-frame multiplicative
rate noise:

    D = min(E, Q^2 / 12)
    bits = header + gain * max(0, 0.5 * log2(E / D))

where ``E`` is the frame's effective prediction-error energy (which for
inter-coded frames includes a fraction of the reference frames' distortion,
creating the long-horizon coupling), ``Q`` the quantizer step size and
``gain = rd_gain * n_blocks * rate_multiplier``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Iterable, Sequence

import numpy as np

from .io import read_jsonl, write_jsonl

__all__ = [
    "FIRST_PASS_FEATURES",
    "CORPUS_SCHEMA",
    "TRACE_SCHEMA",
    "FrameType",
    "FrameLatent",
    "FirstPassFeatures",
    "SyntheticVideo",
    "VideoConfig",
    "GopPlan",
    "EncoderModel",
    "EncodeState",
    "Observation",
    "RewardConfig",
    "EpisodeTrace",
    "generate_video",
    "generate_corpus",
    "plan_gop",
    "quantizer_step",
    "rate_distortion",
    "encode_frame",
    "episode_reward",
    "step_reward",
    "run_episode",
    "replay_qp_sequence",
    "psnr_from_mse",
    "first_pass_matrix",
    "save_corpus",
    "load_corpus",
    "save_traces",
    "load_traces",
]

CORPUS_SCHEMA = "simenc.v1"
TRACE_SCHEMA = "trace.v1"

QP_MAX = 255

# Step size doubles roughly every 23 QP values; Q(0) anchors at 0.25.
_QP_STEPS = tuple(0.25 * math.exp(0.03 * q) for q in range(QP_MAX + 1))

# First-pass statistics exposed per frame, in column order of the feature
# matrix fed to policies.
FIRST_PASS_FEATURES = (
    "frame_index",
    "frame_weight",
    "intra_error",
    "coded_error",
    "sr_coded_error",
    "frame_noise_energy",
    "pcnt_inter",
    "pcnt_motion",
    "pcnt_second_ref",
    "pcnt_neutral",
    "pcnt_intra_low",
    "pcnt_intra_high",
    "intra_skip_pct",
    "intra_smooth_pct",
    "inactive_zone_rows",
    "inactive_zone_cols",
    "MVr",
    "mvr_abs",
    "MVc",
    "mvc_abs",
    "MVrv",
    "Mvcv",
    "mv_in_out_count",
    "duration",
    "frame_count",
)


class ConfigError(ValueError):
    """Invalid generation or encoder configuration."""


class EpisodeError(RuntimeError):
    """Stepping past the end of an episode, or finalizing an incomplete one."""


class FrameType(Enum):
    KEY = "KEY"
    ALT_REF_HIDDEN = "ALT_REF_HIDDEN"
    INTER = "INTER"


@dataclass(frozen=True)
class FrameLatent:
    """Hidden per-frame ground truth the simulator encodes against.

    Values are fixed at generation time and constant for the lifetime of the
    video. ``rate_multiplier`` carries the scene-dependent multiplicative
    noise of the QP-to-bits mapping.
    """

    intra_energy: float        # MSE units, > 0
    inter_fraction: float      # (0, 1]; 1 at scene changes
    noise_energy: float        # MSE units, >= 0
    rate_multiplier: float     # > 0, lognormal, clamped
    mv_row_mean: float
    mv_row_abs: float
    mv_col_mean: float
    mv_col_abs: float
    mv_row_var: float
    mv_col_var: float
    mv_in_out: float
    scene_id: int

    def __post_init__(self) -> None:
        if not self.intra_energy > 0.0:
            raise ConfigError(f"intra_energy must be > 0, got {self.intra_energy}")
        if not 0.0 < self.inter_fraction <= 1.0:
            raise ConfigError(f"inter_fraction must be in (0,1], got {self.inter_fraction}")
        if self.noise_energy < 0.0:
            raise ConfigError(f"noise_energy must be >= 0, got {self.noise_energy}")
        if not self.rate_multiplier > 0.0:
            raise ConfigError(f"rate_multiplier must be > 0, got {self.rate_multiplier}")


@dataclass(frozen=True)
class FirstPassFeatures:
    """The 25 per-frame statistics computed by the (surrogate) first pass."""

    frame_index: float
    frame_weight: float
    intra_error: float
    coded_error: float
    sr_coded_error: float
    frame_noise_energy: float
    pcnt_inter: float
    pcnt_motion: float
    pcnt_second_ref: float
    pcnt_neutral: float
    pcnt_intra_low: float
    pcnt_intra_high: float
    intra_skip_pct: float
    intra_smooth_pct: float
    inactive_zone_rows: float
    inactive_zone_cols: float
    MVr: float
    mvr_abs: float
    MVc: float
    mvc_abs: float
    MVrv: float
    Mvcv: float
    mv_in_out_count: float
    duration: float
    frame_count: float

    def as_row(self) -> list[float]:
        return [getattr(self, name) for name in FIRST_PASS_FEATURES]


@dataclass(frozen=True)
class SyntheticVideo:
    video_id: str
    seed: int
    width: int
    height: int
    frame_rate: float
    frames: tuple[FrameLatent, ...]
    first_pass: tuple[FirstPassFeatures, ...]

    def __post_init__(self) -> None:
        if len(self.frames) != len(self.first_pass):
            raise ConfigError("frames and first_pass must have equal length")
        if len(self.frames) < 2:
            raise ConfigError("a video needs at least 2 frames")

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    @property
    def duration(self) -> float:
        return self.num_frames / self.frame_rate

    @property
    def n_blocks(self) -> int:
        return math.ceil(self.width / 16) * math.ceil(self.height / 16)


def first_pass_matrix(video: SyntheticVideo) -> np.ndarray:
    """First-pass statistics as a (T, 25) float matrix in feature order."""
    return np.array([fp.as_row() for fp in video.first_pass], dtype=np.float64)


# ---------------------------------------------------------------------------
# Synthetic video generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VideoConfig:
    """Ranges and distributions for synthetic video generation."""

    num_frames_min: int = 100
    num_frames_max: int = 150
    width: int = 640
    height: int = 480
    frame_rate: float = 30.0
    mean_scene_length: float = 45.0
    intra_energy_log_mean: float = math.log(120.0)
    intra_energy_log_sigma: float = 0.7
    intra_energy_min: float = 10.0
    intra_energy_max: float = 1200.0
    noise_energy_min: float = 0.5
    noise_energy_max: float = 6.0
    inter_fraction_min: float = 0.08
    inter_fraction_max: float = 0.55
    rate_multiplier_sigma_log: float = 0.15
    rate_multiplier_min: float = 0.6
    rate_multiplier_max: float = 1.8
    # Per-frame log-scale jitter around the scene-level values; zero gives
    # constant latents within a scene.
    intra_jitter: float = 0.08
    noise_jitter: float = 0.10
    inter_fraction_jitter: float = 0.06

    def validate(self) -> None:
        if self.num_frames_min < 2:
            raise ConfigError("num_frames_min must be >= 2")
        if self.num_frames_max < self.num_frames_min:
            raise ConfigError("num_frames_max must be >= num_frames_min")
        if self.width < 16 or self.height < 16:
            raise ConfigError("resolution must be at least one 16x16 block")
        if self.frame_rate <= 0:
            raise ConfigError("frame_rate must be positive")
        if self.intra_energy_min <= 0 or self.intra_energy_max < self.intra_energy_min:
            raise ConfigError("intra energy range must be positive and ordered")
        if self.noise_energy_min < 0 or self.noise_energy_max < self.noise_energy_min:
            raise ConfigError("noise energy range must be nonnegative and ordered")
        if not (0.0 < self.inter_fraction_min <= self.inter_fraction_max <= 1.0):
            raise ConfigError("inter fraction range must lie in (0,1]")
        if self.rate_multiplier_min <= 0:
            raise ConfigError("rate multiplier clamp must be positive")


def _first_pass_row(
    latent: FrameLatent, index: int, num_frames: int, frame_rate: float
) -> FirstPassFeatures:
    """Derive the published first-pass statistics from one frame's latents.

    The mapping is fixed and deterministic: feature noise comes only from the
    latents themselves.
    """
    intra = latent.intra_energy + latent.noise_energy
    coded = latent.inter_fraction * latent.intra_energy + latent.noise_energy
    # Second (golden) reference predicts slightly worse than the last frame.
    sr_fraction = latent.inter_fraction + 0.15 * (1.0 - latent.inter_fraction)
    sr_coded = sr_fraction * latent.intra_energy + latent.noise_energy

    pcnt_inter = _clip01(1.0 - latent.inter_fraction)
    motion_activity = 1.0 - math.exp(-(latent.mv_row_abs + latent.mv_col_abs) / 2.0)
    low_variance = math.exp(-latent.intra_energy / 150.0)

    return FirstPassFeatures(
        frame_index=float(index),
        frame_weight=coded / (coded + 50.0),
        intra_error=intra,
        coded_error=coded,
        sr_coded_error=min(sr_coded, intra),
        frame_noise_energy=latent.noise_energy,
        pcnt_inter=pcnt_inter,
        pcnt_motion=_clip01(pcnt_inter * motion_activity),
        pcnt_second_ref=_clip01(0.35 * pcnt_inter),
        pcnt_neutral=_clip01(0.05 + 0.1 * latent.inter_fraction * (1.0 - latent.inter_fraction)),
        pcnt_intra_low=_clip01(0.6 * latent.inter_fraction * low_variance),
        pcnt_intra_high=_clip01(0.6 * latent.inter_fraction * (1.0 - low_variance)),
        intra_skip_pct=_clip01(0.8 * math.exp(-latent.intra_energy / 30.0)),
        intra_smooth_pct=_clip01(math.exp(-latent.intra_energy / 60.0)),
        inactive_zone_rows=0.0,
        inactive_zone_cols=0.0,
        MVr=latent.mv_row_mean,
        mvr_abs=latent.mv_row_abs,
        MVc=latent.mv_col_mean,
        mvc_abs=latent.mv_col_abs,
        MVrv=latent.mv_row_var,
        Mvcv=latent.mv_col_var,
        mv_in_out_count=latent.mv_in_out,
        duration=1.0 / frame_rate,
        frame_count=float(num_frames),
    )


def _clip01(x: float) -> float:
    return min(1.0, max(0.0, x))


def generate_video(seed: int, config: VideoConfig = VideoConfig()) -> SyntheticVideo:
    """Generate one synthetic video, deterministically in ``seed``."""
    config.validate()
    rng = np.random.Generator(np.random.PCG64(seed))

    num_frames = int(rng.integers(config.num_frames_min, config.num_frames_max + 1))

    # Scene segmentation: geometric lengths, at least 4 frames per scene.
    scene_starts = [0]
    t = 0
    while True:
        length = max(4, int(rng.geometric(1.0 / config.mean_scene_length)))
        t += length
        if t >= num_frames:
            break
        scene_starts.append(t)

    frames: list[FrameLatent] = []
    scene_id = -1
    base_intra = base_noise = base_rho = motion_scale = 0.0
    for index in range(num_frames):
        at_scene_start = scene_id + 1 < len(scene_starts) and index == scene_starts[scene_id + 1]
        if at_scene_start:
            scene_id += 1
            base_intra = float(
                np.clip(
                    rng.lognormal(config.intra_energy_log_mean, config.intra_energy_log_sigma),
                    config.intra_energy_min,
                    config.intra_energy_max,
                )
            )
            base_noise = float(rng.uniform(config.noise_energy_min, config.noise_energy_max))
            base_rho = float(rng.uniform(config.inter_fraction_min, config.inter_fraction_max))
            motion_scale = float(rng.lognormal(math.log(2.0), 0.6))

        intra = base_intra * float(np.exp(rng.normal(0.0, config.intra_jitter)))
        noise = base_noise * float(np.exp(rng.normal(0.0, config.noise_jitter)))
        if at_scene_start:
            rho = 1.0  # no usable previous frame across a cut
        else:
            rho = float(
                np.clip(base_rho * np.exp(rng.normal(0.0, config.inter_fraction_jitter)), 1e-3, 1.0)
            )
        w = float(
            np.clip(
                np.exp(rng.normal(0.0, config.rate_multiplier_sigma_log)),
                config.rate_multiplier_min,
                config.rate_multiplier_max,
            )
        )
        mu_r = float(rng.normal(0.0, 0.4 * motion_scale))
        mu_c = float(rng.normal(0.0, 0.4 * motion_scale))
        sd_r = motion_scale * float(np.exp(rng.normal(0.0, 0.2)))
        sd_c = motion_scale * float(np.exp(rng.normal(0.0, 0.2)))
        frames.append(
            FrameLatent(
                intra_energy=intra,
                inter_fraction=rho,
                noise_energy=noise,
                rate_multiplier=w,
                mv_row_mean=mu_r,
                mv_row_abs=abs(mu_r) + 0.8 * sd_r,
                mv_col_mean=mu_c,
                mv_col_abs=abs(mu_c) + 0.8 * sd_c,
                mv_row_var=sd_r * sd_r,
                mv_col_var=sd_c * sd_c,
                mv_in_out=float(np.clip(rng.normal(0.0, 0.2), -1.0, 1.0)),
                scene_id=scene_id,
            )
        )

    first_pass = tuple(
        _first_pass_row(latent, i, num_frames, config.frame_rate)
        for i, latent in enumerate(frames)
    )
    return SyntheticVideo(
        video_id=f"sim-{seed & 0xFFFFFFFFFFFFFFFF:016x}",
        seed=seed,
        width=config.width,
        height=config.height,
        frame_rate=config.frame_rate,
        frames=tuple(frames),
        first_pass=first_pass,
    )


def generate_corpus(
    count: int, master_seed: int, config: VideoConfig = VideoConfig()
) -> list[SyntheticVideo]:
    """Generate ``count`` videos with per-video seeds derived from a master seed."""
    if count < 1:
        raise ConfigError("count must be >= 1")
    children = np.random.SeedSequence(master_seed).spawn(count)
    videos = []
    for i, child in enumerate(children):
        seed = int(child.generate_state(1, dtype=np.uint64)[0])
        video = generate_video(seed, config)
        videos.append(replace(video, video_id=f"sim{i:05d}-{seed:016x}"))
    return videos


# ---------------------------------------------------------------------------
# GOP planning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GopPlan:
    """Frame types, show flags and reference-slot usage for one video."""

    frame_types: tuple[FrameType, ...]
    show: tuple[bool, ...]
    references: tuple[tuple[str, ...], ...]  # subset of ("LAST", "GOLDEN")


def plan_gop(video: SyntheticVideo, gop_interval: int = 16) -> GopPlan:
    """Fixed-interval GOP: frame 0 is KEY, then a hidden alternate reference
    every ``gop_interval`` coding positions; everything else is INTER."""
    if gop_interval < 2:
        raise ConfigError("gop_interval must be >= 2")
    types: list[FrameType] = []
    for t in range(video.num_frames):
        if t == 0:
            types.append(FrameType.KEY)
        elif t % gop_interval == 0:
            types.append(FrameType.ALT_REF_HIDDEN)
        else:
            types.append(FrameType.INTER)
    show = tuple(ft is not FrameType.ALT_REF_HIDDEN for ft in types)
    refs = tuple(() if ft is FrameType.KEY else ("LAST", "GOLDEN") for ft in types)
    return GopPlan(frame_types=tuple(types), show=show, references=refs)


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EncoderModel:
    """Constants of the surrogate rate-distortion model.

    Header bits are specified at a 640x480-equivalent block count (1200
    blocks) and scale linearly with the actual block count.
    """

    rd_gain: float = 12.0
    error_propagation: float = 0.5
    ref_mix_last: float = 0.7
    ref_mix_golden: float = 0.3
    header_key: float = 4000.0
    header_alt_ref: float = 2500.0
    header_inter: float = 300.0
    reference_blocks: int = 1200

    def header_bits(self, frame_type: FrameType, n_blocks: int) -> float:
        base = {
            FrameType.KEY: self.header_key,
            FrameType.ALT_REF_HIDDEN: self.header_alt_ref,
            FrameType.INTER: self.header_inter,
        }[frame_type]
        return base * n_blocks / self.reference_blocks


DEFAULT_MODEL = EncoderModel()


@dataclass(frozen=True)
class EncodeState:
    """Reference-quality state of the encoder between frames.

    Immutable; ``encode_frame`` returns the successor state. A single state
    value must not be advanced from two threads at once, but distinct
    episodes are fully independent.
    """

    cursor: int = 0
    d_last: float = 0.0
    d_golden: float = 0.0
    cum_bits: float = 0.0
    history: tuple[tuple[int, float, float], ...] = ()  # (qp, bits, mse)


def quantizer_step(qp: int) -> float:
    """Map integer QP 0..255 to its quantizer step size (strictly increasing)."""
    if not isinstance(qp, (int, np.integer)) or isinstance(qp, bool):
        raise TypeError(f"qp must be an integer, got {type(qp).__name__}")
    if not 0 <= qp <= QP_MAX:
        raise ValueError(f"qp must be in [0, {QP_MAX}], got {qp}")
    return _QP_STEPS[qp]


def rate_distortion(
    energy: float, q_step: float, gain: float, header: float
) -> tuple[float, float]:
    """Closed-form surrogate RD: returns (bits, mse) for one frame.

    ``mse = min(energy, q_step^2 / 12)``; residual bits are proportional to
    half the log-ratio of energy to achieved distortion, zero when the
    quantizer is coarse enough to saturate.
    """
    if energy <= 0.0:
        raise ValueError("frame energy must be positive")
    mse = min(energy, q_step * q_step / 12.0)
    bits = header + gain * max(0.0, 0.5 * math.log2(energy / mse))
    return bits, mse


def _frame_energy(
    latent: FrameLatent, frame_type: FrameType, state: EncodeState, model: EncoderModel
) -> float:
    if frame_type is FrameType.KEY:
        return latent.intra_energy + latent.noise_energy
    d_ref = model.ref_mix_last * state.d_last + model.ref_mix_golden * state.d_golden
    return (
        latent.inter_fraction * latent.intra_energy
        + latent.noise_energy
        + model.error_propagation * d_ref
    )


def encode_frame(
    video: SyntheticVideo,
    gop: GopPlan,
    state: EncodeState,
    qp: int,
    model: EncoderModel = DEFAULT_MODEL,
) -> tuple[float, float, EncodeState]:
    """Encode the frame at the state's cursor with ``qp``.

    Pure: identical inputs produce identical outputs. Returns
    (bits, mse, next_state).
    """
    t = state.cursor
    if t >= video.num_frames:
        raise EpisodeError(f"episode ended at frame {video.num_frames}, cannot encode frame {t}")
    q = quantizer_step(qp)
    latent = video.frames[t]
    frame_type = gop.frame_types[t]
    energy = _frame_energy(latent, frame_type, state, model)
    gain = model.rd_gain * video.n_blocks * latent.rate_multiplier
    bits, mse = rate_distortion(energy, q, gain, model.header_bits(frame_type, video.n_blocks))

    d_golden = mse if frame_type in (FrameType.KEY, FrameType.ALT_REF_HIDDEN) else state.d_golden
    next_state = EncodeState(
        cursor=t + 1,
        d_last=mse,
        d_golden=d_golden,
        cum_bits=state.cum_bits + bits,
        history=state.history + ((int(qp), bits, mse),),
    )
    return bits, mse, next_state


# ---------------------------------------------------------------------------
# Episodes, reward, traces
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RewardConfig:
    """Episodic reward: final PSNR minus a penalty per kbps of overshoot."""

    penalty_per_kbps: float = 0.02
    bitrate_target_kbps: float = 512.0

    def __post_init__(self) -> None:
        if not self.penalty_per_kbps > 0.0:
            raise ConfigError("penalty_per_kbps must be > 0")
        if not self.bitrate_target_kbps > 0.0:
            raise ConfigError("bitrate_target_kbps must be > 0")


@dataclass(frozen=True)
class Observation:
    """What a policy sees before choosing the QP of frame ``frame_index``.

    Depends only on first-pass data and encode history strictly before the
    current frame. ``prev_qp`` is -1 on the first frame.
    """

    width: int
    height: int
    num_frames: int
    duration: float
    frame_rate: float
    target_bitrate_kbps: float
    encode_speed: int
    first_pass: np.ndarray  # (T, 25), shared across steps
    frame_type: FrameType
    frame_index: int
    prev_qp: int
    prev_bits: float
    prev_mse: float
    cum_bits: float
    rel_cum_bits: float


@dataclass(frozen=True)
class EpisodeTrace:
    """Full record of one encode episode."""

    video_id: str
    num_frames: int
    target_bitrate_kbps: float
    qps: tuple[int, ...]
    bits: tuple[float, ...]
    mse: tuple[float, ...]
    show: tuple[bool, ...]
    psnr_db: float
    bitrate_kbps: float
    reward: float


def psnr_from_mse(mean_mse: float) -> float:
    """PSNR in dB for 8-bit peak signal: 10*log10(255^2 / MSE)."""
    if mean_mse <= 0.0:
        raise ValueError("mean MSE must be positive")
    return 10.0 * math.log10(255.0 * 255.0 / mean_mse)


def episode_reward(trace: EpisodeTrace, reward_config: RewardConfig) -> float:
    """Terminal reward: PSNR - penalty * max(0, bitrate - target)."""
    if len(trace.qps) != trace.num_frames:
        raise EpisodeError(
            f"incomplete trace: {len(trace.qps)} of {trace.num_frames} frames encoded"
        )
    overshoot = max(0.0, trace.bitrate_kbps - reward_config.bitrate_target_kbps)
    return trace.psnr_db - reward_config.penalty_per_kbps * overshoot


def step_reward(step_index: int, trace: EpisodeTrace, reward_config: RewardConfig) -> float:
    """Per-step reward: zero everywhere except the final step of the episode."""
    if not 0 <= step_index < trace.num_frames:
        raise EpisodeError(f"step {step_index} outside episode of {trace.num_frames} frames")
    if step_index < trace.num_frames - 1:
        return 0.0
    return episode_reward(trace, reward_config)


def _finalize_trace(
    video: SyntheticVideo,
    gop: GopPlan,
    target_bitrate_kbps: float,
    qps: Sequence[int],
    bits: Sequence[float],
    mses: Sequence[float],
    reward_config: RewardConfig | None,
) -> EpisodeTrace:
    total_bits = math.fsum(bits)
    bitrate_kbps = total_bits / video.duration / 1000.0
    show_mses = [m for m, s in zip(mses, gop.show) if s]
    psnr = psnr_from_mse(math.fsum(show_mses) / len(show_mses))
    cfg = reward_config or RewardConfig(bitrate_target_kbps=target_bitrate_kbps)
    trace = EpisodeTrace(
        video_id=video.video_id,
        num_frames=video.num_frames,
        target_bitrate_kbps=target_bitrate_kbps,
        qps=tuple(int(q) for q in qps),
        bits=tuple(bits),
        mse=tuple(mses),
        show=gop.show,
        psnr_db=psnr,
        bitrate_kbps=bitrate_kbps,
        reward=0.0,
    )
    return replace(trace, reward=episode_reward(trace, cfg))


def run_episode(
    video: SyntheticVideo,
    gop: GopPlan,
    target_bitrate_kbps: float,
    policy_callback: Callable[[Observation], int],
    reward_config: RewardConfig | None = None,
    model: EncoderModel = DEFAULT_MODEL,
) -> EpisodeTrace:
    """Encode a full episode, querying ``policy_callback`` once per frame."""
    if target_bitrate_kbps <= 0:
        raise ConfigError("target bitrate must be positive")
    fp_matrix = first_pass_matrix(video)
    budget_bits = target_bitrate_kbps * 1000.0 * video.duration
    state = EncodeState()
    qps: list[int] = []
    bits: list[float] = []
    mses: list[float] = []
    for t in range(video.num_frames):
        prev_qp, prev_bits, prev_mse = (-1, 0.0, 0.0) if t == 0 else state.history[-1]
        obs = Observation(
            width=video.width,
            height=video.height,
            num_frames=video.num_frames,
            duration=video.duration,
            frame_rate=video.frame_rate,
            target_bitrate_kbps=target_bitrate_kbps,
            encode_speed=0,
            first_pass=fp_matrix,
            frame_type=gop.frame_types[t],
            frame_index=t,
            prev_qp=prev_qp,
            prev_bits=prev_bits,
            prev_mse=prev_mse,
            cum_bits=state.cum_bits,
            rel_cum_bits=state.cum_bits / budget_bits,
        )
        qp = int(policy_callback(obs))
        b, m, state = encode_frame(video, gop, state, qp, model)
        qps.append(qp)
        bits.append(b)
        mses.append(m)
    return _finalize_trace(video, gop, target_bitrate_kbps, qps, bits, mses, reward_config)


def replay_qp_sequence(
    video: SyntheticVideo,
    gop: GopPlan,
    qps: Sequence[int],
    target_bitrate_kbps: float,
    reward_config: RewardConfig | None = None,
    model: EncoderModel = DEFAULT_MODEL,
) -> EpisodeTrace:
    """Encode a fixed QP sequence without building observations.

    Produces bit-identical results to ``run_episode`` with a callback that
    replays the same QPs; this is the hot path for search.
    """
    if len(qps) != video.num_frames:
        raise EpisodeError(f"need {video.num_frames} QPs, got {len(qps)}")
    state = EncodeState()
    bits: list[float] = []
    mses: list[float] = []
    for qp in qps:
        b, m, state = encode_frame(video, gop, state, qp, model)
        bits.append(b)
        mses.append(m)
    return _finalize_trace(video, gop, target_bitrate_kbps, qps, bits, mses, reward_config)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

_LATENT_FIELDS = (
    "intra_energy",
    "inter_fraction",
    "noise_energy",
    "rate_multiplier",
    "mv_row_mean",
    "mv_row_abs",
    "mv_col_mean",
    "mv_col_abs",
    "mv_row_var",
    "mv_col_var",
    "mv_in_out",
    "scene_id",
)


def video_to_record(video: SyntheticVideo) -> dict:
    return {
        "video_id": video.video_id,
        "seed": video.seed,
        "width": video.width,
        "height": video.height,
        "frame_rate": video.frame_rate,
        "frames": [[getattr(f, name) for name in _LATENT_FIELDS] for f in video.frames],
        "first_pass": [fp.as_row() for fp in video.first_pass],
    }


def video_from_record(rec: dict) -> SyntheticVideo:
    frames = tuple(
        FrameLatent(**dict(zip(_LATENT_FIELDS, row))) for row in rec["frames"]
    )
    first_pass = tuple(
        FirstPassFeatures(**dict(zip(FIRST_PASS_FEATURES, row))) for row in rec["first_pass"]
    )
    return SyntheticVideo(
        video_id=rec["video_id"],
        seed=rec["seed"],
        width=rec["width"],
        height=rec["height"],
        frame_rate=rec["frame_rate"],
        frames=frames,
        first_pass=first_pass,
    )


def save_corpus(path, videos: Iterable[SyntheticVideo]) -> int:
    return write_jsonl(path, (video_to_record(v) for v in videos), CORPUS_SCHEMA)


def load_corpus(path) -> list[SyntheticVideo]:
    return [video_from_record(rec) for rec in read_jsonl(path, CORPUS_SCHEMA)]


def trace_to_record(trace: EpisodeTrace) -> dict:
    return {
        "video_id": trace.video_id,
        "num_frames": trace.num_frames,
        "target_bitrate_kbps": trace.target_bitrate_kbps,
        "qps": list(trace.qps),
        "bits": list(trace.bits),
        "mse": list(trace.mse),
        "show": [1 if s else 0 for s in trace.show],
        "psnr_db": trace.psnr_db,
        "bitrate_kbps": trace.bitrate_kbps,
        "reward": trace.reward,
    }


def trace_from_record(rec: dict) -> EpisodeTrace:
    return EpisodeTrace(
        video_id=rec["video_id"],
        num_frames=rec["num_frames"],
        target_bitrate_kbps=rec["target_bitrate_kbps"],
        qps=tuple(int(q) for q in rec["qps"]),
        bits=tuple(rec["bits"]),
        mse=tuple(rec["mse"]),
        show=tuple(bool(s) for s in rec["show"]),
        psnr_db=rec["psnr_db"],
        bitrate_kbps=rec["bitrate_kbps"],
        reward=rec["reward"],
    )


def save_traces(path, traces: Iterable[EpisodeTrace]) -> int:
    return write_jsonl(path, (trace_to_record(t) for t in traces), TRACE_SCHEMA)


def load_traces(path) -> list[EpisodeTrace]:
    return [trace_from_record(rec) for rec in read_jsonl(path, TRACE_SCHEMA)]

import numpy as np
import pytest

from ratelab import simenc

# Short videos keep the suites fast; the encoder model is scale-free in T.
FAST_CONFIG = simenc.VideoConfig(num_frames_min=40, num_frames_max=60)


@pytest.fixture(scope="session")
def fast_config():
    return FAST_CONFIG


@pytest.fixture(scope="session")
def video():
    return simenc.generate_video(1234, FAST_CONFIG)


@pytest.fixture(scope="session")
def gop(video):
    return simenc.plan_gop(video)


@pytest.fixture(scope="session")
def small_corpus():
    return simenc.generate_corpus(6, master_seed=99, config=FAST_CONFIG)


def constant_video(
    num_frames=4,
    intra_energy=99.0,
    noise_energy=1.0,
    inter_fraction=0.5,
    rate_multiplier=1.0,
    width=160,
    height=240,
    frame_rate=30.0,
):
    """Hand-built video with identical latents on every frame."""
    latent = simenc.FrameLatent(
        intra_energy=intra_energy,
        inter_fraction=inter_fraction,
        noise_energy=noise_energy,
        rate_multiplier=rate_multiplier,
        mv_row_mean=0.0,
        mv_row_abs=0.5,
        mv_col_mean=0.0,
        mv_col_abs=0.5,
        mv_row_var=0.25,
        mv_col_var=0.25,
        mv_in_out=0.0,
        scene_id=0,
    )
    frames = tuple(latent for _ in range(num_frames))
    first_pass = tuple(
        simenc._first_pass_row(latent, i, num_frames, frame_rate) for i in range(num_frames)
    )
    return simenc.SyntheticVideo(
        video_id="const",
        seed=0,
        width=width,
        height=height,
        frame_rate=frame_rate,
        frames=frames,
        first_pass=first_pass,
    )


def all_inter_gop(num_frames):
    """GOP with every frame INTER (for allocation symmetry tests).

    Frame 0 still references nothing, matching an empty reference state.
    """
    types = tuple(simenc.FrameType.INTER for _ in range(num_frames))
    return simenc.GopPlan(
        frame_types=types,
        show=tuple(True for _ in range(num_frames)),
        references=tuple(("LAST", "GOLDEN") for _ in range(num_frames)),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(2024)

"""Shared fixtures: one trained toy model and its calibrations per session."""

import numpy as np
import pytest

import ptqd

TRAIN_SEED = 1
DATA_SEED = 0
HOLDOUT_SEED = 123
CALIB_SEED = 11
STATS_SEED = 21


@pytest.fixture(scope="session")
def schedule():
    return ptqd.build_schedule(100, 1e-4, 0.02, 1.0)


@pytest.fixture(scope="session")
def train_data():
    return ptqd.make_dataset("gmm2d", 4096, seed=DATA_SEED)


@pytest.fixture(scope="session")
def holdout_data():
    return ptqd.make_dataset("gmm2d", 4096, seed=HOLDOUT_SEED)


@pytest.fixture(scope="session")
def trained_net(schedule, train_data):
    return ptqd.train_toy(
        train_data, schedule, epochs=60, lr=2e-3, seed=TRAIN_SEED, lr_decay_epochs=48
    )


@pytest.fixture(scope="session")
def activation_samples(trained_net, schedule):
    return ptqd.model.collect_activation_samples(
        trained_net, schedule, n_passes=256, seed=CALIB_SEED
    )


@pytest.fixture(scope="session")
def assign_w4a4(trained_net, schedule, activation_samples):
    return ptqd.calibrate_assignment(
        trained_net, schedule, 4, 4, percentile=99.9, activation_samples=activation_samples
    )


@pytest.fixture(scope="session")
def assign_w4a8(trained_net, schedule, activation_samples):
    return ptqd.calibrate_assignment(
        trained_net, schedule, 4, 8, percentile=99.9, activation_samples=activation_samples
    )


@pytest.fixture(scope="session")
def traces_w4a4(trained_net, schedule, assign_w4a4):
    return ptqd.collect_paired_traces(
        trained_net, assign_w4a4, schedule, n=1024, seed=STATS_SEED
    )


@pytest.fixture(scope="session")
def stats_w4a4(traces_w4a4):
    return ptqd.stats_from_traces(*traces_w4a4)


@pytest.fixture(scope="session")
def snr_by_bits(trained_net, schedule, assign_w4a4, activation_samples):
    """Per-step network SNR traces for 4-bit and 8-bit activations."""
    assign_w8a8 = ptqd.calibrate_assignment(
        trained_net, schedule, 8, 8, percentile=99.9, activation_samples=activation_samples
    )
    out = {}
    for bits, assign in ((4, assign_w4a4), (8, assign_w8a8)):
        eps, delta = ptqd.collect_paired_traces(trained_net, assign, schedule, n=256, seed=77)
        out[bits] = ptqd.snr_q_per_step(eps, delta)
    return out


@pytest.fixture(scope="session")
def mode_fracs(trained_net, schedule):
    """Fraction of 10^4 full-precision samples landing nearest each center."""
    samples = ptqd.generate_samples(trained_net, schedule, n=10_000, seed=7)
    centers = ptqd.model.gmm2d_centers()
    nearest = np.linalg.norm(samples[:, None, :] - centers[None, :, :], axis=2).argmin(axis=1)
    return np.bincount(nearest, minlength=len(centers)) / samples.shape[0]

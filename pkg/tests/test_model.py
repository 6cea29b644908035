import numpy as np
import pytest

import ptqd
from ptqd.errors import InvalidConfigError, InvalidInputError, TrainingFailureError, UncalibratedError
from ptqd.model import (
    LN_EPS,
    PENDING_CALIBRATION,
    LayerQuant,
    LayerQuantAssignment,
    NoisePredictor,
    gmm2d_centers,
    init_network,
    make_dataset,
    make_weight_config,
    standardize_rows,
    train_toy,
    training_loss_and_grads,
)
from ptqd.quant import QuantConfig, calibrate_clip_range


class TestMakeDataset:
    def test_reproducible_single_point(self):
        a = make_dataset("gmm2d", 1, seed=42)
        b = make_dataset("gmm2d", 1, seed=42)
        assert np.array_equal(a, b)
        assert a.shape == (1, 2)

    def test_mean_near_origin(self):
        pts = make_dataset("gmm2d", 100_000, seed=3)
        assert np.all(np.abs(pts.mean(axis=0)) < 0.02)

    def test_component_counts_binomial(self):
        pts = make_dataset("gmm2d", 100_000, seed=4)
        centers = gmm2d_centers()
        nearest = np.linalg.norm(pts[:, None, :] - centers[None, :, :], axis=2).argmin(axis=1)
        counts = np.bincount(nearest, minlength=8)
        assert np.all(np.abs(counts - 12_500) <= 400)

    def test_component_std(self):
        pts = make_dataset("gmm2d", 50_000, seed=5)
        centers = gmm2d_centers()
        nearest = np.linalg.norm(pts[:, None, :] - centers[None, :, :], axis=2).argmin(axis=1)
        resid = pts - centers[nearest]
        assert resid.std() == pytest.approx(0.1, rel=0.05)

    def test_errors(self):
        with pytest.raises(InvalidInputError):
            make_dataset("gmm2d", 0, seed=0)
        with pytest.raises(InvalidConfigError):
            make_dataset("rings", 10, seed=0)


class TestTraining:
    def test_zero_epochs_returns_initialized_network(self, schedule):
        data = make_dataset("gmm2d", 64, seed=0)
        net = train_toy(data, schedule, epochs=0, lr=1e-3, seed=9)
        ref = init_network(T=schedule.T, seed=9)
        for a, b in zip(net.layers, ref.layers):
            assert np.array_equal(a.W, b.W)
        assert np.array_equal(net.embedding, ref.embedding)

    def test_seed_determinism_bitwise(self, schedule):
        data = make_dataset("gmm2d", 256, seed=0)
        n1 = train_toy(data, schedule, epochs=2, lr=1e-3, seed=5)
        n2 = train_toy(data, schedule, epochs=2, lr=1e-3, seed=5)
        for a, b in zip(n1.layers, n2.layers):
            assert np.array_equal(a.W, b.W)
            assert np.array_equal(a.b, b.b)
        assert np.array_equal(n1.embedding, n2.embedding)

    def test_divergence_raises(self, schedule):
        # normalization keeps moderate blowups finite, so force an overflow
        data = make_dataset("gmm2d", 256, seed=0)
        with np.errstate(all="ignore"), pytest.raises(TrainingFailureError):
            train_toy(data, schedule, epochs=5, lr=1e300, seed=5)

    def test_mode_recovery(self, mode_fracs):
        # every mixture mode captures at least 5% of 10^4 samples
        assert mode_fracs.min() >= 0.05


def relative_err(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)


def test_gradient_check_finite_differences(schedule):
    net = init_network(T=schedule.T, seed=2)
    rng = np.random.default_rng(3)
    x_t = rng.standard_normal((8, 2))
    t_idx = rng.integers(1, schedule.T + 1, size=8)
    target = rng.standard_normal((8, 2))
    _, grads, demb = training_loss_and_grads(net, x_t, t_idx, target)

    h = 1e-5

    def loss_at():
        out = net.forward(x_t, t_idx)
        return float(np.mean((out - target) ** 2))

    checked = 0
    params = []
    for li, layer in enumerate(net.layers):
        params.append((layer.W, grads[li][0]))
        params.append((layer.b, grads[li][1]))
        if layer.normalized:
            params.append((layer.gamma, grads[li][2]))
            params.append((layer.beta, grads[li][3]))
    params.append((net.embedding, demb))
    for arr, grad in params:
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for idx in rng.choice(flat.size, size=min(12, flat.size), replace=False):
            orig = flat[idx]
            flat[idx] = orig + h
            up = loss_at()
            flat[idx] = orig - h
            down = loss_at()
            flat[idx] = orig
            fd = (up - down) / (2 * h)
            if abs(fd) < 1e-10 and abs(gflat[idx]) < 1e-10:
                continue
            assert relative_err(gflat[idx], fd) < 1e-4
            checked += 1
    assert checked > 100


def test_normalization_zero_mean_unit_variance(trained_net):
    rng = np.random.default_rng(4)
    x = rng.standard_normal((64, 2))
    _, tr = trained_net.forward(x, 50, trace=True)
    for z in tr["pre_norm"][:-1]:  # the output layer has no normalization
        zn = standardize_rows(z)
        assert np.all(np.abs(zn.mean(axis=1)) < 1e-6)
        assert np.all(np.abs(zn.var(axis=1) - 1.0) < 1e-6)


def test_normalization_couples_uncorrelated_noise(trained_net):
    """Uncorrelated pre-normalization noise correlates after normalization.

    The coupling comes through the distorted mean/variance of the noisy
    input; it needs at least a few percent of distortion to be visible.
    """
    from ptqd.correction import measure_correlation

    rng = np.random.default_rng(6)
    x = rng.standard_normal((2000, 2))
    _, tr = trained_net.forward(x, 50, trace=True)
    y = tr["pre_norm"][0].ravel()
    noise = 0.05 + np.sqrt(0.06 * y.var()) * rng.standard_normal(y.size)
    assert abs(measure_correlation(y, noise)) < 0.02
    y_hat = y + noise
    delta_norm = standardize_rows(y_hat[None, :]) - standardize_rows(y[None, :])
    r_post = measure_correlation(standardize_rows(y[None, :]), delta_norm)
    assert abs(r_post) > 0.02


class TestQuantizedForward:
    def test_full_precision_flags_bitwise(self, trained_net):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((16, 2))
        assign = LayerQuantAssignment([LayerQuant() for _ in range(trained_net.n_layers)])
        assert np.array_equal(
            trained_net.forward(x, 10), trained_net.forward(x, 10, assign=assign)
        )

    def test_sixteen_bit_close_to_full_precision(self, trained_net, schedule, activation_samples):
        entries = []
        for i, layer in enumerate(trained_net.layers):
            low, high = calibrate_clip_range(activation_samples[i], mode="minmax")
            entries.append(
                LayerQuant(
                    weight=make_weight_config(layer.W, 16),
                    activation=QuantConfig(
                        bitwidth=16,
                        clip_low=np.asarray(low),
                        clip_high=np.asarray(high),
                    ),
                )
            )
        assign = LayerQuantAssignment(entries, 16, 16)
        rng = np.random.default_rng(8)
        x = rng.standard_normal((256, 2))
        fp = trained_net.forward(x, 30)
        q = trained_net.forward(x, 30, assign=assign)
        rms = np.sqrt(np.mean((fp - q) ** 2))
        assert rms < 1e-2

    def test_pending_calibration_raises(self, trained_net):
        entries = [LayerQuant() for _ in range(trained_net.n_layers)]
        entries[1] = LayerQuant(weight=PENDING_CALIBRATION)
        with pytest.raises(UncalibratedError):
            trained_net.forward(np.zeros((2, 2)), 5, assign=LayerQuantAssignment(entries))

    def test_wrong_layer_count_rejected(self, trained_net):
        with pytest.raises(InvalidInputError):
            trained_net.forward(np.zeros((2, 2)), 5, assign=LayerQuantAssignment([LayerQuant()]))

    def test_io_layers_pinned_to_eight_bit(self, assign_w4a4):
        assert assign_w4a4.io_pinned(8)
        assert assign_w4a4.layers[0].weight.bitwidth == 8
        assert assign_w4a4.layers[-1].activation.bitwidth == 8
        for entry in assign_w4a4.layers[1:-1]:
            assert entry.weight.bitwidth == 4
            assert entry.activation.bitwidth == 4

    def test_weight_configs_per_channel_minmax(self, trained_net, assign_w4a4):
        w = trained_net.layers[1].W
        cfg = assign_w4a4.layers[1].weight
        assert cfg.granularity == "per-channel"
        assert np.array_equal(cfg.clip_low, w.min(axis=0))
        assert np.array_equal(cfg.clip_high, w.max(axis=0))


class TestShapesAndErrors:
    def test_bad_input_shape(self, trained_net):
        with pytest.raises(InvalidInputError):
            trained_net.forward(np.zeros((4, 3)), 5)

    def test_bad_step(self, trained_net):
        with pytest.raises(InvalidInputError):
            trained_net.forward(np.zeros((4, 2)), 0)
        with pytest.raises(InvalidInputError):
            trained_net.forward(np.zeros((4, 2)), trained_net.T + 1)

    def test_output_shape_matches_input(self, trained_net):
        out = trained_net.forward(np.zeros((5, 2)), 3)
        assert out.shape == (5, 2)


def test_checkpoint_roundtrip_bitwise(trained_net):
    restored = NoisePredictor.from_dict(trained_net.to_dict())
    rng = np.random.default_rng(9)
    x = rng.standard_normal((32, 2))
    assert np.array_equal(trained_net.forward(x, 17), restored.forward(x, 17))


def test_layer_macs():
    net = init_network(T=10, hidden_dims=(128, 128, 128), d_emb=16, seed=0)
    assert net.layer_macs() == [18 * 128, 128 * 128, 128 * 128, 128 * 2]

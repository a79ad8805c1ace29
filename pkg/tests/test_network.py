import numpy as np
import pytest

from caecodec.errors import CheckpointError, DatasetError, ShapeError
from caecodec.network import (
    CaeArchitecture,
    CaeParams,
    TrainConfig,
    decode,
    encode,
    load_checkpoint,
    loss,
    sample_noise,
    save_checkpoint,
    train,
    write_history_csv,
)
from helpers import patch_set

TOY = CaeArchitecture((2, 2, 2, 2, 2, 2), 8)


def zero_params(arch):
    params = CaeParams.initialize(arch)
    for _, layer, attr in params.named_tensors():
        if attr != "prelu_slope":
            setattr(layer, attr, np.zeros_like(getattr(layer, attr)))
    return params


def fd_gradient(params, patch, config, noise, name, layer, attr, h=1e-5):
    arr = getattr(layer, attr)
    grad = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + h
        fp = loss(params, patch, config, noise=noise).total
        arr[idx] = old - h
        fm = loss(params, patch, config, noise=noise).total
        arr[idx] = old
        grad[idx] = (fp - fm) / (2 * h)
    return grad


class TestArchitecture:
    def test_default_latent_shape(self):
        arch = CaeArchitecture()
        params = CaeParams.initialize(arch)
        y = encode(params, np.zeros((1, 1, 128, 128)))
        assert y.shape == (1, 32, 16, 16)

    def test_layer_channels_mirror(self):
        params = CaeParams.initialize(CaeArchitecture((3, 4, 5, 6, 7, 8), 16))
        assert [l.out_channels for l in params.encoder_layers] == [3, 4, 5, 6, 7, 8]
        assert [l.out_channels for l in params.decoder_layers] == [7, 6, 5, 4, 3, 1]
        assert [l.stride for l in params.encoder_layers] == [2, 1, 2, 1, 2, 1]
        assert [l.stride for l in params.decoder_layers] == [1, 2, 1, 2, 1, 2]

    @pytest.mark.parametrize("size", [8, 16, 24, 40, 64])
    def test_shape_symmetry(self, size):
        params = CaeParams.initialize(CaeArchitecture((2, 3, 2, 3, 2, 4), size))
        x = np.random.default_rng(size).uniform(size=(2, 1, size, size))
        y = encode(params, x)
        assert y.shape == (2, 4, size // 8, size // 8)
        assert decode(params, y).shape == x.shape

    def test_rejects_bad_patch_size(self):
        with pytest.raises(ValueError):
            CaeArchitecture(patch_size=12)

    def test_wrong_input_shapes(self):
        params = CaeParams.initialize(TOY)
        with pytest.raises(ShapeError):
            encode(params, np.zeros((1, 1, 16, 16)))
        with pytest.raises(ShapeError):
            decode(params, np.zeros((1, 3, 1, 1)))


class TestForward:
    def test_zero_patch_zero_bias_gives_zero_latent(self):
        params = CaeParams.initialize(CaeArchitecture((4, 4, 4, 4, 4, 4), 16), seed=3)
        assert not encode(params, np.zeros((2, 1, 16, 16))).any()
        assert not decode(params, np.zeros((2, 4, 2, 2))).any()

    def test_deterministic(self):
        arch = CaeArchitecture((4, 4, 8, 8, 8, 4), 16)
        x = patch_set(0, 3, 16)
        a = encode(CaeParams.initialize(arch, seed=5), x)
        b = encode(CaeParams.initialize(arch, seed=5), x)
        assert a.tobytes() == b.tobytes()
        assert decode(CaeParams.initialize(arch, seed=5), a).tobytes() == decode(
            CaeParams.initialize(arch, seed=5), b
        ).tobytes()


class TestLoss:
    def test_zero_distortion(self):
        params = zero_params(TOY)
        x = np.zeros((1, 1, 8, 8))
        res = loss(params, x, TrainConfig(lam=0.0), noise=np.zeros((1, 2, 1, 1)))
        assert res.total == 0.0

    def test_rate_term_vanishes_for_zero_encoder(self):
        params = CaeParams.initialize(TOY, seed=1)
        for layer in params.encoder_layers:
            layer.kernels[:] = 0
            layer.bias[:] = 0
        x = np.random.default_rng(0).uniform(size=(2, 1, 8, 8))
        mu = sample_noise(np.random.default_rng(1), (2, 2, 1, 1), 2**-10)
        res = loss(params, x, TrainConfig(lam=1.0), noise=mu)
        assert res.rate == 0.0
        assert res.total == pytest.approx(np.mean((x - decode(params, mu)) ** 2), rel=1e-12)

    def test_lambda_zero_is_mse_only(self):
        params = CaeParams.initialize(TOY, seed=2)
        x = np.random.default_rng(0).uniform(size=(2, 1, 8, 8))
        mu = np.zeros((2, 2, 1, 1))
        res = loss(params, x, TrainConfig(lam=0.0), noise=mu)
        assert res.total == res.mse == pytest.approx(np.mean((x - decode(params, encode(params, x))) ** 2))

    @pytest.mark.parametrize("seed", range(3))
    def test_gradients_match_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        params = CaeParams.initialize(TOY, seed=seed)
        for _, layer, _ in params.named_tensors():
            layer.bias[:] = rng.normal(scale=0.1, size=layer.bias.shape)
        x = rng.uniform(size=(2, 1, 8, 8))
        cfg = TrainConfig(lam=1.0, noise_halfwidth=2**-10)
        mu = sample_noise(rng, (2, 2, 1, 1), cfg.noise_halfwidth)
        res = loss(params, x, cfg, noise=mu)
        for name, layer, attr in params.named_tensors():
            numeric = fd_gradient(params, x, cfg, mu, name, layer, attr)
            err = np.max(np.abs(res.grads[name] - numeric)) / max(np.max(np.abs(numeric)), 1e-8)
            assert err < 1e-4, name

    def test_requires_noise_source(self):
        with pytest.raises(ValueError):
            loss(CaeParams.initialize(TOY), np.zeros((1, 1, 8, 8)), TrainConfig())


class TestNoise:
    def test_statistics(self):
        hw = 2**-10
        mu = sample_noise(np.random.default_rng(0), (10**6,), hw)
        sigma = hw / np.sqrt(3) / np.sqrt(mu.size)
        assert abs(mu.mean()) < 3 * sigma
        assert np.max(np.abs(mu)) <= hw

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(noise_halfwidth=0.0)
        with pytest.raises(ValueError):
            TrainConfig(lam=-1.0)


class TestTraining:
    ARCH = CaeArchitecture((4, 4, 8, 8, 8, 4), 16)

    def test_zero_iterations_returns_initial_params(self):
        data = patch_set(0, 16, 16)
        res = train(data, TrainConfig(max_iterations=0, seed=9), self.ARCH)
        init = CaeParams.initialize(self.ARCH, seed=9)
        assert res.history == []
        for name, value in init.tensors().items():
            np.testing.assert_array_equal(res.params.tensors()[name], value)

    def test_seeded_runs_are_identical(self):
        data = patch_set(0, 20, 16)
        cfg = TrainConfig(max_iterations=30, seed=4, batch_size=4)
        a = train(data, cfg, self.ARCH)
        b = train(data, cfg, self.ARCH)
        assert [r.total for r in a.history] == [r.total for r in b.history]

    def test_empty_and_small_datasets(self):
        with pytest.raises(DatasetError):
            train(np.zeros((0, 1, 16, 16)), TrainConfig(), self.ARCH)
        with pytest.raises(DatasetError):
            train(np.zeros((3, 1, 16, 16)), TrainConfig(batch_size=4), self.ARCH)

    def test_single_patch_overfit(self):
        data = patch_set(3, 1, 16)
        res = train(data, TrainConfig(max_iterations=500, batch_size=1, seed=0), self.ARCH)
        assert res.history[-1].total < res.history[0].total

    def test_resume_matches_uninterrupted_run(self, tmp_path):
        data = patch_set(1, 16, 16)
        cfg = TrainConfig(max_iterations=12, batch_size=4, seed=2, checkpoint_interval=5)
        full = train(data, cfg, self.ARCH, checkpoint_dir=tmp_path)
        assert [p.name for p in full.checkpoints] == ["ckpt_00000005.caep", "ckpt_00000010.caep", "ckpt_00000012.caep"]
        resumed = train(data, cfg, resume=load_checkpoint(tmp_path / "ckpt_00000005.caep"))
        assert [r.total for r in resumed.history] == [r.total for r in full.history[5:]]
        for name, value in full.params.tensors().items():
            np.testing.assert_array_equal(resumed.params.tensors()[name], value)

    def test_history_csv(self, tmp_path):
        data = patch_set(1, 4, 16)
        res = train(data, TrainConfig(max_iterations=3, batch_size=2), self.ARCH)
        write_history_csv(tmp_path / "h.csv", res.history)
        lines = (tmp_path / "h.csv").read_text().splitlines()
        assert lines[0] == "iteration,J,mse_term,rate_term"
        assert len(lines) == 4 and lines[1].startswith("0,")


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        params = CaeParams.initialize(CaeArchitecture((2, 3, 4, 5, 6, 7), 24), seed=11)
        save_checkpoint(tmp_path / "m.caep", params, iteration=42)
        ck = load_checkpoint(tmp_path / "m.caep")
        assert ck.iteration == 42
        assert ck.params.architecture == params.architecture
        for name, value in params.tensors().items():
            np.testing.assert_array_equal(ck.params.tensors()[name], value)
        assert ck.params.model_id() == params.model_id()

    def test_layout(self, tmp_path):
        params = CaeParams.initialize(TOY)
        save_checkpoint(tmp_path / "m.caep", params)
        raw = (tmp_path / "m.caep").read_bytes()
        assert raw[:4] == b"CAEP" and raw[4] == 1 and raw[5] == 6
        assert raw[6:18] == b"\x02\x00" * 6 and raw[18:20] == b"\x08\x00"

    def test_bad_magic(self, tmp_path):
        (tmp_path / "bad").write_bytes(b"XXXX" + b"\0" * 20)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "bad")

    def test_truncated(self, tmp_path):
        save_checkpoint(tmp_path / "m.caep", CaeParams.initialize(TOY))
        raw = (tmp_path / "m.caep").read_bytes()
        (tmp_path / "t.caep").write_bytes(raw[:-3])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "t.caep")

    def test_model_id_depends_on_weights(self):
        a = CaeParams.initialize(TOY, seed=0)
        b = CaeParams.initialize(TOY, seed=1)
        assert len(a.model_id()) == 8 and a.model_id() != b.model_id()

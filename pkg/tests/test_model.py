import numpy as np
import pytest

from tucl.errors import CorruptFileError, DimensionError, ParameterError
from tucl.losses import seg_loss
from tucl.model import ModelConfig, TuclModel, binarize, forward
from tucl.rng import Stream
from tucl.tensor import backward, no_grad
from tucl.tpa import cycle_loss
from tucl.volume_io import MultiContrastVolume, RegionMask

from conftest import rel_err

SMALL = ModelConfig(widths=(4, 6), token_width=8, heads=2, prompt_width=4)


def volume(rng, n):
    return MultiContrastVolume(rng.normal(size=(4, n, n, n)))


@pytest.mark.parametrize("n", [12, 16, 24])
def test_output_shape_and_range(rng, n):
    y = TuclModel(seed=0).forward(volume(rng, n))
    assert y.array.shape == (3, n, n, n)
    assert np.all((y.array > 0) & (y.array < 1))
    assert not y.binarized


def test_zero_weights_give_one_half(rng):
    model = TuclModel(SMALL, seed=1)
    model.set_flat(np.zeros_like(model.get_flat()))
    np.testing.assert_array_equal(model.forward(volume(rng, 8)).array, 0.5)


def test_spatial_dims_must_divide_by_four(rng):
    with pytest.raises(DimensionError):
        TuclModel(SMALL).forward(MultiContrastVolume(rng.normal(size=(4, 10, 12, 12))))


def test_wrong_channel_count(rng):
    with pytest.raises(DimensionError):
        TuclModel(SMALL).run(rng.normal(size=(3, 8, 8, 8)))


class TestDeterminism:
    def test_same_seed_same_weights(self):
        assert TuclModel(SMALL, 5).get_flat().tobytes() == TuclModel(SMALL, 5).get_flat().tobytes()
        assert not np.array_equal(TuclModel(SMALL, 5).get_flat(), TuclModel(SMALL, 6).get_flat())

    def test_deterministic_inference(self, rng):
        model, x = TuclModel(SMALL, 2), volume(rng, 8)
        assert model.forward(x).array.tobytes() == model.forward(x).array.tobytes()

    def test_stochastic_pass_depends_only_on_seed(self, rng):
        model, x = TuclModel(SMALL, 2), volume(rng, 8)
        a = model.forward(x, stochastic=True, seed=4).array
        b = forward(model, x, stochastic=True, seed=4).array
        c = model.forward(x, stochastic=True, seed=Stream(9, "x")).array
        assert a.tobytes() == b.tobytes()
        assert not np.array_equal(a, c)

    def test_zero_dropout_stochastic_equals_deterministic(self, rng):
        from dataclasses import replace
        model, x = TuclModel(replace(SMALL, dropout=0.0), 2), volume(rng, 8)
        np.testing.assert_array_equal(model.forward(x, stochastic=True, seed=3).array,
                                      model.forward(x).array)


def test_use_tpa_off_has_no_prompt_features(rng):
    from dataclasses import replace
    out = TuclModel(replace(SMALL, use_tpa=False), 0).run(volume(rng, 8))
    assert out.prompt_features is None


class TestBinarize:
    def test_threshold_is_strict(self):
        y = RegionMask(np.full((3, 2, 2, 2), 0.5))
        assert binarize(y).array.sum() == 0
        assert binarize(y, threshold=0.49).array.sum() == 24

    def test_hierarchy_enforced(self):
        v = np.zeros((3, 2, 2, 2))
        v[2, 0, 0, 0] = 0.9          # ET alone
        v[1, 1, 0, 0] = 0.9          # TC without WT
        v[:, 1, 1, 1] = 0.9          # consistent chain
        out = binarize(RegionMask(v)).array
        assert out[2, 0, 0, 0] == 0 and out[1, 1, 0, 0] == 0
        assert out[:, 1, 1, 1].tolist() == [1, 1, 1]
        assert np.all(out[1] <= out[0]) and np.all(out[2] <= out[1])

    def test_result_binarized(self, rng):
        out = binarize(RegionMask(rng.random((3, 4, 4, 4))))
        assert out.binarized and set(np.unique(out.array)) <= {0.0, 1.0}


def test_end_to_end_gradient_sample(rng):
    """Autodiff vs central differences on a random 1% of parameters, 12³ input."""
    model = TuclModel(SMALL, seed=3)
    x = volume(rng, 12)
    truth = np.zeros((3, 12, 12, 12))
    truth[0, 3:9, 3:9, 3:9] = 1
    truth[1, 4:8, 4:8, 4:8] = 1
    truth[2, 5:7, 5:7, 5:7] = 1

    def objective():
        out = model.run(x)
        return seg_loss(out.prob, truth) + cycle_loss(model.prompts, out.prompt_features,
                                                      RegionMask(out.prob), model.phi) * 0.1

    model.zero_grad()
    backward(objective())
    params = model.parameters()
    sizes = [p.data.size for p in params]
    total = sum(sizes)
    picks = np.sort(rng.choice(total, size=max(1, total // 100), replace=False))
    offsets = np.cumsum([0] + sizes)
    analytic, numeric = [], []
    for flat_i in picks:
        k = int(np.searchsorted(offsets, flat_i, side="right") - 1)
        p, j = params[k], flat_i - offsets[k]
        analytic.append(0.0 if p.grad is None else p.grad.reshape(-1)[j])
        view = p.data.reshape(-1)
        old = view[j]
        vals = []
        for h in (1e-5, -1e-5):
            view[j] = old + h
            with no_grad():
                vals.append(objective().item())
        view[j] = old
        numeric.append((vals[0] - vals[1]) / 2e-5)
    assert rel_err(analytic, numeric) < 1e-3


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, rng):
        model = TuclModel(SMALL, seed=8)
        model.save(tmp_path / "ckpt", step=12, extra={"note": "x"})
        loaded, header = TuclModel.load(tmp_path / "ckpt")
        assert header["step"] == 12 and header["extra"] == {"note": "x"}
        assert loaded.config == SMALL
        assert loaded.get_flat().tobytes() == model.get_flat().tobytes()
        x = volume(rng, 8)
        assert loaded.forward(x).array.tobytes() == model.forward(x).array.tobytes()

    def test_not_a_checkpoint(self, tmp_path, rng):
        from tucl.volume_io import write_volume
        write_volume(volume(rng, 8), tmp_path / "vol")
        with pytest.raises(CorruptFileError):
            TuclModel.load(tmp_path / "vol")

    def test_payload_length_checked(self):
        model = TuclModel(SMALL)
        with pytest.raises(CorruptFileError):
            model.set_flat(np.zeros(model.get_flat().size - 1))


def test_config_validation():
    with pytest.raises(ParameterError):
        ModelConfig(dropout=1.0)
    with pytest.raises(ParameterError):
        ModelConfig(token_width=10, heads=3)

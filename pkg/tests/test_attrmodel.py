import math

import numpy as np
import pytest

from matattr.attrmodel import (
    TrainConfig,
    TwoLayerModel,
    batch_loss_and_grads,
    forward,
    init_model,
    load_model,
    loss_distribution,
    loss_separation,
    loss_separation_grad,
    loss_unary,
    loss_unary_grad,
    predict,
    save_model,
    single_loss_and_grads,
    train,
)
from matattr.attrspace import KdeConfig, beta_kl
from matattr.errors import InputError, NumericsError, ShapeError


def oracle_forward(model, x):
    """Scalar-loop forward pass."""
    h = np.zeros(model.hidden_dim)
    for i in range(model.hidden_dim):
        z = model.b1[i]
        for j in range(model.input_dim):
            z += model.w1[i, j] * x[j]
        h[i] = min(max(z, 0.0), 1.0)
    out = np.zeros(model.output_dim)
    for i in range(model.output_dim):
        z = model.b2[i]
        for j in range(model.hidden_dim):
            z += model.w2[i, j] * h[j]
        out[i] = min(max(z, 0.0), 1.0)
    return out


def oracle_unary(preds, cats, amat):
    total = 0.0
    for k in range(amat.shape[0]):
        sel = preds[cats == k + 1]
        mean = sel.mean(axis=0)
        for m in range(amat.shape[1]):
            total += (amat[k, m] - mean[m]) ** 2
    return total


def oracle_separation(preds, cats, amat, variant="signed"):
    total = 0.0
    n = preds.shape[0]
    for i in range(n):
        for j in range(n):
            if cats[i] == cats[j]:
                continue
            for m in range(amat.shape[1]):
                w = 2 * abs(amat[cats[i] - 1, m] - amat[cats[j] - 1, m]) - 1
                if variant == "squared":
                    w = w * w
                total += w * (preds[i, m] - preds[j, m]) ** 2
    return total


def interior_setup(seed, n=12, d=6, h=5, m=3, k=3):
    """Random instance where no unit sits at a clamp boundary."""
    rng = np.random.default_rng(seed)
    model = TwoLayerModel(
        w1=rng.normal(0.0, 0.15 / math.sqrt(d), (h, d)),
        b1=np.full(h, 0.5) + rng.normal(0, 0.02, h),
        w2=rng.normal(0.0, 0.15 / math.sqrt(h), (m, h)),
        b2=np.full(m, 0.5) + rng.normal(0, 0.02, m),
    )
    x = rng.uniform(0.2, 0.8, (n, d))
    cats = np.array([i % k + 1 for i in range(n)])
    amat = rng.uniform(0.2, 0.8, (k, m))
    return model, x, cats, amat


class TestForward:
    def test_clamp_cases_from_bias(self):
        model = TwoLayerModel(
            w1=np.zeros((4, 2)), b1=np.zeros(4),
            w2=np.zeros((3, 4)), b2=np.array([-1.0, 0.5, 2.0]),
        )
        out = forward(model, np.array([0.3, 0.4]))
        np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])

    def test_all_ones_mask_is_identity(self):
        model, x, _, _ = interior_setup(1)
        masks = {"w1": np.ones_like(model.w1), "w2": np.ones_like(model.w2)}
        np.testing.assert_array_equal(forward(model, x), forward(model, x, masks))

    def test_matches_scalar_oracle(self):
        model, x, _, _ = interior_setup(2)
        out = forward(model, x)
        for i in range(x.shape[0]):
            np.testing.assert_allclose(out[i], oracle_forward(model, x[i]),
                                       atol=1e-12)

    def test_output_in_unit_interval(self):
        rng = np.random.default_rng(3)
        model = TwoLayerModel(
            w1=rng.normal(0, 3, (8, 4)), b1=rng.normal(0, 3, 8),
            w2=rng.normal(0, 3, (5, 8)), b2=rng.normal(0, 3, 5),
        )
        out = forward(model, rng.normal(0, 2, (50, 4)))
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_shape_mismatch(self):
        model, _, _, _ = interior_setup(4)
        with pytest.raises(ShapeError):
            forward(model, np.zeros((3, model.input_dim + 1)))


class TestLossUnary:
    def test_exact_mean_match_is_zero(self):
        amat = np.array([[0.6, 0.2]])
        preds = np.array([[0.5, 0.1], [0.7, 0.3]])
        assert loss_unary(preds, np.array([1, 1]), amat) == pytest.approx(0.0, abs=1e-15)

    def test_hand_arithmetic(self):
        amat = np.array([[0.6, 0.2]])
        preds = np.array([[0.5, 0.2]])
        assert loss_unary(preds, np.array([1]), amat) == pytest.approx(0.01, abs=1e-15)

    def test_matches_scalar_oracle(self):
        _, _, cats, amat = interior_setup(5)
        rng = np.random.default_rng(6)
        preds = rng.random((12, 3))
        assert loss_unary(preds, cats, amat) == pytest.approx(
            oracle_unary(preds, cats, amat), abs=1e-12
        )

    def test_missing_category_error(self):
        amat = np.zeros((2, 2))
        with pytest.raises(InputError, match="category 2"):
            loss_unary(np.zeros((2, 2)), np.array([1, 1]), amat)

    def test_grad_matches_central_differences(self):
        _, _, cats, amat = interior_setup(7)
        rng = np.random.default_rng(8)
        preds = rng.uniform(0.1, 0.9, (12, 3))
        g = loss_unary_grad(preds, cats, amat)
        eps = 1e-6
        for idx in [(0, 0), (5, 2), (11, 1)]:
            pp = preds.copy(); pp[idx] += eps
            pm = preds.copy(); pm[idx] -= eps
            num = (loss_unary(pp, cats, amat) - loss_unary(pm, cats, amat)) / (2 * eps)
            assert g[idx] == pytest.approx(num, rel=1e-5, abs=1e-9)


class TestLossDistribution:
    def test_shared_definition_with_matrix_regularizer(self):
        rng = np.random.default_rng(9)
        preds = rng.random((5, 4))
        assert loss_distribution(preds) == pytest.approx(
            beta_kl(preds.ravel()), abs=0
        )

    def test_split_beats_centered(self):
        centered = np.full((10, 3), 0.5)
        rng = np.random.default_rng(10)
        split = np.where(rng.random((10, 3)) < 0.5, 0.05, 0.95)
        assert loss_distribution(split) < loss_distribution(centered)


class TestLossSeparation:
    def test_identical_rows_attract(self):
        # equal attribute rows give w = -1 everywhere: larger prediction
        # gaps make the subtracted term more negative (a penalty)
        amat = np.array([[0.3, 0.7], [0.3, 0.7]])
        cats = np.array([1, 2])
        near = np.array([[0.5, 0.5], [0.52, 0.5]])
        far = np.array([[0.2, 0.5], [0.9, 0.5]])
        s_near = loss_separation(near, cats, amat)
        s_far = loss_separation(far, cats, amat)
        assert s_far < s_near < 0

    def test_half_gap_rows_contribute_zero(self):
        amat = np.array([[0.75, 0.25], [0.25, 0.75]])  # |diff| = 0.5, w = 0
        cats = np.array([1, 2])
        rng = np.random.default_rng(11)
        preds = rng.random((2, 2))
        assert loss_separation(preds, cats, amat) == pytest.approx(0.0, abs=1e-12)

    def test_single_category_contributes_zero(self):
        amat = np.array([[0.9, 0.1], [0.1, 0.9]])
        preds = np.array([[0.4, 0.6], [0.2, 0.8]])
        assert loss_separation(preds, np.array([1, 1]), amat) == 0.0

    @pytest.mark.parametrize("variant", ["signed", "squared"])
    def test_matches_scalar_oracle(self, variant):
        _, _, cats, amat = interior_setup(12)
        rng = np.random.default_rng(13)
        preds = rng.random((12, 3))
        assert loss_separation(preds, cats, amat, variant) == pytest.approx(
            oracle_separation(preds, cats, amat, variant), abs=1e-10
        )

    @pytest.mark.parametrize("variant", ["signed", "squared"])
    def test_grad_matches_central_differences(self, variant):
        _, _, cats, amat = interior_setup(14)
        rng = np.random.default_rng(15)
        preds = rng.uniform(0.1, 0.9, (12, 3))
        g = loss_separation_grad(preds, cats, amat, variant)
        eps = 1e-6
        for idx in [(0, 0), (7, 1), (11, 2)]:
            pp = preds.copy(); pp[idx] += eps
            pm = preds.copy(); pm[idx] -= eps
            num = (loss_separation(pp, cats, amat, variant)
                   - loss_separation(pm, cats, amat, variant)) / (2 * eps)
            assert g[idx] == pytest.approx(num, rel=1e-4, abs=1e-8)


class TestModelGradients:
    @pytest.mark.parametrize("which", ["unary", "distribution", "separation"])
    def test_parameter_gradients_match_central_differences(self, which):
        model, x, cats, amat = interior_setup(16)
        kcfg = KdeConfig()
        _, grads = single_loss_and_grads(model, x, cats, amat, which, kcfg)
        eps = 1e-5
        for name in ("w1", "b1", "w2", "b2"):
            param = getattr(model, name)
            flat = param.ravel()
            rng = np.random.default_rng(17)
            for i in rng.choice(flat.size, size=min(6, flat.size), replace=False):
                orig = flat[i]
                flat[i] = orig + eps
                fp, _ = single_loss_and_grads(model, x, cats, amat, which, kcfg)
                flat[i] = orig - eps
                fm, _ = single_loss_and_grads(model, x, cats, amat, which, kcfg)
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                ana = grads[name].ravel()[i]
                assert ana == pytest.approx(num, rel=1e-4, abs=1e-7), (which, name)


def blob_dataset(seed, n_per=40, k=3, d=12):
    """Linearly separable feature blobs for fast training tests."""
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.2, 0.8, (k, d))
    x, cats = [], []
    for c in range(k):
        x.append(centers[c] + rng.normal(0, 0.05, (n_per, d)))
        cats.extend([c + 1] * n_per)
    return np.clip(np.vstack(x), 0, 1), np.array(cats)


class TestTrain:
    def test_zero_epochs_returns_initialized_model(self):
        x, cats = blob_dataset(18)
        amat = np.random.default_rng(19).uniform(0.2, 0.8, (3, 4))
        cfg = TrainConfig(epochs=0, hidden=8, seed=4)
        model, trace = train(x, cats, amat, cfg)
        scale = float(np.sqrt((x ** 2).sum(axis=1).mean()))
        ref = init_model(x.shape[1], 8, 4, seed=4, input_scale=scale)
        assert trace == []
        np.testing.assert_array_equal(model.w1, ref.w1)

    def test_bit_reproducible(self):
        x, cats = blob_dataset(20)
        amat = np.random.default_rng(21).uniform(0.2, 0.8, (3, 4))
        cfg = TrainConfig(epochs=3, hidden=8, batch_size=32, seed=5)
        m1, t1 = train(x, cats, amat, cfg)
        m2, t2 = train(x, cats, amat, cfg)
        np.testing.assert_array_equal(m1.w1, m2.w1)
        np.testing.assert_array_equal(m1.b2, m2.b2)
        assert t1 == t2

    def test_unary_only_trace_non_increasing(self):
        x, cats = blob_dataset(22)
        amat = np.random.default_rng(23).uniform(0.2, 0.8, (3, 4))
        cfg = TrainConfig(epochs=20, hidden=8, batch_size=32, seed=6,
                          w1=0.0, w2=0.0, mask_fraction=0.0)
        _, trace = train(x, cats, amat, cfg)
        assert trace[-1]["unary"] < trace[0]["unary"]

    def test_mean_matching_on_held_out(self):
        # a strong distribution term biases the equilibrium means, so the
        # mean-matching fixture keeps it small
        x, cats = blob_dataset(24, n_per=240)
        amat = np.random.default_rng(25).uniform(0.1, 0.9, (3, 4))
        hold = np.arange(len(cats)) % 2 == 0
        cfg = TrainConfig(epochs=200, hidden=16, batch_size=96, seed=7,
                          mask_fraction=0.0, w1=1e-4)
        model, _ = train(x[~hold], cats[~hold], amat, cfg)
        preds = predict(model, x[hold])
        for k in (1, 2, 3):
            mean = preds[cats[hold] == k].mean(axis=0)
            assert np.abs(mean - amat[k - 1]).max() < 0.05

    def test_missing_category_rejected(self):
        x, cats = blob_dataset(26)
        amat = np.zeros((4, 3))  # category 4 never present
        with pytest.raises(InputError, match="cover"):
            train(x, cats, amat, TrainConfig(epochs=1))

    def test_mask_fraction_zero_matches_maskless_math(self):
        model, x, cats, amat = interior_setup(27)
        cfg = TrainConfig(mask_fraction=0.0)
        kcfg = KdeConfig()
        ones = {"w1": np.ones_like(model.w1), "w2": np.ones_like(model.w2)}
        p_none, g_none = batch_loss_and_grads(model, x, cats, amat, cfg, kcfg, None)
        p_ones, g_ones = batch_loss_and_grads(model, x, cats, amat, cfg, kcfg, ones)
        assert p_none == p_ones
        for key in g_none:
            np.testing.assert_array_equal(g_none[key], g_ones[key])


class TestModelFiles:
    def test_round_trip(self, tmp_path):
        model, _, _, _ = interior_setup(28)
        path = tmp_path / "model.json"
        save_model(path, model, config={"hidden": 5}, seed=3)
        back = load_model(path)
        np.testing.assert_array_equal(back.w1, model.w1)
        np.testing.assert_array_equal(back.b2, model.b2)

    def test_missing_field(self, tmp_path):
        path = tmp_path / "model.json"
        path.write_text('{"W1": [[0.1]]}')
        with pytest.raises(InputError):
            load_model(path)

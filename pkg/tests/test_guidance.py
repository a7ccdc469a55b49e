import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ddimedit import autodiff as ad
from ddimedit.autodiff import Tensor
from ddimedit.datasets import toy_datasets
from ddimedit.denoiser import CallableNoise, ConstantNoise
from ddimedit.guidance import (
    ChannelStats,
    DegenerateDirectionError,
    EditRecipe,
    Embedder,
    LinearProbe,
    ScaledEmbedder,
    TrainedClassifier,
    ZeroEmbeddingError,
    builtin_embedders,
    directional_loss,
    finetune_objective,
    global_loss,
    identity_loss,
    l_simple,
    load_anchors,
    load_recipe,
    save_anchors,
    save_recipe,
)
from ddimedit.schedule import make_linear_schedule

from gradcheck import compare

# Irreducible l_simple for x0 ~ N((1,0), 0.25 I), T=1000 linear schedule:
# mean over t of d(1-ab)ab s^2/(ab s^2 + 1 - ab), evaluated in 50-digit arithmetic.
GAUSS_RESIDUAL = 0.346106812167372


class Identity(Embedder):
    """Embeds a vector as itself."""

    def __init__(self, dim, anchors):
        self.dim = dim
        super().__init__(anchors)

    def embed_image(self, x):
        return ad.reshape(ad._t(x), (-1,))


class Constant(Embedder):
    dim = 2

    def embed_image(self, x):
        x = ad._t(x)
        return ad.add(ad.mul(ad.tsum(x), 0.0), np.array([1.0, 2.0]))


E2 = Identity(2, {"a": [1.0, 0.0], "b": [0.0, 1.0], "c": [0.0, 0.0]})


@pytest.mark.parametrize("x, expected", [([2.0, 0.0], 0.0), ([-3.0, 0.0], 2.0), ([0.0, 5.0], 1.0)])
def test_global_loss_cases(x, expected):
    assert global_loss(E2, np.array(x), "a").item() == pytest.approx(expected, abs=1e-15)


def test_global_loss_zero_embedding():
    with pytest.raises(ZeroEmbeddingError):
        global_loss(E2, np.zeros(2), "a")
    with pytest.raises(ZeroEmbeddingError):
        global_loss(E2, np.ones(2), "c")


@pytest.mark.parametrize("x_gen, expected", [([0.0, 2.0], 0.0), ([2.0, 0.0], 2.0), ([2.0, 2.0], 1.0)])
def test_directional_loss_cases(x_gen, expected):
    # x_ref = (1, 1); anchor direction b - a = (-1, 1)
    x_ref = np.array([1.0, 1.0])
    got = directional_loss(E2, np.array(x_gen), "b", x_ref, "a").item()
    assert got == pytest.approx(expected, abs=1e-15)


def test_directional_loss_degenerate():
    with pytest.raises(DegenerateDirectionError):
        directional_loss(E2, np.ones(2), "b", np.ones(2), "a")
    with pytest.raises(DegenerateDirectionError):
        directional_loss(E2, np.ones(2), "a", np.zeros(2), "a")


vec = st.lists(st.floats(-5, 5), min_size=3, max_size=3).map(np.array)


@given(vec, vec, vec, vec, st.floats(1e-3, 1e3))
def test_losses_in_range_and_scale_invariant(x_gen, x_ref, a, b, c):
    if np.linalg.norm(x_gen - x_ref) < 1e-6 or np.linalg.norm(a - b) < 1e-6:
        return
    e = Identity(3, {"ref": a, "tar": b})
    d = directional_loss(e, x_gen, "tar", x_ref, "ref").item()
    assert -1e-12 <= d <= 2 + 1e-12
    scaled = directional_loss(ScaledEmbedder(e, c), x_gen, "tar", x_ref, "ref").item()
    assert scaled == pytest.approx(d, abs=1e-9)
    if np.linalg.norm(x_gen) > 1e-6 and np.linalg.norm(b) > 1e-6:
        assert -1e-12 <= global_loss(e, x_gen, "tar").item() <= 2 + 1e-12


def test_identity_loss_examples():
    x0 = np.random.default_rng(0).random((1, 4, 4))
    assert identity_loss(x0, x0, 0.3, 0.3).item() == 0.0
    assert identity_loss(x0 + 0.2, x0, 0.0, 0.0).item() == 0.0
    assert identity_loss(x0 + 0.1, x0, 0.3, 0.0).item() == pytest.approx(0.03, rel=1e-12)
    with pytest.raises(ad.ShapeError):
        identity_loss(x0, x0[0], 0.3)


def test_identity_loss_id_term():
    e = Identity(2, {})
    x0 = np.array([1.0, 0.0])
    x_hat = np.array([0.0, 2.0])
    got = identity_loss(x_hat, x0, 0.0, 0.5, e).item()
    assert got == pytest.approx(0.5, rel=1e-12)
    assert identity_loss(x_hat, x0, 0.0, 0.5, None).item() == 0.0


@given(st.lists(st.floats(-2, 2), min_size=4, max_size=4))
def test_identity_loss_zero_iff_equal(delta):
    x0 = np.linspace(0, 1, 4)
    val = identity_loss(x0 + np.array(delta), x0, 0.3).item()
    assert (val == 0.0) == (not np.any(delta))


def test_objective_sentinel_at_equality():
    x0 = np.array([0.2, 0.7])
    total, direc, ident = finetune_objective(E2, x0, x0, EditRecipe(y_ref="a", y_tar="b", lambda_l1=0.3))
    assert (total.item(), direc, ident) == (2.0, 2.0, 0.0)


def test_objective_without_identity_equals_directional():
    x0, x_hat = np.array([0.2, 0.7]), np.array([0.1, 1.0])
    r = EditRecipe(y_ref="a", y_tar="b", lambda_l1=0.0, lambda_id=0.0)
    total, _, _ = finetune_objective(E2, x_hat, x0, r)
    assert total.item() == directional_loss(E2, x_hat, "b", x0, "a").item()


def test_objective_moving_along_anchor_direction_helps():
    e = LinearProbe((2,), dim=2, seed=3)
    x0 = np.array([0.3, -0.4])
    # pull the anchor direction back into data space through the (invertible) map
    dt = e.embed_anchor("bright") - e.embed_anchor("dark")
    along = np.linalg.solve(e.weight.T, dt)
    side = np.array([-along[1], along[0]])
    unmoved = x0 + 0.5 * side
    moved = unmoved + 0.5 * along
    r = EditRecipe(y_ref="dark", y_tar="bright", lambda_l1=0.0)
    assert finetune_objective(e, moved, x0, r)[0].item() < finetune_objective(e, unmoved, x0, r)[0].item()


def test_loss_gradients():
    rng = np.random.default_rng(1)
    e = ChannelStats(1)
    x0 = rng.random((1, 4, 4))
    x = Tensor(x0 + 0.1 * rng.standard_normal((1, 4, 4)), requires_grad=True)
    r = EditRecipe(lambda_l1=0.3)

    assert compare(lambda: finetune_objective(e, x, x0, r)[0], {"x": x}) < 1e-6


# -- l_simple ------------------------------------------------------------------


def test_l_simple_zero_model_expectation():
    s = make_linear_schedule()
    x0 = np.zeros((20000, 3))
    val = l_simple(ConstantNoise(0.0, (3,)), x0, s, np.random.default_rng(0)).item()
    # chi-square(3): mean 3, sd sqrt(6); standard error sqrt(6 / n)
    assert abs(val - 3.0) < 4 * np.sqrt(6 / 20000)


def test_l_simple_oracle_hook_is_zero():
    s = make_linear_schedule()
    x0 = np.random.default_rng(0).standard_normal((5, 2))
    # replay the generator to learn the noise l_simple will draw
    r = np.random.default_rng(7)
    r.integers(1, s.T + 1, size=5)
    w = r.standard_normal((5, 2))
    oracle = CallableNoise(lambda x, tt: w, (2,))
    assert l_simple(oracle, x0, s, np.random.default_rng(7)).item() == 0.0


def test_l_simple_trained_gaussian_near_residual(gaussian_model):
    x = toy_datasets("gaussian2d", 200_000, 9)
    val = l_simple(gaussian_model, x, gaussian_model.schedule, np.random.default_rng(3)).item()
    assert val >= GAUSS_RESIDUAL - 0.01
    assert val <= GAUSS_RESIDUAL * 1.05


# -- embedders -----------------------------------------------------------------


def test_builtin_embedders():
    a = builtin_embedders("linear-probe", data_shape=(1, 4, 4), seed=5)
    b = builtin_embedders("linear-probe", data_shape=(1, 4, 4), seed=5)
    np.testing.assert_array_equal(a.weight, b.weight)
    x = np.random.default_rng(0).random((1, 4, 4))
    assert a.embed_image(x).data.tobytes() == b.embed_image(x).data.tobytes()
    assert isinstance(builtin_embedders("channel-stats"), ChannelStats)
    with pytest.raises(KeyError):
        builtin_embedders("no-such-encoder")


def test_channel_stats_zero_image():
    f = ChannelStats(3).embed_image(np.zeros((3, 4, 4))).data
    np.testing.assert_array_equal(f[:3], 0.0)
    assert f.shape == (9,)


def test_channel_stats_shape_check():
    with pytest.raises(ad.ShapeError):
        ChannelStats(1).embed_image(np.zeros((3, 4, 4)))


def test_channel_stats_moment_tracks_horizontal_position():
    e = ChannelStats(1)
    left = np.zeros((1, 4, 8))
    left[..., :2] = 1
    right = left[..., ::-1]
    assert e.embed_image(right).data[2] > 0 > e.embed_image(left).data[2]
    assert e.embed_image(left + 0.3).data[2] == pytest.approx(e.embed_image(left).data[2])


@given(st.floats(0.01, 0.3))
def test_brightening_lowers_directional_loss(delta):
    e = ChannelStats(1)
    x0 = toy_datasets("blobs-images-32", 1, 4, size=8)[0]
    noise = 0.02 * np.random.default_rng(1).standard_normal(x0.shape)
    x_gen = x0 + noise
    before = directional_loss(e, x_gen, "bright", x0, "neutral").item()
    after = directional_loss(e, x_gen + delta, "bright", x0, "neutral").item()
    assert after < before


def test_trained_classifier_learns():
    rng = np.random.default_rng(0)
    examples = {"dark": 0.2 + 0.05 * rng.random((20, 1, 4, 4)), "bright": 0.8 + 0.05 * rng.random((20, 1, 4, 4))}
    e = TrainedClassifier(examples, steps=150)
    assert e.history[-1] < e.history[0]
    assert set(e.anchors) == {"bright", "dark"}
    x = examples["dark"][0]
    assert e.embed_image(x).data.tobytes() == e.embed_image(x).data.tobytes()


def test_zero_gradient_embedder_is_constant():
    e = Constant()
    x = Tensor(np.ones(2), requires_grad=True)
    with ad.Graph() as g:
        out = ad.tsum(e.embed_image(x))
    assert np.all(ad.backward(g, out, {"x": x})["x"] == 0)


# -- files ---------------------------------------------------------------------


def test_anchor_file_round_trip(tmp_path):
    anchors = {"bright": np.array([1.0, 0.1, 1 / 3]), "dark": np.array([-2.5, 0.0, 1e-20])}
    save_anchors(tmp_path / "a.txt", anchors)
    back = load_anchors(tmp_path / "a.txt")
    assert list(back) == list(anchors)
    for k in anchors:
        assert back[k].tobytes() == anchors[k].tobytes()


def test_anchor_file_parsing(tmp_path):
    p = tmp_path / "a.txt"
    p.write_text("# comment\nbright 1 2 3  # trailing\n\nshift 0.5,0.1 0.2\n")
    got = load_anchors(p)
    np.testing.assert_array_equal(got["bright"], [1, 2, 3])
    p.write_text("lonely\n")
    with pytest.raises(ValueError):
        load_anchors(p)


def test_recipe_file_round_trip(tmp_path):
    r = EditRecipe(y_tar="shift-right", t0=37, S_for=9, lambda_l1=0.0, K=3, lr=1.5e-3, lr_mode="additive")
    save_recipe(tmp_path / "r.txt", r)
    assert load_recipe(tmp_path / "r.txt") == r


@pytest.mark.parametrize("text", ["t0=0\n", "bogus=1\n", "K\n", "lr_mode=weird\n", "lambda_l1=-1\n"])
def test_recipe_file_errors(tmp_path, text):
    p = tmp_path / "r.txt"
    p.write_text(text)
    with pytest.raises(ValueError):
        load_recipe(p)

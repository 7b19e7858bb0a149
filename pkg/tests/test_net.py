import numpy as np
import pytest
from hypothesis import given, strategies as st

from segkan import diffengine as de
from segkan.diffengine import Array
from segkan.gradcheck import check_end_to_end
from segkan.net import (ModelConfig, PatchGrid, SegKanModel, binarize, bce_with_logits, dice_score,
                        factor_patch_count, forward, patchify, segmentation_loss, soft_dice_loss,
                        unpatchify)

SMALL = ModelConfig(patches=8, channels=4, n_fkac=1, h_dim=8, reduction=2)


# ---------------------------------------------------------------- patch grid

@pytest.mark.parametrize("P,want", [(1, (1, 1, 1)), (2, (1, 1, 2)), (8, (2, 2, 2)),
                                    (16, (2, 2, 4)), (32, (2, 4, 4)), (64, (4, 4, 4))])
def test_factor_patch_count(P, want):
    assert factor_patch_count(P) == want


@pytest.mark.parametrize("P", [0, 3, 12, -8])
def test_factor_patch_count_rejects(P):
    with pytest.raises(ValueError):
        factor_patch_count(P)


def test_patchify_single_patch(rng):
    v = rng.normal(size=(4, 6, 2))
    (patch,) = patchify(v, PatchGrid.for_volume(v.shape, 1))
    np.testing.assert_array_equal(patch.data, v)


def test_patchify_64_cube_sixteen():
    grid = PatchGrid.for_volume((64, 64, 64), 16)
    assert grid.counts == (2, 2, 4)
    patches = patchify(np.zeros((64, 64, 64)), grid)
    assert len(patches) == 16
    assert all(p.shape == (32, 32, 16) for p in patches)


def test_patch_raster_order_z_fastest():
    v = np.arange(4 * 4 * 4, dtype=float).reshape(4, 4, 4)
    patches = patchify(v, PatchGrid.for_volume(v.shape, 8))
    # patch 1 is the next tile along z, patch 2 along y, patch 4 along x
    np.testing.assert_array_equal(patches[1].data, v[:2, :2, 2:])
    np.testing.assert_array_equal(patches[2].data, v[:2, 2:, :2])
    np.testing.assert_array_equal(patches[4].data, v[2:, :2, :2])


@given(st.sampled_from([1, 2, 4, 8, 16, 32]), st.integers(0, 2**31))
def test_patchify_round_trip(P, seed):
    counts = factor_patch_count(P)
    shape = tuple(2 * c for c in counts)
    v = np.random.default_rng(seed).normal(size=shape)
    grid = PatchGrid.for_volume(shape, P)
    np.testing.assert_array_equal(unpatchify(patchify(v, grid), grid).data, v)


def test_patch_grid_indivisible():
    with pytest.raises(ValueError):
        PatchGrid.for_volume((5, 4, 4), 8)


# ---------------------------------------------------------------- forward

@pytest.fixture
def model():
    return SegKanModel(SMALL, (8, 8, 8), seed=3)


def test_forward_shapes(model, rng):
    v = rng.normal(size=(8, 8, 8))
    assert forward(model, v).shape == (8, 8, 8)
    assert forward(model, rng.normal(size=(2, 8, 8, 8))).shape == (2, 8, 8, 8)


def test_forward_batch_matches_single(model, rng):
    vs = rng.normal(size=(2, 8, 8, 8))
    batched = forward(model, vs).data
    for b in range(2):
        np.testing.assert_allclose(batched[b], forward(model, vs[b]).data, atol=1e-12)


def test_forward_purity(model, rng):
    v = rng.normal(size=(8, 8, 8))
    np.testing.assert_array_equal(forward(model, v).data, forward(model, v.copy()).data)


def test_forward_single_patch(rng):
    m = SegKanModel(ModelConfig(patches=1, channels=4, n_fkac=1, h_dim=4, reduction=2), (4, 4, 4))
    assert forward(m, rng.normal(size=(4, 4, 4))).shape == (4, 4, 4)


def test_forward_wrong_shape(model):
    with pytest.raises(de.ShapeError):
        forward(model, np.zeros((8, 8, 4)))


@pytest.mark.parametrize("temporal", ["ptsn", "lstm"])
@pytest.mark.parametrize("seed", range(3))
def test_patch_swap_changes_later_logits(temporal, seed):
    cfg = ModelConfig(patches=8, channels=4, n_fkac=1, h_dim=8, reduction=2, temporal=temporal)
    m = SegKanModel(cfg, (8, 8, 8), seed=seed)
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(8, 8, 8))
    grid = m.grid
    patches = [p.data for p in patchify(v, grid)]
    patches[0], patches[1] = patches[1], patches[0]
    swapped = unpatchify(patches, grid).data
    base = [p.data for p in patchify(forward(m, v).data, grid)]
    after = [p.data for p in patchify(forward(m, swapped).data, grid)]
    for i in range(2, 8):
        assert np.abs(base[i] - after[i]).max() > 1e-12


def test_parameter_names(model):
    names = set(model.parameters())
    assert {"embed.proj_w", "core.W_g", "core.W_h", "decoder.w", "decoder.skip_w"} <= names
    assert "embed.fkac0.fourier_a" in names


def test_load_state_shape_error(model):
    other = SegKanModel(ModelConfig(**{**SMALL.__dict__, "h_dim": 6}), (8, 8, 8))
    state = {k: v.data for k, v in other.parameters().items()}
    with pytest.raises(de.ShapeError, match="proj_w"):
        model.load_state(state)


def test_end_to_end_gradient():
    assert check_end_to_end(np.random.default_rng(7)) < 1e-3


# ---------------------------------------------------------------- losses

def test_soft_dice_perfect_prediction(rng):
    t = (rng.uniform(size=(4, 4, 4)) > 0.5).astype(float)
    n = t.size
    assert soft_dice_loss(Array(t), t).item() <= 1.0 / (2 * n + 1)


@pytest.mark.parametrize("n", [1, 10, 1000])
def test_soft_dice_half_probability(n):
    got = soft_dice_loss(Array(np.full(n, 0.5)), np.ones(n)).item()
    assert got == pytest.approx(1 - (n + 1) / (1.5 * n + 1), abs=1e-14)


def test_soft_dice_empty_empty():
    assert soft_dice_loss(de.zeros(9), np.zeros(9)).item() == 0.0


def test_soft_dice_monotone_in_overlap():
    t = np.ones(10)
    losses = [soft_dice_loss(Array(np.full(10, p)), t).item() for p in (0.0, 0.25, 0.5, 0.75, 1.0)]
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_soft_dice_rejects_soft_target():
    with pytest.raises(ValueError):
        soft_dice_loss(Array(np.ones(3)), np.array([0.0, 0.5, 1.0]))


def test_bce_matches_direct_formula(rng):
    z, t = rng.normal(size=20), (rng.uniform(size=20) > 0.5).astype(float)
    p = 1 / (1 + np.exp(-z))
    want = -np.mean(t * np.log(p) + (1 - t) * np.log(1 - p))
    assert bce_with_logits(Array(z), t).item() == pytest.approx(want, rel=1e-12)


def test_bce_large_logits_finite():
    assert np.isfinite(bce_with_logits(Array([800.0, -800.0]), np.array([0.0, 1.0])).item())


def test_segmentation_loss_batch_average(rng):
    z = rng.normal(size=(2, 3, 3, 3))
    t = (rng.uniform(size=z.shape) > 0.5).astype(float)
    sig = de.sigmoid(Array(z))
    dice = np.mean([soft_dice_loss(sig[i], t[i]).item() for i in range(2)])
    want = dice + 0.5 * bce_with_logits(Array(z), t).item()
    assert segmentation_loss(Array(z), t).item() == pytest.approx(want, abs=1e-14)


# ---------------------------------------------------------------- metrics

def test_dice_score_examples():
    a = np.array([1, 1, 0, 0])
    assert dice_score(a, a) == 1.0
    assert dice_score(a, 1 - a) == 0.0
    assert dice_score(a, np.array([0, 1, 1, 0])) == 0.5
    assert dice_score(np.zeros(4), np.zeros(4)) == 1.0


@given(st.integers(0, 2**31))
def test_dice_score_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = (rng.uniform(size=(2, 30)) > 0.5).astype(np.uint8)
    d = dice_score(a, b)
    assert d == dice_score(b, a)
    assert 0.0 <= d <= 1.0


def test_binarize_threshold():
    np.testing.assert_array_equal(binarize(np.array([-1.0, 0.0, 1e-9, 5.0])), [0, 0, 1, 1])

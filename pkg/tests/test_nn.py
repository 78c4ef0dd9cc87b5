import numpy as np
import pytest

from skeletal_radiance.errors import CheckpointError, DimensionError
from skeletal_radiance.nn import NEIGHBOR_OFFSETS_3D, Adam, Conv2d, Linear, Module, SparseConv3d, dilate_cells
from skeletal_radiance.tensor import Tensor, backward, mul


class Stack(Module):
    def __init__(self, rng):
        self.first = Linear(3, 4, rng)
        self.layers = [Linear(4, 4, rng), Linear(4, 2, rng)]


def test_linear_shapes(float64, rng):
    layer = Linear(3, 5, rng)
    assert layer(Tensor(rng.standard_normal((7, 3)))).shape == (7, 5)
    assert layer(Tensor(rng.standard_normal(3))).shape == (5,)
    with pytest.raises(DimensionError):
        layer(Tensor(np.ones((2, 4))))


def test_zero_init_linear_outputs_bias(float64, rng):
    layer = Linear(3, 2, rng, zero_init=True)
    np.testing.assert_array_equal(layer(Tensor(rng.standard_normal((4, 3)))).data, 0.0)


def test_parameters_discovered_in_definition_order(rng):
    names = list(Stack(rng).parameters())
    assert names == ["first.weight", "first.bias", "layers.0.weight", "layers.0.bias",
                     "layers.1.weight", "layers.1.bias"]


def test_load_state_dict_reports_missing_and_extra(rng):
    model = Stack(rng)
    state = dict(model.state_dict())
    state["extra.weight"] = state.pop("layers.1.bias")
    with pytest.raises(CheckpointError) as info:
        model.load_state_dict(state)
    assert info.value.missing == ["layers.1.bias"]
    assert info.value.extra == ["extra.weight"]


def test_load_state_dict_checks_shapes(rng):
    model = Stack(rng)
    state = dict(model.state_dict())
    state["first.bias"] = np.zeros(5)
    with pytest.raises(CheckpointError, match="first.bias"):
        model.load_state_dict(state)


def test_load_state_dict_copies_values(rng):
    source, target = Stack(rng), Stack(np.random.default_rng(99))
    target.load_state_dict(source.state_dict())
    for name, value in source.state_dict().items():
        np.testing.assert_array_equal(target.state_dict()[name], value)


def test_astype(rng):
    model = Stack(rng).astype(np.float64)
    assert all(p.dtype == np.float64 for p in model.parameters().values())


class TestConv2d:
    def test_output_size_with_stride(self, float64, rng):
        conv = Conv2d(3, 5, 2, rng)
        assert conv(Tensor(rng.standard_normal((8, 6, 3)))).shape == (4, 3, 5)
        assert conv(Tensor(rng.standard_normal((7, 5, 3)))).shape == (4, 3, 5)

    def test_constant_image_gives_constant_output(self, float64, rng):
        conv = Conv2d(2, 3, 1, rng)
        out = conv(Tensor(np.full((5, 4, 2), 0.7))).data
        np.testing.assert_allclose(out, np.broadcast_to(out[0, 0], out.shape))

    def test_matches_direct_sum(self, float64, rng):
        conv = Conv2d(2, 3, 1, rng)
        image = rng.standard_normal((5, 4, 2))
        out = conv(Tensor(image)).data
        y, x = 2, 1
        patch = image[y - 1:y + 2, x - 1:x + 2].reshape(-1)
        np.testing.assert_allclose(out[y, x], patch @ conv.weight.data + conv.bias.data)

    def test_rejects_wrong_channels(self, rng):
        with pytest.raises(DimensionError):
            Conv2d(3, 4, 1, rng)(Tensor(np.ones((4, 4, 2))))


class TestSparseConv3d:
    def test_single_cell_dilates_to_neighbourhood(self, float64, rng):
        conv = SparseConv3d(2, 3, rng)
        features = rng.standard_normal((1, 2))
        out, coords = conv(Tensor(features), np.array([[2, 2, 2]]), (5, 5, 5))
        assert coords.shape == (27, 3)
        center = np.flatnonzero(np.all(coords == 2, axis=1))[0]
        np.testing.assert_allclose(out.data[center], features[0] @ conv.weight.data[26:28] + conv.bias.data)

    def test_matches_dense_convolution_with_zero_padding(self, float64, rng):
        dims = (4, 3, 4)
        conv = SparseConv3d(2, 3, rng)
        coords = np.array([[0, 0, 0], [1, 2, 3], [2, 1, 1], [3, 2, 0]])
        features = rng.standard_normal((4, 2))
        dense = np.zeros(dims + (2,))
        dense[coords[:, 0], coords[:, 1], coords[:, 2]] = features
        out, out_coords = conv(Tensor(features), coords, dims)
        np.testing.assert_array_equal(out_coords, dilate_cells(coords, dims))
        weight = conv.weight.data.reshape(27, 2, 3)
        for row, cell in enumerate(out_coords):
            expected = conv.bias.data.copy()
            for k, offset in enumerate(NEIGHBOR_OFFSETS_3D):
                n = cell + offset
                if np.all(n >= 0) and np.all(n < dims):
                    expected = expected + dense[tuple(n)] @ weight[k]
            np.testing.assert_allclose(out.data[row], expected, atol=1e-12)

    def test_batch_matches_individual_calls(self, float64, rng):
        conv = SparseConv3d(2, 2, rng)
        coords = np.array([[1, 1, 1], [1, 2, 1]])
        batch = rng.standard_normal((3, 2, 2))
        out, _ = conv(Tensor(batch), coords, (3, 4, 3))
        for b in range(3):
            single, _ = conv(Tensor(batch[b]), coords, (3, 4, 3))
            np.testing.assert_allclose(out.data[b], single.data)

    def test_rejects_feature_count_mismatch(self, rng):
        with pytest.raises(DimensionError):
            SparseConv3d(2, 2, rng)(Tensor(np.ones((3, 2))), np.array([[0, 0, 0]]), (2, 2, 2))


def test_dilate_cells_clips_to_volume():
    cells = dilate_cells(np.array([[0, 0, 0]]), (3, 3, 3))
    assert cells.shape == (8, 3)
    assert cells.min() == 0 and cells.max() == 1


class TestAdam:
    def test_first_step_moves_by_learning_rate(self, float64):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        opt = Adam({"p": p}, lr=0.1)
        backward(mul(p, p).sum())
        opt.step()
        np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-6)

    def test_minimises_quadratic(self, float64):
        p = Tensor(np.array([3.0, -4.0]), requires_grad=True)
        opt = Adam({"p": p}, lr=0.1)
        for _ in range(300):
            opt.zero_grad()
            backward(mul(p, p).sum())
            opt.step()
        assert np.all(np.abs(p.data) < 0.25)

    def test_parameters_without_grad_are_left_alone(self, float64):
        p = Tensor(np.ones(2), requires_grad=True)
        opt = Adam({"p": p})
        opt.step()
        np.testing.assert_array_equal(p.data, 1.0)
        assert opt.grad_norm() is None

    def test_grad_norm(self, float64):
        p = Tensor(np.array([3.0, 4.0]), requires_grad=True)
        opt = Adam({"p": p})
        p.grad = np.array([3.0, 4.0])
        assert opt.grad_norm() == pytest.approx(5.0)

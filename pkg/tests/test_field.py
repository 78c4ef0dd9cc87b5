from dataclasses import replace

import numpy as np
import pytest

from skeletal_radiance.dataset import CaptureSet, SubjectCapture
from skeletal_radiance.encoder import sample_pixel_aligned
from skeletal_radiance.errors import DatasetError, DimensionError, GeometryError
from skeletal_radiance.field import (GridSpec, MultiViewTransformer, SkeletalBank, SkeletalRadianceField,
                                     TemporalTransformer, VoxelDiffusion, VoxelGrid, build_skeletal_bank,
                                     diffuse_to_voxels, memory_frames, multiview_attention, multiview_fuse,
                                     posenc_dir, sample_query_pixel_features, sample_skeletal,
                                     temporal_attention, temporal_fuse)
from skeletal_radiance.geometry import (Aabb, BodyPose, axis_angle_matrix, generate_rays, pixel_grid,
                                        project_points, ray_box_bounds_batch, transform_camera, world_to_body)
from skeletal_radiance.render import render_rays
from skeletal_radiance.tensor import Tensor, backward, mul, sub


def affine(layer, x):
    return x @ layer.weight.data + layer.bias.data


def masked_softmax(logits, valid):
    if not valid.any():
        return np.zeros_like(logits)
    e = np.where(valid, np.exp(logits - logits[valid].max()), 0.0)
    return e / e.sum()


def temporal_oracle(features, valid, weights):
    n_vertices, n_views, _, d = features.shape
    out = np.zeros((n_vertices, n_views, d))
    for i in range(n_vertices):
        for c in range(n_views):
            s = features[i, c]
            q = affine(weights.query, s[0])
            logits = affine(weights.key, s[1:]) @ q / np.sqrt(weights.d0)
            att = masked_softmax(logits, valid[i, c, 1:])
            out[i, c] = att @ affine(weights.value, s[1:]) + s[0]
    return out


def multiview_oracle(skeletal, pixel, valid, weights):
    n_points, n_views, _ = skeletal.shape
    z = np.zeros((n_points, n_views, weights.d1))
    for n in range(n_points):
        q = affine(weights.key, skeletal[n])
        k = affine(weights.key, pixel[n])
        for c in range(n_views):
            att = masked_softmax(k @ q[c] / np.sqrt(weights.d1), valid[n])
            z[n, c] = att @ affine(weights.value, pixel[n]) + affine(weights.value, skeletal[n, c])
    return z


def bank(features, valid=None):
    valid = np.ones(features.shape[:3], dtype=bool) if valid is None else valid
    return SkeletalBank(Tensor(features), valid, tuple(range(features.shape[2])), tuple(range(features.shape[1])))


@pytest.fixture
def model(float64, tiny_config):
    return SkeletalRadianceField(tiny_config, seed=3)


class TestPosenc:
    def test_closed_form(self):
        np.testing.assert_allclose(posenc_dir(np.array([0.0, 0.0, 1.0]), 1), [0, 0, 0, 1, 1, -1], atol=1e-12)

    def test_length(self):
        assert posenc_dir(np.array([0.6, 0.0, 0.8]), 4).shape == (24,)
        assert posenc_dir(np.array([[0.6, 0.0, 0.8]] * 5), 4).shape == (5, 24)

    def test_antipodal_directions_flip_sines(self):
        d = np.array([0.48, -0.6, 0.64])
        a, b = posenc_dir(d, 3).reshape(3, 2, 3), posenc_dir(-d, 3).reshape(3, 2, 3)
        np.testing.assert_allclose(a[:, 0], -b[:, 0], atol=1e-12)
        np.testing.assert_allclose(a[:, 1], b[:, 1], atol=1e-12)

    def test_near_unit_is_renormalised(self):
        np.testing.assert_allclose(posenc_dir(np.array([0.0, 0.0, 1.0005]), 2),
                                   posenc_dir(np.array([0.0, 0.0, 1.0]), 2))

    def test_non_unit_rejected(self):
        with pytest.raises(GeometryError):
            posenc_dir(np.array([0.0, 0.0, 1.1]), 2)


class TestTemporal:
    @pytest.fixture
    def weights(self, float64, rng):
        return TemporalTransformer(4, 3, rng)

    def test_matches_per_vertex_loop(self, weights, rng):
        features = rng.standard_normal((5, 2, 3, 4))
        valid = rng.random((5, 2, 3)) < 0.7
        valid[:, :, 0] = True
        features[~valid] = 0.0
        out = temporal_fuse(bank(features, valid), weights).data
        np.testing.assert_allclose(out, temporal_oracle(features, valid, weights), atol=1e-6)

    def test_single_memory_frame_gets_full_weight(self, weights, rng):
        features = rng.standard_normal((3, 2, 2, 4))
        out = temporal_fuse(bank(features), weights).data
        np.testing.assert_allclose(out, affine(weights.value, features[:, :, 1]) + features[:, :, 0], atol=1e-12)

    def test_identical_memory_features(self, weights, rng):
        features = rng.standard_normal((3, 2, 3, 4))
        features[:, :, 2] = features[:, :, 1]
        out = temporal_fuse(bank(features), weights).data
        np.testing.assert_allclose(out, affine(weights.value, features[:, :, 1]) + features[:, :, 0], atol=1e-12)

    def test_all_memory_invalid_falls_back_to_current(self, weights, rng):
        features = rng.standard_normal((2, 1, 3, 4))
        valid = np.zeros((2, 1, 3), dtype=bool)
        valid[:, :, 0] = True
        features[:, :, 1:] = 0.0
        np.testing.assert_allclose(temporal_fuse(bank(features, valid), weights).data, features[:, :, 0])

    def test_memory_order_does_not_matter(self, weights, rng):
        features = rng.standard_normal((4, 2, 4, 4))
        swapped = features[:, :, [0, 3, 1, 2]]
        np.testing.assert_allclose(temporal_fuse(bank(features), weights).data,
                                   temporal_fuse(bank(swapped), weights).data, atol=1e-9)

    def test_attention_rows_sum_to_one(self, weights, rng):
        att = temporal_attention(bank(rng.standard_normal((4, 2, 3, 4))), weights).data
        np.testing.assert_allclose(att.sum(axis=-1), 1.0, atol=1e-6)

    def test_without_transformer_averages_valid_timesteps(self, float64, rng):
        features = rng.standard_normal((2, 1, 3, 4))
        valid = np.array([[[True, True, False]], [[True, True, True]]])
        out = temporal_fuse(bank(features, valid), None).data
        np.testing.assert_allclose(out[0, 0], features[0, 0, :2].mean(axis=0))
        np.testing.assert_allclose(out[1, 0], features[1, 0].mean(axis=0))

    def test_no_memory_returns_current(self, weights, rng):
        features = rng.standard_normal((3, 2, 1, 4))
        np.testing.assert_array_equal(temporal_fuse(bank(features), weights).data, features[:, :, 0])


class TestMultiView:
    @pytest.fixture
    def weights(self, float64, rng):
        return MultiViewTransformer(4, 5, rng)

    def test_matches_per_row_loop(self, weights, rng):
        s, p = rng.standard_normal((2, 6, 3, 4))
        valid = rng.random((6, 3)) < 0.7
        z, z_mean = multiview_fuse(Tensor(s), Tensor(p), valid, weights)
        expected = multiview_oracle(s, p, valid, weights)
        np.testing.assert_allclose(z.data, expected, atol=1e-6)
        np.testing.assert_allclose(z_mean.data, expected.mean(axis=1), atol=1e-6)

    def test_single_view(self, weights, rng):
        s, p = rng.standard_normal((2, 4, 1, 4))
        z, _ = multiview_fuse(Tensor(s), Tensor(p), np.ones((4, 1), dtype=bool), weights)
        np.testing.assert_allclose(z.data, affine(weights.value, p) + affine(weights.value, s), atol=1e-12)

    def test_identical_pixel_features(self, weights, rng):
        s = rng.standard_normal((4, 3, 4))
        p = np.repeat(rng.standard_normal((4, 1, 4)), 3, axis=1)
        z, _ = multiview_fuse(Tensor(s), Tensor(p), np.ones((4, 3), dtype=bool), weights)
        np.testing.assert_allclose(z.data, affine(weights.value, p) + affine(weights.value, s), atol=1e-12)

    def test_attention_rows_sum_to_one(self, weights, rng):
        s, p = rng.standard_normal((2, 5, 3, 4))
        valid = np.ones((5, 3), dtype=bool)
        valid[0, 1] = False
        att = multiview_attention(Tensor(s), Tensor(p), valid, weights).data
        np.testing.assert_allclose(att.sum(axis=-1), 1.0, atol=1e-6)
        np.testing.assert_array_equal(att[0, :, 1], 0.0)

    def test_view_permutation(self, weights, rng):
        s, p = rng.standard_normal((2, 5, 3, 4))
        valid = np.ones((5, 3), dtype=bool)
        order = [2, 0, 1]
        z, z_mean = multiview_fuse(Tensor(s), Tensor(p), valid, weights)
        z_perm, z_mean_perm = multiview_fuse(Tensor(s[:, order]), Tensor(p[:, order]), valid, weights)
        np.testing.assert_allclose(z_perm.data, z.data[:, order], atol=1e-9)
        np.testing.assert_allclose(z_mean_perm.data, z_mean.data, atol=1e-9)

    def test_without_attention_averages_valid_views(self, float64, rng):
        weights = MultiViewTransformer(4, 5, rng, attention=False)
        s, p = rng.standard_normal((2, 2, 2, 4))
        valid = np.array([[True, False], [True, True]])
        z, _ = multiview_fuse(Tensor(s), Tensor(p), valid, weights)
        vp, vs = affine(weights.value, p), affine(weights.value, s)
        np.testing.assert_allclose(z.data[0, 1], vp[0, 0] + vs[0, 1], atol=1e-12)
        np.testing.assert_allclose(z.data[1, 0], vp[1].mean(axis=0) + vs[1, 0], atol=1e-12)

    def test_separate_query(self, float64, rng):
        weights = MultiViewTransformer(4, 5, rng, separate_query=True)
        assert weights.query is not None
        s, p = rng.standard_normal((2, 3, 2, 4))
        att = multiview_attention(Tensor(s), Tensor(p), np.ones((3, 2), dtype=bool), weights).data
        np.testing.assert_allclose(att.sum(axis=-1), 1.0, atol=1e-9)

    def test_needs_a_view(self, weights):
        with pytest.raises(DimensionError):
            multiview_fuse(Tensor(np.zeros((2, 0, 4))), Tensor(np.zeros((2, 0, 4))), np.zeros((2, 0), bool), weights)

    def test_needs_some_features(self, weights):
        with pytest.raises(DimensionError):
            multiview_fuse(None, None, np.ones((2, 1), bool), weights)


class TestVoxels:
    @pytest.fixture
    def grid(self, float64, rng):
        spec = GridSpec(Aabb(np.zeros(3), np.ones(3)), 0.25, (4, 4, 4))
        coords = np.array([[1, 1, 1], [2, 1, 1], [3, 3, 3]])
        lookup = np.full(spec.dims, -1, dtype=np.int64)
        lookup[coords[:, 0], coords[:, 1], coords[:, 2]] = np.arange(3)
        return VoxelGrid(spec, coords, Tensor(rng.standard_normal((2, 3, 4))), lookup)

    def test_grid_spec_from_vertices(self):
        vertices = np.array([[0.0, 0.0, 0.0], [1.0, 0.5, 0.25]])
        spec = GridSpec.from_vertices(vertices, divisions=4, margin=0.0)
        assert spec.edge == pytest.approx(0.25)
        assert spec.dims == (4, 2, 1)

    def test_empty_box(self):
        with pytest.raises(GeometryError):
            GridSpec.from_vertices(np.zeros((3, 3)))

    def test_cell_center(self, grid):
        out = sample_skeletal(grid, np.array([[0.375, 0.375, 0.375]])).data
        np.testing.assert_allclose(out[0], grid.features.data[:, 0])

    def test_midway(self, grid):
        out = sample_skeletal(grid, np.array([[0.5, 0.375, 0.375]])).data
        np.testing.assert_allclose(out[0], 0.5 * (grid.features.data[:, 0] + grid.features.data[:, 1]))

    def test_inactive_neighbours_read_zero(self, grid):
        out = sample_skeletal(grid, np.array([[0.25, 0.375, 0.375]])).data
        np.testing.assert_allclose(out[0], 0.5 * grid.features.data[:, 0])

    def test_outside_box(self, grid):
        np.testing.assert_array_equal(sample_skeletal(grid, np.array([[1.2, 0.5, 0.5]])).data, 0.0)

    def test_zero_features_give_zero_grid(self, float64, rng):
        spec = GridSpec(Aabb(np.zeros(3), np.ones(3)), 0.2, (5, 5, 5))
        vertices = rng.random((10, 3))
        grid = diffuse_to_voxels(Tensor(np.zeros((10, 2, 3))), vertices, spec, VoxelDiffusion(3, 4, rng))
        np.testing.assert_array_equal(grid.features.data, 0.0)

    def test_single_cell_support(self, float64, rng):
        spec = GridSpec(Aabb(np.zeros(3), np.ones(3)), 0.1, (10, 10, 10))
        vertices = np.array([[0.51, 0.52, 0.53], [0.55, 0.56, 0.57]])
        grid = diffuse_to_voxels(Tensor(rng.standard_normal((2, 1, 3))), vertices, spec, VoxelDiffusion(3, 4, rng))
        assert np.abs(grid.coords - 5).max() <= 2
        assert grid.occupancy.sum() == grid.coords.shape[0]

    def test_vertex_count_mismatch(self, float64, rng):
        spec = GridSpec(Aabb(np.zeros(3), np.ones(3)), 0.5, (2, 2, 2))
        with pytest.raises(DimensionError):
            diffuse_to_voxels(Tensor(np.zeros((3, 1, 2))), np.zeros((4, 3)), spec, VoxelDiffusion(2, 2, rng))


class TestBank:
    def test_memory_frames(self):
        assert memory_frames(5, (-2, 2), 10) == (3, 7)
        assert memory_frames(0, (-2, 2), 10, clamp=True) == (0, 2)
        with pytest.raises(DatasetError):
            memory_frames(0, (-2, 2), 10)

    def test_entries_match_independent_sampling(self, model, tiny_captures):
        subject = tiny_captures.subject(0)
        result = build_skeletal_bank(subject, tiny_captures.cameras, (0, 2), 1, (-1, 1), model.encoder)
        assert result.frames == (1, 0, 2)
        for i in (0, 123, 599):
            for ci, c in enumerate((0, 2)):
                for m, f in enumerate(result.frames):
                    fm = model.encoder.encode(subject.images[c, f], c, f)
                    uv, _ = project_points(tiny_captures.cameras[c], subject.vertices[f, i])
                    expected = sample_pixel_aligned(fm, uv).data
                    np.testing.assert_allclose(result.features.data[i, ci, m], expected, atol=1e-12)
        zero = ~result.valid
        assert np.all(result.features.data[zero] == 0.0)

    def test_zero_encoder_gives_zero_bank(self, model, tiny_captures):
        model.encoder.conv3.weight.data[:] = 0.0
        result = build_skeletal_bank(tiny_captures.subject(0), tiny_captures.cameras, (0, 1), 1, (-1, 1),
                                     model.encoder)
        np.testing.assert_array_equal(result.features.data, 0.0)

    def test_no_memory(self, model, tiny_captures):
        result = build_skeletal_bank(tiny_captures.subject(0), tiny_captures.cameras, (0,), 2, (), model.encoder)
        assert result.features.shape[2] == 1 and result.memory_count == 0

    def test_out_of_range(self, model, tiny_captures):
        with pytest.raises(DatasetError):
            build_skeletal_bank(tiny_captures.subject(0), tiny_captures.cameras, (0,), 4, (), model.encoder)
        with pytest.raises(DatasetError):
            build_skeletal_bank(tiny_captures.subject(0), tiny_captures.cameras, (0,), 0, (-1, 1), model.encoder)


class TestQueryFeatures:
    def test_point_behind_every_camera(self, model, tiny_captures):
        state = model.prepare_frame(tiny_captures, 0, 1)
        p, valid = sample_query_pixel_features(state.cameras, state.feature_maps, np.array([[0.0, 0.0, 100.0]]))
        assert not valid.any()
        np.testing.assert_array_equal(p.data, 0.0)

    def test_vertex_query_matches_bank(self, model, tiny_captures):
        state = model.prepare_frame(tiny_captures, 0, 1)
        vertices = tiny_captures.subject(0).vertices[1, [5, 300]]
        p, valid = sample_query_pixel_features(state.cameras, state.feature_maps, vertices)
        np.testing.assert_allclose(p.data, state.bank.features.data[[5, 300], :, 0], atol=1e-12)
        np.testing.assert_array_equal(valid, state.bank.valid[[5, 300], :, 0])


class TestField:
    def test_zero_initialised_heads(self, float64, tiny_config, tiny_captures, rng):
        model = SkeletalRadianceField(replace(tiny_config, zero_init_heads=True))
        state = model.prepare_frame(tiny_captures, 1, 2)
        x = rng.uniform(-1.0, 1.0, size=(20, 3)) + np.array([0.0, 0.0, 0.6])
        d = rng.standard_normal((20, 3))
        sigma, rgb = model.evaluate_points(state, x, d / np.linalg.norm(d, axis=1, keepdims=True))
        np.testing.assert_allclose(sigma.data, np.log(2.0), atol=1e-12)
        np.testing.assert_allclose(rgb.data, 0.5, atol=1e-12)

    def test_outputs_finite_and_in_range(self, model, tiny_captures, rng):
        state = model.prepare_frame(tiny_captures, 0, 1)
        x = rng.uniform(-3.0, 3.0, size=(10000, 3))
        d = rng.standard_normal((10000, 3))
        sigma, rgb = model.evaluate_points(state, x, d / np.linalg.norm(d, axis=1, keepdims=True))
        assert np.all(np.isfinite(sigma.data)) and np.all(sigma.data >= 0.0)
        assert np.all((rgb.data >= 0.0) & (rgb.data <= 1.0))

    def test_evaluate_point(self, model, tiny_captures):
        state = model.prepare_frame(tiny_captures, 0, 1)
        sigma, rgb = model.evaluate_point(state, np.array([0.0, 0.0, 0.7]), np.array([1.0, 0.0, 0.0]))
        assert sigma >= 0.0 and rgb.shape == (3,)

    @pytest.mark.parametrize("variant", ["Sk", "Px", "Sk+Px", "Sk+Px+T", "Sk+Px+MV", "Sk+Px+T+MV"])
    def test_variants_build_only_their_branches(self, float64, tiny_config, tiny_captures, variant):
        config = tiny_config.with_variant(variant)
        model = SkeletalRadianceField(config)
        names = set(model.parameters())
        assert any(n.startswith("temporal.") for n in names) == config.enable_temporal_transformer
        assert any(n.startswith("diffusion.") for n in names) == config.enable_skeletal
        assert ("multiview.key.weight" in names) == config.enable_multiview_transformer
        state = model.prepare_frame(tiny_captures, 0, 1)
        sigma, rgb = model.evaluate_points(state, np.array([[0.0, 0.0, 0.7]]), np.array([[0.0, 1.0, 0.0]]))
        assert sigma.shape == (1,) and rgb.shape == (1, 3)

    def test_prepare_frame_errors(self, model, tiny_captures):
        with pytest.raises(DimensionError):
            model.prepare_frame(tiny_captures, 0, 1, views=())
        with pytest.raises(DatasetError):
            model.prepare_frame(tiny_captures, 0, 9)

    def test_memory_frames_clamp_at_sequence_ends(self, model, tiny_captures):
        state = model.prepare_frame(tiny_captures, 0, 0)
        assert state.bank.frames == (0, 0, 1)
        with pytest.raises(DatasetError):
            model.prepare_frame(tiny_captures, 0, 0, clamp_memory=False)

    def test_shared_cache_reuses_feature_maps(self, model, tiny_captures):
        cache = {}
        first = model.prepare_frame(tiny_captures, 0, 1, cache=cache)
        second = model.prepare_frame(tiny_captures, 0, 1, cache=cache)
        assert first.feature_maps[0] is second.feature_maps[0]

    def test_rigid_motion_leaves_skeletal_samples_unchanged(self, model, tiny_captures, rng):
        rotation = axis_angle_matrix((0.3, -0.2, 1.0), 0.8)
        translation = np.array([0.4, -0.3, 0.2])
        subject = tiny_captures.subject(0)
        poses = [BodyPose(p.rotation @ rotation.T, p.translation - p.rotation @ rotation.T @ translation)
                 for p in subject.poses]
        moved_subject = SubjectCapture(subject.name, subject.seed, subject.images, subject.masks,
                                       subject.vertices @ rotation.T + translation, poses)
        moved = CaptureSet([transform_camera(c, rotation, translation) for c in tiny_captures.cameras],
                           [moved_subject], tiny_captures.input_views, tiny_captures.query_views)
        x = subject.vertices[1, :50] + rng.normal(scale=0.02, size=(50, 3))
        before = model.prepare_frame(tiny_captures, 0, 1)
        after = model.prepare_frame(moved, 0, 1)
        a = sample_skeletal(before.grid, world_to_body(before.pose, x)).data
        b = sample_skeletal(after.grid, world_to_body(after.pose, x @ rotation.T + translation)).data
        np.testing.assert_allclose(b, a, atol=1e-6)

    def test_every_parameter_gets_gradient(self, model, tiny_captures):
        state = model.prepare_frame(tiny_captures, 0, 1)
        cam = tiny_captures.cameras[3]
        origin, dirs = generate_rays(cam, pixel_grid(cam))
        near, far, hit = ray_box_bounds_batch(origin, dirs, state.bbox)
        rows = np.flatnonzero(hit)
        result = render_rays(model, state, origin, dirs[rows], near[rows], far[rows], samples=8)
        target = tiny_captures.subject(0).images[3, 1].reshape(-1, 3)[rows]
        diff = sub(result.rgb, Tensor(target))
        backward(mul(diff, diff).mean())
        for name, p in model.parameters().items():
            assert p.grad is not None and np.any(p.grad != 0.0), name

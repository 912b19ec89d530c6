import numpy as np
import pytest

from maskrepair.errors import ShapeMismatchError
from maskrepair.model import (
    ArchitectureConfig,
    backward,
    decode_features,
    init_model,
    loss,
    query,
)
from maskrepair.volume import trilinear_sample

TINY = ArchitectureConfig(latent_dim=4, seed_channels=6, block_channels=(5,),
                          feature_channels=3, head_hidden=(7,), use_appearance=True)


def tiny_inputs(n=16, seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    params, latents = init_model(TINY, 1, rng, dtype=dtype)
    pts = rng.uniform(-1.05, 1.05, (n, 3))
    app = rng.uniform(0, 1, n)
    labels = (rng.random(n) < 0.5).astype(np.uint8)
    return params, latents[0], pts, app, labels


class TestInit:
    def test_deterministic_under_seed(self):
        a, la = init_model(TINY, 3, np.random.default_rng(5))
        b, lb = init_model(TINY, 3, np.random.default_rng(5))
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])
        np.testing.assert_array_equal(la, lb)

    def test_latent_std_monte_carlo(self):
        arch = ArchitectureConfig.desk()
        _, latents = init_model(arch, 320, np.random.default_rng(0))
        assert latents.size >= 10_000
        assert abs(latents.std() - 0.01) / 0.01 < 0.05

    def test_single_shape_single_latent(self):
        _, latents = init_model(TINY, 1, np.random.default_rng(0))
        assert latents.shape == (1, TINY.latent_dim)

    def test_tensor_names_follow_convention(self):
        params, _ = init_model(ArchitectureConfig(), 1, np.random.default_rng(0))
        names = set(params)
        assert "decoder.seed.weight" in names
        assert "decoder.block0.conv.weight" in names
        assert "decoder.block2.conv.bias" in names
        assert "decoder.proj3.weight" in names
        assert "head.layer0.weight" in names
        assert "head.layer2.bias" in names


class TestDecodeFeatures:
    def test_default_resolutions_top_out_at_32(self):
        arch = ArchitectureConfig()
        assert arch.level_resolutions == (4, 8, 16, 32)
        assert arch.head_input_dim == 3 + 4 * 16 + 1

    def test_pyramid_shapes(self):
        params, latents = init_model(TINY, 1, np.random.default_rng(1))
        levels = decode_features(params, TINY, latents[0])
        assert [g.shape for g in levels] == [(3, 4, 4, 4), (3, 8, 8, 8)]

    def test_zero_parameters_give_zero_pyramid(self):
        params, latents = init_model(TINY, 1, np.random.default_rng(2))
        for k in params:
            if k.startswith("decoder"):
                params[k][:] = 0
        for g in decode_features(params, TINY, latents[0]):
            assert (g == 0).all()

    def test_deterministic(self):
        params, latents = init_model(TINY, 1, np.random.default_rng(3))
        a = decode_features(params, TINY, latents[0])
        b = decode_features(params, TINY, latents[0])
        for ga, gb in zip(a, b):
            np.testing.assert_array_equal(ga, gb)

    def test_latent_dimension_checked(self):
        params, _ = init_model(TINY, 1, np.random.default_rng(4))
        with pytest.raises(ShapeMismatchError):
            decode_features(params, TINY, np.zeros(TINY.latent_dim + 1))

    def test_sampling_at_grid_nodes_returns_stored_values(self):
        params, latents = init_model(TINY, 1, np.random.default_rng(5))
        levels = decode_features(params, TINY, latents[0])
        for g, R in zip(levels, TINY.level_resolutions):
            lin = np.linspace(-1, 1, R)
            nodes = np.stack(np.meshgrid(lin, lin, lin, indexing="ij"), -1).reshape(-1, 3)
            for ch in range(g.shape[0]):
                got = trilinear_sample(g[ch], nodes)
                np.testing.assert_allclose(got, g[ch].ravel(), atol=1e-6)


class TestQuery:
    def test_outputs_strictly_inside_unit_interval(self):
        params, z, pts, app, _ = tiny_inputs()
        probs = query(params, TINY, z, pts, app)
        assert ((probs > 0) & (probs < 1)).all()

    def test_permutation_equivariance(self):
        params, z, pts, app, _ = tiny_inputs(n=32)
        probs = query(params, TINY, z, pts, app)
        perm = np.random.default_rng(0).permutation(32)
        probs_p = query(params, TINY, z, pts[perm], app[perm])
        np.testing.assert_allclose(probs_p, probs[perm], rtol=1e-12)

    def test_zeroed_appearance_column_matches_shape_only(self):
        params, z, pts, app, _ = tiny_inputs()
        arch_s = ArchitectureConfig(**{**TINY.to_dict(), "use_appearance": False})
        params_s = {k: v.copy() for k, v in params.items()}
        # shared weights minus the appearance column of the first head layer
        params_s["head.layer0.weight"] = params["head.layer0.weight"][:-1]
        params_zeroed = {k: v.copy() for k, v in params.items()}
        params_zeroed["head.layer0.weight"][-1] = 0.0
        a = query(params_zeroed, TINY, z, pts, app)
        b = query(params_s, arch_s, z, pts)
        np.testing.assert_allclose(a, b, rtol=0, atol=0)

    def test_logits_reapply_sigmoid_exactly(self):
        params, z, pts, app, _ = tiny_inputs()
        probs = query(params, TINY, z, pts, app)
        logits = query(params, TINY, z, pts, app, return_logits=True)
        np.testing.assert_array_equal(1 / (1 + np.exp(-logits)), probs)

    def test_appearance_required_when_conditioned(self):
        params, z, pts, _, _ = tiny_inputs()
        with pytest.raises(ValueError):
            query(params, TINY, z, pts, None)

    def test_appearance_range_checked(self):
        params, z, pts, app, _ = tiny_inputs()
        with pytest.raises(ValueError):
            query(params, TINY, z, pts, app + 5.0)


class TestLoss:
    def test_perfect_predictions_zero_loss(self):
        probs = np.array([1.0, 1.0, 1.0])
        labels = np.array([1, 1, 1])
        assert loss(probs, labels, np.zeros(4), 0.01) == pytest.approx(0.0, abs=1e-6)

    def test_uniform_half_gives_ln2(self):
        probs = np.full(100, 0.5)
        labels = (np.arange(100) % 2).astype(float)
        assert loss(probs, labels, np.zeros(4), 0.01) == pytest.approx(np.log(2))

    def test_latent_norm_term(self):
        z = np.zeros(16)
        z[0], z[1] = 1.2, 1.6  # norm 2
        probs = np.array([1.0])
        labels = np.array([1])
        assert loss(probs, labels, z, 0.01) == pytest.approx(0.02, abs=1e-6)

    def test_batch_permutation_invariant(self):
        rng = np.random.default_rng(0)
        probs = rng.uniform(0.01, 0.99, 64)
        labels = (rng.random(64) < 0.5).astype(float)
        perm = rng.permutation(64)
        z = rng.normal(size=8)
        assert loss(probs, labels, z, 0.01) == pytest.approx(
            loss(probs[perm], labels[perm], z, 0.01), rel=1e-12)


class TestBackwardStructure:
    def test_zero_output_layer_blocks_upstream_gradients(self):
        params, z, pts, app, labels = tiny_inputs()
        params["head.layer1.weight"][:] = 0.0
        _, rec = query(params, TINY, z, pts, app, record=True)
        grads = backward(params, TINY, rec, labels, 0.0)
        for name, g in grads.items():
            if name in ("head.layer1.bias", "head.layer1.weight"):
                continue
            assert np.abs(g).max() == 0.0, name
        assert np.abs(grads["head.layer1.bias"]).max() > 0
        # the output layer's own weight still sees its input activations
        assert np.abs(grads["head.layer1.weight"]).max() > 0

    def test_duplicated_batch_leaves_gradients_unchanged(self):
        params, z, pts, app, labels = tiny_inputs()
        _, rec1 = query(params, TINY, z, pts, app, record=True)
        g1 = backward(params, TINY, rec1, labels, 0.01)
        pts2 = np.concatenate([pts, pts])
        app2 = np.concatenate([app, app])
        labels2 = np.concatenate([labels, labels])
        _, rec2 = query(params, TINY, z, pts2, app2, record=True)
        g2 = backward(params, TINY, rec2, labels2, 0.01)
        for name in g1:
            np.testing.assert_allclose(g1[name], g2[name], rtol=1e-10, atol=1e-12)

    def test_interpolation_scatter_conserves_mass(self):
        from maskrepair.volume import trilinear_weights
        rng = np.random.default_rng(0)
        pts = rng.uniform(-1.2, 1.2, (50, 3))
        idx, w = trilinear_weights((5, 5, 5), pts)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)
        # scattering a unit gradient from one point deposits exactly 1.0
        for i in range(0, 50, 7):
            grid = np.zeros(125)
            np.add.at(grid, idx[i], w[i])
            assert grid.sum() == pytest.approx(1.0, abs=1e-12)

"""Tests for the differentiable core: layers, graphs, training, checkpoints."""

import math

import numpy as np
import pytest

from phasenano.dataset import TilePair, TilePairDataset
from phasenano.nn import (
    Checkpoint,
    CheckpointFormatError,
    Model,
    NumericsError,
    TrainConfig,
    build_onet,
    build_thetanet,
    build_unet,
    evaluate_loss,
    infer,
    load_checkpoint,
    save_checkpoint,
    save_history_csv,
    train,
)
from phasenano.nn import layers as L
from phasenano.nn.graph import GraphError, LayerSpec, ModelGraph
from phasenano.optics import ImageField


def finite_difference_check(graph, x_shape, seed, n_params=12, h=1e-4):
    """Max relative error between analytic and central-difference gradients."""
    rng = np.random.default_rng(seed)
    model = Model(graph, seed=seed, dtype=np.float64)
    x = rng.random(x_shape)
    target = rng.random(model.forward(x).shape)

    def loss_of(weights):
        model.set_weights(weights)
        return float(np.mean((model.forward(x) - target) ** 2))

    w0 = model.get_weights().astype(np.float64)
    model.set_weights(w0)
    pred = model.forward(x, record=True)
    grads = model.backward(2.0 * (pred - target) / pred.size)
    flat = np.concatenate(
        [grads[i][j].ravel() for i in sorted(grads) for j in (0, 1)]
    )
    errs = []
    for i in rng.choice(w0.size, size=min(n_params, w0.size), replace=False):
        wp = w0.copy()
        wp[i] += h
        wm = w0.copy()
        wm[i] -= h
        numeric = (loss_of(wp) - loss_of(wm)) / (2 * h)
        errs.append(abs(numeric - flat[i]) / max(abs(numeric), abs(flat[i]), 1e-10))
    return max(errs)


def graph_of(*layers, in_channels, out_channels):
    return ModelGraph(name="t", layers=tuple(layers), in_channels=in_channels,
                      out_channels=out_channels)


class TestConvForward:
    def test_identity_1x1_kernel(self):
        x = np.random.default_rng(0).random((2, 3, 5, 5))
        w = np.zeros((3, 3, 1, 1))
        for c in range(3):
            w[c, c, 0, 0] = 1.0
        y = L.conv2d_forward(x, w, np.zeros(3))
        assert np.allclose(y, x)

    def test_ones_kernel_on_one_hot(self):
        # 3x3 all-ones kernel over a one-hot 5x5 input, padding 1:
        # a 3x3 block of ones around the hot pixel
        x = np.zeros((1, 1, 5, 5))
        x[0, 0, 2, 2] = 1.0
        w = np.ones((1, 1, 3, 3))
        y = L.conv2d_forward(x, w, np.zeros(1), stride=1, padding=1)
        expected = np.zeros((5, 5))
        expected[1:4, 1:4] = 1.0
        assert np.array_equal(y[0, 0], expected)

    def test_output_dims_formula(self):
        x = np.zeros((1, 2, 11, 11))
        w = np.zeros((4, 2, 3, 3))
        y = L.conv2d_forward(x, w, np.zeros(4), stride=2, padding=1)
        assert y.shape == (1, 4, (11 + 2 - 3) // 2 + 1, 6)

    def test_transposed_ones_upsamples(self):
        # stride-2 k=2 all-ones transposed conv on 2x2 ones: 4x4 ones
        x = np.ones((1, 1, 2, 2))
        w = np.ones((1, 1, 2, 2))
        y = L.transposed_conv2d_forward(x, w, np.zeros(1), stride=2, padding=0)
        assert y.shape == (1, 1, 4, 4)
        assert np.array_equal(y, np.ones((1, 1, 4, 4)))

    def test_transposed_dims_formula(self):
        x = np.zeros((1, 3, 6, 6))
        w = np.zeros((3, 5, 3, 3))
        y = L.transposed_conv2d_forward(x, w, np.zeros(5), stride=2, padding=1)
        assert y.shape == (1, 5, (6 - 1) * 2 - 2 + 3, 11)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(L.ShapeError):
            L.conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)), None)

    def test_conv_direct_summation_oracle(self):
        rng = np.random.default_rng(5)
        x = rng.random((2, 3, 7, 7))
        w = rng.random((4, 3, 3, 3))
        b = rng.random(4)
        y = L.conv2d_forward(x, w, b, stride=2, padding=1)
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros_like(y)
        for n in range(2):
            for o in range(4):
                for i in range(y.shape[2]):
                    for j in range(y.shape[3]):
                        patch = xp[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3]
                        ref[n, o, i, j] = (patch * w[o]).sum() + b[o]
        assert np.allclose(y, ref, atol=1e-12)


class TestShapeAlgebra:
    # dims are restored whenever (H + 2p - k) divides the stride evenly
    @pytest.mark.parametrize("k,s,p,h", [(3, 1, 1, 16), (2, 2, 0, 16), (3, 2, 1, 17),
                                         (4, 2, 1, 16), (5, 1, 2, 16), (3, 3, 0, 18)])
    def test_conv_then_transposed_restores_dims(self, k, s, p, h):
        x = np.zeros((1, 2, h, h))
        w = np.zeros((3, 2, k, k))
        y = L.conv2d_forward(x, w, np.zeros(3), stride=s, padding=p)
        wt = np.zeros((3, 2, k, k))
        z = L.transposed_conv2d_forward(y, wt, np.zeros(2), stride=s, padding=p)
        assert z.shape[2:] == x.shape[2:]


class TestGradientOracles:
    """Central finite differences against every layer kind, many seeds."""

    @pytest.mark.parametrize("seed", range(20))
    def test_mixed_graph_all_layer_kinds(self, seed):
        g = graph_of(
            LayerSpec(kind="conv", in_channels=2, out_channels=3, kernel=3, padding=1),
            LayerSpec(kind="activation", activation="leaky_relu"),
            LayerSpec(kind="pool"),
            LayerSpec(kind="transposed_conv", in_channels=3, out_channels=3,
                      kernel=2, stride=2),
            LayerSpec(kind="concat_skip", skip_from=1),
            LayerSpec(kind="conv", in_channels=6, out_channels=2, kernel=1),
            in_channels=2, out_channels=2,
        )
        err = finite_difference_check(g, (2, 2, 6, 6), seed)
        assert err < 1e-4

    @pytest.mark.parametrize("seed", range(5))
    def test_upsample_and_relu_path(self, seed):
        g = graph_of(
            LayerSpec(kind="conv", in_channels=1, out_channels=2, kernel=3,
                      stride=2, padding=1),
            LayerSpec(kind="activation", activation="relu"),
            LayerSpec(kind="upsample"),
            LayerSpec(kind="conv", in_channels=2, out_channels=1, kernel=3, padding=1),
            in_channels=1, out_channels=1,
        )
        err = finite_difference_check(g, (2, 1, 8, 8), seed + 100)
        assert err < 1e-4

    @pytest.mark.parametrize("seed", range(5))
    def test_strided_transposed_conv(self, seed):
        g = graph_of(
            LayerSpec(kind="transposed_conv", in_channels=2, out_channels=3,
                      kernel=3, stride=2, padding=1),
            LayerSpec(kind="activation", activation="leaky_relu"),
            LayerSpec(kind="conv", in_channels=3, out_channels=2, kernel=3,
                      stride=2, padding=1),
            in_channels=2, out_channels=2,
        )
        err = finite_difference_check(g, (1, 2, 5, 5), seed + 200)
        assert err < 1e-4

    def test_linear_net_analytic_gradient(self):
        # single 1x1 conv, MSE: dL/dw = 2 mean((w x - t) x)
        g = graph_of(
            LayerSpec(kind="conv", in_channels=1, out_channels=1, kernel=1),
            in_channels=1, out_channels=1,
        )
        model = Model(g, seed=0, dtype=np.float64)
        rng = np.random.default_rng(3)
        x = rng.random((4, 1, 6, 6))
        t = rng.random((4, 1, 6, 6))
        pred = model.forward(x, record=True)
        grads = model.backward(2.0 * (pred - t) / pred.size)
        w = model.params[0][0][0, 0, 0, 0]
        analytic_dw = float(np.mean(2.0 * (w * x - t) * x))
        assert grads[0][0][0, 0, 0, 0] == pytest.approx(analytic_dw, rel=1e-10)
        analytic_db = float(np.mean(2.0 * (w * x - t)))
        assert grads[0][1][0] == pytest.approx(analytic_db, rel=1e-10)

    def test_zero_loss_zero_gradients(self):
        g = graph_of(
            LayerSpec(kind="conv", in_channels=1, out_channels=1, kernel=3, padding=1),
            in_channels=1, out_channels=1,
        )
        model = Model(g, seed=0, dtype=np.float64)
        x = np.random.default_rng(0).random((1, 1, 5, 5))
        pred = model.forward(x, record=True)
        grads = model.backward(np.zeros_like(pred))
        assert all(np.all(g == 0) for pair in grads.values() for g in pair)

    def test_backward_before_forward_rejected(self):
        g = graph_of(
            LayerSpec(kind="conv", in_channels=1, out_channels=1, kernel=1),
            in_channels=1, out_channels=1,
        )
        model = Model(g)
        with pytest.raises(GraphError, match="before"):
            model.backward(np.zeros((1, 1, 4, 4)))


class TestBuilders:
    def test_unet_image_to_image(self):
        g = build_unet(depth=5, base_channels=8)
        m = Model(g, seed=0)
        x = np.random.default_rng(0).random((2, 1, 64, 64), dtype=np.float32)
        assert m.forward(x).shape == x.shape

    def test_unet_rejects_shallow_depth(self):
        with pytest.raises(GraphError):
            build_unet(depth=1)

    def test_parameter_count_matches_closed_form(self):
        for g in (build_unet(5, 8), build_onet(5, 8), build_onet(7, 8)):
            expected = sum(
                l.kernel**2 * l.in_channels * l.out_channels + l.out_channels
                for l in g.layers
                if l.kind in ("conv", "transposed_conv")
            )
            assert g.parameter_count() == expected
            m = Model(g)
            assert sum(a.size for a in m.parameter_arrays()) == expected

    def test_zero_final_layer_zero_output(self):
        g = build_unet(depth=3, base_channels=4)
        m = Model(g, seed=0)
        m.params[max(m.params)][0][...] = 0.0  # final 1x1 conv
        m.params[max(m.params)][1][...] = 0.0
        x = np.zeros((1, 1, 32, 32), dtype=np.float32)
        assert np.all(m.forward(x) == 0.0)

    def test_onet_depths(self):
        g5 = build_onet(depth=5, base_channels=4)
        g7 = build_onet(depth=7, base_channels=4)
        # two more stage pairs: two extra pools and two extra upsamples
        assert g7.pool_stages() - g5.pool_stages() == 2
        n_up5 = sum(1 for l in g5.layers if l.kind == "upsample")
        n_up7 = sum(1 for l in g7.layers if l.kind == "upsample")
        assert n_up7 - n_up5 == 2
        with pytest.raises(GraphError):
            build_onet(depth=6)

    def test_onet_encoder_uses_transposed_blocks(self):
        g = build_onet(depth=5, base_channels=4)
        first_pool = next(i for i, l in enumerate(g.layers) if l.kind == "pool")
        encoder_kinds = {l.kind for l in g.layers[:first_pool] if l.parametric}
        assert encoder_kinds == {"transposed_conv"}
        last_skip = max(i for i, l in enumerate(g.layers) if l.kind == "concat_skip")
        decoder_kinds = {l.kind for l in g.layers[last_skip:] if l.parametric}
        assert decoder_kinds == {"conv"}

    def test_onet_conventional_flag_swaps_blocks(self):
        g = build_onet(depth=5, base_channels=4, conventional=True)
        first_pool = next(i for i, l in enumerate(g.layers) if l.kind == "pool")
        encoder_kinds = {l.kind for l in g.layers[:first_pool] if l.parametric}
        assert encoder_kinds == {"conv"}

    def test_onet_output_shapes(self):
        for tile in (64, 256):
            m = Model(build_onet(depth=5, base_channels=2), seed=0)
            x = np.zeros((1, 1, tile, tile), dtype=np.float32)
            assert m.forward(x).shape == x.shape

    def test_skip_topology_pairs_matching_stages(self):
        g = build_unet(depth=5, base_channels=4)
        skips = [l.skip_from for l in g.layers if l.kind == "concat_skip"]
        pools = [i for i, l in enumerate(g.layers) if l.kind == "pool"]
        # each skip source is the activation just before one pool,
        # consumed in reverse stage order
        assert skips == [p - 1 for p in reversed(pools)]

    def test_identity_configured_cascade(self):
        # weights crafted so each node copies its input (for positive values):
        # stage-1 block carries the image, the last skip hands it to the
        # decoder, and the 1x1 head reads it out; everything else is zero
        def make_identity(model):
            for w, b in model.params.values():
                w[...] = 0.0
                b[...] = 0.0
            graph = model.graph
            p_idx = sorted(model.params)
            first, second = p_idx[0], p_idx[1]
            c = graph.layers[first].kernel // 2
            model.params[first][0][0, 0, c, c] = 1.0
            model.params[second][0][0, 0, c, c] = 1.0
            last_concat = max(i for i, l in enumerate(graph.layers)
                              if l.kind == "concat_skip")
            after = [i for i in p_idx if i > last_concat]
            dec1, dec2, head = after[0], after[1], after[2]
            skip_channel = graph.layers[dec1].in_channels - graph.meta["base_channels"]
            cc = graph.layers[dec1].kernel // 2
            model.params[dec1][0][0, skip_channel, cc, cc] = 1.0
            model.params[dec2][0][0, 0, cc, cc] = 1.0
            model.params[head][0][0, 0, 0, 0] = 1.0

        theta = build_thetanet([build_onet(5, 4) for _ in range(3)])
        m = Model(theta, seed=0)
        for node in m.nodes:
            make_identity(node)
        x = 0.1 + 0.8 * np.random.default_rng(2).random((1, 1, 32, 32))
        out = m.forward(x.astype(np.float32))
        assert np.allclose(out, x, atol=1e-6)

    def test_thetanet_composition(self):
        nodes = [build_onet(5, 2) for _ in range(3)]
        theta = build_thetanet(nodes)
        assert theta.parameter_count() == sum(n.parameter_count() for n in nodes)
        m = Model(theta, seed=0)
        x = np.random.default_rng(1).random((1, 1, 32, 32), dtype=np.float32)
        manual = x
        for node in m.nodes:
            manual = node.forward(manual)
        assert np.array_equal(m.forward(x), manual)
        with pytest.raises(GraphError):
            build_thetanet(nodes[:2])

    def test_graph_round_trip(self):
        g = build_thetanet([build_onet(5, 2) for _ in range(3)])
        assert ModelGraph.from_dict(g.to_dict()) == g

    def test_channel_mismatch_detected(self):
        with pytest.raises(GraphError, match="channels"):
            graph_of(
                LayerSpec(kind="conv", in_channels=2, out_channels=3, kernel=3),
                in_channels=1, out_channels=3,
            )


def tiny_render_dataset(n_pairs=8, tile=32, seed=0):
    """Blur-pair tiles with structured content, no optics in the loop."""
    rng = np.random.default_rng(seed)
    from scipy.ndimage import gaussian_filter

    pairs = []
    for _ in range(n_pairs):
        sharp = np.zeros((tile, tile))
        for _ in range(3):
            r, c = rng.integers(4, tile - 8, size=2)
            sharp[r : r + rng.integers(3, 8), c : c + rng.integers(3, 8)] = rng.random()
        sharp = (sharp * 200 + 30).astype(np.uint8)
        blurred = gaussian_filter(sharp.astype(float), 2.0)
        pairs.append(
            TilePair(
                source=np.round(blurred).astype(np.uint8)[..., None],
                expected=sharp[..., None],
                origin=(0, 0),
                modality="pcm",
            )
        )
    return TilePairDataset(pairs=tuple(pairs), tile_size=tile, provenance={"seed": seed})


class TestTraining:
    def test_iteration_bookkeeping(self):
        ds = tiny_render_dataset(n_pairs=10)
        cfg = TrainConfig(epochs=7, batch_size=4, seed=0)
        ckpt, hist = train(build_unet(depth=3, base_channels=2), ds, cfg)
        assert hist[-1][0] == 70  # pairs * epochs, batch size notwithstanding
        assert ckpt.provenance["iterations"] == 70
        epochs_seen = {row[1] for row in hist}
        assert epochs_seen == set(range(1, 8))

    def test_identity_task_converges(self):
        ds = tiny_render_dataset(n_pairs=4, tile=32)
        identity_pairs = tuple(
            TilePair(source=p.expected, expected=p.expected, origin=p.origin,
                     modality=p.modality)
            for p in ds.pairs
        )
        ds_id = TilePairDataset(pairs=identity_pairs, tile_size=32, provenance={})
        cfg = TrainConfig(epochs=125, lr=1e-3, batch_size=4, seed=0)
        ckpt, hist = train(build_onet(depth=5, base_channels=4), ds_id, cfg)
        assert hist[-1][0] == 500
        assert hist[-1][2] < 1e-3

    def test_seed_reproducibility_bitwise(self):
        ds = tiny_render_dataset(n_pairs=6)
        cfg = TrainConfig(epochs=3, batch_size=4, seed=11, float64=True)
        a, hist_a = train(build_unet(depth=3, base_channels=2), ds, cfg)
        b, hist_b = train(build_unet(depth=3, base_channels=2), ds, cfg)
        assert np.array_equal(a.weights, b.weights)
        assert hist_a == hist_b

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_halts_with_diagnostic(self):
        ds = tiny_render_dataset(n_pairs=4)
        cfg = TrainConfig(epochs=50, lr=1e6, optimizer="sgd_momentum", seed=0)
        from phasenano.nn import TrainingDiverged

        with pytest.raises((TrainingDiverged, NumericsError)):
            train(build_unet(depth=3, base_channels=2), ds, cfg)

    def test_tile_size_must_match_pool_ladder(self):
        ds = tiny_render_dataset(n_pairs=2, tile=24)
        with pytest.raises(GraphError, match="divisible"):
            train(build_unet(depth=5, base_channels=2), ds,
                  TrainConfig(epochs=1, seed=0))

    def test_loss_history_csv(self, tmp_path):
        ds = tiny_render_dataset(n_pairs=4)
        _, hist = train(build_unet(depth=3, base_channels=2), ds,
                        TrainConfig(epochs=2, seed=0))
        path = tmp_path / "loss.csv"
        save_history_csv(hist, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "iteration,epoch,loss"
        assert len(lines) == len(hist) + 1


class TestNaNGuard:
    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_forward_guard_reports_layer(self):
        g = graph_of(
            LayerSpec(kind="conv", in_channels=1, out_channels=2, kernel=3, padding=1),
            LayerSpec(kind="activation", activation="leaky_relu"),
            LayerSpec(kind="conv", in_channels=2, out_channels=1, kernel=1),
            in_channels=1, out_channels=1,
        )
        m = Model(g, seed=0)
        m.params[2][0][...] = np.inf
        with pytest.raises(NumericsError, match="layer 2"):
            m.forward(np.ones((1, 1, 8, 8), dtype=np.float32))


class TestCheckpointIO:
    def test_round_trip(self, tmp_path):
        ds = tiny_render_dataset(n_pairs=4)
        ckpt, _ = train(build_unet(depth=3, base_channels=2), ds,
                        TrainConfig(epochs=1, seed=0))
        path = tmp_path / "model.pnbc"
        save_checkpoint(ckpt, path)
        loaded = load_checkpoint(path)
        assert np.array_equal(loaded.weights, ckpt.weights)
        assert loaded.graph == ckpt.graph
        assert loaded.provenance["dataset_hash"] == ckpt.provenance["dataset_hash"]

    def test_corrupt_weights_detected(self, tmp_path):
        ds = tiny_render_dataset(n_pairs=4)
        ckpt, _ = train(build_unet(depth=3, base_channels=2), ds,
                        TrainConfig(epochs=1, seed=0))
        path = tmp_path / "model.pnbc"
        save_checkpoint(ckpt, path)
        raw = bytearray(path.read_bytes())
        raw[-20] ^= 0x01
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointFormatError, match="CRC"):
            load_checkpoint(path)

    def test_weight_count_validated(self):
        g = build_unet(depth=3, base_channels=2)
        with pytest.raises(GraphError, match="weights"):
            Checkpoint(graph=g, weights=np.zeros(10, dtype=np.float32))


class TestInfer:
    def test_identity_weights_passthrough(self):
        # final 1x1 conv copying the input through a graph initialized to zero
        # is awkward; instead check output dims and clamping contracts
        ds = tiny_render_dataset(n_pairs=4, tile=32)
        ckpt, _ = train(build_unet(depth=3, base_channels=2), ds,
                        TrainConfig(epochs=2, seed=0))
        img = ImageField(np.random.default_rng(0).random((64, 96)), pitch=46.25)
        out = infer(ckpt, img, tile=32, stride=32)
        assert out.shape == (64, 96)
        assert out.intensity.min() >= 0.0 and out.intensity.max() <= 1.0

    def test_trained_model_beats_input_on_task(self):
        # deblurring gain on the fitted distribution; the held-out version of
        # this claim runs at desk scale in the acceptance suite
        ds = tiny_render_dataset(n_pairs=8, tile=32, seed=1)
        cfg = TrainConfig(epochs=150, lr=2e-3, batch_size=8, seed=0)
        ckpt, _ = train(build_unet(depth=3, base_channels=4), ds, cfg)
        p = ds.pairs[0]
        source = p.source[..., 0].astype(float) / 255.0
        out = infer(ckpt, ImageField(source, pitch=1.0), tile=32, normalize=False)
        truth = p.expected[..., 0].astype(float) / 255.0
        mse_out = float(np.mean((out.intensity - truth) ** 2))
        mse_in = float(np.mean((source - truth) ** 2))
        assert mse_out < mse_in

    def test_tile_larger_than_image_rejected(self):
        ds = tiny_render_dataset(n_pairs=2, tile=32)
        ckpt, _ = train(build_unet(depth=3, base_channels=2), ds,
                        TrainConfig(epochs=1, seed=0))
        with pytest.raises(ValueError, match="tile"):
            infer(ckpt, ImageField(np.ones((16, 16)), 1.0), tile=32)


class TestEvaluateLoss:
    def test_perfect_prediction_zero_loss(self):
        ds = tiny_render_dataset(n_pairs=2, tile=32)
        # train long enough that loss is small, then evaluate_loss agrees
        ckpt, hist = train(build_unet(depth=3, base_channels=2), ds,
                           TrainConfig(epochs=2, seed=0))
        val = evaluate_loss(ckpt, ds, "mse")
        assert math.isfinite(val) and val >= 0.0

import numpy as np
import pytest

from xdops import backbone as bb
from xdops import tasks, xd
from xdops.backbone import BackboneSpec, Edge, TrainConfig


def _rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


class TestSpecValidation:
    def test_cycle_rejected(self):
        with pytest.raises(ValueError, match="cycle"):
            BackboneSpec(["a", "b", "c", "d"],
                         [Edge("a", "b", "conv", 1, 1, 8, {"k": 3}),
                          Edge("b", "c", "conv", 1, 1, 8, {"k": 3}),
                          Edge("c", "b", "conv", 1, 1, 8, {"k": 3}),
                          Edge("c", "d", "conv", 1, 1, 8, {"k": 3})],
                         "a", "d")

    def test_two_sources_rejected(self):
        with pytest.raises(ValueError, match="single source"):
            BackboneSpec(["a", "b", "c"],
                         [Edge("a", "c", "conv", 1, 1, 8, {"k": 3}),
                          Edge("b", "c", "conv", 1, 1, 8, {"k": 3})],
                         "a", "c")

    def test_unknown_node_rejected(self):
        with pytest.raises(ValueError):
            BackboneSpec(["a", "b"],
                         [Edge("a", "c", "conv", 1, 1, 8, {"k": 3})], "a", "b")

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="edge label"):
            Edge("a", "b", "wavelet", 1, 1, 8, {})

    def test_make_backbone_names(self):
        for name in ("cnn3_1d", "cnn4_2d_skip", "cnn2d_classifier"):
            spec = bb.make_backbone(name, 8, channels=2)
            assert spec.order[0] == spec.input_node
        with pytest.raises(ValueError):
            bb.make_backbone("nope", 8)


class TestWarmStart:
    @pytest.mark.parametrize("name,nd", [("cnn3_1d", 1), ("cnn4_2d_skip", 2),
                                         ("cnn2d_classifier", 2)])
    def test_supernet_matches_backbone(self, name, nd):
        n = 8
        spec = bb.make_backbone(name, n, channels=2)
        weights = spec.init_weights(seed=4)
        state = bb.substitute_backbone(spec, seed=4)
        rng = np.random.default_rng(0)
        shape = (5, 1) + (n,) * nd
        x = rng.standard_normal(shape)
        ref = bb.backbone_forward(spec, weights, x)
        got = bb.supernet_forward(state, x).data
        assert _rel(got, ref) < 1e-6

    def test_depth_padding_preserves_warm_start(self):
        n = 8
        spec = bb.make_backbone("cnn3_1d", n, channels=2)
        weights = spec.init_weights(seed=4)
        state = bb.substitute_backbone(spec, seed=4, depth=(3, 3, 3))
        x = np.random.default_rng(1).standard_normal((4, 1, n))
        ref = bb.backbone_forward(spec, weights, x)
        got = bb.supernet_forward(state, x).data
        assert _rel(got, ref) < 1e-6
        for op in state.edge_ops.values():
            assert op.depth == (3, 3, 3)

    def test_initial_divergence_zero(self):
        state = bb.substitute_backbone(bb.make_backbone("cnn3_1d", 8), seed=0)
        div = bb.arch_divergence(state)
        assert div["mean"] == 0.0
        assert all(v == 0.0 for v in div["per_edge"].values())


class TestTraining:
    def _splits(self, n=16, samples=48):
        ds = tasks.generate("dilated", n, samples, seed=0)
        return tasks.split_dataset(ds, 32, 8)[:2]

    def test_seeded_determinism(self):
        tr, va = self._splits()
        hists = []
        for _ in range(2):
            state = bb.substitute_backbone(bb.make_backbone("cnn3_1d", 16),
                                           seed=0)
            cfg = TrainConfig(epochs=3, batch_size=8, seed=0)
            hists.append(bb.train(state, (tr, va), cfg))
        strip = lambda h: [{k: v for k, v in r.items() if k != "wallclock_s"}
                           for r in h]
        assert strip(hists[0]) == strip(hists[1])

    def test_history_fields(self):
        tr, va = self._splits()
        state = bb.substitute_backbone(bb.make_backbone("cnn3_1d", 16), seed=0)
        hist = bb.train(state, (tr, va), TrainConfig(epochs=2, batch_size=8))
        assert len(hist) == 2
        for rec in hist:
            assert {"epoch", "train_loss", "valid_loss", "metric",
                    "divergence_mean", "wallclock_s"} <= set(rec)

    def test_warmup_freezes_arch(self):
        tr, va = self._splits()
        state = bb.substitute_backbone(bb.make_backbone("cnn3_1d", 16), seed=0)
        before = [p.data.copy() for op in state.edge_ops.values()
                  for p in xd.parameter_groups(op)[0]]
        cfg = TrainConfig(epochs=2, warmup_epochs=2, batch_size=8)
        bb.train(state, (tr, va), cfg)
        after = [p.data for op in state.edge_ops.values()
                 for p in xd.parameter_groups(op)[0]]
        for b, a in zip(before, after):
            np.testing.assert_array_equal(b, a)
        assert bb.arch_divergence(state)["mean"] == 0.0

    def test_arch_lr_zero_matches_warmup_forever(self):
        tr, va = self._splits()
        runs = []
        for arch_lr, warmup in ((0.0, 0), (1e-3, 3)):
            state = bb.substitute_backbone(bb.make_backbone("cnn3_1d", 16),
                                           seed=0)
            cfg = TrainConfig(epochs=3, batch_size=8, seed=0,
                              arch_opt={"algo": "adam", "lr": arch_lr},
                              warmup_epochs=warmup)
            hist = bb.train(state, (tr, va), cfg)
            runs.append([(r["train_loss"], r["valid_loss"]) for r in hist])
        assert runs[0] == runs[1]

    def test_training_reduces_loss(self):
        tr, va = self._splits()
        state = bb.substitute_backbone(bb.make_backbone("cnn3_1d", 16), seed=0)
        hist = bb.train(state, (tr, va), TrainConfig(epochs=8, batch_size=8))
        assert hist[-1]["valid_loss"] < hist[0]["valid_loss"]

    def test_nan_aborts_with_checkpoint(self, tmp_path):
        tr, va = self._splits()
        tr.inputs[5, 0, 3] = np.nan
        state = bb.substitute_backbone(bb.make_backbone("cnn3_1d", 16), seed=0)
        cfg = TrainConfig(epochs=20, batch_size=8)
        with pytest.raises(bb.TrainAborted) as exc:
            bb.train(state, (tr, va), cfg,
                     checkpoint_path=tmp_path / "c.xdck")
        assert exc.value.checkpoint_blob is not None
        from xdops import checkpoint as ckpt
        restored, _, _ = ckpt.loads_state(exc.value.checkpoint_blob)
        m = bb.evaluate(restored, va)
        assert np.isfinite(m["loss"])

    def test_divergence_positive_after_arch_steps(self):
        tr, va = self._splits()
        state = bb.substitute_backbone(bb.make_backbone("cnn3_1d", 16), seed=0)
        cfg = TrainConfig(epochs=3, batch_size=8,
                          arch_opt={"algo": "adam", "lr": 1e-2})
        bb.train(state, (tr, va), cfg)
        assert bb.arch_divergence(state)["mean"] > 0.0


class TestFixedOps:
    def test_concat_aggregation(self):
        n = 8
        spec = BackboneSpec(
            nodes=["in", "a", "b", "cat", "out"],
            edges=[Edge("in", "a", "conv", 1, 2, n, {"k": 3}),
                   Edge("in", "b", "conv", 1, 2, n, {"k": 3}),
                   Edge("a", "cat", "skip", 2, 2, n),
                   Edge("b", "cat", "skip", 2, 2, n),
                   Edge("cat", "out", "conv", 4, 1, n, {"k": 3})],
            input_node="in", output_node="out",
            aggregation={"cat": "concat"})
        weights = spec.init_weights(seed=0)
        state = bb.substitute_backbone(spec, seed=0)
        x = np.random.default_rng(2).standard_normal((3, 1, n))
        ref = bb.backbone_forward(spec, weights, x)
        got = bb.supernet_forward(state, x).data
        assert _rel(got, ref) < 1e-6

    def test_maxpool_and_norm_match_reference(self):
        n = 8
        spec = BackboneSpec(
            nodes=["in", "m", "nrm", "out"],
            edges=[Edge("in", "m", "maxpool", 1, 1, n, {"k": 2}),
                   Edge("m", "nrm", "norm", 1, 1, n),
                   Edge("nrm", "out", "conv", 1, 1, n, {"k": 3})],
            input_node="in", output_node="out")
        weights = spec.init_weights(seed=0)
        state = bb.substitute_backbone(spec, seed=0)
        x = np.random.default_rng(3).standard_normal((4, 1, n))
        ref = bb.backbone_forward(spec, weights, x)
        got = bb.supernet_forward(state, x).data
        assert _rel(got, ref) < 1e-6

    def test_classifier_head_metric_is_accuracy(self):
        ds = tasks.generate("unpermuted", 8, 40, seed=0)
        state = bb.substitute_backbone(
            bb.make_backbone("cnn2d_classifier", 8, channels=2), seed=0)
        m = bb.evaluate(state, ds)
        assert 0.0 <= m["metric"] <= 1.0

"""Backbones, parameter sets, and checkpoint IO."""

import numpy as np
import pytest

from epift import nn
from epift import tensor as T
from epift.nn import (BackboneSpec, ConfigError, ParamSet, Tensor,
                      checkpoint_to_params, load_checkpoint, init_backbone,
                      params_to_checkpoint, save_checkpoint)


def _spec(kind="conv4", mode="flat", shape=(20, 16), widths=(4, 5, 6, 7)):
    return BackboneSpec(kind=kind, input_shape=shape, widths=widths,
                        embed_mode=mode)


class TestParamSet:
    def test_ordering_and_lookup(self):
        p = ParamSet()
        p.add("b", Tensor(np.zeros(2)))
        p.add("a", Tensor(np.ones(3)))
        assert p.names() == ["b", "a"]
        assert p["a"].shape == (3,)
        assert "b" in p and len(p) == 2

    def test_duplicate_and_unknown_names(self):
        p = ParamSet()
        p.add("x", Tensor(np.zeros(1)))
        with pytest.raises(ConfigError):
            p.add("x", Tensor(np.zeros(1)))
        with pytest.raises(ConfigError):
            p["y"] = Tensor(np.zeros(1))

    def test_clone_shares_nothing(self):
        p = ParamSet()
        p.add("x", Tensor(np.zeros(3), requires_grad=True))
        q = p.clone()
        q["x"].data[0] = 9.0
        assert p["x"].data[0] == 0.0

    def test_checksum_tracks_content(self):
        p = ParamSet()
        p.add("x", Tensor(np.zeros(3)))
        c0 = p.checksum()
        assert c0 == p.checksum()
        p["x"] = Tensor(np.ones(3))
        assert p.checksum() != c0

    def test_trainable_flag(self):
        p = ParamSet()
        p.add("a", Tensor(np.zeros(1)), trainable=False)
        p.add("b", Tensor(np.zeros(1)))
        assert [n for n, _ in p.trainable_items()] == ["b"]


class TestBackboneSpec:
    def test_output_shape_floor_halving(self):
        s = _spec(shape=(20, 16))
        assert s.output_shape() == (7, 1, 1)
        s = _spec(shape=(128, 64))
        assert s.output_shape() == (7, 8, 4)
        assert s.embed_dim() == 7 * 8 * 4

    def test_validation(self):
        with pytest.raises(ConfigError):
            BackboneSpec(kind="vgg")
        with pytest.raises(ConfigError):
            BackboneSpec(widths=(1, 2, 3))
        with pytest.raises(ConfigError):
            BackboneSpec(embed_mode="pooled")


class TestInitAndEmbed:
    def test_conv4_param_names(self):
        p = init_backbone(_spec(), np.random.default_rng(0))
        assert "block0.conv.weight" in p and "block3.norm.beta" in p
        assert p["block1.conv.weight"].shape == (5, 4, 3, 3)

    def test_resnet12_lite_param_names(self):
        p = init_backbone(_spec(kind="resnet12-lite"), np.random.default_rng(0))
        assert "stage0.conv2.weight" in p and "stage3.skipnorm.gamma" in p
        assert p["stage2.skip.weight"].shape == (6, 5, 1, 1)

    def test_trunc_normal_bounded(self):
        x = nn._trunc_normal(np.random.default_rng(0), (5000,), sigma=0.02)
        assert np.abs(x).max() <= 0.04 + 1e-12

    def test_embed_shapes(self):
        rng = np.random.default_rng(0)
        for kind in ("conv4", "resnet12-lite"):
            s = _spec(kind=kind, shape=(32, 16))
            p = init_backbone(s, rng)
            batch = rng.normal(size=(3, 1, 32, 16)).astype(np.float32)
            e = nn.embed(p, batch, s)
            assert e.shape == (3, s.embed_dim())
            sm = _spec(kind=kind, mode="map", shape=(32, 16))
            pm = init_backbone(sm, rng)
            em = nn.embed(pm, batch, sm)
            assert em.shape == (3,) + sm.output_shape()

    def test_embed_is_pure(self):
        rng = np.random.default_rng(0)
        s = _spec(shape=(16, 16))
        p = init_backbone(s, rng)
        batch = rng.normal(size=(2, 1, 16, 16)).astype(np.float32)
        a = nn.embed(p, batch, s).data
        b = nn.embed(p, batch, s).data
        assert np.array_equal(a, b)

    def test_embed_shape_check(self):
        s = _spec()
        p = init_backbone(s, np.random.default_rng(0))
        with pytest.raises(T.ShapeError):
            nn.embed(p, np.zeros((2, 1, 10, 10), dtype=np.float32), s)

    def test_global_classifier(self):
        rng = np.random.default_rng(0)
        s = _spec(shape=(32, 16))
        p = init_backbone(s, rng, n_train_classes=6)
        e = nn.embed(p, rng.normal(size=(2, 1, 32, 16)).astype(np.float32), s)
        logits = nn.global_classifier(p, e)
        assert logits.shape == (2, 6)
        p2 = init_backbone(s, rng)
        with pytest.raises(ConfigError):
            nn.global_classifier(p2, e)


class TestFitInput:
    def test_pad_and_crop(self):
        s = _spec(shape=(4, 6))
        short = np.ones((4, 3))
        out = nn.fit_input(short, s)
        assert out.shape == (4, 6) and out[:, 3:].sum() == 0
        long = np.arange(40, dtype=float).reshape(4, 10)
        out = nn.fit_input(long, s)
        assert out.shape == (4, 6)
        assert np.array_equal(out, long[:, 2:8].astype(np.float32))

    def test_bin_mismatch_raises(self):
        with pytest.raises(T.ShapeError):
            nn.fit_input(np.ones((5, 6)), _spec(shape=(4, 6)))


class TestCheckpointIO:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        path = tmp_path / "ck.bin"
        a = rng.normal(size=(3, 4)).astype(np.float32)
        b = rng.normal(size=(7,)).astype(np.float64)
        c = np.asarray(2.5, dtype=np.float32)  # 0-d
        save_checkpoint(path, [("w", Tensor(a)), ("v", b), ("s", c)])
        out = load_checkpoint(path)
        assert list(out) == ["w", "v", "s"]
        assert out["w"].dtype == np.float32 and np.array_equal(out["w"], a)
        assert out["v"].dtype == np.float64 and np.array_equal(out["v"], b)
        assert out["s"].shape == () and out["s"] == c

    def test_magic_check(self, tmp_path):
        p = tmp_path / "bad.bin"
        p.write_bytes(b"something else\ndata\n")
        with pytest.raises(ConfigError):
            load_checkpoint(p)

    def test_paramset_round_trip_with_curvature(self, tmp_path, rng):
        from epift.metaopt import CurvatureSet
        s = _spec()
        params = init_backbone(s, np.random.default_rng(3))
        curv = CurvatureSet(params, mode="diagonal")
        path = tmp_path / "full.bin"
        params_to_checkpoint(path, params, curvature=curv.named_tensors())
        arrs, carrs = checkpoint_to_params(path)
        assert set(arrs) == set(params.names())
        for n, t in params.items():
            assert np.array_equal(arrs[n], t.data)
        assert set(carrs) == {f"{n}/0" for n in curv.names()}

    def test_identical_content_identical_bytes(self, tmp_path, rng):
        a = rng.normal(size=(5, 5)).astype(np.float32)
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        save_checkpoint(p1, [("w", a)])
        save_checkpoint(p2, [("w", a.copy())])
        assert p1.read_bytes() == p2.read_bytes()

import numpy as np
import pytest

from builders import cube_tree, random_linear, random_scan_case
from oracles import gradcheck, reference_scan
from cadseq import geometry, gmamba
from cadseq.core import CadSequence, CurveKind, Role, serialize_tree, token_info
from cadseq.gmamba import Conditioning, GMambaModel, Kernels, ModelConfig
from cadseq.numerics import Tensor, nn, precision
from cadseq.numerics import tensor as T

SMALL = ModelConfig(n_blocks=2, d_e=8, d_c=4, n_ts=48)


@pytest.fixture(autouse=True)
def f64():
    with precision("f64"):
        yield


def _arc_tree():
    from builders import extrusion
    from cadseq.core import CadTree, SketchPrimitive

    a, b, m = (60, 139), (220, 139), (139, 60)
    loop = [SketchPrimitive.arc(a, m, b), SketchPrimitive.line(b, a)]
    return CadTree.from_steps([([[loop]], extrusion())])


def _cond(tree, n_ts=48):
    seq = serialize_tree(tree, n_ts)
    return seq, gmamba.conditioning([seq], [geometry.descriptors(tree, seq)])


class TestEmbedding:
    def test_padding_rows_zero_and_shape(self):
        model = GMambaModel(SMALL, seed=0)
        seq = serialize_tree(cube_tree(), 48)
        z = model.embed_sequences([seq]).data[0]
        assert z.shape == (48, 8)
        assert np.all(z[seq.valid_len :] == 0.0)
        assert np.all(np.abs(z[: seq.valid_len]).sum(-1) > 0)

    def test_step_flags_change_embedding(self):
        model = GMambaModel(SMALL, seed=0)
        seq = serialize_tree(cube_tree(), 48)
        other = CadSequence(seq.tokens, seq.type_flags, tuple(min(s + 1, 10) for s in seq.step_flags), seq.valid_len)
        a = model.embed_sequences([seq]).data
        b = model.embed_sequences([other]).data
        assert not np.allclose(a, b)

    def test_too_long(self):
        model = GMambaModel(SMALL, seed=0)
        with pytest.raises(T.ShapeError):
            model.embed_sequences([serialize_tree(cube_tree(), 64)])


class TestKernels:
    def test_squash_range(self):
        x = np.array([-1e4, -40.0, 0.0, 40.0])
        for prec in ("f32", "f64"):
            with precision(prec):
                a = gmamba.squash(Tensor(x)).data
            assert np.all(a < 1.0) and np.all(a >= 0.0)

    def test_max_A_below_one(self):
        for seed in range(3):
            cfg = ModelConfig(n_blocks=1, d_e=8, d_c=4, n_ts=48)
            model = GMambaModel(cfg, seed)
            for p in model.parameters():
                p.data = p.data * 50.0
            _, c = _cond(cube_tree())
            for k in model.block_kernels(c, 7):
                assert k.A.data.max() < 1.0 and k.A.data.min() >= 0.0

    def test_identical_conditioning_identical_kernels(self):
        model = GMambaModel(ModelConfig(n_blocks=1, d_e=8, d_c=4, n_ts=8, film_enabled=False), 0)
        c = gmamba.unconditional(1, 8)
        k = model.block_kernels(c, 3)[0]
        for name in "ABCG":
            v = getattr(k, name).data[0]
            np.testing.assert_array_equal(v, np.broadcast_to(v[0], v.shape))

    def test_curvature_is_tokenwise(self):
        tree = _arc_tree()
        seq, c = _cond(tree)
        info = token_info(seq)
        arc_k = next(i for i, ti in enumerate(info) if ti.role is Role.ARC_POINT)
        r = np.expm1(c.desc[0, arc_k, 2])
        assert r > 0
        c2 = c.take([0])
        c2.desc = c.desc.copy()
        c2.desc[0, arc_k, 2] = np.log1p(2 * r)
        model = GMambaModel(SMALL, 1)
        ka, kb = model.block_kernels(c, 5), model.block_kernels(c2, 5)
        for a, b in zip(ka, kb):
            for name in "ABCG":
                x, y = getattr(a, name).data[0], getattr(b, name).data[0]
                changed = np.flatnonzero(np.any(x != y, axis=-1))
                assert changed.tolist() == [arc_k]

    def test_film_is_identity_at_init(self):
        model = GMambaModel(SMALL, 2)
        _, c = _cond(cube_tree())
        for a, b in zip(model.block_kernels(c, 3), model.block_kernels(c, 40)):
            np.testing.assert_array_equal(a.A.data, b.A.data)


def _run_scan(Z, A, B, C, G, pi, conv, gin, gout, mask):
    k = Kernels(Tensor(A), Tensor(B), Tensor(C), Tensor(G))
    return gmamba.gsm_ssd_scan(Tensor(Z), k, None if pi is None else Tensor(pi), Tensor(conv), gin, gout, mask).data


class TestScan:
    def test_matches_reference(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            L, d = int(rng.integers(1, 33)), int(rng.integers(1, 9))
            Z, A, B, C, G, pi, conv, gin, gout, valid, mask = random_scan_case(rng, L, d)
            got = _run_scan(Z, A, B, C, G, pi, conv, gin, gout, mask)[0]
            want = reference_scan(Z[0], A[0], B[0], C[0], G[0], pi[0], conv, gin.weight.data, gin.bias.data,
                                  gout.weight.data, gout.bias.data, valid)
            np.testing.assert_allclose(got, want, rtol=0, atol=1e-10)

    def test_one_step_delay(self):
        rng = np.random.default_rng(1)
        L, d = 10, 3
        Z = rng.normal(size=(1, L, d))
        ones, zeros = np.ones((1, L, d)), np.zeros((1, L, d))
        conv = np.zeros((4, d))
        conv[0] = 1.0
        out = _run_scan(Z, zeros, ones, ones, zeros, None, conv, random_linear(rng, d, 2 * d), random_linear(rng, d, d),
                        np.ones((1, L), bool))[0]
        np.testing.assert_array_equal(out[0], 0.0)
        np.testing.assert_allclose(out[1:], Z[0, :-1], atol=1e-15)

    def test_frozen_state(self):
        rng = np.random.default_rng(2)
        L, d = 12, 4
        Z = rng.normal(size=(1, L, d))
        A = np.full((1, L, d), 1 - 1e-12)
        zeros = np.zeros((1, L, d))
        C, G = rng.normal(size=(1, L, d)), rng.normal(size=(1, L, d))
        conv = rng.normal(size=(4, d))
        gin, gout = random_linear(rng, d, 2 * d), random_linear(rng, d, d)
        out = _run_scan(Z, A, zeros, C, G, None, conv, gin, gout, np.ones((1, L), bool))[0]
        # with B = 0 the fused input is zero too, so the gated branch reduces to its bias path
        h_in = np.zeros((L, d)) @ gin.weight.data + gin.bias.data
        h_hat = (h_in[:, :d] / (1 + np.exp(-h_in[:, d:]))) @ gout.weight.data + gout.bias.data
        np.testing.assert_allclose(out, G[0] * h_hat, atol=1e-14)

    def test_padding_carries_state_and_outputs_zero(self):
        rng = np.random.default_rng(3)
        Z, A, B, C, G, pi, conv, gin, gout, _, _ = random_scan_case(rng, 10, 3)
        mask = np.array([[True] * 6 + [False] * 4])
        out = _run_scan(Z, A, B, C, G, pi, conv, gin, gout, mask)[0]
        assert np.all(out[6:] == 0.0)

    def test_length_mismatch(self):
        rng = np.random.default_rng(4)
        Z, A, B, C, G, pi, conv, gin, gout, _, mask = random_scan_case(rng, 8, 3)
        with pytest.raises(T.ShapeError):
            _run_scan(Z[:, :5], A, B, C, G, pi, conv, gin, gout, mask)

    def test_recurrence_gradient(self):
        rng = np.random.default_rng(5)
        a = Tensor(rng.uniform(0.1, 0.9, (2, 7, 3)), requires_grad=True)
        u = Tensor(rng.normal(size=(2, 7, 3)), requires_grad=True)
        w = rng.normal(size=(2, 7, 3))
        assert gradcheck(lambda: T.tsum(gmamba.linear_recurrence(a, u) * w), [a, u]) < 1e-6


class TestModel:
    def test_zero_projection_outputs_zero(self):
        model = GMambaModel(ModelConfig(n_blocks=2, d_e=8, d_c=4, n_ts=48, zero_out_proj=True), 0)
        _, c = _cond(cube_tree())
        z = np.random.default_rng(0).normal(size=(1, 48, 8))
        assert np.all(model.denoise(z, 10, c).data == 0.0)

    def test_denoise_masks_padding(self):
        model = GMambaModel(SMALL, 0)
        seq, c = _cond(cube_tree())
        out = model.denoise(np.random.default_rng(0).normal(size=(1, 48, 8)), [10], c).data[0]
        assert np.all(out[seq.valid_len :] == 0.0)
        assert np.all(np.isfinite(out))

    def test_vanilla_kernels_are_shared(self):
        cfg = ModelConfig(n_blocks=2, d_e=8, d_c=4, n_ts=48, variant="vanilla", film_enabled=False)
        model = GMambaModel(cfg, 0)
        assert not hasattr(model.blocks[0], "f_geom")
        _, c = _cond(cube_tree())
        for k in model.block_kernels(c, 3):
            a = k.A.data[0]
            np.testing.assert_array_equal(a, np.broadcast_to(a[0], a.shape))

    def test_vanilla_ignores_structure(self):
        cfg = ModelConfig(n_blocks=2, d_e=8, d_c=4, n_ts=48, variant="vanilla")
        model = GMambaModel(cfg, 0)
        seq, c = _cond(cube_tree())
        bare = gmamba.conditioning([seq], structure=False)
        z = np.random.default_rng(0).normal(size=(1, 48, 8))
        np.testing.assert_array_equal(model.denoise(z, 4, c).data, model.denoise(z, 4, bare).data)

    @pytest.mark.parametrize("variant", ["gmamba", "vanilla"])
    def test_streaming_matches_full_sequence(self, variant, monkeypatch):
        monkeypatch.setattr(gmamba, "STREAM_CHUNK", 7)
        model = GMambaModel(ModelConfig(n_blocks=2, d_e=8, d_c=4, n_ts=48, variant=variant), 0)
        rng = np.random.default_rng(0)
        for p in model.parameters():
            p.data = p.data + rng.normal(size=p.data.shape) * 0.1
        seq, c = _cond(cube_tree())
        c = c.take([0, 0])
        c.mask = c.mask.copy()
        c.mask[1, 30:] = False
        z = rng.normal(size=(2, 48, 8))
        full = model.denoise(z, [3, 9], c).data
        calls = []
        real = GMambaModel._denoise_streaming
        monkeypatch.setattr(GMambaModel, "_denoise_streaming", lambda *a: calls.append(1) or real(*a))
        with T.no_grad():
            streamed = model.denoise(z, [3, 9], c).data
        assert calls
        np.testing.assert_allclose(streamed, full, rtol=0, atol=1e-12)

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            ModelConfig(variant="other")

    def test_config_json_and_checkpoint(self, tmp_path):
        cfg = ModelConfig.desk(n_ts=32)
        assert ModelConfig.from_json(cfg.to_json()) == cfg
        model = GMambaModel(ModelConfig(n_blocks=1, d_e=8, d_c=4, n_ts=48), 3)
        model.save(tmp_path / "m.gft")
        back = GMambaModel.load(tmp_path / "m.gft")
        for (ka, a), (kb, b) in zip(model.state_dict().items(), back.state_dict().items()):
            assert ka == kb
            np.testing.assert_array_equal(a, b)

    def test_seeded_init_is_deterministic(self):
        a, b = GMambaModel(SMALL, 4), GMambaModel(SMALL, 4)
        for x, y in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(x.data, y.data)

    def test_hierarchy_codes_of_unparsable_sequence_are_zero(self):
        seq = CadSequence.from_tokens([(1, 0), (5, 0)], 8)
        assert all(np.all(x == 0) for x in gmamba.hierarchy_codes(seq))

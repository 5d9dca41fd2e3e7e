import numpy as np
import pytest

from builders import cube_tree, cylinder_tree
from oracles import random_conditioning, sampled_gradcheck
from cadseq import diffusion, gmamba
from cadseq.core import VALUE_MIN, TokenType, serialize_tree
from cadseq.diffusion import DiffusionError, DiffusionSchedule, LossWeights, TrainConfig, Trainer
from cadseq.gmamba import GMambaModel, ModelConfig
from cadseq.numerics import precision


@pytest.fixture(autouse=True)
def f64():
    with precision("f64"):
        yield


class TestSchedule:
    @pytest.mark.parametrize("T", [1000, 50, 7])
    def test_monotone(self, T):
        s = DiffusionSchedule.linear(T)
        b = s.beta[1:]
        assert np.all((b > 0) & (b < 1)) and np.all(np.diff(b) > 0)
        assert s.alpha_bar[0] == 1.0 and np.all(np.diff(s.alpha_bar) < 0)

    def test_default_destroys_signal(self):
        assert DiffusionSchedule.linear(1000).alpha_bar[-1] < 0.05
        assert DiffusionSchedule.linear(50).alpha_bar[-1] < 0.05

    def test_final_step_noiseless(self):
        s = DiffusionSchedule.linear(50)
        assert s.sigma[1] == 0.0
        np.testing.assert_allclose(s.sigma[2:] ** 2, s.beta[2:])

    def test_unscaled_matches_endpoints(self):
        s = DiffusionSchedule.linear(1000)
        assert s.beta[1] == pytest.approx(1e-4) and s.beta[-1] == pytest.approx(0.02)
        np.testing.assert_array_equal(DiffusionSchedule.linear(1000, rescale=False).beta, s.beta)


class TestForward:
    def test_t0_is_identity(self):
        z0 = np.random.default_rng(0).normal(size=(2, 5, 3))
        zt, _ = diffusion.forward_sample(DiffusionSchedule.linear(50), z0, 0, 1)
        np.testing.assert_array_equal(zt, z0)

    def test_determinism_and_padding(self):
        s = DiffusionSchedule.linear(50)
        z0 = np.random.default_rng(0).normal(size=(2, 5, 3))
        mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], bool)
        a, ea = diffusion.forward_sample(s, z0, [10, 20], 3, mask)
        b, eb = diffusion.forward_sample(s, z0, [10, 20], 3, mask)
        np.testing.assert_array_equal(a, b)
        assert np.all(a[0, 3:] == 0) and np.all(ea[0, 3:] == 0)

    def test_range(self):
        with pytest.raises(DiffusionError):
            diffusion.forward_sample(DiffusionSchedule.linear(50), np.zeros((1, 2, 2)), 51, 0)

    def test_markov_chain_matches_closed_form(self):
        s = DiffusionSchedule.linear(50)
        rng = np.random.default_rng(0)
        z0 = np.array([1.5, -0.5, 0.0])
        n = 20_000
        z = np.broadcast_to(z0, (n, 3)).copy()
        for t in range(1, 51):
            z = np.sqrt(s.alpha[t]) * z + np.sqrt(s.beta[t]) * rng.standard_normal(z.shape)
            if t in (5, 25, 50):
                ab = s.alpha_bar[t]
                se = np.sqrt((1 - ab) / n)
                assert np.all(np.abs(z.mean(0) - np.sqrt(ab) * z0) < 4 * se)
                np.testing.assert_allclose(z.var(0), 1 - ab, rtol=0.05)


class TestReverse:
    def test_zero_eps(self):
        s = DiffusionSchedule.linear(50)
        z = np.random.default_rng(0).normal(size=(1, 4, 2))
        out = diffusion.reverse_step(s, z, 17, np.zeros_like(z), deterministic=True)
        np.testing.assert_allclose(out, z / np.sqrt(s.alpha[17]), atol=1e-15)

    def test_true_noise_inverts(self):
        s = DiffusionSchedule.linear(50)
        rng = np.random.default_rng(1)
        z0 = rng.normal(size=(2, 6, 4))
        z = z0
        path = [z0]
        for t in range(1, 51):
            z = np.sqrt(s.alpha[t]) * z + np.sqrt(s.beta[t]) * rng.standard_normal(z.shape)
            path.append(z)
        for t in range(50, 0, -1):
            eps = (z - np.sqrt(s.alpha_bar[t]) * z0) / np.sqrt(1 - s.alpha_bar[t])
            z = diffusion.reverse_step(s, z, t, eps, deterministic=True)
        np.testing.assert_allclose(z, z0, atol=1e-5)

    def test_range(self):
        with pytest.raises(DiffusionError):
            diffusion.reverse_step(DiffusionSchedule.linear(50), np.zeros((1, 1, 1)), 0, np.zeros((1, 1, 1)))


class TestEstimate:
    def test_identity_and_t0(self):
        s = DiffusionSchedule.linear(50)
        rng = np.random.default_rng(2)
        z0 = rng.normal(size=(3, 5, 4))
        zt, eps = diffusion.forward_sample(s, z0, [4, 20, 50], rng)
        np.testing.assert_allclose(diffusion.estimate_z0(s, zt, [4, 20, 50], eps), z0, atol=1e-12)
        np.testing.assert_array_equal(diffusion.estimate_z0(s, zt, 0, eps), zt)

    def test_symbolic_formula(self):
        s = DiffusionSchedule.linear(50)
        rng = np.random.default_rng(3)
        zt, eh = rng.normal(size=(4,)), rng.normal(size=(4,))
        ab = float(np.prod([1 - b for b in s.beta[1:31]]))
        want = (zt - (1 - ab) ** 0.5 * eh) / ab**0.5
        np.testing.assert_allclose(diffusion.estimate_z0(s, zt, 30, eh), want, rtol=0, atol=1e-12)


def _tiny(seed=0, **kw):
    return GMambaModel(ModelConfig(n_blocks=1, d_e=8, d_c=4, n_ts=32, **kw), seed)


def _batch(n_ts=32):
    seqs = [serialize_tree(t, n_ts) for t in (cube_tree(), cylinder_tree())]
    return diffusion.corpus_conditioning(seqs)


class TestLoss:
    def test_decomposition(self):
        model, c = _tiny(), _batch()
        s = DiffusionSchedule.linear(50)
        eps = np.random.default_rng(0).normal(size=(2, 32, 8))
        parts = diffusion.total_loss(model, s, c, np.array([3, 30]), eps, LossWeights(2.0))
        assert parts.total.item() == pytest.approx(parts.diffusion + parts.command + 2.0 * parts.args, rel=1e-12)

    def test_cross_entropy_weighted_by_alpha_bar(self):
        model, c = _tiny(), _batch()
        s = DiffusionSchedule.linear(50)
        eps = np.random.default_rng(0).normal(size=(2, 32, 8))
        t = np.array([7, 7])
        parts = diffusion.total_loss(model, s, c, t, eps)
        ab = s.alpha_bar[7]
        z_t = np.sqrt(ab) * model.embed(c).data + np.sqrt(1 - ab) * eps * c.mask[..., None]
        z0_hat = (z_t - np.sqrt(1 - ab) * model.denoise(z_t, t, c).data) / np.sqrt(ab)
        logits = model.decode(z0_hat)[0].data
        logp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
        nll = -np.take_along_axis(logp, c.type_flags[..., None], -1)[..., 0]
        assert parts.command == pytest.approx(ab * nll[c.mask].mean(), rel=1e-10)

    def test_eta_zero_ignores_argument_head(self):
        model, c = _tiny(), _batch()
        s = DiffusionSchedule.linear(50)
        eps = np.random.default_rng(0).normal(size=(2, 32, 8))
        t = np.array([3, 30])
        before = diffusion.total_loss(model, s, c, t, eps, LossWeights(0.0))
        for p in model.heads.args.parameters():
            p.data = p.data + 1.0
        after = diffusion.total_loss(model, s, c, t, eps, LossWeights(0.0))
        assert after.total.item() == before.total.item()
        before.total.backward()
        assert all(p.grad is None or not p.grad.any() for p in model.heads.args.parameters())

    def test_padding_noise_not_read(self):
        model, c = _tiny(), _batch()
        s = DiffusionSchedule.linear(50)
        rng = np.random.default_rng(0)
        eps = rng.normal(size=(2, 32, 8))
        noisy = eps.copy()
        noisy[~c.mask] = rng.normal(size=noisy[~c.mask].shape) * 100
        t = np.array([3, 30])
        a = diffusion.total_loss(model, s, c, t, eps).total.item()
        b = diffusion.total_loss(model, s, c, t, noisy).total.item()
        assert a == b

    def test_empty_batch_and_eta(self):
        with pytest.raises(DiffusionError):
            LossWeights(-1.0)
        model, c = _tiny(), _batch()
        with pytest.raises(DiffusionError):
            diffusion.total_loss(model, DiffusionSchedule.linear(50), c.take(np.arange(0)), np.array([], int),
                                 np.zeros((0, 32, 8)))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        model = GMambaModel(ModelConfig(n_blocks=1, d_e=8, d_c=4, n_ts=12), 1)
        c = random_conditioning(rng, 2, 12, [9, 12])
        s = DiffusionSchedule.linear(50)
        eps = rng.normal(size=(2, 12, 8))
        t = np.array([1, 2])
        loss = lambda: diffusion.total_loss(model, s, c, t, eps).total
        worst, checked, _ = sampled_gradcheck(loss, model.named_parameters(), rng, 60)
        assert checked == 60 and worst < 1e-4


class TestSampling:
    def test_determinism_and_untrained_validity(self):
        with precision("f32"):
            model = GMambaModel(ModelConfig(n_blocks=1, d_e=16, d_c=4, n_ts=32), 0)
            s = DiffusionSchedule.linear(10)
            a = diffusion.sample(model, s, 64, seed=5, batch=32)
            b = diffusion.sample(model, s, 64, seed=5, batch=32)
        assert [x.sequence for x in a] == [x.sequence for x in b]
        assert all(x.sequence.tokens[0][0] == 1 for x in a)
        assert sum(x.valid for x in a) / len(a) <= 0.05

    def test_teacher_structure_keeps_types_and_lengths(self):
        model, c = _tiny(), _batch()
        out = diffusion.sample(model, DiffusionSchedule.linear(10), 2, seed=1, cond=c, teacher_structure=True)
        for i, smp in enumerate(out):
            seq = smp.sequence
            v = int(c.mask[i].sum())
            assert seq.valid_len == v
            np.testing.assert_array_equal(seq.type_flags[:v], c.type_flags[i, :v])
            for k in range(v):
                a, b = seq.tokens[k]
                if c.type_flags[i, k] < TokenType.COORD:
                    assert (a, b) == (c.a[i, k], c.b[i, k])
                else:
                    assert a >= VALUE_MIN and (b >= VALUE_MIN) == (c.type_flags[i, k] == TokenType.COORD)

    def test_teacher_structure_needs_conditioning(self):
        with pytest.raises(DiffusionError):
            diffusion.sample(_tiny(), DiffusionSchedule.linear(10), 2, teacher_structure=True)

    def test_clamp_identity_leaves_chain_unchanged(self):
        model, c = _tiny(), _batch()
        s = DiffusionSchedule.linear(10)
        z = np.random.default_rng(0).normal(size=c.shape + (8,)) * c.mask[..., None]
        plain = diffusion.run_chain(model, s, z, c, 10, None, True)
        same = diffusion.run_chain(model, s, z, c, 10, None, True, clamp=lambda x0: x0)
        np.testing.assert_allclose(same, plain, atol=1e-10)

    def test_reconstruct_shapes(self):
        model, c = _tiny(), _batch()
        out = diffusion.reconstruct(model, DiffusionSchedule.linear(20), c, seed=0)
        assert len(out) == 2 and all(s.n_ts == 32 for s in out)


class TestTrainer:
    def test_resume_is_bit_exact(self, tmp_path):
        with precision("f32"):
            c = _batch()
            cfg = TrainConfig(T=20, batch=1, steps=20, lr=1e-3, seed=4)
            full = Trainer(_tiny(3), c, cfg)
            full.run(20)
            half = Trainer(_tiny(3), c, cfg)
            half.run(10, checkpoint_path=tmp_path / "ck.gft")
            resumed = Trainer.resume(tmp_path / "ck.gft", c)
            assert resumed.step == 10
            resumed.run(10)
        for (k, a), (_, b) in zip(full.model.named_parameters(), resumed.model.named_parameters()):
            assert np.array_equal(a.data, b.data), k
        assert [r["loss"] for r in full.history[10:]] == [r["loss"] for r in resumed.history]

    def test_loss_decreases(self):
        with precision("f32"):
            tr = Trainer(_tiny(0), _batch(), TrainConfig(T=20, batch=2, lr=3e-3, seed=0))
            hist = tr.run(60)
        assert np.mean([h["loss"] for h in hist[-10:]]) < np.mean([h["loss"] for h in hist[:10]])

    def test_non_finite_loss_raises(self):
        tr = Trainer(_tiny(0), _batch(), TrainConfig(T=20, batch=2))
        tr.model.proj.weight.data[:] = np.inf
        with pytest.raises(FloatingPointError):
            tr.train_step()

    def test_config_roundtrip(self):
        cfg = TrainConfig.full()
        assert cfg.T == 1000 and cfg.lr == 1e-4 and cfg.betas == (0.95, 0.99)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg
        assert TrainConfig(batch=4, epochs=3, steps=0).total_steps(10) == 9

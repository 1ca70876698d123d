import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from volflow.flow import ActNorm, FlowConfig, Glow3D, NumericError, randomize_, squeeze
from volflow.reference import ReferenceFlow
from volflow.training import (
    ArraySource,
    PatchSource,
    TrainConfig,
    adam_step,
    dequantize,
    grad_check,
    grad_check_report,
    load_train_config,
    make_state,
    nll_loss,
    train,
)
from volflow.volume import Mask, ValueSpace, Volume

SMALL = FlowConfig(levels=2, flows_per_level=2, patch_edge=8, coupling_hidden=8)


def _patches(n=16, edge=8, seed=0):
    rng = np.random.default_rng(seed)
    return (rng.standard_normal((n, edge, edge, edge)) * 0.1).astype(np.float32)


class TestNllLoss:
    def test_identity_model_zero_batch(self):
        cfg = FlowConfig(levels=1, flows_per_level=1, patch_edge=2, in_channels=2)
        model = Glow3D(cfg, identity_conv=True).double()
        loss = nll_loss(model, torch.zeros(3, 2, 2, 2, 2, dtype=torch.float64))
        expected = (16 / 2) * math.log(2 * math.pi) / (16 * math.log(2))
        assert loss.item() == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(1.3257, abs=1e-4)

    def test_batch_order_invariant(self):
        model = randomize_(Glow3D(SMALL).double(), 0.05)
        x = torch.from_numpy(_patches(6)).double()[:, None]
        a = nll_loss(model, x).item()
        b = nll_loss(model, x.flip(0)).item()
        assert a == pytest.approx(b, rel=1e-14)

    def test_dequant_continuity(self):
        model = randomize_(Glow3D(SMALL).double(), 0.05)
        x = torch.from_numpy(_patches(4)).double()[:, None]
        base = nll_loss(model, x).item()
        bump = nll_loss(model, x, 1 / 1220, torch.Generator().manual_seed(0)).item()
        # Lipschitz bound: |dL/dx| summed over one bin per element
        xg = x.clone().requires_grad_(True)
        nll_loss(model, xg).backward()
        bound = xg.grad.abs().sum().item() * (1 / 1220) * 1.5
        assert abs(bump - base) <= bound
        assert bump != base

    def test_dequant_range(self):
        x = torch.zeros(1000, dtype=torch.float64)
        y = dequantize(x, 0.25, torch.Generator().manual_seed(1))
        assert y.min() >= 0 and y.max() < 0.25
        assert dequantize(x, 0.0, None) is x


class TestReference:
    def test_matches_torch_forward(self):
        model = randomize_(Glow3D(SMALL, seed=2).double(), 0.1, seed=3)
        x = torch.from_numpy(_patches(3, seed=4)).double()[:, None]
        ours = model.log_prob(x).detach().numpy()
        ref, _ = ReferenceFlow(SMALL, model.state_dict()).log_prob(x.numpy())
        np.testing.assert_allclose(ref.astype(np.float64), ours, rtol=1e-12, atol=1e-9)

    def test_resume_from_step(self):
        model = randomize_(Glow3D(SMALL, seed=1).double(), 0.1)
        x = _patches(2)[:, None]
        ref = ReferenceFlow(SMALL, model.state_dict())
        cache = {}
        full, _ = ref.log_prob(x, cache=cache)
        for step in cache:
            again, _ = ref.log_prob(x, step, cache)
            np.testing.assert_array_equal(again, full)


@pytest.fixture(scope="module")
def batch():
    return torch.from_numpy(_patches(2, seed=9))[:, None]


class TestGradCheck:
    def test_at_init(self, batch):
        model = Glow3D(SMALL, seed=0)
        train(model, ArraySource(_patches(16)), TrainConfig(iterations=0))
        report = grad_check_report(model, batch, n_params=200, seed=1)
        assert report.n_checked == 200
        assert report.max_rel_error < 1e-4

    def test_randomized_model(self, batch):
        model = randomize_(Glow3D(SMALL, seed=5), 0.1, seed=6)
        assert grad_check(model, batch, n_params=200, seed=2) < 1e-4

    def test_structural_zero(self, batch):
        # with the last subnet layer zeroed, nothing upstream of it reaches the loss
        model = Glow3D(SMALL, seed=0).double()
        x = batch.double()
        nll_loss(model, x).backward()
        w = model.levels[0][0].coupling.net[0].weight
        assert torch.all(w.grad == 0)
        ref = ReferenceFlow(SMALL, model.state_dict())
        name = "levels.0.0.coupling.net.0.weight"
        orig = ref.p[name].reshape(-1)[5]
        h = 1e-5 * (abs(orig) + 1)
        ref.set(name, 5, orig + h)
        up, _ = ref.nll_bits_per_dim(x.numpy())
        ref.set(name, 5, orig - h)
        down, _ = ref.nll_bits_per_dim(x.numpy())
        assert abs(float((up - down) / (2 * h))) < 1e-10

    def test_detects_wrong_gradient(self, batch, monkeypatch):
        # skew the torch log-det only; the reference route is unaffected
        original = ActNorm.forward

        def skewed(self, x):
            y, ld = original(self, x)
            return y, ld * 1.01

        monkeypatch.setattr(ActNorm, "forward", skewed)
        model = randomize_(Glow3D(SMALL, seed=5), 0.1, seed=6)
        assert grad_check(model, batch, n_params=200, seed=2) > 1e-3


def _scalar_state(value=0.0, **kw):
    p = torch.nn.Parameter(torch.tensor([value], dtype=torch.float64))
    model = torch.nn.Module()
    model.p = p
    cfg = TrainConfig(**kw)
    return make_state(model, cfg), cfg, p


class TestAdamStep:
    def test_single_scalar_first_step(self):
        state, cfg, p = _scalar_state(0.0, weight_decay=0.0)
        adam_step(state, [torch.tensor([1.0])], cfg)
        assert p.item() == pytest.approx(-cfg.lr / (1 + cfg.adam_eps), rel=1e-12)
        assert state.step == 1

    def test_zero_grad_no_decay_unchanged(self):
        state, cfg, p = _scalar_state(0.7, weight_decay=0.0)
        for _ in range(5):
            adam_step(state, [torch.tensor([0.0])], cfg)
        assert p.item() == 0.7

    @given(st.integers(1, 30), st.floats(-5, 5).filter(lambda v: abs(v) > 1e-3))
    @settings(max_examples=20, deadline=None)
    def test_decoupled_decay_geometric(self, k, theta):
        state, cfg, p = _scalar_state(theta, weight_decay=0.1, lr=1e-2)
        for _ in range(k):
            adam_step(state, [torch.tensor([0.0])], cfg)
        assert p.item() == pytest.approx(theta * (1 - 1e-2 * 0.1) ** k, rel=1e-12)

    def test_clipping(self):
        state, cfg, p = _scalar_state(0.0, weight_decay=0.0, grad_clip_norm=1.0)
        norm = adam_step(state, [torch.tensor([1000.0])], cfg)
        assert norm == 1000.0
        # Adam is scale invariant on the first step, so the clipped step still moves ~lr
        assert p.item() == pytest.approx(-cfg.lr, rel=1e-6)

    @pytest.mark.parametrize("bad", [float("nan"), float("inf")])
    def test_non_finite_aborts(self, bad):
        state, cfg, p = _scalar_state(0.3)
        adam_step(state, [torch.tensor([0.5])], cfg)
        value = p.item()
        saved = {k: v.clone() for k, v in state.optimizer.state[p].items()}
        with pytest.raises(NumericError, match="step 2"):
            adam_step(state, [torch.tensor([bad])], cfg)
        assert p.item() == value
        assert state.step == 1
        for k, v in saved.items():
            assert torch.equal(state.optimizer.state[p][k], v)


class TestTrain:
    def test_zero_iterations_writes_initialized_checkpoint(self, tmp_path):
        model = Glow3D(SMALL)
        state = train(model, ArraySource(_patches()), TrainConfig(iterations=0, batch_size=4),
                      out=tmp_path / "m.rflw")
        assert state.step == 0
        assert (tmp_path / "m.rflw").exists()
        assert all(a.initialized.item() == 1 for a in model.actnorms())

    def test_actnorm_invariant_on_init_batch(self):
        model = Glow3D(SMALL).double()
        cfg = TrainConfig(iterations=0, batch_size=8, seed=3)
        patches = _patches(32)
        train(model, ArraySource(patches), cfg)
        # replay the same first batch and the same dequant noise
        rng = np.random.default_rng(cfg.seed)
        batch = torch.from_numpy(ArraySource(patches)(cfg.batch_size, rng)).double()
        x = dequantize(batch, cfg.dequant_bin, torch.Generator().manual_seed(cfg.seed))
        h = squeeze(x)
        y, _ = model.levels[0][0].actnorm(h)
        flat = y.transpose(0, 1).reshape(y.shape[1], -1)
        assert flat.mean(1).abs().max() < 1e-5
        assert (flat.var(1, unbiased=False) - 1).abs().max() < 1e-3

    def test_same_seed_bit_identical(self, tmp_path):
        cfg = TrainConfig(iterations=15, batch_size=4, seed=7)
        for name in ("a", "b"):
            train(Glow3D(SMALL, seed=1), ArraySource(_patches()), cfg, out=tmp_path / name)
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_loss_decreases_and_csv(self, tmp_path):
        cfg = TrainConfig(iterations=60, batch_size=8, lr=1e-3, log_every=10)
        state = train(Glow3D(SMALL), ArraySource(_patches(64)), cfg, log_csv=tmp_path / "log.csv")
        assert np.mean(state.history[-10:]) < np.mean(state.history[:10])
        rows = (tmp_path / "log.csv").read_text().splitlines()
        assert rows[0] == "step,bits_per_dim,grad_norm,wallclock_s"
        assert len(rows) == 61

    def test_non_finite_loss_keeps_last_checkpoint(self, tmp_path):
        patches = _patches(16)
        cfg = TrainConfig(iterations=3, batch_size=4, checkpoint_every=1)
        calls = {"n": 0}

        def source(n, rng):
            calls["n"] += 1
            out = ArraySource(patches)(n, rng)
            if calls["n"] == 4:
                out[0, 0, 0, 0, 0] = np.nan
            return out

        with pytest.raises(NumericError, match="step 3"):
            train(Glow3D(SMALL), source, cfg, out=tmp_path / "m.rflw")
        from volflow.checkpoint import load_checkpoint
        model = load_checkpoint(tmp_path / "m.rflw")
        assert all(torch.isfinite(p).all() for p in model.parameters())

    def test_patch_source_respects_mask(self):
        vox = np.zeros((16, 16, 16), np.float32)
        vox[:8] = 0.25
        bits = np.zeros((16, 16, 16), bool)
        bits[:8] = True
        src = PatchSource([(Volume(vox, (2, 2, 2), ValueSpace.NORMALIZED), Mask(bits))], 8, 1.0)
        out = src(20, np.random.default_rng(0))
        assert out.shape == (20, 1, 8, 8, 8)
        assert np.all(out == 0.25)


class TestConfigFile:
    def test_parse(self, tmp_path):
        path = tmp_path / "train.cfg"
        path.write_text("# desk\niterations = 12\nlr=0.001\ndequant_bin=1/1220\n\nunknown_key=3\n")
        cfg = load_train_config(path)
        assert cfg.iterations == 12
        assert cfg.lr == 0.001
        assert cfg.dequant_bin == 1 / 1220
        assert cfg.batch_size == 10

    def test_invalid(self, tmp_path):
        path = tmp_path / "train.cfg"
        path.write_text("lr=0\n")
        with pytest.raises(ValueError):
            load_train_config(path)

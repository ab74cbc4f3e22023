import math

import numpy as np
import pytest
import torch

from sfd.exceptions import ConfigError
from sfd.nn import (
    AdamW,
    Checkpoint,
    ConformerConfig,
    ConformerEncoder,
    DoAModel,
    LrSchedule,
    OptimizerState,
    SFDModel,
    adamw_step,
    causal_depthwise_conv_forward,
    causal_mhsa_forward,
    conformer_encode,
    count_parameters,
    cross_entropy_loss,
    linear_forward,
    lr_at,
    mse_loss,
)
from sfd.nn.layers import ConformerBlock, ConvModule, FeedForward, InputStem, LayerNorm, glu

from _gradcheck import fd_max_rel_error, projected, rand

SEEDS = range(10)
SMALL = ConformerConfig(input_dim=6, layers=2, embed_dim=8, heads=2, conv_kernel=5,
                        ff_expansion=2, stem_dim=10)


class TestGradients:
    @pytest.mark.parametrize("seed", SEEDS)
    def test_linear(self, seed):
        g = np.random.default_rng(seed)
        x, W, b = rand(g, 4, 5), rand(g, 5, 3), rand(g, 3)
        assert fd_max_rel_error(projected(linear_forward, rand(g, 12).detach()), [x, W, b]) < 1e-6

    @pytest.mark.parametrize("seed", SEEDS)
    def test_mhsa(self, seed):
        g = np.random.default_rng(seed)
        e = 8
        params = [rand(g, 5, e)] + [rand(g, *s) for s in [(e, e), (e,)] * 4]
        fn = projected(lambda *p: causal_mhsa_forward(*p, heads=2), rand(g, 40).detach())
        assert fd_max_rel_error(fn, params, seed=seed) < 1e-6

    @pytest.mark.parametrize("seed", SEEDS)
    def test_depthwise_conv(self, seed):
        g = np.random.default_rng(seed)
        x, k, b = rand(g, 2, 7, 3), rand(g, 3, 5), rand(g, 3)
        fn = projected(causal_depthwise_conv_forward, rand(g, 42).detach())
        assert fd_max_rel_error(fn, [x, k, b], seed=seed) < 1e-6

    @pytest.mark.parametrize("seed", SEEDS)
    def test_glu(self, seed):
        g = np.random.default_rng(seed)
        assert fd_max_rel_error(projected(glu, rand(g, 15).detach()), [rand(g, 5, 6)]) < 1e-6

    @pytest.mark.parametrize("factory", [
        lambda: LayerNorm(8), lambda: FeedForward(8, 2, 0.0), lambda: ConvModule(8, 5, 0.0),
        lambda: ConformerBlock(SMALL), lambda: InputStem(6, 10, 8),
        lambda: ConformerEncoder(SMALL)], ids=["layernorm", "ff", "conv", "block", "stem",
                                               "encoder"])
    @pytest.mark.parametrize("seed", SEEDS)
    def test_modules(self, factory, seed):
        torch.manual_seed(seed)
        g = np.random.default_rng(seed)
        module = factory().double()
        width = 6 if isinstance(module, (InputStem, ConformerEncoder)) else 8
        x = rand(g, 2, 6, width)
        params = list(module.parameters())
        for p in params:  # move biases off zero so every path is exercised
            with torch.no_grad():
                p.add_(0.1 * torch.randn_like(p))
        fn = projected(lambda x_, *_: module(x_), rand(g, 2 * 6 * 8).detach())
        assert fd_max_rel_error(fn, [x] + params, coords=8, seed=seed) < 1e-4

    @pytest.mark.parametrize("seed", SEEDS)
    def test_losses(self, seed):
        g = np.random.default_rng(seed)
        y, z = rand(g, 2, 4, 3), rand(g, 2, 4, 3)
        mask = torch.tensor([[1, 1, 1, 0], [1, 1, 0, 0]], dtype=torch.float64)
        assert fd_max_rel_error(lambda a, b: mse_loss(a, b, mask), [y, z]) < 1e-6
        logits = rand(g, 2, 4, 5)
        labels = torch.tensor(g.integers(0, 5, (2, 4)))
        assert fd_max_rel_error(lambda a: cross_entropy_loss(a, labels, mask), [logits]) < 1e-6

    def test_ce_gradient_is_softmax_minus_onehot(self):
        logits = torch.randn(3, 37, dtype=torch.float64, requires_grad=True)
        labels = torch.tensor([0, 18, 36])
        cross_entropy_loss(logits, labels).backward()
        expect = (torch.softmax(logits, -1) - torch.eye(37, dtype=torch.float64)[labels]) / 3
        torch.testing.assert_close(logits.grad, expect)


class TestOps:
    def test_linear_examples(self):
        x = torch.tensor([[1.0, 2, 3], [4, 5, 6]])
        W = torch.tensor([[1.0, 0], [0, 1], [1, 1]])
        torch.testing.assert_close(linear_forward(x, W), torch.tensor([[4.0, 5], [10, 11]]))
        torch.testing.assert_close(linear_forward(x, torch.eye(3), torch.zeros(3)), x)
        with pytest.raises(ValueError):
            linear_forward(x, torch.eye(2))

    def test_mhsa_single_frame_is_value_path(self):
        g = torch.Generator().manual_seed(0)
        x = torch.randn(1, 4, generator=g, dtype=torch.float64)
        w = [torch.randn(4, 4, generator=g, dtype=torch.float64) for _ in range(4)]
        b = [torch.randn(4, generator=g, dtype=torch.float64) for _ in range(4)]
        out = causal_mhsa_forward(x, w[0], b[0], w[1], b[1], w[2], b[2], w[3], b[3], heads=2)
        torch.testing.assert_close(out, (x @ w[2] + b[2]) @ w[3] + b[3])

    def test_mhsa_uniform_weights_and_sdpa_agreement(self):
        e = 4
        x = torch.ones(5, e, dtype=torch.float64)
        eye, zero = torch.eye(e, dtype=torch.float64), torch.zeros(e, dtype=torch.float64)
        _, weights = causal_mhsa_forward(x, eye, zero, eye, zero, eye, zero, eye, zero, 2,
                                         return_weights=True)
        for n in range(5):
            torch.testing.assert_close(weights[0, n, : n + 1],
                                       torch.full((n + 1,), 1 / (n + 1), dtype=torch.float64))
            assert torch.all(weights[:, n, n + 1:] == 0)
        xr = torch.randn(6, e, dtype=torch.float64)
        ws = [torch.randn(e, e, dtype=torch.float64) if i % 2 == 0 else
              torch.randn(e, dtype=torch.float64) for i in range(8)]
        fast = causal_mhsa_forward(xr, *ws, heads=2)
        slow, _ = causal_mhsa_forward(xr, *ws, heads=2, return_weights=True)
        torch.testing.assert_close(fast, slow)

    def test_depthwise_identity_and_ramp(self):
        x = torch.randn(40, 3, dtype=torch.float64)
        delta = torch.zeros(3, 31, dtype=torch.float64)
        delta[:, -1] = 1
        torch.testing.assert_close(causal_depthwise_conv_forward(x, delta), x)
        avg = torch.full((1, 31), 1 / 31, dtype=torch.float64)
        out = causal_depthwise_conv_forward(torch.ones(40, 1, dtype=torch.float64), avg)[:, 0]
        expect = torch.minimum(torch.arange(1, 41, dtype=torch.float64) / 31, torch.tensor(1.0))
        torch.testing.assert_close(out, expect)
        with pytest.raises(ValueError):
            causal_depthwise_conv_forward(x, torch.zeros(3, 4))


class TestEncoder:
    def test_shape_and_finite(self):
        enc = ConformerEncoder(ConformerConfig(input_dim=1028))
        for n in (1, 7):
            out = conformer_encode(torch.zeros(n, 1028), enc)
            assert out.shape == (n, 64) and torch.all(torch.isfinite(out))
        with pytest.raises(ValueError):
            enc(torch.zeros(3, 29))

    @pytest.mark.parametrize("case", range(20))
    def test_causality_bit_exact(self, case):
        gen = np.random.default_rng(case)
        torch.manual_seed(case)
        enc = ConformerEncoder(ConformerConfig(input_dim=12, embed_dim=16, heads=4,
                                               stem_dim=20)).double().eval()
        n_frames = int(gen.integers(2, 60))
        cut = int(gen.integers(0, n_frames - 1))
        x = torch.tensor(gen.standard_normal((n_frames, 12)))
        y = x.clone()
        y[cut + 1:] += torch.tensor(gen.standard_normal((n_frames - cut - 1, 12)) * 10 ** gen.uniform(-3, 3))
        with torch.no_grad():
            a, b = enc(x), enc(y)
        assert torch.equal(a[: cut + 1], b[: cut + 1])
        assert not torch.equal(a[cut + 1:], b[cut + 1:])

    def test_reference_parameter_counts(self):
        stft_model = count_parameters(DoAModel(ConformerConfig(input_dim=1028), 37))
        gcc_model = count_parameters(DoAModel(ConformerConfig(input_dim=513), 37))
        assert abs(stft_model / 545_000 - 1) < 0.05
        assert abs(gcc_model / 415_560 - 1) < 0.05

    def test_glorot_init(self):
        torch.manual_seed(0)
        lin = SFDModel(ConformerConfig(), 514).predictor
        limit = math.sqrt(6 / (64 + 514))
        assert lin.weight.abs().max() <= limit and torch.all(lin.bias == 0)


class TestLosses:
    def test_mse_examples(self):
        assert mse_loss(torch.tensor([[3.0, 4]]), torch.zeros(1, 2)).item() == 25
        y = torch.tensor([[3.0, 4], [3, 0]])
        assert mse_loss(y, torch.zeros(2, 2)).item() == 17
        assert mse_loss(y, y).item() == 0

    def test_padding_is_invisible(self):
        g = torch.Generator().manual_seed(0)
        y, z = torch.randn(2, 5, 3, generator=g), torch.randn(2, 5, 3, generator=g)
        mask = torch.tensor([[1.0] * 5, [1, 1, 1, 0, 0]])
        base = mse_loss(y, z, mask)
        y2 = torch.cat([y, torch.randn(2, 4, 3, generator=g)], dim=1)
        z2 = torch.cat([z, torch.randn(2, 4, 3, generator=g)], dim=1)
        mask2 = torch.cat([mask, torch.zeros(2, 4)], dim=1)
        assert abs(mse_loss(y2, z2, mask2).item() - base.item()) < 1e-6
        y2.requires_grad_(True)
        mse_loss(y2, z2, mask2).backward()
        assert torch.all(y2.grad[:, 5:] == 0) and torch.all(y2.grad[1, 3:] == 0)

    def test_ce_examples(self):
        assert cross_entropy_loss(torch.zeros(4, 37), torch.zeros(4, dtype=torch.long)).item() == \
            pytest.approx(math.log(37))
        sharp = torch.full((1, 37), -1e4)
        sharp[0, 5] = 1e4
        assert cross_entropy_loss(sharp, torch.tensor([5])).item() == pytest.approx(0.0)
        with pytest.raises(ValueError):
            cross_entropy_loss(torch.zeros(2, 37), torch.tensor([0, 37]))


class TestOptimizer:
    def test_matches_torch_adamw(self):
        torch.manual_seed(0)
        ours = torch.nn.Linear(4, 3).double()
        ref = torch.nn.Linear(4, 3).double()
        ref.load_state_dict(ours.state_dict())
        opt = AdamW(ours, 0.9, 0.98, 1e-6, 0.01)
        topt = torch.optim.AdamW(ref.parameters(), lr=1e-3, betas=(0.9, 0.98), eps=1e-6,
                                 weight_decay=0.01)
        x = torch.randn(8, 4, dtype=torch.float64)
        for step in range(5):
            lr = 1e-3 * (step + 1) / 5
            for group in topt.param_groups:
                group["lr"] = lr
            for model in (ours, ref):
                model(x).pow(2).sum().backward()
            opt.step(lr)
            topt.step()
            opt.zero_grad()
            topt.zero_grad()
        for a, b in zip(ours.parameters(), ref.parameters()):
            torch.testing.assert_close(a, b, rtol=1e-12, atol=1e-12)

    def test_single_step_hand_value(self):
        p = torch.tensor([0.5], dtype=torch.float64)
        adamw_step({"p": p}, {"p": torch.tensor([1.0], dtype=torch.float64)},
                   OptimizerState(weight_decay=0.0), 1e-3)
        assert p.item() == pytest.approx(0.5 - 1e-3 / (1 + 1e-6), abs=1e-15)

    def test_zero_grad_and_decay(self):
        p = torch.tensor([2.0, -1.0], dtype=torch.float64)
        adamw_step({"p": p}, {"p": torch.zeros(2, dtype=torch.float64)},
                   OptimizerState(weight_decay=0.0), 1e-3)
        assert p.tolist() == [2.0, -1.0]
        state = OptimizerState(weight_decay=0.1)
        for _ in range(3):
            adamw_step({"p": p}, {"p": torch.zeros(2, dtype=torch.float64)}, state, 0.01)
        torch.testing.assert_close(p, torch.tensor([2.0, -1.0], dtype=torch.float64) * 0.999**3)

    def test_missing_grad_untouched(self):
        p = torch.tensor([1.0])
        adamw_step({"p": p}, {}, OptimizerState(), 1.0)
        assert p.item() == 1.0


class TestSchedule:
    def test_reference_schedule_values(self):
        s = LrSchedule()
        assert lr_at(0, s) == 0
        assert lr_at(1500, s) == pytest.approx(5e-4)
        assert lr_at(3000, s) == pytest.approx(1e-3)
        assert lr_at(3000 + 29999, s) == pytest.approx(5e-7)
        assert lr_at(33000, s) == pytest.approx(5e-4)
        assert s.cycle_at(33000)[2] == 27000

    def test_bounds_and_continuity(self):
        s = LrSchedule(warmup_steps=10, cycle_steps=50)
        lrs = np.array([lr_at(t, s) for t in range(10, 400)])
        assert np.all(lrs >= s.lr_min - 1e-18) and np.all(lrs <= s.lr_max)
        index, t, n, peak = s.cycle_at(10 + 20)
        assert (index, t, n, peak) == (0, 20, 50, 1e-3)
        inner = np.diff([lr_at(t, s) for t in range(10, 60)])
        assert np.all(inner <= 0) and np.max(np.abs(inner)) < 1e-4

    def test_settles_at_floor(self):
        s = LrSchedule(warmup_steps=0, cycle_steps=10)
        assert lr_at(10_000, s) == s.lr_min

    def test_negative_step(self):
        with pytest.raises(ValueError):
            lr_at(-1)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        torch.manual_seed(0)
        model = DoAModel(SMALL, 37)
        opt = AdamW(model)
        model(torch.randn(3, 6)).sum().backward()
        opt.step(1e-3)
        ckpt = Checkpoint.from_model(model, {"kind": "doa", "metrics": {"x": 1.5}}, opt)
        path = ckpt.save(tmp_path / "m.bin")
        assert path.read_bytes()[:4] == b"SFDC"
        back = Checkpoint.load(path)
        assert back.header["kind"] == "doa" and back.header["optimizer"]["step"] == 1
        clone = DoAModel(SMALL, 37)
        back.load_into(clone)
        for (n, a), (_, b) in zip(model.state_dict().items(), clone.state_dict().items()):
            assert torch.equal(a, b), n
        assert set(back.exp_avg) == set(dict(model.named_parameters()))

    def test_shape_mismatch(self):
        ckpt = Checkpoint.from_model(DoAModel(SMALL, 37), {})
        with pytest.raises(ConfigError):
            ckpt.load_into(DoAModel(SMALL, 19))
        with pytest.raises(ConfigError):
            Checkpoint.from_bytes(b"XXXX" + bytes(20))

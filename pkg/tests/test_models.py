import numpy as np
import pytest
import torch
import torch.nn as nn

from sfda.models import (
    BNStatsRecorder,
    Generator,
    PatchDiscriminator,
    SegModel,
    batch_bn_stats,
    bn_snapshot,
    checksum,
    discriminate,
    freeze,
    generate,
    load_checkpoint,
    save_checkpoint,
    seg_forward,
)


class TestSegModel:
    def test_logit_shape(self):
        torch.manual_seed(0)
        assert SegModel(5)(torch.rand(2, 3, 64, 48)).shape == (2, 5, 64, 48)

    def test_feature_shape(self):
        model = SegModel(5, enc_channels=(32, 64, 64, 64))
        feat, prob = seg_forward(model, torch.rand(1, 3, 64, 64))
        assert feat.shape == (1, 64, 8, 8)
        assert prob.shape == (1, 5, 64, 64)

    def test_simplex(self):
        torch.manual_seed(1)
        _, prob = seg_forward(SegModel(6), torch.rand(3, 3, 32, 32) * 4 - 2)
        assert (prob >= 0).all()
        torch.testing.assert_close(prob.sum(1), torch.ones(3, 32, 32), atol=1e-6, rtol=0)

    def test_zero_logit_stub_uniform(self):
        model = SegModel(4)
        with torch.no_grad():
            model.classifier.weight.zero_()
            model.classifier.bias.zero_()
        _, prob = seg_forward(model, torch.rand(2, 3, 16, 16))
        torch.testing.assert_close(prob, torch.full_like(prob, 0.25))

    def test_indivisible_input(self):
        with pytest.raises(ValueError, match="stride"):
            SegModel(3)(torch.rand(1, 3, 20, 16))

    def test_wrong_channels(self):
        with pytest.raises(ValueError):
            SegModel(3)(torch.rand(1, 1, 16, 16))


class TestBNSnapshot:
    def test_fresh_model(self):
        snap = bn_snapshot(SegModel(3))
        assert len(snap) == 7
        for e in snap:
            assert torch.equal(e.mean, torch.zeros_like(e.mean))
            assert torch.equal(e.var, torch.ones_like(e.var))

    def test_forward_order(self):
        names = [e.layer_id for e in bn_snapshot(SegModel(3))]
        assert names[0].startswith("encoder.0") and names[-1].startswith("decoder.2")

    def test_frozen_twice_identical(self):
        model = freeze(SegModel(3))
        model(torch.rand(2, 3, 16, 16))
        a, b = bn_snapshot(model), bn_snapshot(model)
        assert all(torch.equal(x.mean, y.mean) and torch.equal(x.var, y.var) for x, y in zip(a, b))
        # eval mode leaves the running buffers at their initial values
        assert torch.equal(a[0].mean, torch.zeros_like(a[0].mean))

    def test_no_bn_layers(self):
        with pytest.raises(ValueError):
            bn_snapshot(nn.Conv2d(3, 3, 1))

    def test_constant_input_running_mean(self):
        # 1x1 identity conv then BN: running mean tends to the constant with
        # the default exponential momentum 0.1
        c, steps = 0.7, 60
        stub = nn.Sequential(nn.Conv2d(3, 3, 1, bias=False), nn.BatchNorm2d(3))
        with torch.no_grad():
            stub[0].weight.copy_(torch.eye(3)[:, :, None, None])
        stub.train()
        for _ in range(steps):
            stub(torch.full((4, 3, 5, 5), c))
        snap = bn_snapshot(stub)[0]
        expected = c * (1 - 0.9**steps)
        torch.testing.assert_close(snap.mean, torch.full((3,), expected), rtol=1e-5, atol=1e-6)
        # zero spatial/batch variance pulls the running variance towards 0
        torch.testing.assert_close(snap.var, torch.full((3,), 0.9**steps), rtol=1e-4, atol=1e-6)


class TestBatchStats:
    def test_matches_two_pass_oracle(self):
        torch.manual_seed(3)
        model = SegModel(4).double()
        captured = []
        hooks = [m.register_forward_pre_hook(lambda mod, inp: captured.append(inp[0].detach().clone()))
                 for m in model.modules() if isinstance(m, nn.BatchNorm2d)]
        x = torch.rand(3, 3, 16, 16, dtype=torch.float64)
        stats = batch_bn_stats(model, x)
        for h in hooks:
            h.remove()
        assert len(stats) == len(captured) == 7
        for (mu, var), inp in zip(stats, captured):
            a = inp.permute(1, 0, 2, 3).reshape(inp.shape[1], -1).numpy()
            m = a.sum(1) / a.shape[1]
            v = ((a - m[:, None]) ** 2).sum(1) / a.shape[1]
            np.testing.assert_allclose(mu.detach().numpy(), m, rtol=1e-6, atol=1e-12)
            np.testing.assert_allclose(var.detach().numpy(), v, rtol=1e-6, atol=1e-12)

    def test_constant_stub_zero_variance(self):
        stub = nn.Sequential(nn.Conv2d(3, 2, 1), nn.BatchNorm2d(2))
        stats = batch_bn_stats(stub, torch.full((4, 3, 6, 6), 0.3))
        assert torch.all(stats[0][1].abs() < 1e-12)

    def test_repeatable(self):
        model = SegModel(3)
        x = torch.rand(2, 3, 16, 16)
        a, b = batch_bn_stats(model, x), batch_bn_stats(model, x)
        assert all(torch.equal(p[0], q[0]) and torch.equal(p[1], q[1]) for p, q in zip(a, b))

    def test_batch_of_one(self):
        with pytest.raises(ValueError):
            batch_bn_stats(SegModel(3), torch.rand(1, 3, 16, 16))

    def test_stats_keep_graph(self):
        model = freeze(SegModel(3))
        x = torch.rand(2, 3, 16, 16, requires_grad=True)
        with BNStatsRecorder(model) as rec:
            model(x)
        sum(m.sum() + v.sum() for m, v in rec.stats).backward()
        assert x.grad is not None and x.grad.abs().sum() > 0


class TestGenerator:
    def test_shape(self):
        assert generate(Generator(), torch.randn(1, 256)).shape == (1, 3, 32, 32)

    def test_deterministic_eval(self):
        gen = Generator().eval()
        z = torch.randn(3, 256)
        assert torch.equal(generate(gen, z), generate(gen, z))

    def test_range(self):
        torch.manual_seed(0)
        out = generate(Generator(), torch.randn(100, 256) * 3)
        assert out.min() >= 0 and out.max() <= 1

    def test_wrong_latent_dim(self):
        with pytest.raises(ValueError):
            generate(Generator(), torch.randn(2, 100))

    def test_non_finite_latent(self):
        z = torch.randn(2, 256)
        z[0, 0] = float("inf")
        with pytest.raises(ValueError):
            generate(Generator(), z)


class TestDiscriminator:
    def test_open_interval(self):
        torch.manual_seed(0)
        d = PatchDiscriminator(5, 16)
        out = discriminate(d, torch.rand(32, 5, 16, 16) * 50, torch.randint(0, 16, (32,)))
        assert (out > 0).all() and (out < 1).all()

    def test_k_conditions_output(self):
        torch.manual_seed(1)
        d = PatchDiscriminator(5, 16)
        p = torch.softmax(torch.randn(200, 5, 16, 16), dim=1)
        with torch.no_grad():
            a = discriminate(d, p, 0)
            b = discriminate(d, p, 9)
        assert (a != b).float().mean() >= 0.95

    def test_batch_consistency(self):
        torch.manual_seed(2)
        d = PatchDiscriminator(3, 4)
        p = torch.rand(5, 3, 8, 8)
        k = torch.tensor([0, 3, 1, 2, 3])
        with torch.no_grad():
            batch = discriminate(d, p, k)
            single = torch.stack([discriminate(d, p[i], int(k[i])) for i in range(5)])
        torch.testing.assert_close(batch, single, rtol=1e-6, atol=1e-7)

    def test_k_out_of_range(self):
        with pytest.raises(ValueError):
            discriminate(PatchDiscriminator(3, 4), torch.rand(3, 8, 8), 4)


class TestCheckpoint:
    @pytest.mark.parametrize("make", [lambda: SegModel(4), lambda: Generator(64, 16, 32), lambda: PatchDiscriminator(4, 9, 32)])
    def test_round_trip_bit_exact(self, tmp_path, make):
        torch.manual_seed(0)
        model = make()
        model.train()
        if isinstance(model, SegModel):
            model(torch.rand(2, 3, 16, 16))  # move BN buffers off their defaults
        save_checkpoint(model, tmp_path / "ck", epoch=3, seed=7)
        loaded, meta = load_checkpoint(tmp_path / "ck")
        assert type(loaded) is type(model)
        assert checksum(loaded) == checksum(model)
        assert meta["epoch"] == 3 and meta["seed"] == 7

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "nope")

    def test_checksum_sensitive(self):
        model = SegModel(3)
        before = checksum(model)
        with torch.no_grad():
            model.classifier.bias[0] += 1e-6
        assert checksum(model) != before

    def test_frozen_checksum_stable_under_use(self):
        model = freeze(SegModel(3))
        before = checksum(model)
        x = torch.rand(2, 3, 16, 16, requires_grad=True)
        model(x).sum().backward()
        assert checksum(model) == before

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from trajadapt import modulator as md
from trajadapt.backbone import NormRegistry
from trajadapt.modulator import (TimeModulator, init_modulator,
                                 load_modulator, modulator_forward,
                                 save_modulator, sinusoidal_embedding)
from trajadapt.phantoms import ConfigError

REGISTRY = NormRegistry((("enc.norm1", 4), ("enc.norm2", 8),
                         ("dec.norm1", 4)))


class TestSinusoidalEmbedding:
    def test_zero_time(self):
        emb = sinusoidal_embedding(0.0, 4)
        np.testing.assert_allclose(emb.numpy(), [0, 0, 1, 1], atol=1e-12)

    @given(t=st.floats(-100, 100), dim=st.sampled_from([2, 4, 16, 64]))
    @settings(max_examples=100, deadline=None)
    def test_bounded(self, t, dim):
        emb = sinusoidal_embedding(t, dim)
        assert emb.shape == (dim,)
        assert float(emb.abs().max()) <= 1.0 + 1e-12

    def test_odd_dim_rejected(self):
        with pytest.raises(ConfigError):
            sinusoidal_embedding(0.0, 5)

    def test_lipschitz_bound(self):
        # |emb(t) - emb(t')| <= ||omega||_2 |t - t'| since |sin'|,|cos'| <= 1
        dim, max_period = 16, 10.0
        k = np.arange(dim // 2)
        omega = max_period ** (-2.0 * k / dim)
        lip = np.linalg.norm(np.concatenate([omega, omega]))
        rng = np.random.default_rng(1)
        for _ in range(50):
            t = rng.uniform(0, 1)
            dt = rng.uniform(1e-6, 1e-2)
            a = sinusoidal_embedding(t, dim, max_period).numpy()
            b = sinusoidal_embedding(t + dt, dim, max_period).numpy()
            assert np.linalg.norm(a - b) <= lip * dt * (1 + 1e-9)

    def test_batched_matches_scalar(self):
        ts = torch.tensor([0.0, 0.3, 0.9])
        batched = sinusoidal_embedding(ts, 8)
        for i, t in enumerate(ts):
            torch.testing.assert_close(batched[i],
                                       sinusoidal_embedding(t, 8))


class TestInit:
    def test_identity_at_init_for_any_time(self):
        mod = init_modulator(REGISTRY, seed=3)
        for t in (0.0, 0.25, 1.0, 7.5):
            ms = modulator_forward(mod, t)
            assert set(ms) == set(REGISTRY.layer_ids)
            assert ms.is_identity()

    def test_seeded_determinism(self):
        a = init_modulator(REGISTRY, seed=5)
        b = init_modulator(REGISTRY, seed=5)
        for (ka, pa), (kb, pb) in zip(sorted(a.state_dict().items()),
                                      sorted(b.state_dict().items())):
            assert ka == kb
            torch.testing.assert_close(pa, pb, atol=0, rtol=0)

    def test_default_embedding_dim(self):
        mod = init_modulator(REGISTRY)
        assert mod.cfg.emb_dim == 16

    def test_empty_registry_rejected(self):
        with pytest.raises(ConfigError):
            init_modulator(NormRegistry(()))


class TestForward:
    def test_constant_head_bias(self):
        mod = init_modulator(REGISTRY, seed=0)
        key = md._safe_key("enc.norm2")
        with torch.no_grad():
            # bias layout is [gamma..., beta...]
            mod.heads[key].bias[:8] = np.log(2.0)
        for t in (0.0, 0.7):
            ms = modulator_forward(mod, t)
            g, b = ms["enc.norm2"]
            torch.testing.assert_close(
                g, torch.full((8,), float(np.log(2.0))))
            torch.testing.assert_close(b, torch.zeros(8))
            assert ms["enc.norm1"][0].abs().max() == 0

    def test_pure_function_of_time(self):
        mod = init_modulator(REGISTRY, seed=0)
        with torch.no_grad():
            for p in mod.parameters():
                p.add_(0.01)
        a = modulator_forward(mod, 0.4)
        b = modulator_forward(mod, 0.4)
        for lid in REGISTRY.layer_ids:
            torch.testing.assert_close(a[lid][0], b[lid][0])
            torch.testing.assert_close(a[lid][1], b[lid][1])

    def test_gamma_clamped_and_counted(self):
        mod = init_modulator(REGISTRY, seed=0)
        key = md._safe_key("enc.norm1")
        with torch.no_grad():
            mod.heads[key].bias[:4] = 50.0
        ms = modulator_forward(mod, 0.1)
        assert float(ms["enc.norm1"][0].detach().max()) == pytest.approx(10.0)
        assert mod.clamp_events >= 4

    def test_gradient_matches_finite_differences(self):
        # scalar function of the modulation vs central differences, float64
        torch.manual_seed(0)
        mod = init_modulator(REGISTRY, emb_dim=4, hidden_dim=8,
                             seed=7).double()
        with torch.no_grad():
            for p in mod.parameters():
                p.add_(0.05 * torch.randn_like(p))

        weights = {lid: (torch.randn(ch, dtype=torch.float64),
                         torch.randn(ch, dtype=torch.float64))
                   for lid, ch in REGISTRY.entries}

        def scalar_of(ms):
            total = 0.0
            for lid in REGISTRY.layer_ids:
                wg, wb = weights[lid]
                g, b = ms[lid]
                total = total + (wg * torch.sin(g)).sum() \
                    + (wb * b ** 2).sum()
            return total

        t = 0.37
        loss = scalar_of(mod(torch.tensor(t, dtype=torch.float64)))
        grads = torch.autograd.grad(loss, list(mod.parameters()))
        flat = torch.cat([g.reshape(-1) for g in grads]).numpy()

        params = list(mod.parameters())
        h = 1e-6
        fd = np.zeros_like(flat)
        idx = 0
        for p in params:
            base = p.detach().clone()
            for j in range(p.numel()):
                with torch.no_grad():
                    p.view(-1)[j] = base.view(-1)[j] + h
                    fp = float(scalar_of(
                        mod(torch.tensor(t, dtype=torch.float64))))
                    p.view(-1)[j] = base.view(-1)[j] - h
                    fm = float(scalar_of(
                        mod(torch.tensor(t, dtype=torch.float64))))
                with torch.no_grad():
                    p.view(-1)[j] = base.view(-1)[j]
                fd[idx] = (fp - fm) / (2 * h)
                idx += 1
        denom = max(np.linalg.norm(fd), 1e-12)
        assert np.linalg.norm(flat - fd) / denom < 1e-4


class TestPersistence:
    def test_round_trip(self, tmp_path):
        mod = init_modulator(REGISTRY, seed=2)
        with torch.no_grad():
            for p in mod.parameters():
                p.add_(0.1)
        save_modulator(mod, tmp_path / "mod.pt")
        loaded = load_modulator(tmp_path / "mod.pt", REGISTRY)
        for (ka, pa), (kb, pb) in zip(sorted(mod.state_dict().items()),
                                      sorted(loaded.state_dict().items())):
            torch.testing.assert_close(pa, pb, atol=0, rtol=0)

    def test_registry_mismatch_rejected(self, tmp_path):
        mod = init_modulator(REGISTRY, seed=2)
        save_modulator(mod, tmp_path / "mod.pt")
        other = NormRegistry((("enc.norm1", 4),))
        with pytest.raises(ValueError, match="registry"):
            load_modulator(tmp_path / "mod.pt", other)

import csv
import math

import numpy as np
import pytest
import torch

from gibbsdiff.denoisers import AttentionDenoiser, AttentionDenoiserConfig, ConstantDenoiser, load_checkpoint
from gibbsdiff.problems import gen_graph_instance, graph_instance
from gibbsdiff.state import DTYPE, clamp_pattern, make_generator
from gibbsdiff.training import (
    LOG_2PIE,
    TrainConfig,
    TrainingError,
    entropy_closed_form,
    holdout_solved_fraction,
    loss_single_step,
    loss_unrolled,
    noise_match_closed_form,
    noise_match_constant,
    train,
)


def model(seed=0, **kw):
    cfg = dict(K=3, layers=1, heads=2, dim=16, dropout=0.0)
    cfg.update(kw)
    return AttentionDenoiser(AttentionDenoiserConfig(**cfg), seed=seed)


def sampler(rng):
    return gen_graph_instance("coloring", 5, 0.5, seed=int(rng.integers(2**31)))


class TestClosedForms:
    def test_entropy_examples(self):
        m = torch.ones(1, 1, dtype=torch.bool)
        assert float(entropy_closed_form(torch.zeros(1, 1, 1, dtype=DTYPE), m)) == pytest.approx(1.41894, abs=1e-5)
        lv = torch.full((1, 1, 2), math.log(0.25), dtype=DTYPE)
        assert float(entropy_closed_form(lv, m)) == pytest.approx(1.45158, abs=1e-5)
        assert float(entropy_closed_form(lv, ~m)) == 0.0

    def test_entropy_ignores_unmasked_rows(self):
        lv = torch.tensor([[[0.0], [math.inf]]], dtype=DTYPE)
        m = torch.tensor([[True, False]])
        assert float(entropy_closed_form(lv, m)) == pytest.approx(0.5 * LOG_2PIE)

    def test_noise_match_examples(self):
        Z = torch.zeros(1, 1, 1, dtype=DTYPE)
        mu = Z + 0.5
        var = torch.full_like(Z, 0.04)
        m = torch.ones(1, 1, dtype=torch.bool)
        assert float(noise_match_closed_form(Z, mu, var, m, 1.0)) == pytest.approx(0.145, abs=1e-12)
        assert float(noise_match_closed_form(Z, mu, var, m, 2.0)) == pytest.approx(0.145 / 4, abs=1e-12)
        assert float(noise_match_closed_form(Z, Z, torch.zeros_like(Z), m, 1.0)) == 0.0

    def test_noise_match_rejects_bad_sigma(self):
        Z = torch.zeros(1, 1, 1, dtype=DTYPE)
        with pytest.raises(TrainingError):
            noise_match_closed_form(Z, Z, Z, torch.ones(1, 1, dtype=torch.bool), 0.0)

    def test_entropy_monte_carlo(self):
        lv = torch.tensor([[[0.3, -1.2], [0.9, 0.0]]], dtype=DTYPE)
        m = torch.tensor([[True, True]])
        gen = make_generator(0)
        eps = torch.randn(10**6, 2, 2, generator=gen, dtype=DTYPE)
        sd = torch.exp(0.5 * lv[0])
        x = sd * eps  # zero mean
        log_q = (-0.5 * (x / sd) ** 2 - torch.log(sd) - 0.5 * math.log(2 * math.pi)).sum(dim=(-1, -2))
        assert abs(float(-log_q.mean()) - float(entropy_closed_form(lv, m))) < 0.01

    def test_noise_match_monte_carlo(self):
        Z_t = torch.tensor([[[0.4, -0.3, 1.0]]], dtype=DTYPE)
        mu = torch.tensor([[[0.1, 0.2, 0.5]]], dtype=DTYPE)
        var = torch.tensor([[[0.2, 0.5, 0.1]]], dtype=DTYPE)
        m = torch.ones(1, 1, dtype=torch.bool)
        sigma = 0.8
        gen = make_generator(1)
        Zp = mu + var.sqrt() * torch.randn(10**6, 1, 3, generator=gen, dtype=DTYPE)
        nll = (0.5 * ((Z_t - Zp) / sigma) ** 2 + math.log(sigma) + 0.5 * math.log(2 * math.pi)).sum(dim=(-1, -2))
        closed = noise_match_closed_form(Z_t, mu, var, m, sigma) + noise_match_constant(m, 3, sigma)
        assert abs(float(nll.mean()) - float(closed)) < 0.01


class TestLosses:
    insts = [gen_graph_instance("coloring", 5, 0.5, seed=s) for s in range(4)]

    def test_breakdown_consistency(self):
        cfg = TrainConfig(T_unroll=3)
        loss, bd = loss_unrolled(model(), self.insts, cfg, make_generator(0), tau=0.7)
        assert bd.mask_div_term == 0.0
        assert bd.recompute_total() == pytest.approx(float(loss.detach()), abs=1e-9)
        assert bd.total == float(loss.detach())

    def test_zero_tau_is_energy(self):
        _, bd = loss_unrolled(model(), self.insts, TrainConfig(T_unroll=2), make_generator(0), tau=0.0)
        assert bd.total == bd.energy_term
        _, bd = loss_single_step(model(), self.insts, TrainConfig(T_unroll=2), make_generator(0), tau=0.0)
        assert bd.total == bd.energy_term

    def test_entropy_weight_zero(self):
        cfg = TrainConfig(T_unroll=2, entropy_weight=0.0)
        loss, bd = loss_unrolled(model(), self.insts, cfg, make_generator(0), tau=0.5)
        assert float(loss.detach()) == pytest.approx(bd.energy_term + 0.5 * bd.noise_match_term, abs=1e-12)

    def test_parameter_free_denoiser(self):
        den = ConstantDenoiser(clamp_pattern(torch.tensor([0, 1, 2, 0, 1]), 3))
        loss, _ = loss_unrolled(den, self.insts, TrainConfig(T_unroll=2), make_generator(0), tau=0.5)
        assert not loss.requires_grad

    def test_single_step_matches_unrolled_at_one_step(self):
        cfg = TrainConfig(T_unroll=1)
        a, bda = loss_unrolled(model(), self.insts, cfg, make_generator(5), tau=0.3)
        b, bdb = loss_single_step(model(), self.insts, cfg, make_generator(5), tau=0.3, t=1)
        assert float(a.detach()) == float(b.detach()) and bda == bdb

    def test_single_step_averages_to_unrolled(self):
        m = model(seed=3).eval()
        T = 3
        cfg = TrainConfig(T_unroll=T)
        batch = [self.insts[0]] * 2000
        with torch.no_grad():
            unrolled = [loss_unrolled(m, batch, cfg, make_generator(s), tau=1.0)[1] for s in range(5)]
            single = [loss_single_step(m, batch, cfg, make_generator(100 + s), tau=1.0)[1] for s in range(60)]
        for field in ("entropy_term", "noise_match_term"):
            u = np.array([getattr(b, field) for b in unrolled])
            s = T * np.array([getattr(b, field) for b in single])
            se = math.hypot(u.std(ddof=1) / math.sqrt(len(u)), s.std(ddof=1) / math.sqrt(len(s)))
            assert abs(u.mean() - s.mean()) < 4 * se + 1e-3 * abs(u.mean()), field

    def test_gradients_reach_parameters(self):
        m = model()
        loss, _ = loss_unrolled(m, self.insts, TrainConfig(T_unroll=2), make_generator(0), tau=0.5)
        loss.backward()
        assert all(p.grad is not None for p in m.parameters())

    def test_non_finite_loss_names_term(self):
        class Nan(torch.nn.Module):
            def __init__(self):
                super().__init__()
                self.w = torch.nn.Parameter(torch.zeros((), dtype=DTYPE))

            def predict(self, Z, mask, t, ctx, rng=None):
                from gibbsdiff.denoisers import ReverseStepOutput

                return ReverseStepOutput(Z * self.w + 1e300, torch.zeros_like(Z))

        with pytest.raises(TrainingError, match="noise_match"):
            loss_unrolled(Nan(), self.insts, TrainConfig(T_unroll=1, rho_min=1.0, rho_max=1.0), make_generator(0), 1.0)


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.lr == 1e-4 and cfg.dropout == 0.1
        assert cfg.tau_start == 1.0 and cfg.tau_end == 0.01

    def test_tau_schedule(self):
        cfg = TrainConfig(epochs=5)
        taus = [cfg.tau_at(e) for e in range(5)]
        assert taus[0] == 1.0 and taus[-1] == pytest.approx(0.01)
        assert all(b <= a for a, b in zip(taus, taus[1:]))

    @pytest.mark.parametrize("kw", [dict(T_unroll=0), dict(tau_end=-0.1), dict(estimator="reinforce")])
    def test_validation(self, kw):
        with pytest.raises(TrainingError):
            TrainConfig(**kw)


class TestTrain:
    def test_zero_epochs_keeps_initialisation(self, tmp_path):
        m = model()
        init = {k: v.clone() for k, v in m.state_dict().items()}
        res = train(m, sampler, TrainConfig(epochs=0), out_dir=tmp_path)
        back, _ = load_checkpoint(res.checkpoint)
        assert all(torch.equal(init[k], v) for k, v in back.state_dict().items())

    def test_metrics_and_tau(self, tmp_path):
        cfg = TrainConfig(epochs=3, steps_per_epoch=2, batch_size=4, T_unroll=2, dropout=0.0, holdout_steps=5)
        hold = [gen_graph_instance("coloring", 5, 0.5, seed=10**6 + i) for i in range(3)]
        res = train(model(), sampler, cfg, holdout=hold, out_dir=tmp_path)
        assert res.status == "ok" and len(res.metrics) == 3
        taus = [r["tau"] for r in res.metrics]
        assert taus[0] == 1.0 and all(b <= a for a, b in zip(taus, taus[1:]))
        rows = list(csv.DictReader(open(tmp_path / "metrics.csv")))
        assert list(rows[0]) == ["epoch", "energy_term", "entropy_term", "noise_match_term", "total", "tau", "holdout_solved_frac"]
        assert all(0.0 <= float(r["holdout_solved_frac"]) <= 1.0 for r in rows)

    def test_resume_is_exact(self, tmp_path):
        cfg = TrainConfig(epochs=2, steps_per_epoch=2, batch_size=3, T_unroll=2, dropout=0.0)
        straight = model()
        train(straight, sampler, cfg)
        first = model()
        res = train(first, sampler, cfg, out_dir=tmp_path, time_limit=0.0)
        assert res.status == "time_limit"
        resumed = model(seed=99)
        train(resumed, sampler, cfg, resume_from=res.checkpoint)
        for a, b in zip(straight.parameters(), resumed.parameters()):
            assert torch.equal(a, b)

    def test_seeded(self):
        cfg = TrainConfig(epochs=1, steps_per_epoch=2, batch_size=3, T_unroll=2)
        a, b = model(), model()
        train(a, sampler, cfg)
        train(b, sampler, cfg)
        assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


def test_holdout_fraction_counts_solved_instances():
    path = graph_instance("coloring", 3, [(0, 1), (1, 2)], k=2)
    k3 = graph_instance("coloring", 3, [(0, 1), (0, 2), (1, 2)], k=2)  # not 2-colourable
    good = ConstantDenoiser(clamp_pattern(torch.tensor([0, 1, 0]), 2))
    from gibbsdiff.chain import ChainConfig

    full = ChainConfig(rho_min=1.0, rho_max=1.0)
    assert holdout_solved_fraction(good, [path], steps=2, chain=full) == 1.0
    assert holdout_solved_fraction(good, [path, k3], steps=2, chain=full) == 0.5
    assert math.isnan(holdout_solved_fraction(good, [], steps=2))


def test_divergence_halts_with_last_good_weights():
    from gibbsdiff.denoisers import ReverseStepOutput

    class Exploding(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.w = torch.nn.Parameter(torch.ones((), dtype=DTYPE))

        def predict(self, Z, mask, t, ctx, rng=None):
            return ReverseStepOutput(Z * self.w * 1e300, torch.zeros_like(Z))

    m = Exploding()
    res = train(m, sampler, TrainConfig(epochs=2, steps_per_epoch=1, batch_size=2, T_unroll=1, rho_min=1.0, rho_max=1.0))
    assert res.status == "diverged"
    assert float(m.w.detach()) == 1.0

"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Models are trained once per session (about 15 minutes on one CPU core for
everything). Set FLOWNULL_ACCEPT_CACHE=DIR to reuse checkpoints between
runs while iterating, and FLOWNULL_ACCEPT_REPORT=FILE to collect the result
lines as JSON.
"""

import time

import numpy as np
import pytest

import acceptance_support as S
from flownull import mri
from flownull.core import Tape, Tensor
from flownull.flow import ConditionalFlow
from flownull.metrics import gain_curve, psnr
from flownull.posterior import map_estimate, posterior_mean, sample_posterior
from flownull.toy import unvec, vec
from flownull.train import nll_loss

from helpers import mini_config, numeric_jacobian, perturb

P = 8


@pytest.fixture
def emit(capsys):
    def _emit(name, ok, detail):
        with capsys.disabled():
            print("\n" + S.report(name, ok, detail))
        return ok
    return _emit


# -- shared trained artefacts --------------------------------------------------------

@pytest.fixture(scope="session")
def phantoms():
    return S.phantom_sets()


@pytest.fixture(scope="session")
def ns_model(phantoms):
    return S.train_phantom(True, phantoms[0])


@pytest.fixture(scope="session")
def full_model(phantoms):
    return S.train_phantom(False, phantoms[0])


@pytest.fixture(scope="session")
def toy_model():
    return S.train_toy()


def _posterior_means(model, data, nullspace_learning, data_consistency):
    """P-sample SENSE posterior means and all raw samples for every condition."""
    means, batches = [], []
    for i in range(len(data)):
        b = sample_posterior(model, data.y[i], data.mask, P, seed=1000 + i, maps=data.maps[i],
                             scale=data.scales[i], nullspace_learning=nullspace_learning,
                             data_consistency=data_consistency)
        means.append(posterior_mean(b, "sense"))
        batches.append(b)
    return np.stack(means), batches


@pytest.fixture(scope="session")
def ns_samples(ns_model, phantoms):
    return _posterior_means(ns_model[0], phantoms[1], True, True)


def mean_psnr(est, data):
    return float(np.mean([psnr(np.abs(e), np.abs(t)) for e, t in zip(est, data.i_true)]))


def _round_trip_error(model, ys, seed):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(0, len(ys), 25):
        y = ys[i:i + 25]
        z = rng.standard_normal((len(y), model.latent_dim)).astype(model.dtype)
        feats = model.features(y)
        u = model.sample(z, feats=feats)
        z2, _ = model.flow.encode(u, feats)
        worst = max(worst, float(np.max(np.abs(z2.data - z))))
    return worst


# -- criteria ----------------------------------------------------------------------------

class TestAcceptance:
    def test_1_bijectivity(self, phantoms, ns_model, emit):
        t0 = time.perf_counter()
        tr = phantoms[0]
        ys = tr.channels("y")[:100]
        fresh = ConditionalFlow(S.desk_run().model_config())
        fresh.initialize(tr.targets(True)[:64], tr.channels("y")[:64])
        pre = _round_trip_error(fresh, ys, 0)
        post = _round_trip_error(ns_model[0], ys, 1)
        dt = time.perf_counter() - t0
        ok = pre < 1e-4 and post < 1e-4
        emit(1, ok, f"max|h^-1(h(z,y),y) - z| over 100 (z,y): untrained {pre:.2e}, trained {post:.2e} "
                    f"(< 1e-4); {dt:.1f}s")
        assert ok

    def test_2_logdet_oracle(self, emit):
        t0 = time.perf_counter()
        model = perturb(ConditionalFlow(mini_config()).astype(np.float64), seed=11, scale=0.4, log_scale=0.5)
        rng = np.random.default_rng(12)
        worst = 0.0
        for _ in range(20):
            u0 = rng.standard_normal((1, 2, 4, 4))
            y = rng.standard_normal((1, 2, 4, 4))
            feats = model.features(y)

            def f(v):
                return model.flow.encode(Tensor(v), feats)[0].data

            jac = numeric_jacobian(f, u0, h=1e-5)
            assert jac.shape == (32, 32)
            sign, expected = np.linalg.slogdet(jac)
            got = float(model.flow.encode(Tensor(u0), feats)[1].data[0])
            worst = max(worst, abs(got - expected) / max(abs(expected), 1.0))
        dt = time.perf_counter() - t0
        ok = worst < 1e-3
        emit(2, ok, f"Q=32 analytic vs finite-difference log|det J|, worst rel err {worst:.2e} "
                    f"over 20 points (< 1e-3); {dt:.1f}s")
        assert ok

    def test_3_projectors_and_consistency(self, phantoms, ns_samples, emit):
        t0 = time.perf_counter()
        te = phantoms[1]
        mask = te.mask
        rng = np.random.default_rng(3)
        x = rng.standard_normal((8, 2, 32, 32)) + 1j * rng.standard_normal((8, 2, 32, 32))
        ax = mri.apply_A(x, mask)
        idem = float(np.max(np.abs(mri.apply_A(ax, mask) - ax)))
        annih = float(np.max(np.abs(mri.apply_A(mri.nullspace_project(x, mask), mask))))
        resid = max(float(np.max(b.residuals(te.y[i]))) for i, b in enumerate(ns_samples[1]))
        n = sum(len(b) for b in ns_samples[1])
        dt = time.perf_counter() - t0
        ok = idem < 1e-4 and annih < 1e-4 and resid < 1e-4
        emit(3, ok, f"|A(Ax)-Ax| {idem:.1e}, |A(I-A)x| {annih:.1e}, max |A x_hat - y| over {n} samples "
                    f"{resid:.1e} (all < 1e-4); {dt:.1f}s")
        assert ok

    def test_4_gradient_check(self, phantoms, emit):
        t0 = time.perf_counter()
        tr = phantoms[0]
        model = ConditionalFlow(S.desk_run().model_config()).astype(np.float64)
        perturb(model, seed=4, scale=0.2, log_scale=0.3)
        params = model.parameters()
        worst_norm, worst_single = 0.0, 0.0
        for point in range(3):
            u = tr.targets(True)[2 * point:2 * point + 2].astype(np.float64)
            y = tr.channels("y")[2 * point:2 * point + 2].astype(np.float64)
            with Tape() as tape:
                loss, _ = nll_loss(model, u, y)
            grads = tape.backward(loss, params)
            prng = np.random.default_rng(40 + point)
            picks = []
            for i in prng.choice(len(params), 12, replace=False):
                g = grads[i].reshape(-1)
                # prefer a coordinate with a non-negligible gradient
                j = int(np.argmax(np.abs(g) * prng.random(g.size)))
                picks.append((int(i), j))
            an, fd = [], []
            h = 1e-6
            for i, j in picks:
                p = params[i].data.reshape(-1)
                old = p[j]
                p[j] = old + h
                lp = float(nll_loss(model, u, y)[0].data)
                p[j] = old - h
                lm = float(nll_loss(model, u, y)[0].data)
                p[j] = old
                fd.append((lp - lm) / (2 * h))
                an.append(grads[i].reshape(-1)[j])
            an, fd = np.array(an), np.array(fd)
            worst_norm = max(worst_norm, float(np.linalg.norm(an - fd) / np.linalg.norm(fd)))
            big = np.abs(fd) > 1e-3 * np.abs(fd).max()
            worst_single = max(worst_single, float(np.max(np.abs(an - fd)[big] / np.abs(fd)[big])))
        dt = time.perf_counter() - t0
        ok = worst_norm < 1e-3
        emit(4, ok, f"desk NLL, 12 params x 3 points: rel err {worst_norm:.1e} (< 1e-3), "
                    f"worst single coordinate {worst_single:.1e}; {dt:.1f}s")
        assert ok

    def test_5_gain_law(self, toy_model, emit):
        t0 = time.perf_counter()
        toy = S.toy_problem()
        P_list = [1, 2, 4, 8, 16, 32]

        def oracle_draw(rng, n):
            x, m = toy.oracle.simulate(1, rng)
            return unvec(x[0]), unvec(toy.oracle.sample(m[0], n, rng))

        model = toy_model[0]

        def flow_draw(rng, n):
            x, m = toy.oracle.simulate(1, rng)
            y = unvec(m[0] @ toy.oracle.B)
            b = sample_posterior(model, y, toy.mask, n, seed=int(rng.integers(2**31)), normalize=False,
                                 nullspace_learning=False, data_consistency=False, batch=256)
            return unvec(x[0]), b.samples

        oracle = gain_curve(oracle_draw, P_list, 200, seed=5)
        flow = gain_curve(flow_draw, P_list, 200, seed=6)
        dt = time.perf_counter() - t0
        ok = oracle.max_deviation() < 0.2 and flow.max_deviation() < 0.3
        table = ", ".join(f"P={p}: {o:.2f}/{f:.2f}/{t:.2f}" for p, o, f, t in
                          zip(P_list, oracle.empirical_db, flow.empirical_db, flow.theory_db))
        emit("5", ok, f"gain dB oracle/flow/theory {table}; max dev oracle {oracle.max_deviation():.3f} "
                      f"(< 0.2), flow {flow.max_deviation():.3f} (< 0.3); toy training "
                      f"{toy_model[1].get('train_seconds', 0):.0f}s, curves {dt:.0f}s")
        assert ok

    def test_6_posterior_recovery(self, toy_model, emit):
        t0 = time.perf_counter()
        toy = S.toy_problem()
        model = toy_model[0]
        test = S.toy_test_set()
        gap = S.toy_bpd(model, test) - toy.oracle.entropy_bits_per_dim()
        flow_means, oracle_means = [], []
        for i in range(20):
            b = sample_posterior(model, test.y[i], toy.mask, 20_000, seed=60 + i, normalize=False,
                                 nullspace_learning=False, data_consistency=False, batch=2000)
            flow_means.append(vec(b.samples).mean(axis=0))
            oracle_means.append(toy.posterior_from_y(test.y[i][None])[0][0])
        flow_means, oracle_means = np.array(flow_means), np.array(oracle_means)
        err = S.rel_l2(flow_means, oracle_means)
        per = np.linalg.norm(flow_means - oracle_means, axis=1) / np.linalg.norm(oracle_means, axis=1)
        dt = time.perf_counter() - t0
        ok = err < 0.05 and abs(gap) < 0.1
        emit(6, ok, f"toy posterior mean rel L2 {err:.3f} over 20 conditions (< 0.05; per-condition "
                    f"median {np.median(per):.3f}, max {per.max():.3f}); test NLL - oracle entropy "
                    f"{gap:+.3f} bits/dim (|.| < 0.1); {dt:.0f}s")
        assert ok

    def test_7_map_ordering(self, ns_model, phantoms, toy_model, emit):
        t0 = time.perf_counter()
        te = phantoms[1]
        model = ns_model[0]
        run = S.desk_run()
        n = 10
        r = map_estimate(model, te.y[:n], te.mask, iters=run.eval.map_iters, lr=run.eval.map_lr,
                         scale=te.scales[:n], n_init=P, seed=700)
        margins = []
        for i in range(n):
            # an independent batch, not the one the MAP search started from
            b = sample_posterior(model, te.y[i], te.mask, P, seed=7000 + i, scale=te.scales[i])
            margins.append(r.log_density[i] - b.log_density.max())
        margins = np.array(margins)
        q = 2 * int(np.prod(te.shape))
        gain_bpd = (r.trace[-1] - r.trace[0]) / (q * np.log(2))

        toy = S.toy_problem()
        test = S.toy_test_set()
        rt = map_estimate(toy_model[0], test.y[:20], toy.mask, iters=500, lr=1e-2, normalize=False,
                          nullspace_learning=False, n_init=P, seed=71)
        oracle_means = toy.posterior_from_y(test.y[:20])[0]
        toy_err = S.rel_l2(vec(rt.x), oracle_means)
        dt = time.perf_counter() - t0
        ok = bool(np.all(margins >= 0)) and toy_err < 0.05
        emit(7, ok, f"log p(MAP) - max_p log p(x_p) over {n} phantoms: min {margins.min():.1f} nats "
                    f"(>= 0), mean MAP gain over its init {gain_bpd.mean():.3f} bits/dim; "
                    f"toy MAP vs oracle mean rel L2 {toy_err:.3f} (< 0.05); {dt:.0f}s")
        assert ok

    def test_8_ablation_direction(self, full_model, ns_model, ns_samples, phantoms, emit):
        t0 = time.perf_counter()
        te = phantoms[1]
        full = full_model[0]
        raw, _ = _posterior_means(full, te, False, False)
        dc, _ = _posterior_means(full, te, False, True)
        p_raw, p_dc, p_ns = mean_psnr(raw, te), mean_psnr(dc, te), mean_psnr(ns_samples[0], te)
        dt = time.perf_counter() - t0
        ok = p_dc > p_raw and p_ns > p_dc
        emit(8, ok, f"mean PSNR over {len(te)} phantoms: full-image raw {p_raw:.2f} dB, + data consistency "
                    f"{p_dc:.2f} dB, + nullspace learning {p_ns:.2f} dB (strictly increasing); "
                    f"training {full_model[1].get('train_seconds', 0) + ns_model[1].get('train_seconds', 0):.0f}s, "
                    f"eval {dt:.0f}s")
        assert ok

    def test_9_end_to_end(self, ns_samples, phantoms, emit):
        te = phantoms[1]
        zf = mri.coil_combine_sense(te.y, te.maps)
        p_zf, p_post = mean_psnr(zf, te), mean_psnr(ns_samples[0], te)
        ok = p_post - p_zf >= 1.0
        emit(9, ok, f"held-out phantoms: P={P} posterior mean {p_post:.2f} dB vs zero-filled {p_zf:.2f} dB "
                    f"(gain {p_post - p_zf:+.2f} dB, >= 1 dB)")
        assert ok

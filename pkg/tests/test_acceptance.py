"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Trained-model criteria share desk-scale models cached under ``.acceptance_cache``
(override with GEOFLOW_ACCEPTANCE_CACHE); a cold run trains them first.
"""

import math

import numpy as np
import pytest
import torch
from scipy import stats

from geoflow import geometry as geo
from geoflow import net as N
from geoflow import runtime as rt
from geoflow import uq
from geoflow.synth import default_mixture, independent_mixture, sample_vmf

from acceptance_support import Criterion, trained_model
from conftest import random_units

EVAL_SEED = 2024


def _pairs(rng, n, d):
    return torch.from_numpy(np.concatenate([random_units(rng, n, d), random_units(rng, n, d)], 1))


@pytest.fixture(scope="session")
def riemannian_model():
    return trained_model("riemannian")


@pytest.fixture(scope="session")
def euclidean_model():
    return trained_model("euclidean")


@pytest.fixture(scope="session")
def heldout():
    mix = default_mixture()
    pairs, comp = mix.sample(500, np.random.default_rng(EVAL_SEED))
    return mix, pairs, comp


def test_criterion_01_geometry_suite():
    with Criterion(1, "geometry suite") as c:
        rng = np.random.default_rng(1)
        worst = {}
        for d in (3, 8, 64):
            x = torch.from_numpy(random_units(rng, 2000, d))
            y = torch.from_numpy(random_units(rng, 2000, d))
            keep = (x * y).sum(-1) > -0.999
            x, y = x[keep], y[keep]
            v = geo.log_map(x, y)
            worst["exp_log"] = max(worst.get("exp_log", 0), (geo.exp_map(x, v) - y).abs().max().item())
            # log of exp for in-range tangents (norm below pi)
            u = geo.project_sphere(x, torch.from_numpy(rng.standard_normal(x.shape)))
            u = u / u.norm(dim=-1, keepdim=True) * torch.from_numpy(rng.uniform(0, 3.0, (x.shape[0], 1)))
            worst["log_exp"] = max(worst.get("log_exp", 0), (geo.log_map(x, geo.exp_map(x, u)) - u).abs().max().item())
            worst["endpoints"] = max(worst.get("endpoints", 0),
                                     (geo.geodesic_interpolate(x, y, 0.0) - x).abs().max().item(),
                                     (geo.geodesic_interpolate(x, y, 1.0) - y).abs().max().item())
            t = torch.from_numpy(rng.random(x.shape[0]))
            worst["symmetry"] = max(worst.get("symmetry", 0), (geo.geodesic_interpolate(x, y, t)
                                                            - geo.geodesic_interpolate(y, x, 1 - t)).abs().max().item())
            omega = geo.geodesic_distance(x, y)
            speeds = torch.stack([geo.target_velocity(x, y, torch.full_like(t, s)).norm(dim=-1)
                                  for s in (0.0, 0.3, 0.7, 0.99)])
            worst["speed"] = max(worst.get("speed", 0), (speeds - omega).abs().max().item())
            w = torch.from_numpy(rng.standard_normal(x.shape))
            p = geo.project_sphere(x, w)
            worst["idempotent"] = max(worst.get("idempotent", 0), (geo.project_sphere(x, p) - p).abs().max().item())
        for name, value in worst.items():
            c.check(value < 1e-8, f"{name} {value:.1e} < 1e-8")
        c.check(c.elapsed < 5.0, f"runtime {c.elapsed:.2f}s < 5s")


def test_criterion_02_gradient_check():
    with Criterion(2, "gradient check") as c:
        cfg = N.NetConfig(embed_dim=4, hidden_dim=8, depth=2, gate_heads=2)
        net = N.VelocityNet(cfg, seed=0)
        gen = torch.Generator().manual_seed(0)
        with torch.no_grad():
            for p in net.parameters():
                p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * 0.4)
        rng = np.random.default_rng(2)
        z = _pairs(rng, 6, 4)
        kinds = torch.tensor([0, 1, 2, 0, 1, 2])
        t = torch.from_numpy(rng.random(6))
        ti = torch.where(kinds == 1, torch.zeros_like(t), t)
        tt = torch.where(kinds == 2, torch.zeros_like(t), t)
        tgt = torch.from_numpy(rng.standard_normal((6, 8)))
        _, grads = N.loss_and_gradients(net, z, kinds, ti, tt, tgt)
        h = 1e-6
        rel = {}
        with torch.no_grad():
            for name, p in net.named_parameters():
                flat = p.view(-1)
                fd = torch.empty_like(flat)
                for i in range(flat.numel()):
                    old = flat[i].item()
                    flat[i] = old + h
                    up = N.masked_loss(net, z, kinds, ti, tt, tgt).item()
                    flat[i] = old - h
                    dn = N.masked_loss(net, z, kinds, ti, tt, tgt).item()
                    flat[i] = old
                    fd[i] = (up - dn) / (2 * h)
                g = grads[name].reshape(-1)
                rel[name] = ((fd - g).norm() / max(g.norm(), fd.norm(), 1e-300)).item()
        worst = max(rel, key=rel.get)
        c.check(rel[worst] < 1e-4, f"{len(rel)} groups, worst {worst} rel {rel[worst]:.1e} < 1e-4")
        c.check(c.elapsed < 120.0, f"runtime {c.elapsed:.1f}s < 120s")


def test_criterion_03_hutchinson_oracle():
    with Criterion(3, "Hutchinson oracle") as c:
        rng = np.random.default_rng(3)
        A = torch.from_numpy(np.diag(np.arange(1.0, 7.0)) + 0.1 * rng.standard_normal((6, 6)))
        field = rt.as_field(lambda z, ti, tt, m: z @ A.T)
        z = _pairs(rng, 1, 3)
        jac = torch.autograd.functional.jacobian(lambda x: field(x[None], 0.5, 0.5, geo.JOINT)[0], z[0])
        P = torch.stack([geo.tangent_project(z[0], e) for e in torch.eye(6, dtype=torch.float64)], 1)
        exact = torch.trace(P.T @ jac @ P).item()
        n = 100_000
        one = rt.divergence_estimate(field, z.expand(n, -1), 0.5, 0.5, geo.JOINT, n_probes=1, rng=rng).numpy()
        rel = abs(one.mean() - exact) / abs(exact)
        c.check(rel < 0.01, f"probe mean {one.mean():.4f} vs trace {exact:.4f}, rel {rel:.2%} < 1%")
        two = rt.divergence_estimate(field, z.expand(n, -1), 0.5, 0.5, geo.JOINT, n_probes=2, rng=rng).numpy()
        v1, v2 = one.var(ddof=1), two.var(ddof=1)

        def var_se(x, v):
            return math.sqrt(max(np.mean((x - x.mean()) ** 4) - v * v, 0.0) / x.size)

        ratio = v2 / v1
        se = ratio * math.hypot(var_se(one, v1) / v1, var_se(two, v2) / v2)
        c.check(abs(ratio - 0.5) < 3 * se, f"var ratio K2/K1 {ratio:.4f} = 0.5 within 3 SE ({3 * se:.4f})")
        c.check(c.elapsed < 60.0, f"runtime {c.elapsed:.1f}s < 60s")


def test_criterion_04_divergence_free_oracle():
    with Criterion(4, "divergence-free oracle") as c:
        rng = np.random.default_rng(4)
        S = np.zeros((6, 6))
        for blk in (slice(0, 3), slice(3, 6)):
            M = rng.standard_normal((3, 3)) * 2
            S[blk, blk] = M - M.T
        S = torch.from_numpy(S)
        z = _pairs(rng, 50, 3)
        est = rt.log_density(lambda x, ti, tt, m: x @ S.T, z, geo.JOINT, rt.SolverConfig(n_steps=50))
        dev = np.abs(est.log_density - est.base_log_density).max()
        c.check(dev < 1e-3, f"rotation max |log p - base| {dev:.1e} < 1e-3")
        fresh = rt.log_density(N.VelocityNet(N.NetConfig(), seed=0), z, geo.JOINT).log_density
        target = -2 * math.log(4 * math.pi)
        c.check(np.all(fresh == fresh[0]) and abs(fresh[0] - target) < 1e-12,
                f"fresh net log p {fresh[0]:.6f} = -2 log(4pi) on every pair")


def test_criterion_05_density_accuracy(riemannian_model, heldout):
    net, header, train_seconds = riemannian_model
    mix, pairs, _ = heldout
    with Criterion(5, "end-to-end density accuracy") as c:
        truth = mix.oracle_logs(pairs)
        # the model is scored with enough probes that single-probe estimator noise does not dominate
        solver = rt.SolverConfig(n_probes=16)
        est = rt.log_density(net, pairs, geo.JOINT, solver).log_density
        err = np.abs(est - truth.log_joint).mean()
        err_k1 = np.abs(rt.log_density(net, pairs, geo.JOINT, rt.SolverConfig()).log_density - truth.log_joint).mean()
        c.check(err < 0.3, f"mean |log p_joint error| {err:.3f} < 0.3 (K={solver.n_probes}, {solver.n_steps} steps; "
                           f"{err_k1:.3f} at K=1)")
        report = rt.decompose(net, pairs, solver)
        resid = np.abs(rt.cross_direction_residual(net, pairs, solver, report=report)).mean()
        c.check(resid < 0.5, f"cross-direction residual {resid:.3f} < 0.5")
        c.check(header["extra"]["steps_run"] <= 20_000, f"{header['extra']['steps_run']} training steps <= 20k")
        total = train_seconds + c.elapsed
        c.check(True, f"training {train_seconds / 60:.1f} min + eval {c.elapsed / 60:.1f} min "
                      f"(target < 30 min: {'met' if total < 1800 else 'missed'})")


def _equal_area_bins(x, nz=6, nphi=12):
    zb = np.clip(((x[:, 2] + 1) / 2 * nz).astype(int), 0, nz - 1)
    pb = np.clip(((np.arctan2(x[:, 1], x[:, 0]) + np.pi) / (2 * np.pi) * nphi).astype(int), 0, nphi - 1)
    return zb * nphi + pb


def test_criterion_06_conditional_consistency(riemannian_model):
    net, _, _ = riemannian_model
    mix = default_mixture()
    with Criterion(6, "conditional sample consistency") as c:
        M = 5000
        conditioner = mix.image_means[0]
        solver = rt.SolverConfig(guidance_scale=0.0)
        z = rt.sample(net, geo.I2T, torch.from_numpy(conditioner).expand(M, 3), solver=solver,
                      rng=np.random.default_rng(6), base=geo.uniform_product(M, 3, np.random.default_rng(60)))
        y = z[:, 3:].numpy()
        oracle = mix.conditional_text(conditioner)
        a = 1 / math.tanh(oracle.kappa_txt[0]) - 1 / oracle.kappa_txt[0]
        mean_true = (oracle.weights[:, None] * a * oracle.text_means).sum(0)
        mean_true /= np.linalg.norm(mean_true)
        mean_model = y.mean(0) / np.linalg.norm(y.mean(0))
        angle = math.degrees(math.acos(min(1.0, float(mean_model @ mean_true))))
        c.check(angle < 5.0, f"mean-direction error {angle:.2f} deg < 5")
        ref = oracle.sample(1_000_000, np.random.default_rng(61))[0][:, 3:]
        p = np.bincount(_equal_area_bins(y), minlength=72) / M
        q = np.bincount(_equal_area_bins(ref), minlength=72) / ref.shape[0]
        tv = 0.5 * np.abs(p - q).sum()
        c.check(tv < 0.1, f"binned TV {tv:.3f} < 0.1 (72 equal-area bins, M={M})")


def test_criterion_07_fano_suite():
    with Criterion(7, "Fano suite") as c:
        rng = np.random.default_rng(7)
        n = 16
        p = rng.dirichlet(np.full(n, 0.5), size=100_000)
        slack = uq.fano_forward(1 - p.max(1), n) - uq.shannon_entropy(p)
        c.check(slack.min() >= -1e-12, f"bound holds on 1e5 simplex vectors (min slack {slack.min():.1e})")
        worst_eq = 0.0
        for size in range(2, 11):
            for r in np.linspace(0, (size - 1) / size, 25):
                q = np.concatenate([[1 - r], np.full(size - 1, r / (size - 1))])
                worst_eq = max(worst_eq, abs(uq.shannon_entropy(q) - uq.fano_forward(r, size)))
        c.check(worst_eq < 1e-9, f"equality cases within {worst_eq:.1e} < 1e-9")
        worst_inv = 0.0
        for size in (2, 3, 10, 100, 10_000):
            r = np.linspace(0, (size - 1) / size, 500)
            worst_inv = max(worst_inv, np.abs(uq.fano_invert(uq.fano_forward(r, size), size) - r).max())
        c.check(worst_inv < 1e-8, f"invert(forward(r)) - r within {worst_inv:.1e} < 1e-8")


def _sharpness_queries(mix, n_per_edge, rng):
    """Image queries on geodesics between modes, placed so the oracle posterior sweeps its range.

    For each ordered pair (a, b) targets for the posterior of mode a are drawn uniformly between its
    value at the midpoint and at mode a, and the geodesic positions reaching them are found by bisection.
    """
    queries = []
    K = mix.n_components
    for a in range(K):
        for b in range(K):
            if a == b:
                continue
            x = torch.from_numpy(np.repeat(mix.image_means[a][None], n_per_edge, 0))
            y = torch.from_numpy(np.repeat(mix.image_means[b][None], n_per_edge, 0))

            def point(s):
                return geo.geodesic_interpolate(x, y, torch.from_numpy(s)).numpy()

            def post_a(s):
                return mix.component_posterior(point(s))[:, a]

            ends = post_a(np.array([0.5, 0.0] + [0.0] * (n_per_edge - 2)))[:2]
            target = rng.uniform(ends[0], ends[1], n_per_edge)
            lo, hi = np.zeros(n_per_edge), np.full(n_per_edge, 0.5)
            for _ in range(50):
                mid = 0.5 * (lo + hi)
                above = post_a(mid) > target
                lo, hi = np.where(above, mid, lo), np.where(above, hi, mid)
            queries.append(point(0.5 * (lo + hi)))
    return np.concatenate(queries)


def _calibration_spearman(net, geometry, queries, labels, gallery):
    res = uq.retrieval_entropy_pipeline(net, queries, gallery, geo.I2T, rt.SolverConfig(), n_samples=50,
                                        kappa=100.0, geometry=geometry)
    correct = res.probs.argmax(-1) == labels
    return uq.calibration_report(res.entropy, correct), res


def test_criterion_08_calibration_protocol(riemannian_model, euclidean_model):
    mix = default_mixture()
    rng = np.random.default_rng(8)
    queries = _sharpness_queries(mix, 40, rng)
    post = mix.component_posterior(queries)
    labels = np.array([rng.choice(mix.n_components, p=p) for p in post])
    gallery = mix.text_means
    with Criterion(8, "calibration protocol") as c:
        net, _, _ = riemannian_model
        rep, _ = _calibration_spearman(net, geo.SphereGeometry(), queries, labels, gallery)
        c.check(rep.spearman <= -0.8, f"Riemannian bin Spearman {rep.spearman:.3f} <= -0.8 (R2 {rep.r_squared:.3f})")
        net_e, _, _ = euclidean_model
        rep_e, _ = _calibration_spearman(net_e, geo.EuclideanGeometry(), queries, labels, gallery)
        c.check(abs(rep_e.spearman) <= 0.5, f"Euclidean |S| {abs(rep_e.spearman):.3f} <= 0.5")


def test_criterion_09_selective_prediction(riemannian_model):
    net, _, _ = riemannian_model
    mix = default_mixture()
    rng = np.random.default_rng(9)
    n = 300
    ind = mix.sample(n, rng)[0]
    # out-of-distribution pairs: broad vMF blocks around random directions
    centres = random_units(rng, n, 3)
    ood = np.concatenate([sample_vmf(centres, 1.0, None, rng), sample_vmf(centres, 1.0, None, rng)], 1)
    pairs = np.concatenate([ind, ood])
    gallery = mix.text_means
    with Criterion(9, "selective prediction") as c:
        x = pairs[:, :3]
        predicted = np.argmax(x @ gallery.T, axis=1)
        oracle_best = np.argmax(mix.component_posterior(x), axis=1)
        correct = predicted == oracle_best
        report = rt.decompose(net, pairs, rt.SolverConfig())
        epi = uq.selective_curve(report.epistemic_sum, correct)
        pmi = uq.selective_curve(-report.pmi, correct)
        trend = epi.trend_spearman()
        c.check(trend <= -0.6, f"epistemic_sum coverage/accuracy Spearman {trend:.3f} <= -0.6")
        c.check(pmi.ausac < epi.ausac, f"AUSAC -PMI {pmi.ausac:.3f} < epistemic_sum {epi.ausac:.3f}")
        sep = report.epistemic_sum[n:].mean() - report.epistemic_sum[:n].mean()
        c.check(sep > 0, f"OOD minus ID epistemic_sum {sep:.2f} > 0")


def test_criterion_10_stability(riemannian_model, heldout):
    net, _, _ = riemannian_model
    _, pairs, _ = heldout
    with Criterion(10, "stability ablations") as c:
        def logp(**kw):
            return rt.log_density(net, pairs, geo.JOINT, rt.SolverConfig(**kw)).log_density

        base = logp(n_steps=50, n_probes=1)
        rho_steps = stats.spearmanr(logp(n_steps=10, n_probes=1), base).statistic
        c.check(rho_steps >= 0.95, f"Spearman steps 10 vs 50 {rho_steps:.3f} >= 0.95")
        rho_probes = stats.spearmanr(logp(n_steps=50, n_probes=5), base).statistic
        c.check(rho_probes >= 0.95, f"Spearman K 1 vs 5 {rho_probes:.3f} >= 0.95")


def test_criterion_11_determinism(tmp_path):
    import yaml

    from geoflow import cli

    config = {"net": {"hidden_dim": 16, "depth": 1, "rff_features": 16},
              "train": {"total_steps": 30, "warmup_steps": 3, "batch_size": 32, "log_every": 1,
                        "validation": {"every": 10, "batches": 1}},
              "solver": {"n_steps": 5}}
    (tmp_path / "run.yaml").write_text(yaml.safe_dump(config))
    with Criterion(11, "determinism") as c:
        outputs = []
        for run in ("a", "b"):
            root = tmp_path / run
            data = str(root / "data.gfv")
            cfg = str(tmp_path / "run.yaml")
            steps = [
                ["synth-gen", "--out", data, "--n", "64", "--seed", "3"],
                ["train", "--config", cfg, "--data", data, "--out-dir", str(root / "model"), "--seed", "5"],
                ["decompose", "--config", cfg, "--checkpoint", str(root / "model" / "model.ckpt"),
                 "--data", data, "--out", str(root / "scores.csv")],
                ["entropy", "--config", cfg, "--checkpoint", str(root / "model" / "model.ckpt"),
                 "--data", data, "--samples", "8", "--out", str(root / "entropy.csv")],
                ["eval-selective", "--scores", str(root / "scores.csv"), "--score-column", "epistemic_sum",
                 "--correct", str(root / "entropy.csv"), "--out-dir", str(root / "eval")],
            ]
            for argv in steps:
                assert cli.main(argv) == 0, argv
            outputs.append({p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*.csv"))})
        names = sorted(map(str, outputs[0]))
        same = outputs[0].keys() == outputs[1].keys() and all(outputs[0][k] == outputs[1][k] for k in outputs[0])
        c.check(same, f"{len(names)} metric CSVs byte-identical across runs ({', '.join(names)})")

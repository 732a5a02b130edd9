"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Desk-scale configuration for the learning criteria (5, 6): patch 7x7,
d_model 16, d_state 4, one Mamba block, Adam lr 3e-3, 100 epochs, full-batch
steps (batch size above the number of training patches).
"""
import time

import numpy as np
import pytest

from dctmamba3d import checkpoint as ck
from dctmamba3d.cli import main, ssdm_channel_samples
from dctmamba3d.data import (BadMagicError, ShapeMismatchError, TruncatedPayloadError, decode_container,
                             encode_container, fit_band_stats, load_container)
from dctmamba3d.dct import dct3_direct, dct3_forward, dct3_inverse, make_basis
from dctmamba3d.mamba import (AggregationParams, Mamba3DBlock, PatchEmbeddings, SsmBlockParams, aggregate,
                              bidirectional_ssm, selective_scan)
from dctmamba3d.matfile import MatFormatError, UnsupportedMatFeature, parse_mat_v5
from dctmamba3d.metrics import confusion, scores
from dctmamba3d.model import (ABLATIONS, DCTMamba3D, MambaConfig, ModelConfig, OptimConfig, classify,
                              gre_fuse, loss_fn, pool)
from dctmamba3d.nn import Adam, Linear, Module
from dctmamba3d.ssdm import SsdmConfig, Stem, mean_abs_offdiag, spearman_matrix, ssdm_forward
from dctmamba3d.synth import generate_scene
from dctmamba3d.tensor import Tensor
from dctmamba3d.train import make_checkpoint, moving_average, run_experiment

import matfixtures as mf
from acceptance_log import verdict
from gradcheck import check_module_grads, rel_err

DESK_OPTIM = dict(epochs=100, batch_size=4096, lr=3e-3)


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def desk_config(mode: str, seed: int) -> ModelConfig:
    return ModelConfig(num_classes=4, bands=16, ssdm=SsdmConfig(patch_spatial=7), mamba=MambaConfig(16, 4),
                       ablation=mode, optim=OptimConfig(seed=seed, **DESK_OPTIM))


# -- 1 -----------------------------------------------------------------------------------
def test_criterion_1_dct_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    basis = make_basis(3, 3, 3)
    gram_err = float(np.max(np.abs(basis.gram() - np.eye(27))))
    rt_err = sep_err = parseval_err = 0.0
    for _ in range(200):
        ext = tuple(int(v) for v in rng.integers(1, 9, size=3))
        b = make_basis(*ext)
        x = rng.normal(size=ext)
        c = dct3_forward(x, b)
        sep_err = max(sep_err, float(np.max(np.abs(c.coefficients - dct3_direct(x)))))
        rt_err = max(rt_err, float(np.max(np.abs(dct3_inverse(c, b) - x))))
        parseval_err = max(parseval_err, abs(np.sum(c.coefficients ** 2) - np.sum(x ** 2)) / np.sum(x ** 2))
    elapsed = time.perf_counter() - t0
    ok = (basis.count == 27 and gram_err <= 1e-6 and rt_err <= 1e-6 and parseval_err <= 1e-5
          and sep_err <= 1e-6 and elapsed < 5)
    assert verdict(1, "DCT correctness", ok,
                   f"gram {gram_err:.1e}, round-trip {rt_err:.1e}, parseval {parseval_err:.1e}, "
                   f"separable-vs-direct {sep_err:.1e}, {elapsed:.1f}s")


# -- 2 -----------------------------------------------------------------------------------
def dense_recurrence(u, params):
    """State as one dense vector of length d*N; Abar, Bbar, C as explicit dense matrices."""
    delta = np.logaddexp(0.0, u @ params.delta_proj.weight.data + params.delta_proj.bias.data)
    A = -np.exp(params.A_log.data)
    Bm = u @ params.B_proj.weight.data
    Cm = u @ params.C_proj.weight.data
    _, L, d = u.shape
    n = A.shape[1]
    y = np.zeros_like(u)
    for b in range(u.shape[0]):
        h = np.zeros(d * n)
        for t in range(L):
            Abar = np.diag(np.exp(np.repeat(delta[b, t], n) * A.reshape(-1)))
            Bbar = np.zeros((d * n, d))
            Cmat = np.zeros((d, d * n))
            for ch in range(d):
                Bbar[ch * n:(ch + 1) * n, ch] = delta[b, t, ch] * Bm[b, t]
                Cmat[ch, ch * n:(ch + 1) * n] = Cm[b, t]
            h = Abar @ h + Bbar @ u[b, t]
            y[b, t] = Cmat @ h + params.D_skip.data * u[b, t]
    return y


def test_criterion_2_scan_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    reversal_exact = True
    for _ in range(500):
        L, n, d = (int(v) for v in (rng.integers(1, 9), rng.integers(1, 3), rng.integers(1, 5)))
        params = SsmBlockParams(d, n, rng, np.float64)
        params.A_log.data[...] += rng.normal(0, 0.5, params.A_log.shape)
        params.D_skip.data[...] = rng.normal(size=d)
        u = rng.normal(size=(2, L, d))
        worst = max(worst, float(np.max(np.abs(selective_scan(t64(u), params).data - dense_recurrence(u, params)))))
        bwd = selective_scan(t64(u), params, "backward").data
        ref = selective_scan(t64(u[:, ::-1].copy()), params, "forward").data[:, ::-1]
        reversal_exact &= bool(np.array_equal(bwd, ref))

    # causality: dy_t/du_s vanishes for s > t, autodiff agreeing with central differences
    params = SsmBlockParams(3, 2, rng, np.float64)
    u0 = rng.normal(size=(1, 6, 3))
    causal = True
    grad_err = 0.0
    for t in range(6):
        u = t64(u0.copy(), True)
        w = np.zeros((1, 6, 3))
        w[0, t] = rng.normal(size=3)
        (selective_scan(u, params) * t64(w)).sum().backward()
        fd = np.zeros_like(u0)
        for idx in np.ndindex(u0.shape):
            up, um = u0.copy(), u0.copy()
            up[idx] += 1e-5
            um[idx] -= 1e-5
            fd[idx] = (np.sum(selective_scan(t64(up), params).data * w)
                       - np.sum(selective_scan(t64(um), params).data * w)) / 2e-5
        causal &= bool(np.all(u.grad[0, t + 1:] == 0) and np.all(np.abs(fd[0, t + 1:]) < 1e-9))
        grad_err = max(grad_err, rel_err(u.grad, fd))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and reversal_exact and causal and grad_err < 1e-6 and elapsed < 30
    assert verdict(2, "scan correctness", ok,
                   f"max |scan - dense| {worst:.1e} over 500 cases, reversal exact {reversal_exact}, "
                   f"causal {causal} (grad rel-err {grad_err:.1e}), {elapsed:.1f}s")


# -- 3 -----------------------------------------------------------------------------------
class _Wrap(Module):
    def __init__(self, **children):
        super().__init__()
        for name, child in children.items():
            setattr(self, name, child)


def _layer_cases(rng):
    dt = np.float64
    cases = {}

    stem = Stem(27, rng, dt)
    x = t64(rng.normal(size=(1, 1, 3, 2, 2)))
    w = t64(rng.normal(size=(1, 27, 3, 2, 2)))
    cases["stem"] = (stem, lambda: (stem(x) * w).sum())

    bank = Tensor(make_basis(3, 3, 3).kernels[:, None], dtype=dt)
    stem2 = Stem(27, rng, dt)
    w2 = t64(rng.normal(size=(1, 27, 3, 3, 3)))
    x2 = t64(rng.normal(size=(1, 1, 3, 3, 3)))
    cases["ssdm (stem + frozen DCT bank)"] = (stem2, lambda: (ssdm_forward(stem2(x2), bank) * w2).sum())

    emb = PatchEmbeddings(3, 2, 2, rng, dt)
    xe = t64(rng.normal(size=(1, 3, 2, 2, 2)))
    we = [t64(rng.normal(size=s)) for s in ((1, 4, 2), (1, 3, 2), (1, 3, 2, 2, 2))]
    cases["patch embeddings"] = (emb, lambda: sum(((o * wi).sum() for o, wi in zip(emb(xe), we)), t64(0.0)))

    ssm = SsmBlockParams(3, 2, rng, dt)
    xs, ws = t64(rng.normal(size=(2, 4, 3))), t64(rng.normal(size=(2, 4, 3)))
    cases["bidirectional ssm"] = (ssm, lambda: (bidirectional_ssm(xs, ssm) * ws).sum())

    agg = AggregationParams(3, dt)
    agg.gamma1.data[...] = rng.normal(size=3)
    hs, hb = t64(rng.normal(size=(1, 4, 3))), t64(rng.normal(size=(1, 2, 3)))
    res, wa = t64(rng.normal(size=(1, 2, 2, 2, 3))), t64(rng.normal(size=(1, 2, 2, 2, 3)))
    cases["aggregation"] = (agg, lambda: (aggregate(hs, hb, res, agg) * wa).sum())

    block = Mamba3DBlock(3, 2, 3, 2, rng, dt)
    xb, wb = t64(rng.normal(size=(1, 3, 2, 2, 2))), t64(rng.normal(size=(1, 3, 2, 2, 3)))
    cases["mamba3d block"] = (block, lambda: (block(xb) * wb).sum())

    gre = _Wrap(proj=Linear(27, 3, rng, dt))
    gre.alpha = Tensor(np.asarray(0.1), requires_grad=True, dtype=dt)
    yg, xg = t64(rng.normal(size=(1, 2, 2, 2, 3))), t64(rng.normal(size=(1, 2, 2, 2, 27)))
    wg = t64(rng.normal(size=(1, 2, 2, 2, 3)))
    cases["gre"] = (gre, lambda: (gre_fuse(yg, xg, gre.alpha, gre.proj) * wg).sum())

    head = _Wrap(lin=Linear(3, 2, rng, dt))
    fh = t64(rng.normal(size=(4, 2, 2, 2, 3)))
    cases["head + loss"] = (head, lambda: loss_fn(classify(fh, head.lin), [0, 1, 1, 0], pool(fh), 0.3))

    cfg = ModelConfig(num_classes=2, bands=8, ssdm=SsdmConfig(patch_spatial=5), mamba=MambaConfig(4, 2),
                      lambda_reg=0.1, dtype="float64")
    model = DCTMamba3D(cfg, rng)
    xm = t64(rng.normal(size=(2, 1, 8, 5, 5)))

    def model_loss():
        logits, feats = model(xm, return_features=True)
        return loss_fn(logits, [0, 1], feats, 0.1)

    cases["end-to-end micro-model (5x5, C=8, K=2)"] = (model, model_loss)
    return cases


def test_criterion_3_gradient_integrity():
    t0 = time.perf_counter()
    worst = {}
    for name, (module, loss) in _layer_cases(np.random.default_rng(2)).items():
        errs = check_module_grads(module, loss)
        worst[name] = max(errs.values())
    elapsed = time.perf_counter() - t0
    ok = all(v <= 1e-3 for v in worst.values()) and elapsed < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert verdict(3, "gradient integrity", ok, f"max rel-err per layer: {detail}; {elapsed:.1f}s")


# -- 4 -----------------------------------------------------------------------------------
def test_criterion_4_decorrelation():
    t0 = time.perf_counter()
    pairs = []
    for seed in range(5):
        cube = generate_scene(4, 16, 64, 64, 0.95, seed=seed)
        model = DCTMamba3D(desk_config("full", seed))
        stats = fit_band_stats(cube.reflectance.reshape(-1, cube.bands))
        raw = mean_abs_offdiag(spearman_matrix(cube.reflectance.reshape(-1, cube.bands)))
        post = mean_abs_offdiag(spearman_matrix(ssdm_channel_samples(model, cube, stats)))
        pairs.append((raw, post))
    elapsed = time.perf_counter() - t0
    ok = all(post < raw for raw, post in pairs) and elapsed < 60
    detail = ", ".join(f"seed {i}: {r:.3f} -> {p:.4f}" for i, (r, p) in enumerate(pairs))
    assert verdict(4, "decorrelation (raw -> SSDM mean |off-diag| Spearman)", ok, f"{detail}; {elapsed:.1f}s")


# -- 5 & 6 -------------------------------------------------------------------------------
_RUNS: dict = {}


def desk_run(mode: str, seed: int, workdir):
    """Train/test on a cmd_synth scene (K=4, C=16, 64x64, rho=0.9) with a 10%/90% split."""
    key = (mode, seed)
    if key not in _RUNS:
        path = workdir / f"scene_{seed}.hsic"
        if not path.exists():
            assert main(["synth", "--classes", "4", "--bands", "16", "--size", "64", "64",
                         "--band-correlation", "0.9", "--seed", str(seed), "--output", str(path)]) == 0
        t0 = time.perf_counter()
        exp = run_experiment(load_container(path), desk_config(mode, seed), 0.10, seed)
        _RUNS[key] = (exp, time.perf_counter() - t0)
    return _RUNS[key]


@pytest.fixture(scope="module")
def desk_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("desk")


def test_criterion_5_desk_learning(desk_dir):
    exp, elapsed = desk_run("full", 0, desk_dir)
    ma = moving_average(exp.result.curve, 20)
    rises = np.diff(ma)
    monotone = bool(np.all(rises <= 0))
    ok = exp.scores.oa >= 0.95 and monotone and elapsed < 600
    assert verdict(5, "desk-scale learning", ok,
                   f"OA {100 * exp.scores.oa:.2f}% on {exp.scores.n} test pixels after "
                   f"{len(exp.result.curve)} steps; 20-step MA monotone {monotone} "
                   f"(largest rise {rises.max():.2e}); {elapsed:.0f}s")


def test_criterion_6_ablation_ordering(desk_dir):
    oa, total = {}, 0.0
    for seed in (0, 1, 2):
        for mode in ABLATIONS:
            exp, elapsed = desk_run(mode, seed, desk_dir)
            oa.setdefault(mode, []).append(exp.scores.oa)
            total += elapsed
    mean = {m: float(np.mean(v)) for m, v in oa.items()}
    ok = all(mean["full"] >= mean[m] for m in ABLATIONS) and total < 40 * 60
    detail = ", ".join(f"{m} {100 * v:.2f}" for m, v in mean.items())
    assert verdict(6, "ablation ordering (mean OA over 3 seeds)", ok, f"{detail}; {total / 60:.1f} min")


# -- 7 -----------------------------------------------------------------------------------
def test_criterion_7_metrics_oracle():
    sc = scores([[40, 10], [20, 30]])
    exact = f"{sc.oa:.4f}" == "0.7000" and f"{sc.kappa:.4f}" == "0.4000" \
        and abs(sc.oa - 0.7) < 1e-12 and abs(sc.kappa - 0.4) < 1e-12
    rng = np.random.default_rng(7)
    ranges = equivariant = True
    for _ in range(1000):
        k = int(rng.integers(2, 7))
        cm = rng.integers(0, 30, size=(k, k)) * (rng.random((k, k)) < 0.8)
        if cm.sum() == 0:
            cm[0, 0] = 1
        s = scores(cm)
        ranges &= 0 <= s.oa <= 1 and 0 <= s.aa <= 1 and -1 <= s.kappa <= 1
        perm = rng.permutation(k)
        p = scores(cm[np.ix_(perm, perm)])
        equivariant &= (np.isclose(p.oa, s.oa) and np.isclose(p.aa, s.aa) and np.isclose(p.kappa, s.kappa)
                        and np.allclose(p.f1, s.f1[perm]))
        # relabelling the raw prediction/label pairs gives the permuted matrix
        labels = rng.integers(0, k, 50)
        preds = rng.integers(0, k, 50)
        inv = np.argsort(perm)
        equivariant &= bool(np.array_equal(confusion(inv[preds], inv[labels], k),
                                           confusion(preds, labels, k)[np.ix_(perm, perm)]))
    ok = exact and ranges and equivariant
    assert verdict(7, "metrics oracle", ok, f"OA {sc.oa:.4f}, Kappa {sc.kappa:.4f}; ranges {ranges}, "
                                            f"relabelling equivariance {equivariant} over 1000 matrices")


# -- 8 -----------------------------------------------------------------------------------
def _raises(fn, exc):
    try:
        fn()
    except exc:
        return True
    except Exception:
        return False
    return False


def test_criterion_8_format_fidelity():
    cube = generate_scene(3, 5, 8, 8, 0.5, seed=3)
    buf = encode_container(cube)
    hsic_ok = encode_container(decode_container(buf)) == buf

    cfg = ModelConfig(num_classes=2, bands=4, ssdm=SsdmConfig(patch_spatial=3), mamba=MambaConfig(4, 2))
    model = DCTMamba3D(cfg)
    c = make_checkpoint(model, Adam(model.parameters()), np.random.default_rng(0), 0)
    cbuf = ck.encode(c)
    ckpt_ok = ck.encode(ck.decode(cbuf)) == cbuf

    mat = parse_mat_v5(mf.two_by_three())
    mat_ok = set(mat) == {"A"} and np.array_equal(mat["A"], [[1.0, 2, 3], [4, 5, 6]]) \
        and np.array_equal(parse_mat_v5(mf.two_by_three(">"))["A"], mat["A"])

    hlen = int.from_bytes(buf[8:12], "little")
    header = buf[12:12 + hlen].replace(b'"C":5', b'"C":6')
    forged = buf[:8] + len(header).to_bytes(4, "little") + header + buf[12 + hlen:]
    malformed = {
        "hsic bad magic": (lambda: decode_container(b"HSIX" + buf[4:]), BadMagicError),
        "hsic truncated": (lambda: decode_container(buf[:-5]), TruncatedPayloadError),
        "hsic band mismatch": (lambda: decode_container(forged), ShapeMismatchError),
        "ckpt bad magic": (lambda: ck.decode(b"XXXX" + cbuf[4:]), ck.CheckpointError),
        "ckpt truncated": (lambda: ck.decode(cbuf[:-9]), ck.CheckpointError),
        "mat bad header": (lambda: parse_mat_v5(b"x" * 128), MatFormatError),
        "mat truncated": (lambda: parse_mat_v5(mf.two_by_three()[:-20]), MatFormatError),
        "mat compressed": (lambda: parse_mat_v5(mf.header() + mf.element(mf.MI_COMPRESSED, b"\0" * 8)),
                           UnsupportedMatFeature),
        "mat cell": (lambda: parse_mat_v5(mf.mat_file(mf.matrix("c", np.ones((1, 1)), mx_class=mf.MX_CELL))),
                     UnsupportedMatFeature),
        "mat complex": (lambda: parse_mat_v5(mf.mat_file(mf.matrix("z", np.ones((1, 1)), flags=0x08))),
                        UnsupportedMatFeature),
    }
    failed = [name for name, (fn, exc) in malformed.items() if not _raises(fn, exc)]
    ok = hsic_ok and ckpt_ok and mat_ok and not failed
    assert verdict(8, "format fidelity", ok, f"hsic byte-identical {hsic_ok}, checkpoint byte-identical "
                                             f"{ckpt_ok}, MAT fixture exact {mat_ok}, "
                                             f"{len(malformed) - len(failed)}/{len(malformed)} malformed "
                                             f"inputs give their named error" + (f" (failing: {', '.join(failed)})" if failed else ""))


# -- 9 -----------------------------------------------------------------------------------
def test_criterion_9_determinism(tmp_path):
    import json
    assert main(["synth", "--classes", "3", "--bands", "8", "--size", "16", "16", "--band-correlation", "0.9",
                 "--seed", "9", "--output", str(tmp_path / "s.hsic")]) == 0
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"data": "s.hsic", "seed": 4, "train_fraction": 0.3,
                               "model": {"ssdm": {"patch_spatial": 5}, "mamba": {"d_model": 8, "d_state": 2},
                                         "optim": {"epochs": 5, "batch_size": 16}}}))
    artifacts = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["train", "--config", str(cfg), "--output", str(out)]) == 0
        assert main(["eval", "--checkpoint", str(out / "checkpoint.dcm3"), "--data", str(tmp_path / "s.hsic"),
                     "--output", str(out / "eval"), "--split", "test", "--train-fraction", "0.3"]) == 0
        artifacts.append({name: (out / name).read_bytes() for name in
                          ("loss.csv", "checkpoint.dcm3", "eval/metrics.csv", "eval/summary.json",
                           "eval/predictions.csv")})
    same = [name for name in artifacts[0] if artifacts[0][name] == artifacts[1][name]]
    steps = artifacts[0]["loss.csv"].count(b"\n") - 1
    ok = len(same) == len(artifacts[0]) and steps > 0
    assert verdict(9, "determinism", ok, f"{len(same)}/{len(artifacts[0])} artifacts identical across two "
                                         f"seeded runs ({steps} training steps)")

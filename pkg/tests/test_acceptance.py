"""Acceptance gate: one test per shipping criterion, at the stated tolerances.

Each test prints a single PASS/FAIL line with its measured numbers, so
the -v log carries both the verdict and the evidence.  Tests are ordered
cheap to expensive; the full training run comes last.
"""

import hashlib
import os
import time

import numpy as np

from fruitlets.assoc.loss import assignment_loss
from fruitlets.assoc.network import AssociationNetwork
from fruitlets.assoc.sinkhorn import augment_scores, sinkhorn_log
from fruitlets.assoc.types import ClusterObservation, NetConfig
from fruitlets.cli import main as cli_main
from fruitlets.growth import abscise_report
from fruitlets.sizing import (
    DisparityPatch,
    EllipseParams,
    compute_size,
    extract_contour,
    fit_ellipse,
    largest_component,
    size_from_mask,
    threshold_mask,
)
from fruitlets.synth import SceneConfig, SyntheticPairs, gen_pair, gen_sizing_scene
from fruitlets.tensor import (
    Tensor,
    concat,
    conv2d,
    gather_pairs,
    logsumexp,
    no_grad,
    softmax,
    tensor_mean,
    tensor_sum,
    transpose,
)
from fruitlets.train import TrainConfig, evaluate_single, train

from . import conftest
from .oracles import fd_grad, rel_err

GRAD_TOL = 1e-4
MARGINAL_TOL = 1e-6
SHIFT_TOL = 1e-9
EQUIVARIANCE_TOL = 1e-9
SIZING_CLEAN_TOL = 0.01
SIZING_NOISY_TOL = 0.03
ELLIPSE_TOL = 1e-6
MATCHING_TARGET = 0.90
TRAIN_BUDGET_S = 30 * 60
LATENCY_BUDGET_S = 1.0

TINY_NET = NetConfig(
    visual_channels=3,
    feature_dim=8,
    num_heads=2,
    num_layers=2,
    sinkhorn_iters=20,
    d_enc_channels=(4, 4),
    p_enc_channels=(4, 4, 4, 4),
)


def _verdict(name: str, ok: bool, detail: str):
    line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
    print(line)
    conftest.VERDICTS.append(line)
    assert ok, line


# ---------------------------------------------------------------- gradients


def _primitive_cases():
    rng = np.random.default_rng(2024)

    def reducer(shape):
        # fixed random weights so backward and finite differences see the
        # same scalar function
        w = Tensor(rng.normal(size=shape))
        return lambda t: (t * w).sum()

    a34 = rng.normal(size=(3, 4))
    b4 = rng.normal(size=(4,))
    b31 = rng.normal(size=(3, 1))
    m_a = rng.normal(size=(2, 3, 4))
    m_b = rng.normal(size=(4, 5))
    cx = rng.normal(size=(1, 2, 5, 5))
    cw = rng.normal(size=(3, 2, 3, 3))
    pos = rng.uniform(0.5, 2.0, size=(2, 4))
    relu_in = rng.normal(size=(3, 4))
    relu_in += np.sign(relu_in) * 0.2  # keep clear of the kink
    sm = rng.normal(size=(3, 5))
    g_a = rng.normal(size=(4, 5))

    r_add = reducer((3, 4))
    r_mul = reducer((3, 4))
    r_mm = reducer((2, 3, 5))
    r_conv = reducer((1, 3, 3, 3))
    r_relu = reducer((3, 4))
    r_sm = reducer((3, 5))
    r_log = reducer((2, 4))
    r_exp = reducer((3, 4))
    r_lser = reducer((1, 5))
    r_lsec = reducer((3,))
    r_cat = reducer((3, 5))
    r_rs = reducer((2, 6))
    r_tr = reducer((4, 2, 3))
    r_sum = reducer((3,))
    r_sl = reducer((3, 3))
    r_gp = reducer((3,))

    return [
        ("add", [a34, b4], lambda a, b: r_add(a + b)),
        ("mul", [a34, b31], lambda a, b: r_mul(a * b)),
        ("matmul", [m_a, m_b], lambda a, b: r_mm(a @ b)),
        ("conv2d", [cx, cw],
         lambda x, w: r_conv(conv2d(x, w, stride=2, padding=1))),
        ("relu", [relu_in], lambda a: r_relu(a.relu())),
        ("softmax", [sm], lambda a: r_sm(softmax(a, axis=-1))),
        ("log", [pos], lambda a: r_log(a.log())),
        ("exp", [a34], lambda a: r_exp(a.exp())),
        ("logsumexp_rows", [sm], lambda a: r_lser(logsumexp(a, axis=0, keepdims=True))),
        ("logsumexp_cols", [sm], lambda a: r_lsec(logsumexp(a, axis=-1))),
        ("concat", [a34, b31], lambda a, b: r_cat(concat([a, b], axis=1))),
        ("reshape", [a34], lambda a: r_rs(a.reshape(2, 6))),
        ("transpose", [m_a], lambda a: r_tr(transpose(a, (2, 0, 1)))),
        ("sum_axis", [a34], lambda a: r_sum(tensor_sum(a, axis=1))),
        ("mean_all", [a34], lambda a: tensor_mean(a)),
        ("slice", [g_a], lambda a: r_sl(a[1:, ::2])),
        ("gather_pairs", [g_a],
         lambda a: r_gp(gather_pairs(a, [0, 3, 1], [2, 4, 4]))),
    ]


def _network_fd_worst():
    """Sampled finite differences through the whole match-loss graph."""
    scene = SceneConfig(
        seed=101, visual_channels=3, fruitlets_min=2, fruitlets_max=2, drop_prob=0.0
    )
    obs_a, obs_b, truth = gen_pair(scene, 0)
    assert len(obs_a.nodes) == 3 and len(obs_b.nodes) == 3
    net = AssociationNetwork(TINY_NET, seed=5)

    # Check at a generic point in parameter space.  Fresh biases are zero
    # and the positional channels have exact-zero plateaus, which parks
    # whole activation maps on the relu kink where one-sided differences
    # disagree with the subgradient convention.
    jit = np.random.default_rng(13)
    for _, t in net.store.items():
        t.data += jit.normal(0.0, 0.05, size=t.data.shape)

    def loss_value():
        out = net.forward(obs_a, obs_b)
        return float(assignment_loss(out.log_pbar, truth.labels).data)

    out = net.forward(obs_a, obs_b)
    assignment_loss(out.log_pbar, truth.labels).backward()
    analytic = {name: t.grad.copy() for name, t in net.store.items()}
    net.store.zero_grad()

    rng = np.random.default_rng(7)
    eps = 1e-6
    worst = 0.0
    for name, t in net.store.items():
        picks = rng.choice(t.data.size, size=min(4, t.data.size), replace=False)
        for idx in picks:
            orig = t.data.flat[idx]
            t.data.flat[idx] = orig + eps
            fp = loss_value()
            t.data.flat[idx] = orig - eps
            fm = loss_value()
            t.data.flat[idx] = orig
            numeric = (fp - fm) / (2 * eps)
            ana = analytic[name].flat[idx]
            worst = max(worst, abs(ana - numeric) / max(abs(numeric), 1e-3))
    return worst


def test_gradients_match_finite_differences():
    t0 = time.monotonic()
    worst_prim = 0.0
    for name, arrays, tf in _primitive_cases():
        tens = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        tf(*tens).backward()
        for k, t in enumerate(tens):

            def f(x, k=k):
                args = [Tensor(arr.copy()) for arr in arrays]
                args[k] = Tensor(x.copy())
                return float(tf(*args).data)

            err = rel_err(t.grad, fd_grad(f, arrays[k].copy()))
            worst_prim = max(worst_prim, err)

    worst_net = _network_fd_worst()
    elapsed = time.monotonic() - t0
    ok = worst_prim < GRAD_TOL and worst_net < GRAD_TOL and elapsed < 60.0
    _verdict(
        "gradient-check",
        ok,
        f"primitive max rel err {worst_prim:.2e}, full-graph max rel err "
        f"{worst_net:.2e} (tol {GRAD_TOL:.0e}), {elapsed:.1f}s of 60s",
    )


# ---------------------------------------------------------------- transport


def test_transport_marginals_and_invariances():
    rng = np.random.default_rng(11)
    worst_marginal = 0.0
    for _ in range(500):
        m = int(rng.integers(2, 9))
        n = int(rng.integers(2, 9))
        scores = rng.normal(size=(m, n))
        sbar = augment_scores(Tensor(scores), Tensor(np.array([1.0])))
        log_p = sinkhorn_log(sbar, iters=100).data
        p = np.exp(log_p)
        row_target = np.concatenate([np.ones(m), [float(n)]])
        col_target = np.concatenate([np.ones(n), [float(m)]])
        worst_marginal = max(
            worst_marginal,
            float(np.max(np.abs(p.sum(axis=1) - row_target))),
            float(np.max(np.abs(p.sum(axis=0) - col_target))),
        )

    worst_shift = 0.0
    for _ in range(50):
        scores = rng.normal(size=(5, 6))
        base = sinkhorn_log(augment_scores(Tensor(scores), Tensor(np.array([1.0]))), 100).data
        shifted = sinkhorn_log(
            augment_scores(Tensor(scores + 3.7), Tensor(np.array([1.0 + 3.7]))), 100
        ).data
        worst_shift = max(worst_shift, float(np.max(np.abs(base - shifted))))

    strong = np.full((6, 6), -20.0) + 40.0 * np.eye(6)
    p100 = np.exp(sinkhorn_log(augment_scores(Tensor(strong), Tensor(np.array([1.0]))), 100).data)
    p1000 = np.exp(sinkhorn_log(augment_scores(Tensor(strong), Tensor(np.array([1.0]))), 1000).data)
    diag100 = float(np.min(np.diag(p100[:6, :6])))
    diag1000 = float(np.min(np.diag(p1000[:6, :6])))
    converged = bool(np.allclose(p100, p1000, atol=5e-3))

    ok = (
        worst_marginal < MARGINAL_TOL
        and worst_shift < SHIFT_TOL
        and diag100 >= 0.99
        and diag1000 >= 0.99
        and converged
    )
    _verdict(
        "transport-normalisation",
        ok,
        f"500 matrices: marginal err {worst_marginal:.2e} (tol {MARGINAL_TOL:.0e}); "
        f"shift err {worst_shift:.2e} (tol {SHIFT_TOL:.0e}); strong-diagonal "
        f"min P[ii] {diag100:.5f} @100 sweeps vs {diag1000:.5f} @1000 (floor 0.99, "
        f"converged within 5e-3: {converged})",
    )


def test_assignment_permutation_equivariance():
    scene = SceneConfig(seed=77)
    net = AssociationNetwork(NetConfig(), seed=3)
    rng = np.random.default_rng(5)
    worst = 0.0
    for k in range(100):
        obs_a, obs_b, _ = gen_pair(scene, k)
        perm_a = rng.permutation(len(obs_a.nodes))
        perm_b = rng.permutation(len(obs_b.nodes))
        shuf_a = ClusterObservation(
            cluster_id=obs_a.cluster_id,
            day=obs_a.day,
            image_width=obs_a.image_width,
            image_height=obs_a.image_height,
            nodes=[obs_a.nodes[i] for i in perm_a],
        )
        shuf_b = ClusterObservation(
            cluster_id=obs_b.cluster_id,
            day=obs_b.day,
            image_width=obs_b.image_width,
            image_height=obs_b.image_height,
            nodes=[obs_b.nodes[j] for j in perm_b],
        )
        with no_grad():
            p_base = np.exp(net.forward(obs_a, obs_b).log_pbar.data)
            p_shuf = np.exp(net.forward(shuf_a, shuf_b).log_pbar.data)
        ext_a = np.concatenate([perm_a, [len(obs_a.nodes)]])
        ext_b = np.concatenate([perm_b, [len(obs_b.nodes)]])
        expected = p_base[np.ix_(ext_a, ext_b)]
        worst = max(worst, float(np.max(np.abs(p_shuf - expected))))
    _verdict(
        "permutation-equivariance",
        worst < EQUIVARIANCE_TOL,
        f"100 pairs: max |P_perm - P[perm]| = {worst:.2e} (tol {EQUIVARIANCE_TOL:.0e})",
    )


# ------------------------------------------------------------------- sizing


def test_sizing_accuracy_clean_and_noisy():
    scene = SceneConfig(seed=2024)
    rng = np.random.default_rng(99)
    worst_clean = 0.0
    worst_noisy = 0.0
    for i in range(200):
        sc = gen_sizing_scene(scene, i)
        meas, _ = size_from_mask(sc.prob_mask, sc.patch, sc.baseline_mm)
        worst_clean = max(
            worst_clean, abs(meas.diameter_mm - sc.true_diameter_mm) / sc.true_diameter_mm
        )

        contour = extract_contour(
            largest_component(threshold_mask(sc.prob_mask, 0.5))
        ).astype(np.float64)
        noisy = contour + rng.normal(0.0, 0.05, size=contour.shape)
        ellipse = fit_ellipse(noisy)
        noisy_meas = compute_size(ellipse, sc.patch, sc.baseline_mm)
        worst_noisy = max(
            worst_noisy,
            abs(noisy_meas.diameter_mm - sc.true_diameter_mm) / sc.true_diameter_mm,
        )

    exact = compute_size(
        EllipseParams(cx=40.0, cy=40.0, major_px=60.0, minor_px=50.0, angle=0.0),
        DisparityPatch(values=np.full((81, 81), 500.0), bbox=(0, 0, 81, 81)),
        baseline_mm=100.0,
    )
    arithmetic_exact = exact.diameter_mm == 50.0 * 100.0 / 500.0 == 10.0

    ok = (
        worst_clean < SIZING_CLEAN_TOL
        and worst_noisy < SIZING_NOISY_TOL
        and arithmetic_exact
    )
    _verdict(
        "metric-sizing",
        ok,
        f"200 scenes: clean max err {worst_clean:.4%} (tol 1%); with 0.05 px contour "
        f"noise {worst_noisy:.4%} (tol 3%); diameter formula exact: {arithmetic_exact}",
    )


def _sample_ellipse(cx, cy, a, b, angle, n, rng):
    t = rng.uniform(0.0, 2.0 * np.pi, n)
    ca, sa = np.cos(angle), np.sin(angle)
    x = cx + a * np.cos(t) * ca - b * np.sin(t) * sa
    y = cy + a * np.cos(t) * sa + b * np.sin(t) * ca
    return np.stack([x, y], axis=1)


def test_ellipse_recovery_and_equivariances():
    rng = np.random.default_rng(31)
    worst_fit = 0.0
    for _ in range(200):
        cx, cy = rng.uniform(-40, 40, 2)
        b = rng.uniform(2.0, 30.0)
        a = b * rng.uniform(1.01, 3.0)
        angle = rng.uniform(0.0, np.pi)
        pts = _sample_ellipse(cx, cy, a, b, angle, int(rng.integers(8, 40)), rng)
        fit = fit_ellipse(pts)
        worst_fit = max(
            worst_fit,
            abs(fit.cx - cx) / max(abs(cx), 1.0),
            abs(fit.cy - cy) / max(abs(cy), 1.0),
            abs(fit.major_px - 2 * a) / (2 * a),
            abs(fit.minor_px - 2 * b) / (2 * b),
        )

    worst_eq = 0.0
    for _ in range(50):
        pts = _sample_ellipse(5.0, -3.0, 14.0, 9.0, 0.6, 24, rng)
        base = fit_ellipse(pts)
        shifted = fit_ellipse(pts + np.array([11.25, -4.5]))
        worst_eq = max(
            worst_eq,
            abs(shifted.cx - (base.cx + 11.25)),
            abs(shifted.cy - (base.cy - 4.5)),
            abs(shifted.major_px - base.major_px),
            abs(shifted.minor_px - base.minor_px),
            abs(shifted.angle - base.angle),
        )
        for k in (0.5, 3.0, 17.0):
            scaled = fit_ellipse(pts * k)
            worst_eq = max(
                worst_eq,
                abs(scaled.major_px - k * base.major_px) / (k * base.major_px),
                abs(scaled.minor_px - k * base.minor_px) / (k * base.minor_px),
            )
        theta = rng.uniform(0.2, 1.2)
        rot = np.array(
            [[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]]
        )
        rotated = fit_ellipse(pts @ rot.T)
        want = (base.angle + theta) % np.pi
        diff = abs(rotated.angle - want)
        worst_eq = max(
            worst_eq, min(diff, np.pi - diff),
            abs(rotated.major_px - base.major_px) / base.major_px,
        )

    ok = worst_fit < ELLIPSE_TOL and worst_eq < EQUIVARIANCE_TOL
    _verdict(
        "ellipse-fit",
        ok,
        f"200 noiseless fits: max param err {worst_fit:.2e} (tol {ELLIPSE_TOL:.0e}); "
        f"translation/rotation/scale equivariance err {worst_eq:.2e} "
        f"(tol {EQUIVARIANCE_TOL:.0e})",
    )


# ------------------------------------------------------------------- growth


def test_growth_report_exact_values():
    rep = abscise_report([4.0, 3.0, 2.5, 1.9, 1.0])
    exact = (
        rep.median_fastest_growth == 4.0
        and rep.threshold == 2.0
        and rep.abscise_percent == 40.0
    )

    rng = np.random.default_rng(8)
    invariant = True
    for _ in range(100):
        rates = rng.uniform(0.05, 2.5, size=int(rng.integers(3, 40)))
        base = abscise_report(rates).abscise_percent
        for k in (0.5, 2.0, 7.3, 0.03):
            if abscise_report(k * rates).abscise_percent != base:
                invariant = False

    ok = exact and invariant
    _verdict(
        "growth-report",
        ok,
        f"worked example (median fastest 4.0, threshold 2.0, 40%): {exact}; "
        f"abscission percentage scale-invariant over 100 random rate vectors: {invariant}",
    )


# -------------------------------------------------------------- performance


def test_inference_latency():
    scene = SceneConfig(seed=55, fruitlets_min=6, fruitlets_max=6)
    net = AssociationNetwork(NetConfig(), seed=0)
    pairs = [gen_pair(scene, i) for i in range(10)]
    assert all(len(a.nodes) <= 8 and len(b.nodes) <= 8 for a, b, _ in pairs)
    net.match(pairs[0][0], pairs[0][1])  # warm-up
    worst = 0.0
    for obs_a, obs_b, _ in pairs:
        t0 = time.monotonic()
        net.match(obs_a, obs_b, threshold=0.5)
        worst = max(worst, time.monotonic() - t0)
    _verdict(
        "inference-latency",
        worst < LATENCY_BUDGET_S,
        f"slowest of 10 pairs (up to 8 nodes a side): {worst * 1e3:.1f} ms "
        f"(budget {LATENCY_BUDGET_S:.0f} s)",
    )


def _tree_hashes(root: str) -> dict:
    out = {}
    for base, _dirs, files in os.walk(root):
        for name in files:
            path = os.path.join(base, name)
            rel = os.path.relpath(path, root)
            with open(path, "rb") as fh:
                out[rel] = hashlib.sha256(fh.read()).hexdigest()
    return out


def test_artifact_reproducibility(tmp_path):
    import json

    scene = tmp_path / "scene.json"
    scene.write_text(json.dumps({"seed": 3, "visual_channels": 3}))
    net = tmp_path / "net.json"
    net.write_text(
        json.dumps(
            {
                "visual_channels": 3,
                "feature_dim": 8,
                "num_heads": 2,
                "num_layers": 2,
                "sinkhorn_iters": 10,
                "d_enc_channels": [4, 4],
                "p_enc_channels": [4, 4, 4, 4],
            }
        )
    )
    for run in ("one", "two"):
        root = tmp_path / run
        assert cli_main(["synth", "--out", str(root / "ds"), "--pairs", "4",
                         "--eval-pairs", "2", "--config", str(scene),
                         "--materialize", "--with-raw"]) == 0
        assert cli_main(["train", "--dataset", str(root / "ds"),
                         "--out", str(root / "run"), "--epochs", "1",
                         "--net-config", str(net)]) == 0
        assert cli_main(["eval", "--dataset", str(root / "ds"),
                         "--ckpt", str(root / "run" / "ckpt-epoch000.json"),
                         "--net-config", str(net), "--thresholds", "0.2,0.5",
                         "--out", str(root / "ev")]) == 0
    h1 = _tree_hashes(str(tmp_path / "one"))
    h2 = _tree_hashes(str(tmp_path / "two"))
    same = h1 == h2
    _verdict(
        "artifact-reproducibility",
        same,
        f"two identical synth+train+eval runs: {len(h1)} files, "
        f"byte-identical: {same}",
    )


# ----------------------------------------------------------------- training


def test_training_reaches_matching_score():
    t0 = time.monotonic()
    scene = SceneConfig(seed=42)
    net = AssociationNetwork(NetConfig(), seed=7)
    train_data = SyntheticPairs(scene, range(2000))
    eval_data = SyntheticPairs(scene, range(10_000_000, 10_000_400))

    result = train(net, train_data, TrainConfig(epochs=5, seed=11))
    point = evaluate_single(net, eval_data, threshold=0.5)
    elapsed = time.monotonic() - t0

    ok = (
        point.matching_score >= MATCHING_TARGET
        and elapsed < TRAIN_BUDGET_S
        and result.epochs[-1].mean_loss < result.epochs[0].mean_loss
    )
    _verdict(
        "training-run",
        ok,
        f"2000 train pairs, 5 epochs, 400 held-out pairs: matching score "
        f"{point.matching_score:.4f} at threshold 0.5 (target {MATCHING_TARGET}), "
        f"precision {point.precision:.4f}, recall {point.recall:.4f}, "
        f"loss {result.epochs[0].mean_loss:.3f} -> {result.epochs[-1].mean_loss:.3f}, "
        f"{elapsed / 60:.1f} min of 30",
    )

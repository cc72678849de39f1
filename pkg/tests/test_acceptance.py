"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The desk-scale digit experiment behind criteria 5 to 8 is run once per session
and takes roughly 25 minutes on one CPU core.
"""
import math
import re
import subprocess
import sys
import time
from pathlib import Path

import mpmath
import numpy as np
import pytest

from gradmix import mixing as mx
from gradmix import tensor_net as tn
from gradmix import trainer as T
from gradmix.config import RunConfig, SourceConfig, from_dict

from conftest import central_difference, random_net, rel_error

pytestmark = pytest.mark.acceptance

RESULTS: dict[int, str] = {}

DESK_SEEDS = (0, 1, 2)
DESK_STEPS = 2000
DESK_ALPHA = 0.02  # 0.05 kills the ReLUs of this small net on some seeds
DESK_BATCH = 32
DESK_GRID = ([10.0], [0.3, 0.6, 0.9])  # the plain GradMix run is the (10, 0.6) cell
DESK_BUDGET_S = 30 * 60


def report(n, ok, detail):
    RESULTS[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(RESULTS[n])
    assert ok, RESULTS[n]


def _layer_cos(sources, val, weights):
    """Plain per-layer cosine of the weighted source sum, written out by hand."""
    out = []
    for l, v in enumerate(val.trunk_grads):
        mixed = sum(w * s.trunk_grads[l] for w, s in zip(weights[l], sources))
        nm, nv = math.sqrt(float(mixed @ mixed)), math.sqrt(float(v @ v))
        out.append(float(mixed @ v) / (nm * nv) if nm and nv else 0.0)
    return out


def test_1_solver_matches_grid_oracle():
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst = -np.inf
    for i in range(100):
        k = 2 + i % 2
        sources, val = [], []
        for _ in range(3):
            d = int(rng.integers(2, 17))
            common = rng.standard_normal(d)
            val.append(common + 0.5 * rng.standard_normal(d))
            sources.append([rng.uniform(0, 1.5) * common + rng.standard_normal(d) for _ in range(k)])
        src = [tn.GradientSet([sources[l][j] for l in range(3)], {}, 1) for j in range(k)]
        v = tn.GradientSet(val, {}, 1)
        w, _ = mx.solve_layer_weights(src, v)
        o = mx.oracle_layer_weights(src, v, 0.01)
        got, best = _layer_cos(src, v, w.normalized), _layer_cos(src, v, o.normalized)
        worst = max(worst, max(b - g for g, b in zip(got, best)))
    elapsed = time.perf_counter() - start
    report(1, worst <= 1e-3 and elapsed <= 60,
           f"max oracle excess {worst:.2e} (<= 1e-3), {elapsed:.1f}s (<= 60s) over 100 instances")


def test_2_backprop_matches_finite_differences():
    rng = np.random.default_rng(2)
    start = time.perf_counter()
    worst, kinds, n = 0.0, set(), 0
    for variant in range(24):
        params, shape = random_net(rng, variant)
        kinds.update(layer.kind for layer in (*params.layers, *params.head_specs.values()))
        head = "a" if variant % 2 else "b"
        x = rng.random((3, *shape))
        n_cls = params.head_specs[head].out_size
        if variant % 4 == 3:
            targets, loss = rng.dirichlet(np.ones(n_cls), 3), "kl"
        else:
            targets, loss = rng.integers(0, n_cls, 3), "ce"
        grads = tn.backward(params, head, x, targets, loss)
        f = lambda: tn.loss_value(params, head, x, targets, loss)
        for theta, g in zip(params.trunk, grads.trunk_grads):
            worst = max(worst, rel_error(g, central_difference(f, theta)))
        worst = max(worst, rel_error(grads.head_grads[head], central_difference(f, params.heads[head])))
        n += 1
    elapsed = time.perf_counter() - start
    all_kinds = {"conv2d", "relu", "maxpool", "flatten", "dense", "softmax-head"}
    report(2, worst <= 1e-4 and elapsed <= 60 and kinds >= all_kinds and n >= 20,
           f"{n} nets, layer kinds {sorted(kinds)}, max rel error {worst:.2e} (<= 1e-4), {elapsed:.1f}s")


def test_3_single_source_gradmix_is_sgd():
    c = RunConfig(steps=100, eval_every=100, seed=3).to_dict()
    c["sources"] = c["sources"][:1]
    cfg = from_dict(c)
    data = T.prepare_data(cfg)
    traj = []
    for train in (T.train_source_only, lambda c, d, on_step: T.train_gradmix(c, d, on_step=on_step, fixed_eta=1.0)):
        snaps = []
        train(cfg, data, on_step=lambda step, p: snaps.append(p.flat().copy()))
        traj.append(snaps)
    same = len(traj[0]) == len(traj[1]) == 100 and all(np.array_equal(a, b) for a, b in zip(*traj))
    report(3, same, f"{len(traj[1])} steps compared, bit-identical={same}")


def test_4_adaptive_lr_law():
    rng = np.random.default_rng(4)
    worst, bounded, mid = 0.0, True, True
    for _ in range(1000):
        rho, beta, gamma = rng.uniform(-5, 5), rng.uniform(0, 20), rng.uniform(-5, 5)
        eta = mx.lr_scale(rho, mx.AdaptiveLrParams(beta, gamma))
        exact = 1 / (1 + mpmath.exp(-(mpmath.mpf(beta) * mpmath.mpf(rho) - mpmath.mpf(gamma))))
        worst = max(worst, abs(eta - float(exact)))
        bounded &= 0 < eta < 1
        mid &= mx.lr_scale(rho, mx.AdaptiveLrParams(beta, beta * rho)) == 0.5
    report(4, worst <= 1e-12 and bounded and mid,
           f"1000 triples, max error {worst:.1e} (<= 1e-12), in (0,1)={bounded}, midpoint exact={mid}")


def desk_config(seed):
    shifted = SourceConfig("shifted-5-9", [5, 6, 7, 8, 9], "digits-5-9", "same", ["invert", ["gaussian-noise", 0.2]],
                           2000)
    plain = SourceConfig("mnist-0-4", [0, 1, 2, 3, 4], "digits-0-4", "disjoint", [], 2000)
    return RunConfig(seed=seed, k_per_class=5, steps=DESK_STEPS, batch_size=DESK_BATCH, alpha=DESK_ALPHA,
                     eval_every=100, finetune_steps=200, sources=[shifted, plain])


@pytest.fixture(scope="session")
def desk():
    start = time.perf_counter()
    runs = []
    for seed in DESK_SEEDS:
        cfg = desk_config(seed)
        data = T.prepare_data(cfg)
        src, src_params = T.train_source_only(cfg, data)
        ft, _ = T.fine_tune(cfg, data, src_params)
        cells = T.grid_search(cfg, data, *DESK_GRID)
        gm = next(c.record for c in cells if (c.beta, c.gamma) == (cfg.beta, cfg.gamma))
        hard = T.pseudo_pipeline(cfg, data, cells, mode="hard", R=3)
        runs.append({"src": src, "ft": ft, "gm": gm, "hard": hard})
    return runs, time.perf_counter() - start


def _mean(runs, key):
    return float(np.mean([r[key].test_acc for r in runs]))


def test_5_desk_accuracy_ordering(desk):
    runs, elapsed = desk
    src, ft, gm = _mean(runs, "src"), _mean(runs, "ft"), _mean(runs, "gm")
    ok = gm >= ft >= src and gm - src >= 0.03 and elapsed <= DESK_BUDGET_S
    report(5, ok, f"mean test acc over {len(runs)} seeds: gradmix {gm:.4f}, fine-tune {ft:.4f}, "
                  f"source-only {src:.4f}; gap {100 * (gm - src):+.2f}pp (>= +3); {elapsed / 60:.1f} min (<= 30)")


def test_6_pseudo_label_quality(desk):
    runs, _ = desk
    precision_ok, parts = True, []
    for r in runs:
        s = r["hard"].stats
        best_member = max(s["member_acc_on_accepted"]) if s["n_accepted"] else float("nan")
        precision_ok &= s["n_accepted"] > 0 and s["precision"] >= best_member
        parts.append(f"{s['n_accepted']}/{s['n_unlabeled']} accepted, precision {s['precision']:.4f} "
                     f"vs best member {best_member:.4f}")
    hard = float(np.mean([r["hard"].record.test_acc for r in runs]))
    gm = _mean(runs, "gm")
    report(6, precision_ok and hard >= gm,
           f"{'; '.join(parts)}; hard-label gradmix {hard:.4f} vs gradmix {gm:.4f}")


def test_7_hyper_validation_auc(desk):
    runs, _ = desk
    src = float(np.mean([T.hv_loss_auc(r["src"], 20) for r in runs]))
    gm = float(np.mean([T.hv_loss_auc(r["gm"], 20) for r in runs]))
    report(7, gm < src, f"mean AUC over first 20 evaluations: gradmix {gm:.1f}, source-only {src:.1f}")


def test_8_overhead(desk):
    runs, _ = desk
    gm = float(np.mean([r["gm"].wall_per_batch for r in runs]))
    src = float(np.mean([r["src"].wall_per_batch for r in runs]))
    report(8, gm <= 2 * src, f"per-batch wall time at batch size {DESK_BATCH}: gradmix {1e3 * gm:.1f}ms, "
                             f"source-only {1e3 * src:.1f}ms, ratio {gm / src:.2f} (<= 2)")


PROPERTY_SUITES = {
    "MixWeights feasibility/normalisation": "tests/test_mixing.py::TestSolver::test_feasible_and_normalised",
    "split partition": "tests/test_datasets.py::TestSplits::test_exact_partition",
    "hard-label monotonicity": "tests/test_pseudolabel.py::TestHardLabel::test_raising_threshold_never_adds",
    "soft-label convexity": "tests/test_pseudolabel.py::TestSoftLabel::test_convex_combination",
    "determinism (batches)": "tests/test_trainer.py::test_batch_streams_are_seed_deterministic",
    "determinism (init)": "tests/test_trainer.py::test_network_init_is_seed_deterministic",
}


def test_9_property_suites():
    root = Path(__file__).resolve().parent.parent
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                           "--hypothesis-show-statistics", *PROPERTY_SUITES.values()],
                          cwd=root, capture_output=True, text=True)
    counts = [int(c) for c in re.findall(r"(\d+) passing examples?", proc.stdout)]
    failing = sum(int(c) for c in re.findall(r"(\d+) failing examples?", proc.stdout))
    ok = proc.returncode == 0 and len(counts) == len(PROPERTY_SUITES) and min(counts) >= 200 and failing == 0
    report(9, ok, f"{len(counts)} suites ({', '.join(PROPERTY_SUITES)}), passing cases per suite {counts} "
                  f"(each >= 200), exit {proc.returncode}")

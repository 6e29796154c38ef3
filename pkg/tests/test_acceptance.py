"""The twelve acceptance criteria, each printed as one PASS/FAIL line with its raw numbers.

Trained models are shared across criteria (session fixtures). The summary
lines are repeated at the end of the pytest run by ``conftest.py``.
"""

import time
import zlib
from pathlib import Path

import numpy as np
import pytest

from capsprobe import attack as A
from capsprobe import explain as E
from capsprobe import tensor as T
from capsprobe.capsnet import (
    AffCapsNet, CapsConfig, DRCapsNet, dynamic_routing, margin_loss, margin_loss_from_lengths,
)
from capsprobe.cli import main as cli_main
from capsprobe.convnet import ConvNet, ConvNetConfig
from capsprobe.gracapsnet import GraCapsConfig, GraCapsNet, build_adjacency, gracaps_pool
from capsprobe.harness import bench
from capsprobe.harness.data import synth_shapes
from capsprobe.models import TRAIN_DEFAULTS, build_model
from capsprobe.train import accuracy, train
from capsprobe.vit import ViT, ViTConfig, attention_block, smooth_attention

from helpers import ACCEPTANCE, gradcheck, weighted_sum
from test_capsnet import scripted_routing
from test_tensor import OPS

TRAIN_N, TEST_N = 1000, 200
TRAIN_SEED, TEST_SEED = 0, 1000
PATCH_SEEDS = (0, 1, 2)
POSITION_STEPS = 50  # per-slot budget of the 16-position grid; the headline patch attack uses the full 250


def record(number, ok, detail):
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    assert ok, line


def fd_model_check(model, x, y, rng, h=1e-5):
    """Worst relative error over one sampled entry of every parameter tensor."""
    T.backward(model.loss(T.Tensor(x), y))
    worst = 0.0
    for name, p in model.named_parameters().items():
        idx = np.unravel_index(int(rng.integers(p.size)), p.shape)
        analytic = p.grad[idx]
        old = p.data[idx]
        with T.no_grad():
            p.data[idx] = old + h
            fp = model.loss(T.Tensor(x), y).item()
            p.data[idx] = old - h
            fm = model.loss(T.Tensor(x), y).item()
        p.data[idx] = old
        num = (fp - fm) / (2 * h)
        worst = max(worst, abs(num - analytic) / max(abs(num), abs(analytic), 1e-6))
        p.grad = None
    return worst


# ---------------------------------------------------------------- shared trained models


@pytest.fixture(scope="session")
def shapes():
    return synth_shapes(TRAIN_N, seed=TRAIN_SEED), synth_shapes(TEST_N, seed=TEST_SEED)


@pytest.fixture(scope="session")
def trained(shapes):
    """Each model kind trained once on the 1000-image set: {kind: (model, train_report)}."""
    train_set, _ = shapes
    out = {}
    for kind in ("convnet", "capsnet", "affcapsnet", "gracapsnet", "vit"):
        d = TRAIN_DEFAULTS[kind]
        model = build_model(kind, seed=TRAIN_SEED)
        res = train(model, train_set, epochs=d["epochs"], lr=d["lr"], batch=d["batch"], seed=TRAIN_SEED,
                    stop_at=0.99, time_limit=600)
        out[kind] = (model, res)
    return out


# ---------------------------------------------------------------- 1-5: exact property suites


def test_criterion_01_gradient_correctness():
    t0 = time.perf_counter()
    worst = {}
    for name, (f, shape_list) in OPS.items():
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        worst[name] = gradcheck(f, [rng.uniform(-1, 1, s) for s in shape_list])
    rng = np.random.default_rng(1)
    extra = {
        "matmul": (lambda a, b: weighted_sum(a @ b), [(3, 4), (4, 2)]),
        "conv2d-s1": (lambda x, w, b: weighted_sum(T.conv2d(x, w, b, stride=1)), [(2, 2, 6, 6), (3, 2, 3, 3), (3,)]),
        "conv2d-s2": (lambda x, w: weighted_sum(T.conv2d(x, w, None, stride=2)), [(1, 2, 7, 7), (2, 2, 3, 3)]),
        "max_pool": (lambda x: weighted_sum(T.max_pool(x, 2)), [(2, 2, 4, 4)]),
        "routing-k3": (lambda v: weighted_sum(dynamic_routing(v, 3, differentiable=True)[0]), [(2, 4, 3, 3)]),
        "margin_loss": (lambda v: margin_loss(v, np.array([0, 2])), [(2, 3, 4)]),
        "graph-pool": (lambda u, t, w: weighted_sum(gracaps_pool(u, t, w, build_adjacency(2))),
                       [(1, 2, 4, 3), (2, 3, 3), (2, 3, 2)]),
    }
    for name, (f, shape_list) in extra.items():
        worst[name] = gradcheck(f, [rng.uniform(-1, 1, s) for s in shape_list])
    names = ["wq", "wk", "wv", "ln1.g", "ln1.b", "ln2.g", "ln2.b", "fc1.w", "fc1.b", "fc2.w", "fc2.b"]
    shapes_ = [(4, 4)] * 3 + [(4,)] * 4 + [(4, 5), (5,), (5, 4), (4,)]
    worst["attention_block"] = gradcheck(
        lambda s, *ps: weighted_sum(attention_block(s, dict(zip(names, ps)), 1.5)[0]),
        [rng.uniform(-1, 1, (1, 3, 4))] + [rng.uniform(-1, 1, s) for s in shapes_])
    caps = CapsConfig(input_shape=(1, 10, 10), conv1=(4, 3, 1), conv2=(8, 3, 2), d_in=4, d_out=4, decoder_hidden=8,
                      route_grad=True)
    models = {
        "convnet": (ConvNet(ConvNetConfig(input_shape=(1, 14, 14), conv1=(3, 3, 1), conv2=(4, 3, 1), hidden=(6,)), 0),
                    (1, 14, 14)),
        "capsnet": (DRCapsNet(caps, seed=0), (1, 10, 10)),
        "affcapsnet": (AffCapsNet(caps, seed=0), (1, 10, 10)),
        "gracapsnet": (GraCapsNet(GraCapsConfig(**{k: getattr(caps, k) for k in
                                                   ("input_shape", "conv1", "conv2", "d_in", "d_out", "decoder_hidden")}),
                                  seed=0), (1, 10, 10)),
        "vit": (ViT(ViTConfig(input_shape=(1, 14, 14), patch=7, dim=8, depth=2, mlp_hidden=12), seed=0), (1, 14, 14)),
    }
    for kind, (model, shape) in models.items():
        x = rng.uniform(0, 1, (2, *shape))
        worst[f"model:{kind}"] = fd_model_check(model, x, np.array([0, 2]), rng)
    elapsed = time.perf_counter() - t0
    name, err = max(worst.items(), key=lambda kv: kv[1])
    record(1, err < 1e-4 and elapsed < 60,
           f"{len(worst)} ops/models, worst rel err {err:.2e} ({name}), tol 1e-4, {elapsed:.1f}s of 60s")


def test_criterion_02_routing_invariants():
    rng = np.random.default_rng(2)
    worst_row = 0.0
    max_len = 0.0
    for K in (1, 3, 5):
        votes = rng.standard_normal((4, 9, 3, 5)) * 2
        v, _, hist = dynamic_routing(T.Tensor(votes), K, return_history=True)
        worst_row = max(worst_row, float(np.max(np.abs(hist.sum(-1) - 1.0))))
        max_len = max(max_len, float(np.linalg.norm(v.data, axis=-1).max()))
    votes = rng.standard_normal((2, 4, 3, 2))
    v, _, hist = dynamic_routing(T.Tensor(votes), 3, return_history=True)
    oracle = 0.0
    for b in range(2):
        v_ref, h_ref = scripted_routing(votes[b].tolist(), 3)
        oracle = max(oracle, float(np.abs(v.data[b] - np.array(v_ref)).max()),
                     float(np.abs(hist[:, b] - np.array(h_ref)).max()))
    record(2, worst_row <= 1e-9 and max_len < 1 and oracle <= 1e-12,
           f"max |row sum - 1| {worst_row:.1e} (K=1,3,5), max length {max_len:.4f}, oracle diff {oracle:.1e}")


def test_criterion_03_margin_closed_forms():
    cases = [([0.9, 0.1], 0.0), ([0.0, 0.0], 0.81), ([0.5, 0.5], 0.24)]
    got = [margin_loss_from_lengths(lengths, 0) for lengths, _ in cases]
    via_tensor = [margin_loss(T.Tensor(np.array([[n, 0.0] for n in lengths])), 0).item() for lengths, _ in cases]
    diffs = [max(abs(a - e), abs(b - e)) for a, b, (_, e) in zip(got, via_tensor, cases)]
    record(3, max(diffs) <= 1e-15, f"losses {[round(g, 15) for g in got]} vs (0, 0.81, 0.24), max diff {max(diffs):.1e}")


def test_criterion_04_lrp_conservation():
    cfg = ConvNetConfig(input_shape=(1, 14, 14), conv1=(3, 3, 1), conv2=(4, 3, 1), hidden=(8,), bias=False)
    worst = 0.0
    dead = 0
    for seed in range(100):
        net = ConvNet(cfg, seed=seed)
        x = np.random.default_rng(seed).uniform(0, 1, (1, 14, 14))
        r = E.lrp(net, x, seed % 3, eps=0.0)
        gap = abs(r.relevance.sum() - r.score)
        if r.score == 0:  # all units dead: conservation means the map is exactly zero
            dead += 1
            worst = max(worst, gap)
        else:
            worst = max(worst, gap / abs(r.score))
    record(4, worst <= 1e-6, f"100 seeds, worst |sum r - S|/|S| = {worst:.2e} (tol 1e-6); "
                             f"{dead} zero-score nets checked absolutely")


def test_criterion_05_clrp_identity():
    cfg = ConvNetConfig(input_shape=(1, 14, 14), conv1=(3, 3, 1), conv2=(4, 3, 1), hidden=(8,))
    sym_max = 0.0
    negatives = 0
    maps = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        net = ConvNet(cfg, seed=seed)
        x = rng.uniform(0, 1, (1, 14, 14))
        for c in range(3):
            negatives += int(np.sum(E.clrp(net, x, c).relevance < 0))
            maps += 1
        w, b = net.fcs[-1]
        w.data[:] = w.data[:, :1]
        b.data[:] = b.data[0]
        sym_max = max(sym_max, float(np.abs(E.clrp(net, x, seed % 3).relevance).max()))
    record(5, sym_max == 0.0 and negatives == 0,
           f"class-symmetric max |CLRP| = {sym_max!r} over 20 nets; negative entries {negatives} in {maps} maps")


# ---------------------------------------------------------------- 6: training smoke


def test_criterion_06_training_smoke(trained, shapes):
    train_set, _ = shapes
    parts = []
    ok = True
    for kind, (model, res) in trained.items():
        acc, c, n = accuracy(model, train_set.images, train_set.labels)
        ok &= acc >= 0.95 and res.seconds < 600
        parts.append(f"{kind} {c}/{n}={acc:.3f} in {res.seconds:.0f}s")
    record(6, ok, "; ".join(parts) + " (need >=0.95 within 600s)")


# ---------------------------------------------------------------- 7: discriminativeness


@pytest.fixture(scope="session")
def two_object():
    tr = synth_shapes(TRAIN_N, seed=TRAIN_SEED, two_object=True)
    te = synth_shapes(TEST_N, seed=TEST_SEED, two_object=True)
    d = TRAIN_DEFAULTS["convnet"]
    net = build_model("convnet", seed=TRAIN_SEED)
    train(net, tr, epochs=d["epochs"], lr=d["lr"], batch=d["batch"], seed=TRAIN_SEED, stop_at=0.99)
    return net, te


def test_criterion_07_clrp_more_discriminative_than_lrp(two_object):
    net, te = two_object
    R_lrp, _ = E.lrp_batch(net, te.images, te.labels)
    R_clrp, _ = E.clrp_batch(net, te.images, te.labels)
    boxes = [tuple(b) for b in te.boxes]
    _, hits_l, n = E.pointing_game(list(R_lrp), boxes)
    _, hits_c, _ = E.pointing_game(list(R_clrp), boxes)
    record(7, hits_c > hits_l, f"pointing game on the labelled object: CLRP {hits_c}/{n}, LRP {hits_l}/{n} "
                               "(need CLRP > LRP)")


def test_clrp_ablation_degrades_faster_than_random(two_object):
    """Supplementary: area under the CLRP ablation curve <= area under a random-order curve."""
    net, te = two_object
    clrp_area = rand_area = 0.0
    for i in range(20):
        x, y = te.images[i], int(te.labels[i])
        clrp_area += E.curve_area(E.ablation_curve(net, x, E.clrp(net, x, y)))
        rand_area += E.curve_area(E.ablation_curve(net, x, E.random_map((28, 28), i, y)))
    print(f"ablation area over 20 images: CLRP {clrp_area:.3f}, random {rand_area:.3f}")
    assert clrp_area <= rand_area


# ---------------------------------------------------------------- 8: vote vs caps attack


def test_criterion_08_vote_attack_at_least_caps_attack(trained, shapes):
    model, _ = trained["capsnet"]
    _, test_set = shapes
    x, y = test_set.images, test_set.labels
    ok = True
    parts = []
    for eps in (0.05, 0.1):
        budget = A.AttackBudget(eps, eps / 4, steps=10)
        _, k_caps, d = A.success_rate(model, x, y, A.caps_attack(model, x, y, budget, seed=0))
        _, k_vote, _ = A.success_rate(model, x, y, A.vote_attack(model, x, y, budget, seed=0))
        ok &= k_vote >= k_caps
        parts.append(f"eps={eps}: vote {k_vote}/{d}, caps {k_caps}/{d}")
    record(8, ok, "; ".join(parts) + " (T=10, alpha=eps/4, seed 0)")


# ---------------------------------------------------------------- 9: parameter accounting


def test_criterion_09_parameter_accounting():
    cfg = CapsConfig()
    dr, aff = DRCapsNet(cfg, seed=0), AffCapsNet(cfg, seed=0)
    gra = GraCapsNet(GraCapsConfig(**{k: getattr(cfg, k) for k in
                                      ("input_shape", "conv1", "conv2", "d_in", "d_out", "num_classes")}), seed=0)
    N = cfg.num_primary()
    exact = dr.transform_params() == N * aff.transform_params()
    record(9, exact and gra.num_parameters() < dr.num_parameters(),
           f"transform params DR {dr.transform_params()} = N({N}) x Aff {aff.transform_params()}: {exact}; "
           f"total GraCaps {gra.num_parameters()} < DR {dr.num_parameters()}")


# ---------------------------------------------------------------- 10: patch robustness


def patch_run(seed, trained, shapes):
    if seed == TRAIN_SEED:
        cnn, vit = trained["convnet"][0], trained["vit"][0]
        test_set = shapes[1]
    else:
        tr = synth_shapes(TRAIN_N, seed=seed)
        test_set = synth_shapes(TEST_N, seed=seed + TEST_SEED)
        models = []
        for kind in ("convnet", "vit"):
            d = TRAIN_DEFAULTS[kind]
            m = build_model(kind, seed=seed)
            train(m, tr, epochs=d["epochs"], lr=d["lr"], batch=d["batch"], seed=seed, stop_at=0.99)
            models.append(m)
        cnn, vit = models
    models = {"convnet": cnn, "vit": vit, "vit-tau2": smooth_attention(vit, 2.0)}
    rep = bench.patch_benchmark(models, test_set, A.aligned_patches(28, 28, 7), [bench.PatchBudget()], seed=seed,
                                severities=(3,), position_budget=bench.PatchBudget(POSITION_STEPS))
    return rep


def test_criterion_10_patch_robustness(trained, shapes):
    label = bench.PatchBudget().label
    pos_label = bench.PatchBudget(POSITION_STEPS).label
    votes = {k: 0 for k in "abcd"}
    lines = []
    for seed in PATCH_SEEDS:
        rep = patch_run(seed, trained, shapes)
        drop = {m: bench.corruption_drop(rep, m, 3) for m in ("convnet", "vit")}
        succ = {m: rep.get("patch-success", m, label) for m in ("convnet", "vit", "vit-tau2")}
        var = {m: rep.get("position-variance", m, pos_label)[0] for m in ("convnet", "vit")}
        clean = {m: rep.get("accuracy", m, "clean")[0] for m in ("convnet", "vit")}
        checks = {"a": drop["vit"] <= drop["convnet"], "b": succ["vit"][0] >= succ["convnet"][0],
                  "c": var["vit"] <= var["convnet"], "d": succ["vit-tau2"][0] <= succ["vit"][0]}
        for k, v in checks.items():
            votes[k] += v
        fmt = lambda s: f"{s[0]:.3f} of {s[1]}"
        line = (f"seed {seed}: clean cnn {clean['convnet']:.3f} vit {clean['vit']:.3f} | "
                f"(a) drop vit {drop['vit']:+.4f} <= cnn {drop['convnet']:+.4f} {checks['a']} | "
                f"(b) success vit {fmt(succ['vit'])} >= cnn {fmt(succ['convnet'])} {checks['b']} | "
                f"(c) variance vit {var['vit']:.5f} <= cnn {var['convnet']:.5f} {checks['c']} | "
                f"(d) success tau2 {fmt(succ['vit-tau2'])} <= tau1 {fmt(succ['vit'])} {checks['d']}")
        print(line)
        lines.append(line)
    need = len(PATCH_SEEDS) // 2 + 1
    summary = ", ".join(f"({k}) {v}/{len(PATCH_SEEDS)}" for k, v in votes.items())
    record(10, all(v >= need for v in votes.values()),
           f"majority over seeds {PATCH_SEEDS}: {summary}; 200 test images, severity 3, "
           f"250-step patches, {POSITION_STEPS}-step position grid")


# ---------------------------------------------------------------- 11: constraints


def test_criterion_11_constraint_enforcement(trained, shapes):
    """Runs after 8 and 10 in file order, so the counter covers their attacks too."""
    model, _ = trained["convnet"]
    _, test_set = shapes
    x, y = test_set.images[:50], test_set.labels[:50]
    A.fgsm(model, x, y, 0.1)
    A.pgd(model, x, y, A.AttackBudget(0.1, 0.025, 10, random_start=True), seed=3)
    A.patch_attack(model, x, y, A.PatchSpec(3, 5, 8, 6), steps=20)
    A.patch_corrupt(x, A.PatchSpec(0, 0, 7, 7), "blackout", 5, seed=0)
    c = A.CONSTRAINTS
    record(11, c.violations == 0 and c.checked > 0,
           f"{c.checked - c.violations}/{c.checked} adversarial outputs satisfied their constraint set and [0, 1]")


# ---------------------------------------------------------------- 12: determinism


def _cli(*argv):
    assert cli_main([str(a) for a in argv]) == 0, argv


def _snapshot(d):
    out = {}
    for p in sorted(Path(d).iterdir()):
        data = p.read_bytes()
        if p.name == "manifest.txt":  # records the (differing) output directory
            data = b"\n".join(l for l in data.splitlines() if not l.startswith(b"config.out ="))
        out[p.name] = data
    return out


def test_criterion_12_determinism(tmp_path):
    common = ["--seed", 5, "--n", 40]
    ckpt = {}
    runs = []
    for kind in ("convnet", "capsnet", "gracapsnet", "vit"):
        runs.append((f"train-{kind}", ["train", "--model", kind, *common, "--epochs", 1]))
    for name, argv in runs:
        _cli(*argv, "--out", tmp_path / "ckpt" / name)
    for kind in ("convnet", "capsnet", "gracapsnet", "vit"):
        ckpt[kind] = tmp_path / "ckpt" / f"train-{kind}" / "model.cprb"
    with_ckpt = lambda kind: ["--model", kind, "--checkpoint", ckpt[kind], *common]
    runs += [
        ("eval", ["eval", *with_ckpt("vit"), "--count", 20]),
        ("explain-lrp", ["explain", *with_ckpt("convnet"), "--method", "lrp", "--data", "synth2"]),
        ("explain-clrp", ["explain", *with_ckpt("convnet"), "--method", "clrp", "--data", "synth2"]),
        ("explain-graattn", ["explain", *with_ckpt("gracapsnet"), "--method", "graattn"]),
        ("explain-rollout", ["explain", *with_ckpt("vit"), "--method", "rollout"]),
        ("attack-fgsm", ["attack", *with_ckpt("convnet"), "--method", "fgsm", "--count", 10]),
        ("attack-pgd", ["attack", *with_ckpt("convnet"), "--method", "pgd", "--random-start", "--count", 10,
                        "--steps", 3]),
        ("attack-caps", ["attack", *with_ckpt("capsnet"), "--method", "caps", "--count", 10, "--steps", 2]),
        ("attack-vote", ["attack", *with_ckpt("capsnet"), "--method", "vote", "--count", 10, "--steps", 2]),
        ("attack-patch", ["attack", *with_ckpt("vit"), "--method", "patch", "--patch", "7,7,7,7", "--count", 10,
                          "--steps", 3]),
        ("bench-affine", ["bench-affine", "--models", f"convnet={ckpt['convnet']}", f"vit={ckpt['vit']}",
                          *common, "--count", 10]),
        ("bench-patch", ["bench-patch", "--models", f"convnet={ckpt['convnet']}", f"vit={ckpt['vit']}",
                         *common, "--count", 10, "--steps", 2, "--position-steps", 1, "--attn-temp", 2]),
        ("inspect", ["inspect", *with_ckpt("vit")]),
    ]
    differing = []
    files = 0
    for name, argv in runs:
        snaps = []
        for rep in ("a", "b"):
            d = tmp_path / rep / name
            _cli(*argv, "--out", d)
            snaps.append(_snapshot(d))
        files += len(snaps[0])
        if snaps[0] != snaps[1]:
            differing.append(name)
    record(12, not differing, f"{len(runs)} subcommand runs x2, {files} files compared; differing: {differing or 'none'}")

"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s`. The paper-scale accuracy
numbers need real CLIP features and are covered by the optional criterion
13 (documented, skipped here); everything else is property-based at desk
scale with stated tolerances and runtime budgets.
"""

import json
import time

import numpy as np
import pytest
from click.testing import CliRunner

from conftest import random_orthogonal
from lfa.assignment import SinkhornConfig, harden, sinkhorn, ulfa
from lfa.cli import main as cli_main
from lfa.core import (FeatureMatrix, LabeledFeatures, LinearMap,
                      PrototypeMatrix, identity_map, l2_normalize_rows,
                      make_rng, normalize_rows)
from lfa.data import (ArchiveManifest, SynthSpec, _sample_prototypes,
                      read_archive, read_npy, synth_generate, synth_split,
                      write_archive, write_npy)
from lfa.errors import BadMagic, HeaderParse, LabelOutOfRange, ShapeMismatch
from lfa.evaluate import classify, gt_rank, top1_accuracy
from lfa.pipeline import fit_supervised
from lfa.procrustes import beta_procrustes, orthogonal_procrustes
from lfa.refine import (RefineConfig, alpha_schedule, arerank_grad,
                        arerank_loss, baseline_loss, ema_update, init_ema,
                        refine)


def announce(number: int, name: str, detail: str = ""):
    suffix = f"  [{detail}]" if detail else ""
    print(f"ACCEPTANCE {number:02d} {name}: PASS{suffix}")


def fd_gradient(loss_fn, w, h=1e-5):
    g = np.zeros_like(w)
    for i in range(w.shape[0]):
        for j in range(w.shape[1]):
            wp = w.copy()
            wm = w.copy()
            wp[i, j] += h
            wm[i, j] -= h
            g[i, j] = (loss_fn(wp) - loss_fn(wm)) / (2 * h)
    return g


def test_criterion_01_orthogonal_procrustes_correctness():
    rng = make_rng(101)
    t0 = time.perf_counter()
    for _ in range(100):
        d = int(rng.integers(3, 9))
        n = int(rng.integers(d, 4 * d + 1))
        x = l2_normalize_rows(rng.standard_normal((n, d)))

        # planted-rotation recovery at zero noise
        q = random_orthogonal(rng, d)
        w_rec = orthogonal_procrustes(x, x.data @ q)
        assert np.linalg.norm(w_rec.data - q) < 1e-5

        # orthogonality and optimality against 1000 random orthogonal maps
        target = rng.standard_normal((n, d))
        w = orthogonal_procrustes(x, target)
        assert np.linalg.norm(w.data.T @ w.data - np.eye(d)) < 1e-6
        ours = np.linalg.norm(x.data @ w.data - target) ** 2
        gauss = rng.standard_normal((1000, d, d))
        qs, rs = np.linalg.qr(gauss)
        qs = qs * np.sign(np.einsum("bii->bi", rs))[:, None, :]
        objectives = np.linalg.norm(x.data @ qs - target[None], axis=(1, 2)) ** 2
        assert ours <= objectives.min() + 1e-9
    elapsed = time.perf_counter() - t0
    assert elapsed < 10.0, f"took {elapsed:.1f}s"
    announce(1, "orthogonal procrustes correctness", f"{elapsed:.1f}s")


def test_criterion_02_beta_identity():
    rng = make_rng(102)
    x = l2_normalize_rows(rng.standard_normal((20, 6)))
    w_op = orthogonal_procrustes(x, rng.standard_normal((20, 6)))
    eye = np.eye(6)
    for beta in (0.0, 0.25, 1.0):
        out = beta_procrustes(w_op, beta)
        # closed form, exact floating arithmetic
        assert np.array_equal(out.data, w_op.data - beta * (w_op.data - eye))
        # one explicit gradient-descent step on the identity-pull penalty
        grad = beta * (w_op.data - eye)
        assert np.array_equal(out.data, w_op.data - grad)
    announce(2, "beta equals one gradient step, exact")


def test_criterion_03_gradient_oracle():
    rng = make_rng(103)
    t0 = time.perf_counter()
    checked = {"arerank": 0, "contrastive": 0, "triplet": 0, "csls": 0}
    while min(checked.values()) < 20:
        d = int(rng.integers(2, 9))
        c = int(rng.integers(2, 7))
        n = int(rng.integers(4, 16))
        x = l2_normalize_rows(rng.standard_normal((n, d)))
        y = PrototypeMatrix(normalize_rows(rng.standard_normal((c, d))),
                            [f"c{i}" for i in range(c)])
        labels = rng.integers(0, c, n)
        w = np.eye(d) + 0.3 * rng.standard_normal((d, d))

        for variant in checked:
            if variant == "arerank":
                loss_fn = lambda m: arerank_loss(x, labels, LinearMap(m), y)
                analytic = arerank_grad(x, labels, LinearMap(w), y)
            else:
                loss_fn = lambda m: baseline_loss(variant, x, labels,
                                                  LinearMap(m), y)[0]
                analytic = baseline_loss(variant, x, labels, LinearMap(w), y)[1]
            fd = fd_gradient(loss_fn, w)
            denom = np.linalg.norm(fd)
            if denom < 1e-8:
                continue  # all hinges inactive; nothing to compare
            assert np.linalg.norm(analytic - fd) / denom < 1e-4, variant
            checked[variant] += 1
    elapsed = time.perf_counter() - t0
    assert elapsed < 30.0, f"took {elapsed:.1f}s"
    announce(3, "analytic gradients match finite differences",
             f"{elapsed:.1f}s, {checked}")


def test_criterion_04_arerank_zero_at_target():
    rng = make_rng(104)
    for trial in range(5):
        y = PrototypeMatrix(_sample_prototypes(rng, 8, 12),
                            [f"c{i}" for i in range(8)])
        labels = np.repeat(np.arange(8), 3)
        x = FeatureMatrix(y.data[labels])  # X W = P Y exactly at W = I
        w = identity_map(12)
        assert arerank_loss(x, labels, w, y) == 0.0
        assert np.array_equal(arerank_grad(x, labels, w, y), np.zeros((12, 12)))
    announce(4, "zero loss and zero gradient at perfect alignment")


def test_criterion_05_sinkhorn_feasibility():
    rng = make_rng(105)
    cfg = SinkhornConfig()
    for _ in range(50):
        n = int(rng.integers(6, 50))
        c = int(rng.integers(2, 10))
        d = int(rng.integers(3, 12))
        x = l2_normalize_rows(rng.standard_normal((n, d)))
        y = PrototypeMatrix(normalize_rows(rng.standard_normal((c, d))),
                            [f"c{i}" for i in range(c)])
        p = sinkhorn(x, identity_map(d), y, cfg)
        assert np.abs(p.data.sum(axis=1) - 1.0).max() < 1e-6
        assert np.abs(p.data.sum(axis=0) - n / c).max() < 1e-3

    # 2x2 low-epsilon plan against the brute-force optimal permutation
    matched = 0
    for trial in range(20):
        trial_rng = make_rng(1050 + trial)
        x = l2_normalize_rows(trial_rng.standard_normal((2, 6)))
        y = PrototypeMatrix(normalize_rows(trial_rng.standard_normal((2, 6))),
                            ["a", "b"])
        cost = 1.0 - x.data @ y.data.T
        straight = cost[0, 0] + cost[1, 1]
        crossed = cost[0, 1] + cost[1, 0]
        if abs(straight - crossed) < 1e-2:
            continue
        p = sinkhorn(x, identity_map(6), y,
                     SinkhornConfig(epsilon=0.01, iters=500))
        _, labels = harden(p)
        expect = [0, 1] if straight < crossed else [1, 0]
        assert list(labels) == expect
        matched += 1
    assert matched >= 10
    announce(5, "sinkhorn marginals and 2x2 transport oracle",
             f"{matched} permutation checks")


def test_criterion_06_supervised_end_to_end():
    t0 = time.perf_counter()
    spec = SynthSpec(C=20, d=32, shots_per_class=16, noise_std=0.05,
                     planted_map="random_orthogonal", seed=106)
    train, test, y, _ = synth_split(spec, 8)

    w_op = orthogonal_procrustes(train.features, y.data[train.labels])
    _, preds_op = classify(test.features, w_op, y, 0.01)
    acc_procrustes = top1_accuracy(preds_op, test.labels)

    cfg = RefineConfig(steps=150, seed=1)
    w, _, _ = fit_supervised(train.features, train.labels, y, 0.5, cfg)
    _, preds = classify(test.features, w, y, 0.01)
    acc_full = top1_accuracy(preds, test.labels)

    assert acc_full >= 0.95
    assert acc_full >= acc_procrustes
    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0, f"took {elapsed:.1f}s"
    announce(6, "supervised synthetic end to end",
             f"full {acc_full:.3f} >= procrustes {acc_procrustes:.3f}, {elapsed:.1f}s")


def test_criterion_07_unsupervised_end_to_end():
    # planted identity keeps the zero-shot baseline meaningful, mirroring
    # the label-free gains over an already-informative starting alignment;
    # a uniformly random planted rotation makes the initial assignment
    # uninformative and the alternation provably stalls (see ledger)
    spec = SynthSpec(C=20, d=32, shots_per_class=16, noise_std=0.05,
                     planted_map="identity", seed=107)
    data, y, _ = synth_generate(spec)
    sk = SinkhornConfig()
    cfg = RefineConfig(steps=60, seed=2)
    w = ulfa(data.features, y, n=1, beta=0.5, refine_cfg=cfg, sk_cfg=sk)
    _, assigned = harden(sinkhorn(data.features, w, y, sk))
    acc = (assigned == data.labels).mean()
    assert acc >= 0.90
    announce(7, "unsupervised synthetic end to end", f"assignment acc {acc:.3f}")


def test_criterion_08_hubness_direction():
    # common-offset embeddings (modality-gap structure) plus one prototype
    # dragged towards the embedding centroid create a genuine hub
    rng = make_rng(108)
    c, d, shots = 20, 32, 16
    y_raw = _sample_prototypes(rng, c, d)
    offset = rng.standard_normal(d)
    offset /= np.linalg.norm(offset)
    labels = np.repeat(np.arange(c), shots)
    x = l2_normalize_rows(y_raw[labels] + offset
                          + 0.05 * rng.standard_normal((c * shots, d)))
    centroid = x.data.mean(axis=0)
    centroid /= np.linalg.norm(centroid)
    hubbed = y_raw.copy()
    hubbed[0] = 0.2 * hubbed[0] + 0.8 * centroid
    hubbed[0] /= np.linalg.norm(hubbed[0])
    y = PrototypeMatrix(hubbed, [f"c{i}" for i in range(c)])

    w_op = orthogonal_procrustes(x, y.data[labels])
    w_beta = beta_procrustes(w_op, 0.9)
    rank_before = gt_rank(x, w_beta, y, labels).mean()

    cfg = RefineConfig(steps=150, seed=3)
    w, _, _ = refine(w_beta, LabeledFeatures(x, labels), y, cfg)
    rank_after = gt_rank(x, w, y, labels).mean()

    assert rank_before > 1.02, "instance failed to induce a hub"
    assert rank_after < rank_before
    announce(8, "refinement reduces hubness",
             f"mean gt rank {rank_before:.3f} -> {rank_after:.3f}")


def test_criterion_09_ema_endpoints():
    rng = make_rng(109)
    # alpha == 1 keeps identity
    state = init_ema(4, 10)
    for _ in range(6):
        state = ema_update(state, LinearMap(rng.standard_normal((4, 4))),
                           alpha=1.0)
    assert np.array_equal(state.w_tt.data, np.eye(4))
    # alpha == 0 tracks W exactly
    state = init_ema(4, 10)
    for _ in range(3):
        w = LinearMap(rng.standard_normal((4, 4)))
        state = ema_update(state, w, alpha=0.0)
        assert np.array_equal(state.w_tt.data, w.data)
    # schedule endpoints
    assert alpha_schedule(0, 100) == pytest.approx(0.9)
    for t in (50, 75, 100):
        assert alpha_schedule(t, 100) == 1.0
    announce(9, "EMA endpoints and alpha schedule")


def test_criterion_10_cmd_fit_determinism(tmp_path):
    runner = CliRunner()
    out = tmp_path / "synth"
    result = runner.invoke(cli_main, ["synth", "--classes", "8", "--dim", "12",
                                      "--shots", "8", "--seed", "5",
                                      "--out-dir", str(out)])
    assert result.exit_code == 0, result.output
    args = ["fit", str(out / "train"), str(out / "prototypes"),
            "--beta", "0.5", "--steps", "25", "--seed", "9", "--ema"]
    for name in ("a", "b"):
        result = runner.invoke(cli_main,
                               args + ["--out", str(tmp_path / f"{name}.npy")])
        assert result.exit_code == 0, result.output
    assert (tmp_path / "a.npy").read_bytes() == (tmp_path / "b.npy").read_bytes()
    assert (tmp_path / "a_tt.npy").read_bytes() == (tmp_path / "b_tt.npy").read_bytes()
    announce(10, "cmd_fit runs are bitwise reproducible")


def test_criterion_11_archive_round_trip(tmp_path):
    rng = make_rng(111)
    raw = rng.standard_normal((10, 6)).astype(np.float32)
    feats = l2_normalize_rows(raw.astype(np.float64))
    manifest = ArchiveManifest(labels=list(np.arange(10) % 3),
                               class_names=["a", "b", "c"])
    write_archive(feats, manifest, tmp_path / "one")
    write_archive(feats, manifest, tmp_path / "two")
    assert (tmp_path / "one.npy").read_bytes() == (tmp_path / "two.npy").read_bytes()
    assert (tmp_path / "one.json").read_bytes() == (tmp_path / "two.json").read_bytes()

    # float32 payload is preserved exactly
    stored = read_npy(tmp_path / "one.npy")
    np.testing.assert_array_equal(stored,
                                  feats.data.astype(np.float32))
    loaded, meta = read_archive(tmp_path / "one")
    assert meta.labels == manifest.labels

    # malformed inputs carry stable names
    bad = tmp_path / "bad.npy"
    bad.write_bytes(b"JUNKJUNK" + b"\x00" * 32)
    with pytest.raises(BadMagic):
        read_npy(bad)
    header = b"{'descr': broken"
    bad.write_bytes(b"\x93NUMPY\x01\x00" + len(header).to_bytes(2, "little") + header)
    with pytest.raises(HeaderParse):
        read_npy(bad)
    write_npy(tmp_path / "trunc.npy", feats.data, "<f4")
    blob = (tmp_path / "trunc.npy").read_bytes()
    (tmp_path / "trunc.npy").write_bytes(blob[:-4])
    with pytest.raises(ShapeMismatch):
        read_npy(tmp_path / "trunc.npy")
    doc = json.loads((tmp_path / "one.json").read_text())
    doc["labels"] = [3] * 10  # == C
    (tmp_path / "one.json").write_text(json.dumps(doc))
    with pytest.raises(LabelOutOfRange):
        read_archive(tmp_path / "one")
    announce(11, "archive round trip lossless, malformed inputs rejected")


def test_criterion_12_beta_sensitivity():
    # planted identity mirrors the near-aligned regime in which the choice
    # of beta is reported to be unimportant
    spec = SynthSpec(C=20, d=32, shots_per_class=16, noise_std=0.1,
                     planted_map="identity", seed=112)
    train, test, y, _ = synth_split(spec, 8)
    accs = []
    for beta in (0.6, 0.7, 0.8, 0.9):
        cfg = RefineConfig(steps=100, seed=4)
        w, _, _ = fit_supervised(train.features, train.labels, y, beta, cfg)
        _, preds = classify(test.features, w, y, 0.01)
        accs.append(top1_accuracy(preds, test.labels))
    spread = max(accs) - min(accs)
    assert spread < 0.02, f"accuracies {accs}"
    announce(12, "final accuracy robust to beta",
             f"accs {['%.3f' % a for a in accs]}, spread {spread:.4f}")


@pytest.mark.skip(reason="needs user-supplied real CLIP ViT-B/16 ImageNet "
                         "features; procedure documented in README")
def test_criterion_13_real_feature_reproduction():
    """Optional: with real 16-shot ImageNet features and class prototypes,
    `lfa fit` + `lfa eval` should land within +-0.5 of the published 72.61
    top-1 and show the published phase structure (seconds of init, tens of
    seconds of refinement)."""

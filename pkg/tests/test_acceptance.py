"""Acceptance suite: one test per criterion, each recorded as a PASS/FAIL line."""
import csv
import hashlib
import itertools
import json
import math
import time

import numpy as np
import pytest

from cqvae import checkpoint, cli, data, matching, metrics, models, quantize
from cqvae.config import TrainConfig
from conftest import cqae_gradient_errors, cqvae_gradient_errors, record_criterion

# desk-scale run shared by criteria 6 and 7; seed 0 was held out from all tuning
DESK_SEED = 0
DESK_SCENES = 600
DESK_AUGMENT = 1200
DESK_EPOCHS = 24


def check(number, title, ok, detail):
    record_criterion(number, title, ok, detail)
    assert ok, f"criterion {number} ({title}) failed: {detail}"


def test_criterion_01_gradient_correctness():
    t0 = time.time()
    errs = cqvae_gradient_errors() + cqae_gradient_errors()
    elapsed = time.time() - t0
    worst = max(errs)
    check(1, "gradient correctness", worst < 1e-4 and elapsed < 60,
          f"max relative error {worst:.2e} over {len(errs)} parameter tensors in {elapsed:.1f}s")


def test_criterion_02_gumbel_max_fidelity():
    pi = np.array([0.2, 0.3, 0.5])
    draws = quantize.gumbel_max_sample(np.tile(pi, (100_000, 1)), np.random.default_rng(0))
    tv = 0.5 * float(np.abs(draws.mean(axis=0) - pi).sum())
    check(2, "Gumbel-max fidelity", tv < 0.01, f"total variation {tv:.4f}")


def test_criterion_03_entropy_identities():
    one_hot = quantize.entropy(np.eye(11)[np.arange(16) % 11])
    uniform = quantize.entropy(np.full((16, 11), 1 / 11))
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        m, n = int(rng.integers(1, 17)), int(rng.integers(2, 12))
        z = rng.exponential(size=(m, n))
        z /= z.sum(axis=1, keepdims=True)
        kl = np.sum(z * np.log(z * n), axis=1)
        worst = max(worst, float(np.abs(kl - (math.log(n) - quantize.row_entropy(z))).max()))
    ok = one_hot == 0.0 and abs(uniform - 16 * math.log(11)) <= 1e-9 and worst <= 1e-9
    check(3, "entropy identities", ok,
          f"one-hot {one_hot}, uniform error {abs(uniform - 16 * math.log(11)):.1e}, KL identity error {worst:.1e}")


def test_criterion_04_cqae_one_hot_convergence():
    cfg = TrainConfig(alpha_cqae=10.0, epochs=50, seed=0)
    images = data.small_image_set(cfg.cqae_images, cfg.cqae_size, models.stream(cfg.seed, "data-cqae"))
    t0 = time.time()
    model, trainer = models.train_cqae(images, cfg)
    elapsed = time.time() - t0
    row_max = float(model.codes(images).max(axis=-1).mean())
    check(4, "CQ-AE one-hot convergence", row_max > 0.99 and elapsed < 900,
          f"mean row max {row_max:.4f} after {trainer.epoch} epochs on {len(images)} images in {elapsed:.0f}s")


def test_criterion_05_matching_oracle():
    rng = np.random.default_rng(0)
    ok, worst_gap = True, math.inf
    for _ in range(500):
        k = int(rng.integers(1, 9))
        l = int(rng.integers(k, 9))
        d = rng.uniform(0, 1, size=(k, l))
        g = matching.greedy_assign(d)
        o = matching.optimal_match_oracle(d)
        injective = len(set(g.assignment.tolist())) == k and len(set(o.assignment.tolist())) == k
        ok &= injective and g.total >= o.total - 1e-12
        worst_gap = min(worst_gap, g.total - o.total)
    ex = np.array([[1.0, 2.0], [1.0, 100.0]])
    g, o = matching.greedy_assign(ex), matching.optimal_match_oracle(ex)
    ok &= g.total == 101.0 and o.total == 3.0
    check(5, "matching oracle", ok,
          f"500 matrices, min greedy-minus-oracle {worst_gap:.2e}; 2x2 example {g.total:g} vs {o.total:g}")


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    seed = str(DESK_SEED)
    assert cli.main(["generate", "--out", str(root / "data"), "--scenes", str(DESK_SCENES),
                     "--augment", str(DESK_AUGMENT), "--seed", seed]) == 0
    t0 = time.time()
    assert cli.main(["train", "--data", str(root / "data"), "--run", str(root / "run"),
                     "--epochs", str(DESK_EPOCHS), "--seed", seed]) == 0
    elapsed = time.time() - t0
    assert cli.main(["evaluate", "--checkpoint", str(root / "run" / "checkpoint.ckpt"),
                     "--data", str(root / "data"), "--out", str(root / "eval")]) == 0
    summary = json.loads((root / "eval" / "summary.json").read_text())
    test, _ = data.read_dataset(root / "data", "test")
    return summary, test, elapsed, root


def test_criterion_06_uncertainty_correlation(desk_run):
    summary, test, elapsed, _ = desk_run
    corr = summary["correlations"]
    a, b = corr["corr(var_model,var_gt)"], corr["corr(entropy,var_gt)"]
    levels = sorted({s.ambiguity for s in test})
    ok = (len(test) >= 60 and levels == [0.5, 1.0, 2.0] and a is not None and b is not None
          and a > 0.3 and b > 0.2 and elapsed < 7200)
    check(6, "uncertainty correlation", ok,
          f"corr(var_model,var_gt) {a:.3f}, corr(entropy,var_gt) {b:.3f} on {len(test)} test scenes, "
          f"training {elapsed / 60:.1f} min")


def test_criterion_07_bias_uncertainty_trend(desk_run):
    summary, test, _, _ = desk_run
    r = summary["correlations"]["corr(bias_best,var_model)"]
    check(7, "bias-uncertainty trend", r is not None and r > 0.3,
          f"corr(bias,var_model) {r:.3f} on {summary['n_images']} test scenes")


def test_shape_encoder_inverts_decoder_near_the_data(desk_run):
    # codes drawn from q(z|x) on test images survive decode then re-encode
    _, test, _, root = desk_run
    model, _ = checkpoint.load_model(root / "run" / "checkpoint.ckpt")
    rng = np.random.default_rng(0)
    codes = np.concatenate([model.sample_codes(model.probabilities(s.image), 5, rng) for s in test])
    recovered = model.encode_shape_codes(model.decode_codes(codes))
    rate = float(np.mean(recovered == codes.argmax(axis=-1)))
    assert rate >= 0.95, f"shape encoder recovers {rate:.3f} of code rows"


def test_criterion_08_memorization():
    sc = data.generate_scene(data.SceneParams(), data.scene_stream(DESK_SEED, 0), ambiguity=1.0)
    cfg = TrainConfig(epochs=500, batch=1, seed=0, warmup_steps=0)
    model = models.CQVAE(cfg)  # neutral offset: every point starts at the image center
    start = metrics.bias(model.best_shape(sc.image), sc.consensus)
    trainer = models.CQVAETrainer(model, cfg)
    trainer.fit([sc])
    end = metrics.bias(model.best_shape(sc.image), sc.consensus)
    check(8, "memorization", trainer.step == 500 and end < 0.01,
          f"bias {start:.4f} -> {end:.4f} (image widths) after {trainer.step} steps")


def test_criterion_09_tps_and_ssm():
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(64, 64)).astype(np.float32)
    shape = data.random_consensus(176, rng)[0]
    warped, _ = data.tps_warp(img, shape, shape)
    pixel = float(np.abs(warped - img).max())
    src = rng.uniform(0.1, 0.9, size=(22, 2))
    dst = src + rng.normal(scale=0.03, size=src.shape)
    control = float(np.abs(data.ThinPlateSpline(src, dst, lam=0.0)(src) - dst).max())
    scenes = data.generate_dataset(80, data.SceneParams(), seed=0)
    shapes = np.stack([s.consensus for s in scenes])
    ssm = data.fit_ssm(shapes, 0.8)
    evals = np.linalg.eigh(np.cov(shapes.reshape(len(shapes), -1), rowvar=False))[0][::-1]
    retained = float(evals[:ssm.n_modes].sum() / evals.sum())
    ok = (pixel <= 1e-6 and control <= 1e-8 and retained >= 0.8
          and np.allclose(ssm.mode_variances, evals[:ssm.n_modes], rtol=1e-8))
    check(9, "TPS and SSM correctness", ok,
          f"identity warp {pixel:.1e}, control residual {control:.1e}, "
          f"{ssm.n_modes} modes retain {retained:.3f} by eigendecomposition")


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_criterion_10_determinism(tmp_path):
    assert cli.main(["generate", "--out", str(tmp_path / "data"), "--scenes", "12", "--J", "32", "--H", "32",
                     "--W", "32", "--augment", "14", "--seed", "7"]) == 0
    flags = ["--epochs", "2", "--M", "4", "--N", "5", "--batch", "4", "--seed", "7", "--set", "eval_l_max=10",
             "--set", "eval_k_max=10"]
    digests = []
    for name in ("a", "b"):
        run, ev = tmp_path / f"run_{name}", tmp_path / f"eval_{name}"
        assert cli.main(["train", "--data", str(tmp_path / "data"), "--run", str(run), *flags]) == 0
        assert cli.main(["evaluate", "--checkpoint", str(run / "checkpoint.ckpt"), "--data", str(tmp_path / "data"),
                         "--out", str(ev)]) == 0
        files = [run / "metrics.csv", ev / "eval.csv", *sorted((ev / "heatmaps").glob("*.csv"))]
        digests.append([(f.name, _sha(f)) for f in files])
    with open(tmp_path / "eval_a" / "eval.csv") as fh:
        rows = list(csv.DictReader(fh))
    check(10, "determinism", digests[0] == digests[1] and len(rows) > 0,
          f"{len(digests[0])} CSV files byte-identical across two train+evaluate runs")


def test_criterion_11_code_space_counting():
    a, b = quantize.count_codes(8, 10), quantize.count_codes(64, 11)
    ok = isinstance(a, int) and isinstance(b, int) and a == 10 ** 8 and b == 11 ** 64
    check(11, "code-space counting", ok, f"count_codes(8,10) = {a}, count_codes(64,11) has {len(str(b))} digits")


def test_criterion_05_exhaustive_cross_check():
    # the oracle itself against permutation enumeration on small sizes
    rng = np.random.default_rng(1)
    for _ in range(50):
        k = int(rng.integers(1, 5))
        l = int(rng.integers(k, 6))
        d = rng.uniform(size=(k, l))
        brute = min(sum(d[i, p[i]] for i in range(k)) for p in itertools.permutations(range(l), k))
        assert math.isclose(matching.optimal_match_oracle(d).total, brute)

"""End-to-end acceptance criteria, one test per criterion.

A PASS/FAIL line per criterion is printed in the terminal summary (see
conftest.py), whether or not ``-s`` is given.
"""

import json
import time

import numpy as np
import pytest

from bandprobe import bands as B
from bandprobe import dataio, metrics, permutation as P, tensor as T, trainer, unet
from bandprobe.cli import main as cli_main
from bandprobe.metrics import ConfusionCounts, compute_metrics
from oracles import confusion_loop, conv2d_loop, maxpool_loop, transposed_conv2d_loop

pytestmark = pytest.mark.acceptance

NOISE_BANDS = [b for b in B.CANONICAL_BANDS if b != "NIR"]


# -- 1 ---------------------------------------------------------------------


def _directional_check(model, x, target, rng, h=1e-5):
    """Worst relative error between analytic and central-difference directional derivatives."""
    def loss():
        return T.cross_entropy(model(x), target)

    model.zero_grad()
    loss().backward()
    worst = 0.0
    for name, p in model.named_parameters():
        for _ in range(2):
            d = rng.standard_normal(p.shape)
            d /= np.linalg.norm(d)
            analytic = float(np.sum(p.grad * d))
            base = p.data.copy()
            p.data = base + h * d
            with T.no_grad():
                lp = loss().item()
            p.data = base - h * d
            with T.no_grad():
                lm = loss().item()
            p.data = base
            numeric = (lp - lm) / (2 * h)
            denom = max(abs(analytic), abs(numeric))
            if denom > 0:
                worst = max(worst, abs(analytic - numeric) / denom)
    return worst


def test_criterion_1_gradient_correctness():
    """Micro U-Net (4 bands, 16x16, base 4, float64) gradients vs central differences."""
    start = time.perf_counter()
    worst = 0.0
    with T.default_dtype(np.float64):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            x = T.Tensor(rng.random((4, 4, 16, 16)))
            target = rng.integers(0, 2, (4, 16, 16))
            model = unet.build(unet.UNetConfig(4, 2, 4), seed=seed, dtype=np.float64)
            worst = max(worst, _directional_check(model.train(), x, target, rng))
            for s in model.bn.values():
                s.running_mean = rng.standard_normal(s.channels) * 0.1
                s.running_var = rng.uniform(0.5, 2.0, s.channels)
                s.initialized = True
            worst = max(worst, _directional_check(model.eval(), x, target, rng))
    elapsed = time.perf_counter() - start
    print(f"max relative error {worst:.2e}, {elapsed:.1f} s")
    assert worst < 1e-5
    assert elapsed < 60


# -- 2 ---------------------------------------------------------------------


def test_criterion_2_layer_oracles():
    """conv2d, transposed_conv2d and maxpool2d agree with loop oracles on 50 shapes."""
    rng = np.random.default_rng(2)
    worst_conv = worst_tconv = 0.0
    for _ in range(50):
        n, cin, cout = rng.integers(1, 4, 3)
        h, w = 2 * rng.integers(1, 5, 2)
        x = rng.standard_normal((n, cin, h, w)).astype(np.float32)
        k = rng.standard_normal((cout, cin, 3, 3)).astype(np.float32)
        b = rng.standard_normal(cout).astype(np.float32)
        kt = rng.standard_normal((cin, cout, 2, 2)).astype(np.float32)
        xp = rng.integers(-3, 4, (n, cin, h, w)).astype(np.float32)  # small ints force ties
        conv = T.conv2d(T.Tensor(x), T.Tensor(k), T.Tensor(b)).data
        tconv = T.transposed_conv2d(T.Tensor(x), T.Tensor(kt), T.Tensor(b)).data
        pool = T.maxpool2d(T.Tensor(xp)).data
        for i in range(n):
            worst_conv = max(worst_conv, np.abs(conv[i] - conv2d_loop(x[i], k, b)).max())
            worst_tconv = max(worst_tconv,
                              np.abs(tconv[i] - transposed_conv2d_loop(x[i], kt, b)).max())
            assert np.array_equal(pool[i], maxpool_loop(xp[i]))
    print(f"conv {worst_conv:.1e}, tconv {worst_tconv:.1e}, maxpool exact")
    assert worst_conv < 1e-5 and worst_tconv < 1e-5


# -- 3 ---------------------------------------------------------------------


def test_criterion_3_metric_oracle():
    """Confusion counts match a pixel loop; formulas match hand-derived values."""
    rng = np.random.default_rng(3)
    for _ in range(100):
        shape = tuple(rng.integers(1, 20, 2))
        p, t = rng.integers(0, 2, shape), rng.integers(0, 2, shape)
        c = metrics.confusion(p, t)
        assert (c.tp, c.tn, c.fp, c.fn) == confusion_loop(p, t)
    m = compute_metrics(ConfusionCounts(tp=8, tn=1, fp=0, fn=1))
    expected = {"accuracy": 9 / 10, "balanced_accuracy": (8 / 9 + 1) / 2, "precision": 1.0,
                "recall": 8 / 9, "f1": 16 / 17}
    for k, v in expected.items():
        assert abs(getattr(m, k) - v) < 1e-12, k
    assert round(m.balanced_accuracy, 4) == 0.9444


# -- 4 ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_model():
    model = unet.build(unet.UNetConfig(12, 2, 2), seed=9)
    model.reset_running_stats()
    return model.eval()


def test_criterion_4_permutation_invariants(tiny_model):
    """Multisets, non-member bands and masks preserved; seeded reports reproduce."""
    rng = np.random.default_rng(4)
    sets = list(B.SINGLE_BANDS) + list(B.DEFAULT_GROUPS)
    images = [dataio.RasterSample(f"r{i}", rng.integers(0, 10000, (12, 16, 16)),
                                  rng.integers(0, 2, (16, 16))) for i in range(20)]
    for i, s in enumerate(images):
        for bs in sets:
            out = P.permute_bands(s, bs, seed=i, key=(0, i))
            for b in range(12):
                if b in bs.indices:
                    assert np.array_equal(np.sort(out.bands[b], axis=None),
                                          np.sort(s.bands[b], axis=None))
                else:
                    assert out.bands[b].tobytes() == s.bands[b].tobytes()
            assert out.mask.tobytes() == s.mask.tobytes()
    a = P.importance_report(tiny_model, images[:4], sets, repeats=2, seed=17)
    b = P.importance_report(tiny_model, images[:4], sets, repeats=2, seed=17)
    assert json.dumps(a.to_json()) == json.dumps(b.to_json())


# -- 5, 6 ------------------------------------------------------------------


@pytest.fixture(scope="module")
def synthetic_run():
    start = time.perf_counter()
    spec = dataio.SynthSpec(num_samples=64, height=64, width=64, generative_band="NIR", seed=0)
    train_set = dataio.generate_synthetic(spec)
    test_set = dataio.generate_synthetic(spec, start=64)[:16]
    # early stopping uses its own draw so the test set stays unseen
    val_set = dataio.generate_synthetic(spec, start=80)[:8]
    model = unet.build(unet.UNetConfig(12, 2, 8), seed=0)
    cfg = trainer.TrainConfig(epochs=10, batch_size=4, learning_rate=3e-3, seed=0)
    model, _ = trainer.train(model, train_set, val_set, cfg)
    accuracy = metrics.evaluate_set(model, test_set).aggregate["accuracy"]
    singles = P.importance_sweep(model, test_set, B.SINGLE_BANDS, repeats=5, seed=0)
    everything = P.importance(model, test_set, B.ALL_BANDS, repeats=5, seed=0)
    return dict(model=model, test_set=test_set, accuracy=accuracy, singles=singles,
                everything=everything, seconds=time.perf_counter() - start)


def test_criterion_5_synthetic_recovery(synthetic_run):
    """Trained model finds NIR as the only informative band."""
    r = synthetic_run
    drops = {e.band_set.label: e.drop_pp for e in r["singles"]}
    ranked = sorted(drops, key=drops.get, reverse=True)
    worst_noise = max(abs(drops[b]) for b in NOISE_BANDS)
    print(f"accuracy {r['accuracy']:.4f}, NIR {drops['NIR']:.2f} pp, "
          f"worst noise band {worst_noise:.3f} pp, {r['seconds']:.0f} s")
    assert r["accuracy"] >= 0.95
    assert ranked[0] == "NIR" and drops["NIR"] >= 20
    assert worst_noise < 2
    assert r["seconds"] < 300


def test_criterion_6_degradation_sanity(synthetic_run):
    """Permuting every band drops accuracy to the majority-class rate."""
    masks = np.stack([s.mask for s in synthetic_run["test_set"]])
    per_image_majority = [max(m.mean(), 1 - m.mean()) for m in masks]
    majority = float(np.mean(per_image_majority))
    permuted = synthetic_run["everything"].mean_permuted_accuracy
    print(f"permuted accuracy {permuted:.4f}, majority rate {majority:.4f}")
    assert abs(permuted - majority) * 100 < 5


# -- 7 ---------------------------------------------------------------------


def test_criterion_7_zero_importance_exactness(synthetic_run):
    """A band whose input weights are zero has drop_pp == 0 exactly."""
    model = synthetic_run["model"]
    w = model.params["enc0.0.conv.weight"]
    saved = w.data.copy()
    try:
        for band in ("NIR", "Blue"):
            w.data[:, B.BAND_INDEX[band]] = 0.0
            score = P.importance(model, synthetic_run["test_set"], band, repeats=5, seed=3)
            assert score.drop_pp == 0.0, band
    finally:
        w.data[:] = saved


# -- 8 ---------------------------------------------------------------------


def test_criterion_8_exclusions(tmp_path):
    """98 test entries minus the three listed filenames leaves 95."""
    names = dataio.default_exclusions()
    ids = [n[: -len(".tif")] for n in names] + [f"img_{i:03d}" for i in range(95)]
    rng = np.random.default_rng(8)
    (tmp_path / "s").mkdir()
    entries = []
    for sid in ids:
        s = dataio.RasterSample(sid, rng.random((12, 2, 2)), np.zeros((2, 2)))
        dataio.write_sample(s, tmp_path / "s" / f"{sid}.bpr")
        entries.append({"id": sid, "path": f"s/{sid}.bpr", "split": "test"})
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps({"entries": entries, "exclusions": names}))
    loaded = dataio.load_manifest(path).load_split("test")
    assert len(entries) == 98 and len(loaded) == 95
    assert not {s.id for s in loaded} & {n[:-4] for n in names}


# -- 9 ---------------------------------------------------------------------


def test_criterion_9_reproducibility_and_formats(tmp_path, synthetic_run):
    """Checkpoint and .bpr round-trips, CLI replay and the golden chart."""
    from test_report import GOLDEN, golden_scores
    from bandprobe.report import render_bar_chart

    blob = unet.dumps(synthetic_run["model"])
    assert unet.dumps(unet.loads(blob)) == blob
    s = synthetic_run["test_set"][0]
    assert dataio.dumps_sample(dataio.loads_sample(dataio.dumps_sample(s))) == dataio.dumps_sample(s)

    def cli(*a):
        assert cli_main([str(x) for x in a]) == 0

    cli("synth", "--band", "NIR", "--samples", 10, "--size", 16, "--out", tmp_path / "d")
    cli("train", "--manifest", tmp_path / "d/manifest.json", "--epochs", 2, "--batch-size", 4,
        "--base-width", 2, "--out", tmp_path / "t")
    cli("eval", "--checkpoint", tmp_path / "t/model.ckpt", "--manifest", tmp_path / "d/manifest.json",
        "--out", tmp_path / "e")
    cli("permute", "--checkpoint", tmp_path / "t/model.ckpt", "--manifest",
        tmp_path / "d/manifest.json", "--repeats", 2, "--out", tmp_path / "p")
    cli("report", "--importance", tmp_path / "p/importance.json", "--out", tmp_path / "r")
    for stage in ("d", "t", "e", "p", "r"):
        src, dst = tmp_path / stage, tmp_path / f"{stage}_replay"
        cli("replay", src / "config.json", "--out", dst)
        for f in sorted(p for p in src.rglob("*") if p.is_file()):
            a, b = f.read_bytes(), (dst / f.relative_to(src)).read_bytes()
            if f.name == "trainlog.csv":  # wall-clock column masked
                a, b = ([ln.rsplit(b",", 1)[0] for ln in x.splitlines()] for x in (a, b))
            assert a == b, f
    assert render_bar_chart(golden_scores()) == GOLDEN.read_text()

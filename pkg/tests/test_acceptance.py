"""End-to-end acceptance checks, one group per criterion.

A summary line per criterion is printed at the end of the pytest run.
Set ``SKINLESION_ISIC_DIR`` to a folder holding ``labels.csv`` and
``images/`` (and optionally ``masks/``) to run the real-data smoke test.
"""

import contextlib
import io
import os
import time
from pathlib import Path

import numpy as np
import pytest

from skinlesion import augmentation as aug
from skinlesion import dataset, imaging, models, ops, persistence, segmentation, training
from skinlesion.cli import main
from skinlesion.errors import BadMagicError, TruncatedFileError, UnsupportedVersionError
from skinlesion.gradcheck import gradient_check
from skinlesion.synthetic import classification_dataset, disc_dataset
from skinlesion.tensor import seeded_rng

criterion = pytest.mark.criterion


def run_cli(*argv):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main([str(a) for a in argv])
    return code, out.getvalue(), err.getvalue()


# --- 1. gradients ------------------------------------------------------------


def _grad_cases():
    r = np.random.default_rng(0)
    onehot = np.eye(5)[[1, 3]]
    mask = (r.random((1, 6, 6)) > 0.5).astype(np.float32)
    return {
        "conv2d_valid": (ops.conv2d, [r.normal(size=(3, 8, 7)), r.normal(size=(4, 3, 3, 3)), r.normal(size=4)]),
        "conv2d_same": (lambda x, w, b: ops.conv2d(x, w, b, padding="same"),
                        [r.normal(size=(2, 6, 6)), r.normal(size=(3, 2, 3, 3)), r.normal(size=3)]),
        "conv2d_1x1": (ops.conv2d, [r.normal(size=(4, 5, 5)), r.normal(size=(1, 4, 1, 1)), r.normal(size=1)]),
        "dense": (ops.dense, [r.normal(size=(3, 8)), r.normal(size=(6, 8)), r.normal(size=6)]),
        "relu": (ops.relu, [r.normal(size=(4, 6))]),
        "softmax": (ops.softmax, [r.normal(size=(3, 8))]),
        "cross_entropy": (lambda x: ops.categorical_cross_entropy(ops.softmax(x), onehot), [r.normal(size=(2, 5))]),
        "maxpool2d": (ops.maxpool2d, [r.normal(size=(2, 8, 6))]),
        "upsample2x": (ops.upsample2x, [r.normal(size=(2, 3, 4))]),
        "channel_concat": (ops.channel_concat, [r.normal(size=(2, 4, 4)), r.normal(size=(3, 4, 4))]),
        "sigmoid": (ops.sigmoid, [r.normal(size=(2, 5, 5))]),
        "dice_loss": (lambda x: ops.dice_loss(ops.sigmoid(x), mask), [r.normal(size=(1, 6, 6))]),
        "binary_cross_entropy": (lambda x: ops.binary_cross_entropy(ops.sigmoid(x), mask), [r.normal(size=(1, 6, 6))]),
    }


@criterion(1, "gradient suite within 1e-2 relative, < 60 s")
def test_c1_gradient_suite():
    start = time.perf_counter()
    errors = {name: gradient_check(op, inputs, tolerance=1e-2).max_rel_error
              for name, (op, inputs) in _grad_cases().items()}
    elapsed = time.perf_counter() - start
    print({k: f"{v:.2e}" for k, v in errors.items()}, f"{elapsed:.1f}s")
    assert max(errors.values()) < 1e-2, errors
    assert elapsed < 60


@criterion(1, "gradient suite within 1e-2 relative, < 60 s")
def test_c1_unet_end_to_end_gradient():
    spec = segmentation.build_unet(segmentation.UNetConfig(depth=1, base_channels=2, input_size=4))
    w = models.init_weights(spec, seeded_rng(1))
    x = np.random.default_rng(2).random((1, 3, 4, 4))
    target = (np.random.default_rng(3).random((1, 1, 4, 4)) > 0.5).astype(np.float32)
    names = ["path1.enc0a.w", "path1.dec0b.w", "path1.out.w"]

    def net(*params):
        weights = dict(w)
        weights.update(zip(names, params))
        return segmentation.segmentation_loss(models.forward(spec, weights, x), target)

    assert gradient_check(net, [w[n] for n in names]).max_rel_error < 1e-2


# --- 2. shapes ---------------------------------------------------------------


@criterion(2, "shape conformance")
def test_c2_model1_shapes_pool2_is_126_not_stated_121():
    spec = models.build_model1()
    got = [spec.layer("path1", n).out_shape[1:] for n in ("conv1", "pool1", "conv2", "pool2")]
    assert got == [(510, 510), (255, 255), (253, 253), (126, 126)]


@criterion(2, "shape conformance")
def test_c2_model2_shapes():
    one, dual = models.build_model2_onepath(), models.build_model2_dualpath()
    got = [one.layer("path1", n).out_shape[1:] for n in ("conv1", "conv2", "pool1")]
    assert got == [(254, 254), (252, 252), (126, 126)]
    assert one.layer("path1", "flatten1").out_shape == (1_016_064,)
    assert dual.head[0].in_shape == (2_032_128,)


# --- 3. piecewise oracle -----------------------------------------------------


def pixel_val(pix, r1, s1, r2, s2):
    if 0 <= pix and pix <= r1:
        return (s1 / r1) * pix
    elif r1 < pix and pix <= r2:
        return ((s2 - s1) / (r2 - r1)) * (pix - r1) + s1
    else:
        return ((255 - s2) / (255 - r2)) * (pix - r2) + s2


@criterion(3, "piecewise-linear matches the reference routine on 5 parameter sets")
def test_c3_piecewise_oracle():
    rng = np.random.default_rng(2024)
    ramp = np.arange(256, dtype=np.uint8).reshape(16, 16, 1).repeat(3, axis=2)
    for _ in range(5):
        r1, r2 = sorted(rng.choice(np.arange(1, 255), size=2, replace=False))
        s1, s2 = sorted(rng.integers(0, 256, size=2))
        params = imaging.PiecewiseParams(int(r1), int(s1), int(r2), int(s2))
        want = np.array([np.clip(np.rint(pixel_val(v, r1, s1, r2, s2)), 0, 255) for v in range(256)])
        out = imaging.piecewise_linear(ramp, params)
        np.testing.assert_array_equal(out[:, :, 0].ravel(), want)
        np.testing.assert_array_equal(out[:, :, 2].ravel(), want)


# --- 4. overfit --------------------------------------------------------------


@criterion(4, "dual-path overfits 32 images within 200 steps (64x64), < 10 min")
@pytest.mark.slow
def test_c4_dualpath_overfit():
    size = 64
    images, masks, labels = classification_dataset(4, size, seed=11)
    inputs = [np.stack(p) for p in zip(*(dataset.network_input(i, m, "m2-dual") for i, m in zip(images, masks)))]
    spec = models.build_model2_dualpath(size)
    weights = models.init_weights(spec, seeded_rng(0))
    state = training.AdamState(lr=1e-3)
    targets = training.one_hot(labels)
    start = time.perf_counter()
    acc, step = 0.0, 0
    while step < 200 and acc < 1.0:
        training.train_step(spec, weights, state, inputs, targets)
        step += 1
        acc = training.accuracy(training.evaluate(spec, weights, inputs, labels, batch_size=32))
    elapsed = time.perf_counter() - start
    print(f"train accuracy {acc:.3f} after {step} steps, {elapsed:.0f}s")
    assert acc == 1.0 and step <= 200
    assert elapsed < 600


# --- 5. cross-validation -----------------------------------------------------


@criterion(5, "10-fold CV on 400 synthetic images: mean accuracy >= 0.9, audit clean, < 15 min")
@pytest.mark.slow
def test_c5_desk_scale_crossval():
    size = 32
    images, masks, labels = classification_dataset(50, size, seed=5)
    inputs = [np.stack(p) for p in zip(*(dataset.network_input(i, m, "m2-dual") for i, m in zip(images, masks)))]
    plan = training.make_stratified_folds(labels, 10, seed=0)
    assert plan.audit() == []
    start = time.perf_counter()
    report = training.cross_validate(lambda: models.build_model2_dualpath(size), inputs, labels, plan,
                                     epochs=4, seed=0, batch_size=16, lr=1e-3)
    elapsed = time.perf_counter() - start
    print(f"mean accuracy {report.mean_accuracy:.4f}, folds {[round(f.accuracy, 3) for f in report.folds]}, "
          f"{elapsed:.0f}s")
    assert len(report.folds) == 10 and sum(f.n_val for f in report.folds) == 400
    assert report.mean_accuracy >= 0.9
    assert elapsed < 900


# --- 6. balancing ------------------------------------------------------------

ISIC = {"MLN": 4522, "MCN": 12875, "BCC": 3323, "AK": 867, "BK": 2624, "DF": 239, "VL": 253, "SCC": 628}


@criterion(6, "balancing plan and 16,000-row manifest from the ISIC 2019 counts")
def test_c6_balance_counts_and_manifest(tmp_path):
    plan = aug.plan_balance(ISIC, 2000, seed=0)
    assert [plan.synthesize_counts()[c] for c in ISIC] == [0, 0, 0, 1133, 0, 1761, 1747, 1372]
    # every source id is distinct; the pixels behind them are a few tiny shared files
    tiles = []
    for k in range(4):
        p = tmp_path / "src" / f"tile{k}.png"
        imaging.save_image(np.random.default_rng(k).integers(0, 256, (6, 6, 3), dtype=np.uint8), p)
        tiles.append(str(p))
    source = {c: [aug.SourceImage(f"{c}_{i:05d}", tiles[i % 4]) for i in range(n)] for c, n in ISIC.items()}
    rows = aug.execute_plan(plan, source, tmp_path / "out", tmp_path / "manifest.csv")
    assert len(rows) == 16_000
    per_class = {c: sum(r.cls == c for r in rows) for c in ISIC}
    assert set(per_class.values()) == {2000}
    synthesized = {c: sum(bool(r.op_chain) and r.cls == c for r in rows) for c in ISIC}
    assert [synthesized[c] for c in ISIC] == [0, 0, 0, 1133, 0, 1761, 1747, 1372]
    assert len((tmp_path / "manifest.csv").read_text().splitlines()) == 16_001


# --- 7. U-Net ----------------------------------------------------------------


@criterion(7, "mini U-Net Dice > 0.9 on held-out discs within 30 epochs at 64x64, < 5 min")
@pytest.mark.slow
def test_c7_unet_dice():
    spec = segmentation.build_unet(segmentation.UNetConfig(depth=3, base_channels=8, input_size=64))
    train = disc_dataset(50, 64, seed=0, discs_only=True)
    held_out = disc_dataset(20, 64, seed=1, discs_only=True)
    start = time.perf_counter()
    res = segmentation.train_unet(spec, train, epochs=30, seed=0, val=held_out)
    elapsed = time.perf_counter() - start
    print(f"held-out Dice by epoch: {[round(d, 3) for d in res.dice_history]}, {elapsed:.0f}s")
    assert len(res.dice_history) == 31
    assert res.dice_history[-1] > 0.9
    assert elapsed < 300


# --- 8. Shades of Gray -------------------------------------------------------


@criterion(8, "Shades-of-Gray equalises Minkowski-6 channel estimates on 20 images")
def test_c8_shades_of_gray():
    rng = np.random.default_rng(8)
    for _ in range(20):
        cast = rng.uniform(0.3, 1.0, size=3)
        img = np.clip(rng.integers(1, 256, (24, 32, 3)) * cast, 1, 255).astype(np.uint8)
        corrected = imaging.shades_of_gray_float(img, p=6) / 255.0
        est = np.array([np.mean(corrected[:, :, c] ** 6) ** (1 / 6) for c in range(3)])
        assert np.ptp(est) / est.mean() < 1e-3


# --- 9. persistence ----------------------------------------------------------


@criterion(9, "weights round-trip bit-identically; corrupt files raise typed errors")
@pytest.mark.parametrize("name,size", [("m1", 512), ("m2-one", 64), ("m2-dual", 64)])
def test_c9_round_trip(tmp_path, name, size):
    spec = models.build_model(name, size)
    w = models.init_weights(spec, seeded_rng(9))
    persistence.save_weights(w, tmp_path / "w.slcw")
    back = persistence.load_weights(tmp_path / "w.slcw")
    assert list(back) == list(w)
    assert all(back[k].shape == w[k].shape and back[k].tobytes() == w[k].tobytes() for k in w)
    assert sum(v.size for v in back.values()) == spec.param_count()


@criterion(9, "weights round-trip bit-identically; corrupt files raise typed errors")
def test_c9_corrupt_files():
    buf = persistence.dump_weights(models.init_weights(models.build_model2_onepath(16), seeded_rng(0)))
    with pytest.raises(BadMagicError):
        persistence.parse_weights(b"XXXX" + buf[4:])
    with pytest.raises(UnsupportedVersionError):
        persistence.parse_weights(buf[:4] + (7).to_bytes(4, "little") + buf[8:])
    for cut in (3, 11, len(buf) // 2, len(buf) - 1):
        with pytest.raises(TruncatedFileError):
            persistence.parse_weights(buf[:cut])


# --- 10. end-to-end smoke ----------------------------------------------------


def run_pipeline(data: Path, workdir: Path, extra=()):
    common = ["--workdir", workdir, "--seed", 0, "--input-size", 16, "--folds", 2, "--epochs", 1,
              "--batch-size", 16, "--balance-target", 6, *extra]
    ingest = ["--labels", data / "labels.csv", "--images", data / "images"]
    if (data / "masks").is_dir():
        ingest += ["--masks", data / "masks"]
    out = ""
    for stage, args in [("ingest", ingest), ("preprocess", []), ("segment", []), ("augment", []),
                        ("crossval", ["--no-figures"])]:
        code, out, err = run_cli(stage, *common, *args)
        assert code == 0, f"{stage}: {err}"
    return training.MetricsReport.from_json(out)


def well_formed(report):
    assert report.k == 2 and len(report.folds) == 2
    assert all(0.0 <= f.accuracy <= 1.0 and np.asarray(f.confusion).shape == (8, 8) for f in report.folds)
    assert 0.0 <= report.mean_accuracy <= 1.0


@criterion(10, "full pipeline runs end-to-end and emits a well-formed report")
def test_c10_synthetic_pipeline(tmp_path):
    assert run_cli("synth", tmp_path / "data", "--per-class", 4, "--size", 24, "--seed", 2)[0] == 0
    well_formed(run_pipeline(tmp_path / "data", tmp_path / "runs"))


@criterion(10, "full pipeline runs end-to-end and emits a well-formed report")
@pytest.mark.skipif(not os.environ.get("SKINLESION_ISIC_DIR"), reason="SKINLESION_ISIC_DIR not set")
def test_c10_isic_subset(tmp_path):
    well_formed(run_pipeline(Path(os.environ["SKINLESION_ISIC_DIR"]), tmp_path / "runs"))

import builtins
from dataclasses import replace

import numpy as np
import pytest
import torch

from fakeloc import datagen, harness, metrics
from fakeloc.errors import ConfigurationError, DataError, DomainError
from fakeloc.harness import ManifestData, MatrixSpec, TrainConfig


def quick(method="patches", setup="c", **kw):
    kw.setdefault("epochs", 2)
    kw.setdefault("batch_size", 8)
    return TrainConfig(method=method, setup=setup, **kw)


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(method="lama")
    with pytest.raises(ConfigurationError):
        TrainConfig(setup="d")
    with pytest.raises(ConfigurationError):
        TrainConfig(lambda_grid=())
    assert TrainConfig("gradcam", "c").model_kind == "fcn"
    assert TrainConfig("gradcam", "b").model_kind == "gradcam"


def test_epochs_zero_is_init(tiny_dataset):
    _, m = tiny_dataset
    cfg = quick(epochs=0)
    result = harness.train(cfg, m["c"])
    assert result.log == []
    assert result.detector.checksum() == harness.build_detector(cfg).checksum()


def test_training_deterministic(tiny_dataset, tmp_path):
    _, m = tiny_dataset
    a = harness.train(quick(), m["c"], out=tmp_path / "a")
    b = harness.train(quick(), m["c"], out=tmp_path / "b")
    assert a.detector.checksum() == b.detector.checksum()
    assert (tmp_path / "a" / "checkpoint.ckpt").read_bytes() == (tmp_path / "b" / "checkpoint.ckpt").read_bytes()
    log = (tmp_path / "a" / "train_log.tsv").read_text().splitlines()
    assert log[0].split("\t") == ["epoch", "train_loss", "val_loss", "val_metric"]
    assert len(log) == 3


def test_checkpoint_roundtrip(tiny_dataset, tmp_path):
    _, m = tiny_dataset
    for method, setup in (("gradcam", "b"), ("gradcam", "c"), ("attention", "a"), ("patches", "b")):
        det = harness.train(quick(method, setup, epochs=1, lambda_grid=(1.0,)), m[setup]).detector
        det.save(tmp_path / f"{method}{setup}.ckpt")
        back = harness.Detector.load(tmp_path / f"{method}{setup}.ckpt")
        assert back.checksum() == det.checksum() and back.kind == det.kind
        x = torch.rand(2, 3, 64, 64)
        assert torch.equal(back.localize(x), det.localize(x))


def test_setup_mismatch(tiny_dataset):
    _, m = tiny_dataset
    with pytest.raises(ConfigurationError):
        harness.train(quick(setup="c"), m["a"])
    with pytest.raises(ConfigurationError):
        harness.train(quick(setup="a"), m["c"])


class OpenLog:
    """Records every path opened through builtins.open during a block."""

    def __init__(self, monkeypatch):
        self.paths = []
        real = builtins.open

        def spy(file, *args, **kwargs):
            self.paths.append(str(file))
            return real(file, *args, **kwargs)

        monkeypatch.setattr(builtins, "open", spy)


def test_setup_routing_file_access(tiny_dataset, monkeypatch):
    _, m = tiny_dataset
    log = OpenLog(monkeypatch)
    harness.train(quick("patches", "b", epochs=1), m["b"])
    harness.train(quick("gradcam", "a", epochs=1), m["a"])
    assert log.paths and not [p for p in log.paths if "/masks/" in p]
    log.paths.clear()
    harness.train(quick("patches", "c", epochs=1), m["c"])
    assert [p for p in log.paths if "/masks/" in p]
    assert not [p for p in log.paths if "/real/" in p]


def test_oracle_and_constant_maps(tiny_dataset):
    root, m = tiny_dataset
    det = harness.build_detector(quick(epochs=0))
    oracle = harness.evaluate_localization(det, m["c"], map_fn=lambda x, recs, masks: masks)
    assert oracle.iou == 100.0 and oracle.pbca == 100.0
    zero = harness.evaluate_localization(det, m["c"], map_fn=lambda x, recs, masks: torch.zeros_like(masks))
    assert zero.iou == 0.0
    fakes = [r for r in datagen.load_manifest(m["c"]) if r.split == "test"]
    real_fraction = np.mean([1 - datagen.read_mask(root / r.mask_path).mean() for r in fakes])
    assert zero.pbca == pytest.approx(100 * real_fraction)


def test_evaluation_repeatable_and_pure(tiny_dataset, tmp_path):
    _, m = tiny_dataset
    det = harness.train(quick(epochs=1), m["c"]).detector
    det.save(tmp_path / "c.ckpt")
    before = (tmp_path / "c.ckpt").read_bytes()
    a = harness.evaluate_localization(harness.Detector.load(tmp_path / "c.ckpt"), m["c"])
    b = harness.evaluate_localization(harness.Detector.load(tmp_path / "c.ckpt"), m["c"])
    assert a.per_sample == b.per_sample
    assert (tmp_path / "c.ckpt").read_bytes() == before


def test_missing_test_mask(tiny_dataset, tmp_path):
    root, m = tiny_dataset
    recs = [r for r in datagen.load_manifest(m["b"]) if r.split != "test"]
    recs.append(datagen.SampleRecord(recs[-1].image_path, "fake", None, "repaint", split="test"))
    det = harness.build_detector(quick(epochs=0))
    with pytest.raises(DataError):
        harness.evaluate_localization(det, ManifestData(recs, root))


def test_detection_oracles(tiny_dataset):
    _, m = tiny_dataset
    det = harness.build_detector(quick("patches", "b", epochs=0))
    assert harness.evaluate_detection(det, m["b"], score_fn=lambda x, recs: [float(r.is_fake) for r in recs]) == 1.0
    data = ManifestData.from_path(m["b"]).split("test")
    labels = [r.is_fake for r in data.records]
    anti = harness.evaluate_detection(det, data, score_fn=lambda x, recs: [float(not r.is_fake) for r in recs])
    n_neg, n_pos = labels.count(False), labels.count(True)
    worst = np.mean([(k + 1) / (n_neg + k + 1) for k in range(n_pos)])
    assert anti == pytest.approx(worst)
    only_fakes = ManifestData([r for r in data.records if r.is_fake], data.root)
    with pytest.raises(DomainError):
        harness.evaluate_detection(det, only_fakes)


def test_random_scorer_ap():
    rng = np.random.default_rng(0)
    labels = [1] * 10 + [0] * 10
    aps = [metrics.average_precision(rng.random(20), labels) for _ in range(1000)]
    assert abs(np.mean(aps) - 0.55) <= 0.05


def test_lambda_selection(tiny_dataset):
    _, m = tiny_dataset
    result = harness.train(quick("attention", "b", epochs=1, lambda_grid=(0.1, 10.0)), m["b"])
    assert result.lam in (0.1, 10.0) and result.detector.lam == result.lam


def test_matrix_spec():
    names = {"p": "x", "q": "y", "r": "z", "s": "w"}
    spec = MatrixSpec.singletons(names, combinations=True)
    assert len(spec.train_sets) == 8
    assert len(set(spec.train_sets)) == 8
    dup = MatrixSpec(names, [("p", "q"), ("q", "p"), "p"], ["p"])
    assert dup.train_sets == [("p", "q"), ("p",)]
    with pytest.raises(ConfigurationError):
        MatrixSpec(names, [("nope",)], ["p"])


def test_matrix_reductions(tiny_dataset, tmp_path):
    _, m = tiny_dataset
    cfg = quick(epochs=1)
    one = MatrixSpec({"c": m["c"]}, [("c",)], ["c"])
    grid = harness.cross_generator_matrix(one, "patches", "c", cfg)
    direct = harness.evaluate_localization(harness.train(cfg, m["c"]).detector, m["c"])
    assert grid.shape == (1, 1) and grid[0, 0] == direct.iou
    spec = MatrixSpec.singletons({"pix": m["gen-repaint"], "lat": m["gen-repaint-ldm"]})
    grid = harness.cross_generator_matrix(spec, "patches", "c", cfg)
    assert grid.shape == (2, 2) and ((grid >= 0) & (grid <= 100)).all()
    path = harness.write_matrix(tmp_path / "m.tsv", grid, harness.matrix_row_names(spec), spec.test_sets)
    back, rows, cols = harness.read_matrix(path)
    assert rows == ["pix", "lat"] and cols == ["pix", "lat"] and np.allclose(back, np.round(grid, 1))


def test_shift_report_shape(tiny_dataset):
    _, m = tiny_dataset
    cfg = quick(epochs=1, lambda_grid=(1.0,))
    same = {s: m[s] for s in "abc"}
    other = {s: m[f"{s}-faces-b"] for s in "abc"}
    table = harness.dataset_shift_experiment("patches", "abc", same, other, base_config=cfg)
    lines = harness.shift_report_lines(table)
    assert len(lines) == 1 + 3 * 2 and all(len(line.split("\t")) == 5 for line in lines)
    plain = harness.evaluate(harness.train(replace(cfg, setup="c"), m["c"]).detector, m["c"])
    assert table["c"]["same"].iou == plain.iou

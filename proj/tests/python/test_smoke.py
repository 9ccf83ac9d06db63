import math
import os
import pathlib

import numpy as np
import pytest

import morvit

SOURCE_DIR = pathlib.Path(os.environ.get("MORVIT_SOURCE_DIR", pathlib.Path(__file__).parents[2]))


def tiny_run(**overrides):
    rc = morvit.RunConfig.parse("preset = tiny-desk\nbatch_size = 8\nlr = 1e-3\n")
    for key, value in overrides.items():
        rc.set(key, str(value))
    return rc


def test_config_round_trip():
    rc = morvit.RunConfig.load(SOURCE_DIR / "configs" / "synth-desk.cfg")
    assert rc.model.routing_mode == "expert_choice"
    assert morvit.RunConfig.parse(rc.serialize()) == rc
    with pytest.raises(morvit.ConfigError):
        morvit.RunConfig.parse("no_such_key = 1\n")


def test_param_count_presets():
    assert morvit.param_count(morvit.preset("vit-b16")) == 86566120
    assert morvit.param_count(morvit.preset("tiny-desk")) == 1085


def test_selection():
    assert morvit.keep_count(4, 0.5) == 2
    assert morvit.keep_count(3, 0.9) == 1
    threshold, kept = morvit.select_active([0.2, 0.9, 0.5, 0.9], 0.5)
    assert kept == [1, 3]
    assert threshold == 0.9


def test_synth_dataset_arrays():
    cfg = morvit.preset("tiny-desk")
    data = morvit.synth_dataset(6, 3, cfg, 0.5)
    images = data.images()
    assert images.shape == (6, cfg.image_h, cfg.image_w, cfg.channels)
    assert images.min() >= 0.0 and images.max() <= 1.0
    assert len(data.labels()) == 6
    assert all(sum(d) == round(0.5 * cfg.num_patches) for d in data.difficulty())
    again = morvit.dataset_from_arrays(images, data.labels())
    assert np.array_equal(again.images(), images)
    with pytest.raises(morvit.ShapeError):
        morvit.dataset_from_arrays(images, data.labels()[:2])


def test_forward_traces_and_flops():
    rc = tiny_run(max_recursion=3)
    session = morvit.Session(rc)
    data = morvit.synth_dataset(3, 1, rc.model)
    logits, traces = session.forward(data.images())
    assert logits.shape == (3, rc.model.num_classes)
    assert np.all(np.isfinite(logits))
    n = rc.model.num_patches
    for t in traces:
        assert len(t["exit_depth"]) == n
        assert all(1 <= d <= 3 for d in t["exit_depth"])
        assert sum(t["histogram"]) == n
        f = t["flops"]
        assert f["total"] == f["attention"] + f["mlp"] + f["router"] + f["embed"] + f["head"]
    again, _ = session.forward(data.images())
    assert np.array_equal(logits, again)


def test_train_evaluate_checkpoint(tmp_path):
    rc = tiny_run()
    data = morvit.synth_dataset(16, 0, rc.model)
    session = morvit.Session(rc)
    ckpt = tmp_path / "run.morv"
    metrics = session.train(data, epochs=2, checkpoint=ckpt)
    assert [m["epoch"] for m in metrics] == [1, 2]
    assert all(math.isfinite(m["train_loss"]) for m in metrics)
    assert session.epoch == 2
    result = session.evaluate(data)
    assert result["total"] == 16
    assert result["accuracy"] == metrics[-1]["train_acc"]

    restored = morvit.Session.load(ckpt)
    assert restored.config == rc
    assert restored.epoch == 2
    assert restored.evaluate(data)["predictions"] == result["predictions"]


def test_depth_map_formats():
    rc = tiny_run(max_recursion=3)
    session = morvit.Session(rc)
    image = morvit.synth_dataset(1, 2, rc.model).images()[0]
    csv = session.depth_map(image)
    rows = csv.strip().split("\n")
    assert len(rows) == rc.model.image_h // rc.model.patch_size
    assert '"grid"' in session.depth_map(image, "json")
    with pytest.raises(morvit.ConfigError):
        session.depth_map(image, "png")


def test_detect_degenerate():
    degenerate, fraction = morvit.detect_degenerate([[1] * 19 + [2]], 4)
    assert degenerate and fraction == 0.95
    degenerate, _ = morvit.detect_degenerate([[1] * 18 + [2, 2]], 4)
    assert not degenerate


def test_load_cifar_errors(tmp_path):
    bad = tmp_path / "short.bin"
    bad.write_bytes(bytes(3072))
    with pytest.raises(morvit.DataError):
        morvit.load_cifar10(bad)

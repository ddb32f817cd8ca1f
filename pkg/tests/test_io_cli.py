import struct

import numpy as np
import pytest

from lymphoseg import cli, io, pipeline, segnet
from lymphoseg.labels import CLASS_NAMES

TINY = """\
slides = 2
slide_size = 96
counts = 3,3,3,3,3
widths = 4,8
epochs = 1
batch_size = 8
steps = 2
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(TINY)
    return path


@pytest.fixture
def dataset(tmp_path, config):
    root = tmp_path / "data"
    assert cli.main(["generate", "--config", str(config), "--out", str(root)]) == 0
    return root


# ------------------------------------------------------------------- rasters

def test_raster_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 65536, (7, 5)).astype(np.uint16)
    lbl = rng.integers(0, 5, (7, 5)).astype(np.uint8)
    io.write_raster(tmp_path / "a.img", img)
    io.write_raster(tmp_path / "a.lbl", lbl)
    np.testing.assert_array_equal(io.read_raster(tmp_path / "a.img"), img)
    np.testing.assert_array_equal(io.read_raster(tmp_path / "a.lbl"), lbl)
    raw = (tmp_path / "a.img").read_bytes()
    assert struct.unpack("<II", raw[:8]) == (5, 7) and len(raw) == 8 + 2 * 35
    assert int.from_bytes(raw[8:10], "little") == img[0, 0]


def test_raster_errors(tmp_path):
    with pytest.raises(ValueError):
        io.write_raster(tmp_path / "a.lbl", np.full((2, 2), 300))
    with pytest.raises(ValueError):
        io.write_raster(tmp_path / "a.img", np.zeros((2, 2, 2), int))
    (tmp_path / "b.img").write_bytes(struct.pack("<II", 4, 4) + b"\0" * 10)
    with pytest.raises(io.FormatError):
        io.read_raster(tmp_path / "b.img")


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_bitwise_round_trip(tmp_path):
    p = segnet.build_network(segnet.NetworkConfig(widths=(4, 8, 8), seed=9))
    io.save_checkpoint(tmp_path / "m.hseg", p, epoch=17)
    q, epoch = io.load_checkpoint(tmp_path / "m.hseg")
    assert epoch == 17 and q.config == p.config
    assert list(q.tensors) == list(p.tensors)
    for name in p.tensors:
        assert q[name].data.dtype == np.float32
        assert q[name].data.tobytes() == p[name].data.tobytes()
    x = np.random.default_rng(0).standard_normal((2, 1, 16, 16)).astype(np.float32)
    assert segnet.forward(p, x).data.tobytes() == segnet.forward(q, x).data.tobytes()
    io.save_checkpoint(tmp_path / "again.hseg", q, epoch=17)
    assert (tmp_path / "again.hseg").read_bytes() == (tmp_path / "m.hseg").read_bytes()


def test_checkpoint_version_checked_before_tensors(tmp_path):
    p = segnet.build_network(segnet.NetworkConfig(widths=(4, 8)))
    io.save_checkpoint(tmp_path / "m.hseg", p)
    raw = bytearray((tmp_path / "m.hseg").read_bytes())
    assert raw[:4] == b"HSEG"
    raw[4:8] = struct.pack("<I", 99)
    # truncating straight after the version proves nothing beyond it is read
    (tmp_path / "v.hseg").write_bytes(bytes(raw[:8]))
    with pytest.raises(io.FormatError, match="version 99"):
        io.load_checkpoint(tmp_path / "v.hseg")


def test_checkpoint_corruption(tmp_path):
    p = segnet.build_network(segnet.NetworkConfig(widths=(4, 8)))
    io.save_checkpoint(tmp_path / "m.hseg", p)
    raw = (tmp_path / "m.hseg").read_bytes()
    (tmp_path / "bad.hseg").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(io.FormatError, match="magic"):
        io.load_checkpoint(tmp_path / "bad.hseg")
    (tmp_path / "short.hseg").write_bytes(raw[:-3])
    with pytest.raises(io.FormatError, match="truncated"):
        io.load_checkpoint(tmp_path / "short.hseg")


def test_kv_parsing():
    kv = io.parse_kv("a = 1\n# note\n\nb=two words # trailing\n")
    assert kv == {"a": "1", "b": "two words"}
    with pytest.raises(io.FormatError):
        io.parse_kv("novalue\n")
    with pytest.raises(io.FormatError):
        io.parse_kv("a = 1\na = 2\n")


def test_pgm_export(tmp_path):
    values = np.array([[0.0, 0.5], [1.0, 2.0]])
    lo, hi = io.write_pgm(tmp_path / "x.pgm", values)
    assert (lo, hi) == (0.0, 2.0)
    np.testing.assert_array_equal(io.read_pgm(tmp_path / "x.pgm"), [[0, 64], [128, 255]])
    io.write_pgm(tmp_path / "flat.pgm", np.zeros((3, 3)))
    assert not io.read_pgm(tmp_path / "flat.pgm").any()


# --------------------------------------------------------------------- config

def test_config_defaults_and_overrides(config):
    assert cli.RunConfig().epochs == 100 and cli.RunConfig().batch_size == 32 and cli.RunConfig().lr == 1e-3
    cfg = cli.load_config(str(config), seed=5, epochs=None)
    assert cfg.slides == 2 and cfg.widths == (4, 8) and cfg.seed == 5 and cfg.epochs == 1


def test_config_unknown_key(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("epochs = 2\nlearning_rate = 0.1\n")
    with pytest.raises(ValueError, match="unknown config key 'learning_rate'"):
        cli.load_config(str(bad))


@pytest.mark.parametrize("text", ["lr = -1", "epochs = 0", "ratios = 0.5,0.5,0.5", "split_mode = stratified",
                                  "hard = maybe", "counts = 1,2"])
def test_config_validation(tmp_path, text):
    bad = tmp_path / "bad.cfg"
    bad.write_text(text + "\n")
    with pytest.raises(ValueError):
        cli.load_config(str(bad))


# -------------------------------------------------------------------- commands

def test_generate_layout_and_manifest(tmp_path, dataset, config):
    header, entries = cli.read_manifest(dataset)
    for s in range(2):
        for ch in ("nuclear", "cd20", "cd8", "cd3"):
            assert io.read_raster(dataset / "slides" / str(s) / f"{ch}.img").shape == (96, 96)
    assert int(header["patch_count"]) == len(entries) == 2 * pipeline.expected_patch_count(96, 96, 64, 0.5)
    assert header["seed"] == "0" and header["counts"] == "3,3,3,3,3"
    n = len(entries)
    assert [int(header[k]) for k in ("train", "val", "test")] == pipeline.split_sizes(n, (0.8, 0.1, 0.1))
    for pid, _ in entries:
        assert (dataset / "patches" / f"{pid}.img").exists() and (dataset / "patches" / f"{pid}.lbl").exists()
    again = tmp_path / "again"
    cli.main(["generate", "--config", str(config), "--out", str(again)])
    assert (again / "manifest.txt").read_bytes() == (dataset / "manifest.txt").read_bytes()


def test_generate_unwritable(tmp_path, config, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert cli.main(["generate", "--config", str(config), "--out", str(blocker / "sub")]) == 2
    assert "cannot write" in capsys.readouterr().err


def test_train_eval_explain(tmp_path, dataset, config):
    run = tmp_path / "run"
    args = ["--config", str(config), "--data", str(dataset), "--out", str(run)]
    assert cli.main(["train", *args]) == 0
    log_lines = (run / "train_log.csv").read_text().splitlines()
    assert log_lines[0] == "epoch,train_loss,val_loss" and len(log_lines) == 2
    params, epoch = io.load_checkpoint(run / "model.hseg")
    assert epoch == 1

    # deterministic given config and seed
    run2 = tmp_path / "run2"
    cli.main(["train", "--config", str(config), "--data", str(dataset), "--out", str(run2)])
    assert (run2 / "model.hseg").read_bytes() == (run / "model.hseg").read_bytes()
    assert (run2 / "train_log.csv").read_bytes() == (run / "train_log.csv").read_bytes()

    assert cli.main(["eval", *args]) == 0
    rows = [r for r in (run / "report_test.csv").read_text().splitlines()[1:]]
    assert len(rows) == 2 * (len(CLASS_NAMES) + 1)

    assert cli.main(["explain", *args, "--steps", "0"]) == 0
    data = cli.load_dataset(dataset, ("train",))
    from lymphoseg.explain import mean_training_image
    np.testing.assert_array_equal(np.load(run / "quadrant.npy"), mean_training_image(data["train"])[0])
    assert (run / "quadrant.range.txt").exists()

    assert cli.main(["explain", *args, "--mode", "saliency", "--patches", "2"]) == 0
    maps = sorted(run.glob("saliency_*.pgm"))
    assert len(maps) == 2 * len(CLASS_NAMES)


def test_eval_gt_fixture_scores_one(tmp_path, dataset, config, monkeypatch):
    from lymphoseg import metrics, train
    params = segnet.build_network(segnet.NetworkConfig(widths=(4, 8)))
    ckpt = tmp_path / "m.hseg"
    io.save_checkpoint(ckpt, params)

    def oracle(params, patches, split="test", hard=False):
        return metrics.evaluate([p.target for p in patches], [metrics.one_hot(p.target) for p in patches], split)

    monkeypatch.setattr(train, "evaluate_patches", oracle)
    out = tmp_path / "ev"
    assert cli.main(["eval", "--config", str(config), "--data", str(dataset), "--checkpoint", str(ckpt),
                     "--out", str(out)]) == 0
    rows = metrics.parse_report((out / "report_test.csv").read_text())
    assert all(r["precision"] == r["recall"] == r["f1"] == 1.0 for r in rows)


def test_eval_rejects_class_mismatch(tmp_path, dataset, config, capsys):
    params = segnet.build_network(segnet.NetworkConfig(widths=(4, 8), num_classes=3))
    ckpt = tmp_path / "m.hseg"
    io.save_checkpoint(ckpt, params)
    assert cli.main(["eval", "--config", str(config), "--data", str(dataset), "--checkpoint", str(ckpt)]) == 2
    assert "classes" in capsys.readouterr().err


def test_train_rejects_corrupt_dataset(tmp_path, dataset, config, capsys):
    victim = sorted((dataset / "patches").glob("*.lbl"))[0]
    victim.write_bytes(victim.read_bytes()[:20])
    assert cli.main(["train", "--config", str(config), "--data", str(dataset), "--out", str(tmp_path / "r")]) == 2
    assert "corrupt dataset" in capsys.readouterr().err
    assert cli.main(["train", "--config", str(config), "--data", str(tmp_path / "nowhere")]) == 2


def test_unknown_subcommand_and_mode():
    with pytest.raises(SystemExit):
        cli.main(["frobnicate"])
    with pytest.raises(SystemExit):
        cli.main(["explain", "--mode", "dream"])

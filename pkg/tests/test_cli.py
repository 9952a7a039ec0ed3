import csv
import json

import numpy as np
import pytest
from PIL import Image

from iterseg.checkpoint import save_checkpoint
from iterseg.cli import main
from iterseg.data import write_dataset, synth_corpus

TINY = """\
input_height = 16
input_width = 16
stages = 2
base_channels = 4
synth_family = disk
synth_count = 6
synth_test_count = 2
max_iterations = 2
epochs = 1
batch_size = 2
"""


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    summary = json.loads(out.out) if code == 0 else None
    return code, summary, out.err


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "run.txt"
    p.write_text(TINY)
    return p


@pytest.fixture
def trained(tmp_path, cfg_path, capsys):
    code, summary, _ = run(capsys, "train", "--config", cfg_path, "--out", tmp_path / "train")
    assert code == 0
    return tmp_path / "train"


def test_train_outputs(trained, cfg_path):
    assert (trained / "checkpoint.iseg").exists()
    assert (trained / "config.txt").read_text().startswith("seed = 0")
    rows = read_csv(trained / "train_trace.csv")
    assert list(rows[0]) == ["image_id", "iteration", "dice", "jaccard", "loss", "conv_sum", "ms"]


def test_train_is_deterministic(tmp_path, cfg_path, capsys, trained):
    assert run(capsys, "train", "--config", cfg_path, "--out", tmp_path / "again")[0] == 0
    for name in ("checkpoint.iseg", "train_trace.csv", "config.txt"):
        assert (trained / name).read_bytes() == (tmp_path / "again" / name).read_bytes()


def test_seed_flag_changes_run(tmp_path, cfg_path, capsys, trained):
    assert run(capsys, "train", "--config", cfg_path, "--seed", 5, "--out", tmp_path / "s5")[0] == 0
    assert (trained / "checkpoint.iseg").read_bytes() != (tmp_path / "s5" / "checkpoint.iseg").read_bytes()


def test_infer_outputs(tmp_path, cfg_path, capsys, trained):
    sample = synth_corpus(1, (16, 16), "disk", 3)[0]
    img = tmp_path / "probe.png"
    Image.fromarray((sample.image * 255).round().astype(np.uint8)).save(img)
    code, summary, _ = run(
        capsys, "infer", "--config", cfg_path, "--checkpoint", trained / "checkpoint.iseg", "--image", img,
        "--out", tmp_path / "inf",
    )
    assert code == 0
    mask = np.array(Image.open(tmp_path / "inf" / "mask.png"))
    assert set(np.unique(mask)) <= {0, 255}
    soft = np.array(Image.open(tmp_path / "inf" / "soft.pgm"))
    assert soft.dtype == np.uint16 or soft.max() > 255
    rows = read_csv(tmp_path / "inf" / "trace.csv")
    assert 1 <= len(rows) <= 2

    code, summary, _ = run(
        capsys, "infer", "--config", cfg_path, "--checkpoint", trained / "checkpoint.iseg", "--image", img,
        "--max-iter", 1, "--out", tmp_path / "inf1",
    )
    assert code == 0 and summary["iterations"] == 1
    assert len(read_csv(tmp_path / "inf1" / "trace.csv")) == 1


def test_converged_final_row_below_threshold(tmp_path, capsys):
    from helpers import passthrough_params

    cfg = tmp_path / "pt.txt"
    cfg.write_text("input_height = 16\ninput_width = 16\nstages = 1\nbase_channels = 1\nmerge_points = 1\n")
    ckpt = tmp_path / "pt.iseg"
    save_checkpoint(passthrough_params(16, 16), ckpt)
    sample = synth_corpus(1, (16, 16), "disk", 0, noise=0.0)[0]
    img = tmp_path / "probe.png"
    Image.fromarray((sample.image * 255).round().astype(np.uint8)).save(img)
    code, summary, _ = run(capsys, "infer", "--config", cfg, "--checkpoint", ckpt, "--image", img, "--out", tmp_path / "o")
    assert code == 0 and summary["converged"]
    rows = read_csv(tmp_path / "o" / "trace.csv")
    assert float(rows[-1]["conv_sum"]) < 0.001 * 16 * 16
    mask = np.array(Image.open(tmp_path / "o" / "mask.png")) > 0
    np.testing.assert_array_equal(mask, sample.mask > 0)


def test_evaluate_perfect_oracle(tmp_path, capsys):
    from helpers import passthrough_params

    cfg = tmp_path / "pt.txt"
    cfg.write_text(
        "input_height = 16\ninput_width = 16\nstages = 1\nbase_channels = 1\nmerge_points = 1\n"
        "synth_family = disk\nsynth_noise = 0\nsynth_count = 5\nsynth_test_count = 5\nmax_iterations = 3\n"
    )
    ckpt = tmp_path / "pt.iseg"
    save_checkpoint(passthrough_params(16, 16), ckpt)
    code, summary, _ = run(capsys, "evaluate", "--config", cfg, "--checkpoint", ckpt, "--out", tmp_path / "ev")
    assert code == 0
    assert summary["mean_dice"] == [1.0, 1.0, 1.0]
    assert summary["mean_jaccard"] == [1.0, 1.0, 1.0]


def test_evaluate_rows(tmp_path, cfg_path, capsys, trained):
    code, summary, _ = run(capsys, "evaluate", "--config", cfg_path, "--checkpoint", trained / "checkpoint.iseg", "--out", tmp_path / "ev")
    assert code == 0
    rows = read_csv(tmp_path / "ev" / "eval.csv")
    assert len(rows) == 2 * 2 + 1
    assert rows[-1]["image_id"] == "mean"
    for r in rows[:-1]:
        dc, jc = float(r["dice"]), float(r["jaccard"])
        assert abs(jc - dc / (2 - dc)) < 1e-6
    curve = read_csv(tmp_path / "ev" / "curve.csv")
    assert [int(c["iteration"]) for c in curve] == [1, 2]


def test_augment_identity_copies(tmp_path, capsys):
    data = tmp_path / "data"
    samples = synth_corpus(3, (16, 16), "ring", 0)
    write_dataset(data, samples)
    code, summary, _ = run(capsys, "augment", "--dataset", data, "--spec", "identity", "--out", tmp_path / "aug")
    assert code == 0 and summary["files"] == 3
    for sub in ("images", "masks"):
        for p in sorted((data / sub).iterdir()):
            assert (tmp_path / "aug" / sub / p.name).read_bytes() == p.read_bytes()


def test_augment_only_train_split(tmp_path, capsys):
    data = tmp_path / "data"
    samples = synth_corpus(3, (16, 16), "ring", 0)
    write_dataset(data, samples, split={"ring0000": "train", "ring0001": "test", "ring0002": "train"})
    spec = tmp_path / "spec.txt"
    spec.write_text("flips = identity, both\n")
    code, summary, _ = run(capsys, "augment", "--dataset", data, "--spec", spec, "--out", tmp_path / "aug")
    assert code == 0 and summary["files"] == 4
    assert not any("ring0001" in p.name for p in (tmp_path / "aug" / "images").iterdir())


def test_synth_writes_split(tmp_path, cfg_path, capsys):
    code, summary, _ = run(capsys, "synth", "--config", cfg_path, "--out", tmp_path / "syn")
    assert code == 0 and summary["samples"] == 6
    lines = (tmp_path / "syn" / "split.txt").read_text().split()
    assert sum(l.endswith(",test") for l in lines) == 2


def test_train_from_disk_dataset(tmp_path, cfg_path, capsys):
    run(capsys, "synth", "--config", cfg_path, "--out", tmp_path / "syn")
    cfg = tmp_path / "disk.txt"
    cfg.write_text(TINY + f"data_root = {tmp_path / 'syn'}\n")
    code, summary, _ = run(capsys, "train", "--config", cfg, "--out", tmp_path / "t")
    assert code == 0 and summary["samples"] == 4


# --- exit codes ---------------------------------------------------------------


def test_exit_config_error(tmp_path, capsys):
    bad = tmp_path / "bad.txt"
    bad.write_text("nonsense_key = 1\n")
    code, _, err = run(capsys, "train", "--config", bad, "--out", tmp_path / "x")
    assert code == 2 and "nonsense_key" in err


def test_exit_missing_masks(tmp_path, cfg_path, capsys):
    data = tmp_path / "data"
    write_dataset(data, synth_corpus(2, (16, 16), "disk", 0))
    for p in (data / "masks").iterdir():
        p.unlink()
    (data / "masks").rmdir()
    cfg = tmp_path / "c.txt"
    cfg.write_text(TINY + f"data_root = {data}\n")
    code, _, err = run(capsys, "train", "--config", cfg, "--out", tmp_path / "x")
    assert code == 3 and str(data / "masks") in err


def test_exit_checkpoint_mismatch(tmp_path, cfg_path, capsys, trained):
    wider = tmp_path / "w.txt"
    wider.write_text(TINY.replace("base_channels = 4", "base_channels = 8"))
    code, _, err = run(capsys, "evaluate", "--config", wider, "--checkpoint", trained / "checkpoint.iseg", "--out", tmp_path / "x")
    assert code == 2 and "shape mismatch" in err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_exit_divergence(tmp_path, capsys):
    cfg = tmp_path / "d.txt"
    cfg.write_text(TINY.replace("epochs = 1", "epochs = 3") + "lr = 1e30\ngrad_clip = none\n")
    code, _, err = run(capsys, "train", "--config", cfg, "--out", tmp_path / "x")
    assert code == 4 and "iteration" in err

import json
import subprocess
import sys

import pytest

from iafa import cli
from iafa import data as D
from iafa import detector as det
from iafa import geometry as geo
from iafa.data import KittiLabel, write_label_file
from iafa.tensor import load_checkpoint


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_gradcheck_passes_and_is_deterministic(capsys):
    code, a, _ = run(capsys, "gradcheck", "--trials", "3", "--seed", "4")
    assert code == 0 and "FAIL" not in a
    _, b, _ = run(capsys, "gradcheck", "--trials", "3", "--seed", "4")
    assert a == b


def test_gradcheck_zero_tolerance_fails(capsys):
    code, _, err = run(capsys, "gradcheck", "--trials", "2", "--tolerance", "0")
    assert code == 1 and "gradcheck failed" in err


def test_train_zero_steps_writes_init(tmp_path, capsys):
    code, out, _ = run(capsys, "train-toy", "--scenes", "2", "--steps", "0", "--seed", "5", "--out", str(tmp_path))
    assert code == 0 and "steps=0" in out
    params = load_checkpoint(tmp_path / "checkpoint.bin")
    init = det.init_params(det.DetectorConfig(), 5)
    assert all(params[n].data.tobytes() == init[n].data.tobytes() for n in init.names())
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["seed"] == 5 and manifest["command"] == "train-toy"


def test_train_reruns_are_byte_identical(tmp_path, capsys):
    outs = []
    for name in ("a", "b"):
        d = tmp_path / name
        assert run(capsys, "train-toy", "--scenes", "2", "--steps", "3", "--out", str(d))[0] == 0
        outs.append(d)
    for f in ("checkpoint.bin", "loss.csv", "manifest.json"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
    lines = (outs[0] / "loss.csv").read_text().splitlines()
    assert lines[0].startswith("step,") and len(lines) == 4


def test_bad_gamma_and_missing_config(tmp_path, capsys):
    assert run(capsys, "train-toy", "--gamma", "1,2", "--steps", "0", "--out", str(tmp_path))[0] == 1
    assert run(capsys, "--config", str(tmp_path / "nope.cfg"), "gradcheck")[0] == 1


def test_config_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nsteps = 7\nlr=0.5\nmask-background = false\n")
    args = cli.build_parser().parse_args(["--config", str(cfg), "train-toy", "--lr", "0.1", "--out", "x"])
    opts = cli.resolve(args, ["steps", "lr", "seed", "mask_background"])
    assert opts == {"steps": 7, "lr": 0.1, "seed": 0, "mask_background": False}
    cfg.write_text("steps\n")
    with pytest.raises(D.ParseError):
        cli.resolve(args, ["steps"])


BOX = geo.Box3D((0.0, 1.6, 12.0), (3.9, 1.6, 1.5), 0.0)


def _label(box, score=None):
    return KittiLabel("Car", 0.0, 0, 0.0, (100.0, 100.0, 160.0, 160.0), (box.h, box.w, box.l), box.c, box.ry, score)


def test_eval_dets_equal_gts(tmp_path, capsys):
    (tmp_path / "gt").mkdir()
    (tmp_path / "det").mkdir()
    (tmp_path / "gt" / "000000.txt").write_text(write_label_file([_label(BOX)]))
    (tmp_path / "det" / "000000.txt").write_text(write_label_file([_label(BOX, 0.9)], detection=True))
    code, out, _ = run(capsys, "eval", "--det", str(tmp_path / "det"), "--gt", str(tmp_path / "gt"))
    assert code == 0
    rows = (tmp_path / "det" / "report_R40.csv").read_text().splitlines()[1:]
    assert len(rows) == 6 and all(float(r.split(",")[-1]) == pytest.approx(100.0) for r in rows)


def test_eval_hand_fixture_both_criteria(tmp_path, capsys):
    (tmp_path / "gt").mkdir()
    (tmp_path / "det").mkdir()
    dx = BOX.l * 0.2 / 1.8
    good = geo.Box3D((dx, 1.6, 12.0), BOX.d, 0.0)
    bad = geo.Box3D((20.0, 1.6, 12.0), BOX.d, 0.0)
    (tmp_path / "gt" / "000000.txt").write_text(write_label_file([_label(BOX)]))
    (tmp_path / "det" / "000000.txt").write_text(
        write_label_file([_label(good, 0.9), _label(bad, 0.95)], detection=True))
    for crit in ("11", "40"):
        out_csv = tmp_path / f"r{crit}.csv"
        code, _, _ = run(capsys, "eval", "--det", str(tmp_path / "det"), "--gt", str(tmp_path / "gt"),
                         "--metric", "bev", "--criterion", crit, "--out", str(out_csv))
        assert code == 0
        rows = {tuple(r.split(",")[:3]): float(r.split(",")[3]) for r in out_csv.read_text().splitlines()[1:]}
        assert rows[("Car", "bev", "Moderate")] == pytest.approx(50.0)


def test_eval_malformed_file(tmp_path, capsys):
    (tmp_path / "gt").mkdir()
    (tmp_path / "det").mkdir()
    (tmp_path / "gt" / "000000.txt").write_text("Car 0 0\n")
    code, _, err = run(capsys, "eval", "--det", str(tmp_path / "det"), "--gt", str(tmp_path / "gt"))
    assert code == 1 and "000000.txt:1" in err


def test_make_data_predict_eval_pipeline(tmp_path, capsys):
    assert run(capsys, "train-toy", "--scenes", "1", "--steps", "0", "--out", str(tmp_path / "m"))[0] == 0
    assert run(capsys, "make-data", "--scenes", "2", "--seed", "3", "--out", str(tmp_path / "d"))[0] == 0
    assert run(capsys, "predict", "--checkpoint", str(tmp_path / "m" / "checkpoint.bin"), "--scenes", "2",
               "--seed", "3", "--out", str(tmp_path / "p"))[0] == 0
    assert sorted(p.name for p in (tmp_path / "p").glob("*.txt")) == ["000000.txt", "000001.txt"]
    code, out, _ = run(capsys, "eval", "--det", str(tmp_path / "p"), "--gt", str(tmp_path / "d" / "label_2"))
    assert code == 0 and "Moderate" in out


def test_render_outputs(tmp_path, capsys):
    run(capsys, "train-toy", "--scenes", "1", "--steps", "0", "--out", str(tmp_path / "m"))
    code, out, _ = run(capsys, "render", "--checkpoint", str(tmp_path / "m" / "checkpoint.bin"),
                       "--scene", "0", "--out", str(tmp_path / "r"))
    assert code == 0
    n = len(D.generate_scene(0, D.SceneConfig(occlusion_pairs=1)).boxes)
    pgms = sorted((tmp_path / "r").glob("attention_*.pgm"))
    assert len(pgms) == n
    assert all(D.read_pgm(p).shape == (6, 16) for p in pgms)
    svg = (tmp_path / "r" / "bev.svg").read_text()
    assert svg.startswith("<svg") and svg.count("<polygon") >= n
    assert out.count("attention mass inside own mask") == n


def test_render_missing_checkpoint(tmp_path, capsys):
    code, _, err = run(capsys, "render", "--checkpoint", str(tmp_path / "none.bin"), "--out", str(tmp_path))
    assert code == 1 and "not found" in err


def test_console_script_exit_code(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "iafa.cli", "eval", "--det", str(tmp_path / "a"),
                           "--gt", str(tmp_path / "b")], capture_output=True, text=True)
    assert proc.returncode == 1


def test_svg_helper_shapes():
    svg = cli.svg_bev([BOX], [BOX])
    assert svg.count("<polygon") == 2 and "stroke-dasharray" in svg

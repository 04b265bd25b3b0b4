import json

import numpy as np
import pytest
import yaml

from camsticker import __version__
from camsticker.artifacts import read_artifact, read_image, write_artifact, write_image
from camsticker.calib import GridSpec, SharedDotShape, ThreatModel
from camsticker.perturb import DotParams, StickerPattern
from workflow import GEN_B, GEN_K, run, run_chain, write_manifest


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    d = tmp_path_factory.mktemp("chain")
    names = run_chain(d)
    return d, names


def attack_artifact(path, dots, frame=(64, 64), palette_printed=None):
    tm = ThreatModel(
        SharedDotShape(40.0, 0.3, 1.0), ((1.0, 0.0, 0.0),), GridSpec.for_image(*frame, 5), 10, palette_printed
    )
    payload = {
        "mode": "threat-model",
        "config": {"victim": 1, "target": 0, "num_dots": len(dots)},
        "result": {"pattern": StickerPattern(tuple(dots)).to_dict(), "loss_trace": [[0, 0.0]]},
        "threat_model": tm.to_dict(),
        "image_shape": list(frame),
        "class_names": ["disk", "square", "triangle"],
    }
    write_artifact(path, "attack", payload)
    return path


# --------------------------------------------------------------------------
# calibrate


def test_calibrate_recovers_generator(tmp_path, capsys):
    manifest, _ = write_manifest(tmp_path, n_pairs=0)
    assert run("calibrate", manifest, "-o", tmp_path / "cal.json") == 0
    cal = read_artifact(tmp_path / "cal.json", "color-calibration")["payload"]
    assert np.allclose(cal["k"], GEN_K, atol=1e-6) and np.allclose(cal["b"], GEN_B, atol=1e-6)
    assert "residual rms" in capsys.readouterr().out


def test_calibrate_identity(tmp_path):
    rows = [{"printed": [v, 1 - v, v / 2], "observed": [v, 1 - v, v / 2]} for v in (0.1, 0.3, 0.5, 0.7, 0.9)]
    (tmp_path / "m.yaml").write_text(yaml.safe_dump({"color_pairs": rows}))
    assert run("calibrate", tmp_path / "m.yaml", "-o", tmp_path / "cal.json") == 0
    cal = read_artifact(tmp_path / "cal.json")["payload"]
    assert np.allclose(cal["k"], 1, atol=1e-9) and np.allclose(cal["b"], 0, atol=1e-9)


def test_calibrate_input_errors(tmp_path, capsys):
    assert run("calibrate", tmp_path / "missing.yaml", "-o", tmp_path / "c.json") == 3
    (tmp_path / "bad.yaml").write_text("color_pairs:\n  - {printed: [1, 2]}\n")
    assert run("calibrate", tmp_path / "bad.yaml", "-o", tmp_path / "c.json") == 3
    assert "color pair 0" in capsys.readouterr().err
    (tmp_path / "flat.yaml").write_text(yaml.safe_dump({"color_pairs": [{"printed": [0.5] * 3, "observed": [0.5] * 3}] * 3}))
    assert run("calibrate", tmp_path / "flat.yaml", "-o", tmp_path / "c.json") == 4


# --------------------------------------------------------------------------
# fit


def test_fit_single_pair(tmp_path, capsys):
    manifest, shape = write_manifest(tmp_path, n_pairs=1, size=64)
    assert run("fit", manifest, "--grid-cells", 13, "--inner-steps", 30, "-o", tmp_path / "tm.json") == 0
    tm = ThreatModel.from_dict(read_artifact(tmp_path / "tm.json", "threat-model")["payload"])
    assert tm.shape.radius == pytest.approx(shape.radius, rel=0.05)
    assert tm.grid == GridSpec.for_image(64, 64, 13)
    assert len(tm.palette) == 1 and tm.palette_printed is not None
    assert "mean SSIM" in capsys.readouterr().out


def test_fit_frame_rescales_shape(tmp_path):
    manifest, shape = write_manifest(tmp_path, n_pairs=1, size=64)
    assert run("fit", manifest, "--frame", 32, 32, "--grid-cells", 5, "--inner-steps", 30, "-o", tmp_path / "tm.json") == 0
    pay = read_artifact(tmp_path / "tm.json")["payload"]
    capture = pay["diagnostics"]["capture_shape"]["radius"]
    assert pay["shape"]["radius"] == pytest.approx(capture / 2)
    assert pay["grid"]["spacing"] == 6.0


def test_fit_mismatched_pair(tmp_path, capsys):
    manifest, _ = write_manifest(tmp_path, n_pairs=2, size=48)
    write_image(tmp_path / "captures/dotted_1.png", np.zeros((40, 48, 3)))
    assert run("fit", manifest, "-o", tmp_path / "tm.json") == 3
    assert "capture pair 1" in capsys.readouterr().err
    assert not (tmp_path / "tm.json").exists()


def test_fit_missing_capture(tmp_path, capsys):
    manifest, _ = write_manifest(tmp_path, n_pairs=2, size=48)
    (tmp_path / "captures/clean_0.png").unlink()
    assert run("fit", manifest, "-o", tmp_path / "tm.json") == 3
    assert "capture pair 0" in capsys.readouterr().err


# --------------------------------------------------------------------------
# attack / evaluate on a small trained network


def test_chain_outputs(chain):
    d, names = chain
    for name in names:
        assert (d / name).is_file()
    pay = read_artifact(d / "attack.json", "attack")["payload"]
    assert pay["image_shape"] == [32, 32] and len(pay["result"]["pattern"]["dots"]) <= 2
    rep = read_artifact(d / "report.json", "fooling-report")["payload"]["report"]
    assert rep["fraction_correct"] + rep["fraction_target"] + rep["fraction_other"] == pytest.approx(1.0)
    tm = read_artifact(d / "threat.json")["payload"]
    assert len(tm["palette"]) == 3 and len(tm["diagnostics"]["palette_scores"]) == 3


def _attack_args(d, *extra):
    return (
        "attack",
        "--threat-model", d / "threat.json",
        "--dataset", d / "shapes/manifest.json",
        "--model", f"builtin:{d / 'net.npz'}",
        *extra,
    )


def test_attack_zero_dots_and_evaluate(chain, tmp_path, capsys):
    d, _ = chain
    out = tmp_path / "a0.json"
    assert run(*_attack_args(d, "--victim", 1, "--target", 0, "--dots", 0, "-o", out)) == 0
    pay = read_artifact(out)["payload"]
    assert pay["result"]["pattern"]["dots"] == [] and len(pay["result"]["loss_trace"]) == 1
    capsys.readouterr()
    assert run("evaluate", out, "--dataset", d / "shapes/manifest.json", "--model", f"builtin:{d / 'net.npz'}") == 0
    table = capsys.readouterr().out.splitlines()
    assert table[1].split()[:4] == ["square", "->", "disk", "No"]


def test_attack_argument_errors(chain, tmp_path, capsys):
    d, _ = chain
    assert run(*_attack_args(d, "--victim", 1, "--target", 1, "-o", tmp_path / "a.json")) == 2
    assert "must differ" in capsys.readouterr().err
    assert run(*_attack_args(d, "--victim", 1, "--target", 7, "-o", tmp_path / "a.json")) == 2
    assert run(*_attack_args(d, "--victim", 1, "--target", 0, "--dots", 11, "-o", tmp_path / "a.json")) == 2
    assert run(*_attack_args(d, "--victim", "x", "--target", 0, "-o", tmp_path / "a.json")) == 2
    assert not (tmp_path / "a.json").exists()


def test_attack_missing_inputs(chain, tmp_path, capsys):
    d, _ = chain
    args = ("attack", "--threat-model", tmp_path / "nope.json", "--dataset", d / "shapes/manifest.json",
            "--model", f"builtin:{d / 'net.npz'}", "--victim", 1, "--target", 0, "-o", tmp_path / "a.json")
    assert run(*args) == 3
    assert "nope.json" in capsys.readouterr().err
    assert run(*_attack_args(d, "--victim", 1, "--target", 0, "--dataset", tmp_path / "x.json",
                             "-o", tmp_path / "a.json")) == 3
    assert run("attack", "--threat-model", d / "report.json", "--dataset", d / "shapes/manifest.json",
               "--model", f"builtin:{d / 'net.npz'}", "--victim", 1, "--target", 0, "-o", tmp_path / "a.json") == 3


def test_unconstrained_attack(chain, tmp_path):
    d, _ = chain
    out = tmp_path / "pgd.json"
    assert run(*_attack_args(d, "--victim", 1, "--target", 0, "--dots", 2, "--unconstrained", "--pgd-steps", 3,
                             "--max-images", 4, "-o", out)) == 0
    pay = read_artifact(out)["payload"]
    assert pay["mode"] == "unconstrained" and pay["n_attack_images"] == 4


def test_sweep_command(chain, tmp_path, capsys):
    d, _ = chain
    out = tmp_path / "sweep.json"
    args = ("sweep", "--threat-model", d / "threat.json", "--dataset", d / "shapes/manifest.json",
            "--model", f"builtin:{d / 'net.npz'}", "--victim", 1, "--target", 0, "--counts", 1, 2,
            "--max-images", 3, "--no-fine-tune", "-o", out)
    assert run(*args) == 0
    rows = read_artifact(out, "dot-count-sweep")["payload"]["rows"]
    assert [r["num_dots"] for r in rows] == [1, 2]
    assert "Targeted Fooling Rate" in capsys.readouterr().out


# --------------------------------------------------------------------------
# render / export


def test_render_preview(tmp_path):
    dot = DotParams((1.0, 0.0, 0.0), (20.0, 30.0), 8.0, 0.5, 1.0)
    attack = attack_artifact(tmp_path / "a.json", [dot])
    assert run("render", attack, "-o", tmp_path / "p.png") == 0
    img = read_image(tmp_path / "p.png")
    assert img.shape == (64, 64, 3)
    assert tuple(np.unravel_index(np.argmin(img[..., 1]), img.shape[:2])) == (20, 30)
    assert np.all(img[0, 63] == 1.0)
    write_image(tmp_path / "bg.png", np.full((40, 50, 3), 0.2))
    assert run("render", attack, "--background", tmp_path / "bg.png", "-o", tmp_path / "q.png") == 0
    assert read_image(tmp_path / "q.png").shape == (40, 50, 3)
    assert run("render", attack, "--size", 16, 24, "-o", tmp_path / "r.png") == 0
    assert read_image(tmp_path / "r.png").shape == (16, 24, 3)
    assert run("render", attack, "--background", tmp_path / "none.png", "-o", tmp_path / "s.png") == 3


def test_export_sticker_geometry(tmp_path, capsys):
    dot = DotParams((1.0, 0.0, 0.0), (31.5, 31.5), 40.0, 0.3, 1.0)
    attack = attack_artifact(tmp_path / "a.json", [dot], palette_printed=((0.9, 0.1, 0.2),))
    out = tmp_path / "s.png"
    assert run("export-sticker", attack, "-o", out) == 0
    layout = read_artifact(tmp_path / "s.layout.json", "sticker-layout")["payload"]
    (placed,) = layout["dots"]
    assert placed["radius_dots"] == pytest.approx(30.0)
    assert placed["color"] == [0.9, 0.1, 0.2]
    img = read_image(out)
    # 64 px frame * 0.025/40 in/px * 1200 dpi = 48 device pixels
    assert img.shape == (48, 48, 3)
    from PIL import Image

    with Image.open(out) as im:
        assert round(im.info["dpi"][0]) == 1200
    assert "1 dot(s)" in capsys.readouterr().out


def test_export_empty_and_mirror(tmp_path, capsys):
    assert run("export-sticker", attack_artifact(tmp_path / "e.json", []), "--dpi", 600, "-o", tmp_path / "e.png") == 0
    assert np.all(read_image(tmp_path / "e.png") == 1.0)

    dot = DotParams((0.0, 0.0, 1.0), (10.0, 5.0), 4.0, 0.3, 1.0)
    attack = attack_artifact(tmp_path / "a.json", [dot])
    assert run("export-sticker", attack, "--dpi", 600, "--canvas", 2, 2, "-o", tmp_path / "n.png") == 0
    assert run("export-sticker", attack, "--dpi", 600, "--canvas", 2, 2, "--mirror", "-o", tmp_path / "m.png") == 0
    n, m = read_image(tmp_path / "n.png"), read_image(tmp_path / "m.png")
    assert np.array_equal(n[:, ::-1], m)
    x_n = read_artifact(tmp_path / "n.layout.json")["payload"]["dots"][0]["x_in"]
    x_m = read_artifact(tmp_path / "m.layout.json")["payload"]["dots"][0]["x_in"]
    assert x_n + x_m == pytest.approx(2.0)
    # small radius warns but still writes
    capsys.readouterr()
    assert run("export-sticker", attack, "--scale", 0.001, "-o", tmp_path / "w.png") == 0
    assert "fainter dot" in capsys.readouterr().err
    assert run("export-sticker", attack, "--dpi", 0, "-o", tmp_path / "z.png") == 2


# --------------------------------------------------------------------------
# global options


def test_version_and_help(capsys):
    with pytest.raises(SystemExit):
        from camsticker.cli import build_parser

        build_parser()[0].parse_args(["--version"])
    assert __version__ in capsys.readouterr().out
    assert run() == 2
    assert run("frobnicate") == 2


def test_config_file(tmp_path):
    manifest, _ = write_manifest(tmp_path, n_pairs=0)
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(yaml.safe_dump({"seed": 3, "calibrate": {"output": str(tmp_path / "from_cfg.json")}}))
    assert run("--config", cfg, "calibrate", manifest) == 0
    assert (tmp_path / "from_cfg.json").is_file()
    cfg.write_text(yaml.safe_dump({"colour": 1}))
    assert run("--config", cfg, "calibrate", manifest, "-o", tmp_path / "x.json") == 2
    cfg.write_text(yaml.safe_dump({"calibrate": {"dpi": 3}}))
    assert run("--config", cfg, "calibrate", manifest, "-o", tmp_path / "x.json") == 2
    assert run("--config", tmp_path / "none.yaml", "calibrate", manifest, "-o", tmp_path / "x.json") == 3


def test_shapes_command(tmp_path):
    assert run("--seed", 2, "shapes", tmp_path / "ds", "--n-per-class", 3, "--size", 24) == 0
    doc = json.loads((tmp_path / "ds/manifest.json").read_text())
    assert len(doc["items"]) == 9 and doc["classes"] == ["disk", "square", "triangle"]


def test_artifacts_are_byte_identical_across_runs(chain, tmp_path):
    d, names = chain
    again = tmp_path / "chain"
    run_chain(again)
    for name in names:
        assert (d / name).read_bytes() == (again / name).read_bytes(), name

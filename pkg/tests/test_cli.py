import numpy as np
import pytest

from surfseg import cli
from surfseg.overlay import decode_ppm
from surfseg.synthdata import read_surfaces


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def generated(tmp_path, capsys):
    base = tmp_path / "vol"
    code, _, _ = run(capsys, "generate", "--x", 64, "--y", 2, "--seed", 3, "--out", base)
    assert code == 0
    return base


def test_pipeline_smoke(tmp_path, capsys, generated):
    pre = tmp_path / "pre.lcv"
    assert run(capsys, "preprocess", "--in", f"{generated}.lcv", "--out", pre)[0] == 0
    ds = tmp_path / "d.lcp"
    code, out, _ = run(capsys, "extract", "--volumes", pre, "--surfaces", f"{generated}.lcs",
                       "--n", 32, "--stride", 16, "--border", "false", "--out", ds)
    assert code == 0 and "24 records" in out  # 2 slices x 3 starts x 4 variants
    model = tmp_path / "m.lcm"
    code, out, _ = run(capsys, "train", "--dataset", ds, "--conv-channels", "2,2,2", "--fc-hidden", 8,
                       "--epochs", 2, "--batch", 8, "--out", model)
    assert code == 0 and "epoch 2/2" in out and "train_umspe" in out
    pred = tmp_path / "p.lcs"
    report = tmp_path / "r.txt"
    code, out, _ = run(capsys, "infer", "--model", model, "--volume", pre, "--out", pred, "--report", report)
    assert code == 0 and "patches = 8" in report.read_text()  # 4 per slice
    dp = tmp_path / "dp.lcs"
    code, out, _ = run(capsys, "baseline", "--volume", pre, "--out", dp)
    assert code == 0 and "constraint_violations = 0" in out
    kv = tmp_path / "eval.txt"
    code, out, _ = run(capsys, "eval", "--pred", pred, "--ref", f"{generated}.lcs", "--compare", dp,
                       "--n", 32, "--out", kv)
    assert code == 0 and "paired t: skipped" in out and "seams:" in out
    assert "umspe_s1=" in kv.read_text()


def test_eval_identical_surfaces_is_zero(capsys, generated):
    ref = f"{generated}.lcs"
    code, out, _ = run(capsys, "eval", "--pred", ref, "--ref", ref)
    assert code == 0
    rows = [line.split() for line in out.splitlines() if line.startswith("S")]
    assert rows[0][1] == "0.0000" and rows[1][1] == "0.0000"


def test_plot_dimensions(tmp_path, capsys, generated):
    img = tmp_path / "o.ppm"
    code, _, _ = run(capsys, "plot", "--volume", f"{generated}.lcv", "--surfaces", f"{generated}.lcs",
                     "--slice", 1, "--out", img)
    assert code == 0
    rgb = decode_ppm(img.read_bytes())
    assert rgb.shape == (64, 64, 3)  # Z rows, X columns
    surf = read_surfaces(f"{generated}.lcs").positions[0, 1]
    # first surface drawn in red at its rounded depth
    assert tuple(rgb[int(round(surf[10])), 10]) == (255, 0, 0)


def test_generate_is_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        run(capsys, "generate", "--x", 32, "--y", 1, "--seed", 9, "--mode", "amd", "--out", tmp_path / name)
    assert (tmp_path / "a.lcv").read_bytes() == (tmp_path / "b.lcv").read_bytes()
    assert (tmp_path / "a.lcs").read_bytes() == (tmp_path / "b.lcs").read_bytes()


def test_config_file_and_flag_override(tmp_path, capsys):
    conf = tmp_path / "c.conf"
    conf.write_text("# synthetic\nx = 48\ny = 1\nmode = amd  # bumps\n")
    code, _, err = run(capsys, "generate", "--config", conf, "--y", 2, "--out", tmp_path / "v")
    assert code == 0
    assert "x = 48" in err and "y = 2" in err and "mode = amd" in err


def test_config_echo_parses_back(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--dataset", "missing.lcp", "--out", tmp_path / "m", "--lr", "0.01",
                       "--conv-channels", "4,8,8")
    assert code == 2
    echo = tmp_path / "echo.conf"
    echo.write_text(err.split("surfseg: ")[0])
    resolved = cli.resolve("train", {}, str(echo))
    assert resolved == cli.resolve("train", {"dataset": "missing.lcp", "out": str(tmp_path / "m"),
                                             "lr": "0.01", "conv-channels": "4,8,8"}, None)
    assert resolved["conv-channels"] == (4, 8, 8) and resolved["lr"] == 0.01


def test_unknown_config_key(tmp_path, capsys):
    conf = tmp_path / "c.conf"
    conf.write_text("learning_rate = 3\n")
    code, _, err = run(capsys, "train", "--config", conf)
    assert code == cli.EXIT_USAGE and "unknown config key" in err


def test_usage_errors(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == cli.EXIT_USAGE
    capsys.readouterr()
    code, _, err = run(capsys, "generate")
    assert code == cli.EXIT_USAGE and "--out" in err
    code, _, _ = run(capsys, "generate", "--x", "many", "--out", "x")
    assert code == cli.EXIT_USAGE


def test_io_error(tmp_path, capsys):
    code, _, err = run(capsys, "preprocess", "--in", tmp_path / "nope.lcv", "--out", tmp_path / "o.lcv")
    assert code == cli.EXIT_IO and "I/O error" in err


def test_format_error(tmp_path, capsys, generated):
    code, _, err = run(capsys, "preprocess", "--in", f"{generated}.lcs", "--out", tmp_path / "o.lcv")
    assert code == cli.EXIT_FORMAT and "bad magic" in err
    bad = tmp_path / "short.lcv"
    bad.write_bytes((tmp_path / "vol.lcv").read_bytes()[:100])
    code, _, err = run(capsys, "preprocess", "--in", bad, "--out", tmp_path / "o.lcv")
    assert code == cli.EXIT_FORMAT and "truncated" in err


def test_infeasible_exit(tmp_path, capsys, generated):
    code, _, err = run(capsys, "baseline", "--volume", f"{generated}.lcv", "--delta-min-sep", 70,
                       "--delta-max-sep", 80, "--out", tmp_path / "s.lcs")
    assert code == cli.EXIT_INFEASIBLE and "infeasible" in err


def test_dimension_mismatch(tmp_path, capsys, generated):
    run(capsys, "generate", "--x", 32, "--y", 2, "--out", tmp_path / "small")
    code, _, err = run(capsys, "eval", "--pred", tmp_path / "small.lcs", "--ref", f"{generated}.lcs")
    assert code == cli.EXIT_USAGE and "differ" in err


def test_preprocess_output_range(tmp_path, capsys, generated):
    from surfseg.synthdata import read_volume
    out = tmp_path / "p.lcv"
    run(capsys, "preprocess", "--in", f"{generated}.lcv", "--out", out)
    vox = read_volume(out).voxels
    assert np.isclose(vox.min(), -1) and np.isclose(vox.max(), 1)


def test_eval_paired_mode(tmp_path, capsys):
    for seed in (1, 2, 3):
        run(capsys, "generate", "--x", 32, "--y", 1, "--seed", seed, "--out", tmp_path / f"v{seed}")
    refs = f"{tmp_path}/v1.lcs,{tmp_path}/v2.lcs"
    shifted = f"{tmp_path}/v2.lcs,{tmp_path}/v3.lcs"
    code, out, _ = run(capsys, "eval", "--pred", refs, "--ref", refs, "--compare", shifted)
    assert code == 0
    assert "paired t S1" in out and "paired t S2" in out
    assert "ref CNN" in out

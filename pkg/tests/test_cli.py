import os

import numpy as np
import pytest

from sonarfuse import cli, fusenet, metrics
from sonarfuse.configfile import Opt, bool_v, int_v, list_v, parse_config, str_v
from sonarfuse.errors import ConfigError
from sonarfuse.imagecore import read_image
from sonarfuse.scatterbridge import BankConfig
from sonarfuse.sonarsim import read_poses
from sonarfuse.training import init_state


# ---------------------------------------------------------------------------
# config parser


def test_parse_config_values_comments_and_defaults():
    schema = {
        "a": Opt(int_v, 7),
        "b": Opt(str_v, "x"),
        "c": Opt(bool_v, False),
        "d": Opt(list_v, ()),
    }
    text = "# comment\n\n  a = 3\nc = true\nd = p, q ,r\n"
    got = parse_config(text, schema)
    assert got == {"a": 3, "b": "x", "c": True, "d": ("p", "q", "r")}


def test_parse_config_unknown_key_reports_line():
    with pytest.raises(ConfigError, match="line 3.*'bogus'"):
        parse_config("a = 1\n# fine\nbogus = 2\n", {"a": Opt(int_v, 0)})


def test_parse_config_bad_value_and_missing_equals():
    with pytest.raises(ConfigError, match="line 1.*'a'"):
        parse_config("a = not-an-int\n", {"a": Opt(int_v, 0)})
    with pytest.raises(ConfigError, match="line 2"):
        parse_config("a = 1\njunk line\n", {"a": Opt(int_v, 0)})


def test_parse_config_duplicate_and_required():
    with pytest.raises(ConfigError, match="line 2.*duplicate"):
        parse_config("a = 1\na = 2\n", {"a": Opt(int_v, 0)})
    with pytest.raises(ConfigError, match="missing required key 'a'"):
        parse_config("", {"a": Opt(int_v)})


# ---------------------------------------------------------------------------
# CLI plumbing


def _write(path, text):
    with open(path, "w") as f:
        f.write(text)
    return str(path)


SIM_SMALL = ("preset = torpedo\nframes = 4\nresolution = 16\nstep = 5.0\n"
             "range_bins = 40\nbeam_count = 24\n")

TRAIN_TINY = ("sequences = 1\nframes = 2\nresolution = 16\nsteps = 2\n"
              "c_lat = 2\nbank_scales = 2\nbank_orientations = 2\n"
              "preset = torpedo\n")


def test_usage_errors_exit_2(capsys):
    assert cli.main([]) == 2
    assert cli.main(["no-such-command"]) == 2
    assert cli.main(["simulate"]) == 2  # --out missing
    assert cli.main(["simulate", "--out", "x", "--threads", "0"]) == 2
    capsys.readouterr()


def test_help_exits_0(capsys):
    assert cli.main(["--help"]) == 0
    capsys.readouterr()


def test_simulate_writes_frames_and_poses(tmp_path, capsys):
    cfg = _write(tmp_path / "sim.cfg", "preset = tire\nframes = 16\n"
                 "resolution = 16\nrange_bins = 40\nbeam_count = 24\n")
    out = str(tmp_path / "data")
    assert cli.main(["simulate", "--config", cfg, "--out", out]) == 0
    assert sorted(os.listdir(out)) == (["frame_%03d.png" % i
                                        for i in range(16)]
                                       + ["manifest", "poses.csv"])
    poses = read_poses(os.path.join(out, "poses.csv"))
    assert poses.shape == (16,)
    assert "wrote 16 frames" in capsys.readouterr().out


def test_simulate_rerun_is_byte_identical(tmp_path, capsys):
    cfg = _write(tmp_path / "sim.cfg", SIM_SMALL)
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert cli.main(["simulate", "--config", cfg, "--out", a]) == 0
    assert cli.main(["simulate", "--config", cfg, "--out", b]) == 0
    for name in sorted(os.listdir(a)):
        with open(os.path.join(a, name), "rb") as fa, \
             open(os.path.join(b, name), "rb") as fb:
            assert fa.read() == fb.read(), name
    capsys.readouterr()


def test_simulate_seed_flag_changes_speckle(tmp_path, capsys):
    cfg = _write(tmp_path / "sim.cfg", SIM_SMALL)
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert cli.main(["simulate", "--config", cfg, "--out", a]) == 0
    assert cli.main(["simulate", "--config", cfg, "--out", b,
                     "--seed", "1"]) == 0
    img_a = read_image(os.path.join(a, "frame_000.png"))
    img_b = read_image(os.path.join(b, "frame_000.png"))
    assert not np.array_equal(img_a.pixels, img_b.pixels)
    capsys.readouterr()


def test_simulate_zero_frames_is_usage_error(tmp_path, capsys):
    cfg = _write(tmp_path / "sim.cfg", "frames = 0\n")
    assert cli.main(["simulate", "--config", cfg,
                     "--out", str(tmp_path / "x")]) == 2
    capsys.readouterr()


def test_unknown_config_key_reports_file_and_line(tmp_path, capsys):
    cfg = _write(tmp_path / "sim.cfg", "preset = tire\nframez = 4\n")
    assert cli.main(["simulate", "--config", cfg,
                     "--out", str(tmp_path / "x")]) == 2
    err = capsys.readouterr().err
    assert "line 2" in err and "framez" in err


def test_train_zero_steps_checkpoint_equals_initialization(tmp_path, capsys):
    cfg = _write(tmp_path / "t.cfg", TRAIN_TINY)
    out = str(tmp_path / "run")
    assert cli.main(["train", "--config", cfg, "--out", out,
                     "--steps", "0"]) == 0
    with open(os.path.join(out, "model.ckpt"), "rb") as f:
        got = f.read()
    want_state = init_state(BankConfig(J=2, K=2), variant="wst", c_lat=2,
                            seed=0)
    assert got == fusenet.checkpoint_bytes(want_state)
    with open(os.path.join(out, "trace.csv"), "rb") as f:
        assert f.read() == b"step,loss_total,loss_down,loss_con,loss_grad\r\n"
    capsys.readouterr()


def test_train_deterministic_outputs(tmp_path, capsys):
    cfg = _write(tmp_path / "t.cfg", TRAIN_TINY)
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert cli.main(["train", "--config", cfg, "--out", a]) == 0
    assert cli.main(["train", "--config", cfg, "--out", b]) == 0
    for name in ("model.ckpt", "trace.csv"):
        with open(os.path.join(a, name), "rb") as fa, \
             open(os.path.join(b, name), "rb") as fb:
            assert fa.read() == fb.read(), name
    capsys.readouterr()


def test_train_nan_abort_leaves_diagnostic_checkpoint(tmp_path, capsys):
    cfg = _write(tmp_path / "t.cfg", TRAIN_TINY + "lr = 1e200\n")
    out = str(tmp_path / "run")
    assert cli.main(["train", "--config", cfg, "--out", out]) == 3
    diag = os.path.join(out, "diagnostic.ckpt")
    assert os.path.exists(diag)
    fusenet.load_checkpoint(diag)  # parseable despite the blow-up
    assert not os.path.exists(os.path.join(out, "model.ckpt"))
    assert "diagnostic" in capsys.readouterr().err


def _make_dataset(tmp_path, name, extra="", frames=4):
    cfg = _write(tmp_path / f"{name}.cfg",
                 f"frames = {frames}\nresolution = 16\nstep = 5.0\n"
                 f"range_bins = 40\nbeam_count = 24\n" + extra)
    out = str(tmp_path / name)
    assert cli.main(["simulate", "--config", cfg, "--out", out]) == 0
    return out


def _make_checkpoint(tmp_path, data_dir):
    cfg = _write(tmp_path / "train.cfg",
                 f"datasets = {data_dir}\nsteps = 2\nc_lat = 2\n"
                 "bank_scales = 2\nbank_orientations = 2\n")
    out = str(tmp_path / "trainrun")
    assert cli.main(["train", "--config", cfg, "--out", out]) == 0
    return os.path.join(out, "model.ckpt")


def test_enhance_writes_png_and_metrics_line(tmp_path, capsys):
    data = _make_dataset(tmp_path, "data", "preset = torpedo\n")
    ckpt = _make_checkpoint(tmp_path, data)
    cfg = _write(tmp_path / "e.cfg", f"checkpoint = {ckpt}\ndataset = {data}\n")
    out = str(tmp_path / "res")
    capsys.readouterr()
    assert cli.main(["enhance", "--config", cfg, "--out", out]) == 0
    txt = capsys.readouterr().out
    assert "std=" in txt and "ag=" in txt
    assert os.path.exists(os.path.join(out, "enhanced.png"))


def test_enhance_invariant_to_frame_file_order(tmp_path, capsys):
    data = _make_dataset(tmp_path, "data", "preset = torpedo\n", frames=4)
    ckpt = _make_checkpoint(tmp_path, data)
    cfg = _write(tmp_path / "e.cfg", f"checkpoint = {ckpt}\ndataset = {data}\n")
    out1 = str(tmp_path / "r1")
    assert cli.main(["enhance", "--config", cfg, "--out", out1]) == 0

    # permute the frame files and the pose rows consistently
    perm = [2, 0, 3, 1]
    poses = read_poses(os.path.join(data, "poses.csv"))
    blobs = []
    for i in range(4):
        with open(os.path.join(data, f"frame_{i:03d}.png"), "rb") as f:
            blobs.append(f.read())
    for i, src in enumerate(perm):
        with open(os.path.join(data, f"frame_{i:03d}.png"), "wb") as f:
            f.write(blobs[src])
    lines = ["index,angle_rad"]
    lines += [f"{i},{float(poses[src])!r}" for i, src in enumerate(perm)]
    with open(os.path.join(data, "poses.csv"), "w") as f:
        f.write("\n".join(lines) + "\n")

    out2 = str(tmp_path / "r2")
    assert cli.main(["enhance", "--config", cfg, "--out", out2]) == 0
    with open(os.path.join(out1, "enhanced.png"), "rb") as f1, \
         open(os.path.join(out2, "enhanced.png"), "rb") as f2:
        assert f1.read() == f2.read()
    capsys.readouterr()


def test_enhance_missing_pose_file_names_it(tmp_path, capsys):
    data = _make_dataset(tmp_path, "data", "preset = torpedo\n")
    ckpt = _make_checkpoint(tmp_path, data)
    os.remove(os.path.join(data, "poses.csv"))
    cfg = _write(tmp_path / "e.cfg", f"checkpoint = {ckpt}\ndataset = {data}\n")
    assert cli.main(["enhance", "--config", cfg,
                     "--out", str(tmp_path / "r")]) == 4
    assert "poses.csv" in capsys.readouterr().err


def test_evaluate_groups_by_target_and_writes_csv(tmp_path, capsys):
    tire = _make_dataset(tmp_path, "tire", "preset = tire\n")
    torp = _make_dataset(tmp_path, "torp", "preset = torpedo\n")
    ckpt = _make_checkpoint(tmp_path, tire)
    cfg = _write(tmp_path / "ev.cfg",
                 f"checkpoint = {ckpt}\ndatasets = {tire},{torp}\n")
    out = str(tmp_path / "ev")
    capsys.readouterr()
    assert cli.main(["evaluate", "--config", cfg, "--out", out]) == 0
    txt = capsys.readouterr().out
    assert "not reproducible" in txt
    with open(os.path.join(out, "metrics.csv")) as f:
        lines = f.read().splitlines()
    assert lines[0] == "method,target,std,ag"
    rows = [ln.split(",") for ln in lines[1:]]
    assert [(r[0], r[1]) for r in rows] == [
        ("raw", "tire"), ("enhanced", "tire"),
        ("raw", "torpedo"), ("enhanced", "torpedo"),
    ]
    for r in rows:
        float(r[2]), float(r[3])


def test_ablate_selected_methods(tmp_path, capsys):
    cfg = _write(tmp_path / "ab.cfg",
                 "methods = FLR,FLR+WST\ntrain_sequences = 1\n"
                 "heldout_sequences = 1\nframes = 2\nresolution = 16\n"
                 "steps = 2\nc_lat = 2\nbank_scales = 2\n"
                 "bank_orientations = 2\n")
    out = str(tmp_path / "ab")
    assert cli.main(["ablate", "--config", cfg, "--out", out]) == 0
    txt = capsys.readouterr().out
    assert "not reproducible" in txt
    with open(os.path.join(out, "ablation.csv")) as f:
        lines = f.read().splitlines()
    assert [ln.split(",")[0] for ln in lines] == ["method", "FLR", "FLR+WST"]


def test_ablate_rejects_unknown_method(tmp_path, capsys):
    cfg = _write(tmp_path / "ab.cfg", "methods = FLR,NOPE\n")
    assert cli.main(["ablate", "--config", cfg,
                     "--out", str(tmp_path / "x")]) == 2
    assert "NOPE" in capsys.readouterr().err


def test_bank_dump_writes_kernel_images(tmp_path, capsys):
    cfg = _write(tmp_path / "b.cfg",
                 "bank_scales = 2\nbank_orientations = 2\n")
    out = str(tmp_path / "bank")
    assert cli.main(["bank-dump", "--config", cfg, "--out", out]) == 0
    names = sorted(os.listdir(out))
    assert names == sorted(
        [f"psi_j{j}_k{k}_{p}.png" for j in (1, 2) for k in (1, 2)
         for p in ("real", "imag")] + ["phi.png"])
    for n in names:
        with open(os.path.join(out, n), "rb") as f:
            assert f.read(8) == b"\x89PNG\r\n\x1a\n"
    capsys.readouterr()


def test_selftest_passes_and_prints_a_line_per_check(capsys):
    assert cli.main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 7 and "FAIL" not in out


def test_selftest_catches_an_off_by_one_gradient_metric(monkeypatch, capsys):
    real = metrics.ag_metric
    monkeypatch.setattr(metrics, "ag_metric", lambda img: real(img) + 1.0)
    assert cli.main(["selftest"]) == 3
    out = capsys.readouterr().out
    assert "FAIL metric-oracles" in out


def test_no_temp_files_left_behind(tmp_path, capsys):
    cfg = _write(tmp_path / "sim.cfg", SIM_SMALL)
    out = str(tmp_path / "data")
    assert cli.main(["simulate", "--config", cfg, "--out", out]) == 0
    assert not [n for n in os.listdir(out) if n.endswith(".tmp")]
    capsys.readouterr()

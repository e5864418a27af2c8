import numpy as np
import pytest

from diffnormal.cli import main
from diffnormal.config import parse_kv
from diffnormal.denoisers import load_checkpoint, save_checkpoint
from diffnormal.normal_io import read_float_raster


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--seed", "1", "--out", str(d / "train"), "--count", "8"]) == 0
    assert main(["gen-data", "--seed", "2", "--out", str(d / "test"), "--count", "2", "--resolution", "12,10"]) == 0
    common = ["--seed", "0", "--data", str(d / "train"), "--steps", "40", "--hidden", "16,16"]
    assert main(["train-yoso", *common, "--out", str(d / "y.ddnz")]) == 0
    assert main(["train-refiner", *common, "--out", str(d / "r.ddnz")]) == 0
    return d


def test_no_arguments_is_usage_error(capsys):
    code, out, err = run(capsys)
    assert code == 2 and "usage" in err and out == ""


def test_unknown_command(capsys):
    code, _, err = run(capsys, "frobnicate")
    assert code == 2 and "invalid choice" in err


def test_help_exits_zero(capsys):
    code, out, _ = run(capsys, "variance", "--help")
    assert code == 0 and "--repeats" in out


def test_seed_is_mandatory(capsys, tmp_path):
    code, _, err = run(capsys, "gen-data", "--out", tmp_path / "x")
    assert code == 2 and "--seed" in err
    assert not (tmp_path / "x").exists()


def test_config_file_and_flag_override(capsys, tmp_path):
    cfg = tmp_path / "gen.cfg"
    cfg.write_text(f"seed = 3\nout = {tmp_path / 'split'}\ncount = 3  # from file\nresolution = 6,7\n")
    code, out, _ = run(capsys, "gen-data", "--config", cfg, "--count", "2")
    assert code == 0
    kv = parse_kv(out)
    assert kv["scenes"] == "2" and kv["resolution"] == "6x7"
    cfg.write_text("seed = 3\nbogus = 1\n")
    code, _, err = run(capsys, "gen-data", "--config", cfg, "--out", tmp_path / "y")
    assert code == 2 and "bogus" in err
    code, _, _ = run(capsys, "gen-data", "--config", tmp_path / "absent.cfg", "--out", tmp_path / "y")
    assert code == 3


def test_bad_value_is_usage_error(capsys, tmp_path):
    code, _, err = run(capsys, "gen-data", "--seed", "x1", "--out", tmp_path)
    assert code == 2 and "--seed" in err


def test_gen_data_reproducible(capsys, tmp_path):
    for name in ("a", "b"):
        assert run(capsys, "gen-data", "--seed", 5, "--out", tmp_path / name, "--count", 2)[0] == 0
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_evaluate_identical_maps(capsys, workspace):
    gt = workspace / "test" / "00000_normals.dnfr"
    code, out, _ = run(capsys, "evaluate", "--pred", gt, "--gt", gt)
    kv = parse_kv(out)
    assert code == 0 and float(kv["mean_deg"]) == 0.0 and float(kv["pct_11_25"]) == 100.0


def test_evaluate_missing_file(capsys, workspace, tmp_path):
    code, _, err = run(capsys, "evaluate", "--pred", tmp_path / "nope.dnfr", "--gt", workspace / "test" / "00000_normals.dnfr")
    assert code == 3 and "nope" in err


def test_evaluate_corrupt_file(capsys, workspace, tmp_path):
    bad = tmp_path / "bad.dnfr"
    bad.write_bytes(b"DNFR\x01" + bytes(5))
    code, _, _ = run(capsys, "evaluate", "--pred", bad, "--gt", workspace / "test" / "00000_normals.dnfr")
    assert code == 3


def test_train_report_and_checkpoint(capsys, workspace, tmp_path):
    code, out, _ = run(capsys, "train-refiner", "--seed", 0, "--data", workspace / "train", "--steps", 5,
                       "--hidden", "8", "--out", tmp_path / "r.ddnz", "--report", tmp_path / "rep", "--no-semantics")
    assert code == 0
    kv = parse_kv(out)
    assert kv["steps"] == "5"
    net = load_checkpoint(tmp_path / "r.ddnz")
    assert net.kind == "x0" and net.sem_channels == 0 and net.hidden == (8,)
    assert (tmp_path / "r.ddnz.schedule").exists()
    assert (tmp_path / "rep" / "loss.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert len((tmp_path / "rep" / "loss.tsv").read_text().splitlines()) == 1 + int(kv["epochs"])


def test_infer_then_evaluate(capsys, workspace, tmp_path):
    for mode in ("two-stage", "yoso-only", "full-chain"):
        out_dir = tmp_path / mode
        code, _, _ = run(capsys, "infer", "--seed", 0, "--data", workspace / "test", "--out", out_dir,
                         "--yoso", workspace / "y.ddnz", "--refiner", workspace / "r.ddnz", "--mode", mode)
        assert code == 0
        assert (out_dir / "index.txt").read_text().split() == ["00000", "00001"]
        code, out, _ = run(capsys, "evaluate", "--pred", out_dir, "--gt", workspace / "test")
        kv = parse_kv(out)
        assert code == 0 and int(kv["n_valid"]) == 2 * 12 * 10
        assert 0 <= float(kv["mean_deg"]) <= 180


def test_infer_needs_checkpoints(capsys, workspace, tmp_path):
    code, _, err = run(capsys, "infer", "--seed", 0, "--data", workspace / "test", "--out", tmp_path, "--mode", "two-stage")
    assert code == 2 and "--yoso" in err
    code, _, _ = run(capsys, "infer", "--seed", 0, "--data", workspace / "test", "--out", tmp_path,
                     "--yoso", tmp_path / "gone.ddnz", "--refiner", workspace / "r.ddnz")
    assert code == 3


def test_numeric_failure_exit_code(capsys, workspace, tmp_path):
    net = load_checkpoint(workspace / "r.ddnz")
    net.weights[0][0, 0] = np.nan
    save_checkpoint(net, tmp_path / "nan.ddnz")
    code, _, err = run(capsys, "infer", "--seed", 0, "--data", workspace / "test", "--out", tmp_path / "o",
                       "--refiner", tmp_path / "nan.ddnz", "--mode", "full-chain")
    assert code == 4 and "numeric" in err


def variance_args(workspace, *extra):
    return ["variance", "--seed", 7, "--yoso", workspace / "y.ddnz", "--refiner", workspace / "r.ddnz",
            "--scenes", 1, "--resolution", "10,10", *extra]


def test_variance_byte_identical_reruns(capsys, workspace, tmp_path):
    outs = []
    for name in ("a", "b"):
        code, out, _ = run(capsys, *variance_args(workspace, "--repeats", 10, "--report", tmp_path / name))
        assert code == 0
        outs.append(out)
    assert outs[0] == outs[1]
    for f in ("report.txt", "ensemble.tsv", "ensemble.png", "variance_two-stage.dnfr", "variance_full-chain.dnfr"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert (tmp_path / "a" / "timing.png").exists()
    table = (tmp_path / "a" / "ensemble.tsv").read_text().splitlines()
    assert table[0].split("\t") == ["ensemble_size", "variance_two_stage", "variance_full_chain"]
    assert len(table) - 1 == 10
    assert len((tmp_path / "a" / "timing.tsv").read_text().splitlines()) - 1 == 10
    kv = parse_kv(outs[0].split("\n\n")[0])
    assert float(kv["variance_two_stage"]) < float(kv["variance_full_chain"])


def test_variance_deterministic_config_is_zero(capsys, workspace, tmp_path):
    code, out, _ = run(capsys, *variance_args(workspace, "--repeats", 3, "--tau", 0, "--yoso-input", "zero",
                                              "--sampler", "two-stage", "--report", tmp_path))
    kv = parse_kv(out.split("\n\n")[0])
    assert code == 0 and float(kv["variance_two_stage"]) == 0.0
    assert not read_float_raster(tmp_path / "variance_two-stage.dnfr").any()


def test_variance_needs_two_repeats(capsys, workspace):
    assert run(capsys, *variance_args(workspace, "--repeats", 1))[0] == 2


def test_integrate_and_nonconvergence(capsys, workspace, tmp_path):
    n = workspace / "test" / "00000_normals.dnfr"
    code, out, _ = run(capsys, "integrate", "--normals", n, "--out", tmp_path / "depth", "--mesh", tmp_path / "m.obj")
    kv = parse_kv(out)
    assert code == 0 and kv["converged"] == "True" and kv["components"] == "1"
    assert read_float_raster(tmp_path / "depth.dnfr").shape == (12, 10, 1)
    assert (tmp_path / "m.obj").read_text().startswith("v ")
    code, out, err = run(capsys, "integrate", "--normals", n, "--out", tmp_path / "d2", "--max-iter", 1)
    assert code == 5 and "converged = False" in out


def test_oracle_demo(capsys, tmp_path):
    code, out, _ = run(capsys, "oracle-demo", "--seed", 0, "--n", 2000, "--report", tmp_path)
    kv = parse_kv(out)
    assert code == 0
    assert abs(float(kv["mode0_location"]) + 2) < 0.1 and abs(float(kv["mode1_location"]) - 2) < 0.1
    assert (tmp_path / "samples.png").exists()
    again = run(capsys, "oracle-demo", "--seed", 0, "--n", 2000)[1]
    assert again == out

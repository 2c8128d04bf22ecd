import numpy as np
import pytest

from otfwi import load_checkpoint, npy_read, npy_write, read_pgm
from otfwi.cli import main


@pytest.fixture()
def model_file(tmp_path):
    rng = np.random.default_rng(5)
    v = 2000.0 + 200.0 * rng.random((8, 8))
    path = tmp_path / "model.npy"
    npy_write(path, v)
    return path


@pytest.fixture()
def config_file(tmp_path, model_file):
    path = tmp_path / "exp.cfg"
    path.write_text(
        "\n".join(
            [
                "# tiny smoke experiment",
                "method = dps",
                f"model = {model_file}",
                f"output = {tmp_path / 'out'}",
                "nt = 100",
                "dt = 0.001",
                "n_sources = 1",
                "v_min = 1800",
                "v_max = 2400",
                "n_steps = 15",
                "zeta = 0.05",
            ]
        )
        + "\n"
    )
    return path


def test_invert_smoke(config_file, tmp_path, capsys):
    assert main(["invert", "--config", str(config_file)]) == 0
    out = capsys.readouterr().out
    assert "status=ok" in out
    assert (tmp_path / "out" / "v_rec.npy").exists()


def test_set_overrides_config_file(config_file, tmp_path, capsys):
    override_dir = tmp_path / "other"
    code = main(
        [
            "invert",
            "--config", str(config_file),
            "--set", f"output={override_dir}",
            "--set", "method=w2tv",
            "--set", "rho0=1e4",
            "--set", "max_iters=1",
            "--set", "n_quantile=300",
            "--set", "init_velocity=2100",
        ]
    )
    assert code == 0
    assert (override_dir / "v_rec.npy").exists()
    snapshot = (override_dir / "config.txt").read_text()
    assert "method = w2tv" in snapshot


def test_simulate_verb(config_file, tmp_path, capsys):
    assert main(["simulate", "--config", str(config_file)]) == 0
    outdir = tmp_path / "out"
    assert (outdir / "d_obs.npy").exists()
    assert (outdir / "v_true.npy").exists()
    assert not (outdir / "v_rec.npy").exists()


def test_bad_config_returns_1(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("method = dps\n")  # missing model/output/nt/dt
    assert main(["invert", "--config", str(cfg)]) == 1
    err = capsys.readouterr().err
    assert "error:" in err and "required" in err


def test_missing_config_file_returns_1(tmp_path, capsys):
    assert main(["invert", "--config", str(tmp_path / "nope.cfg")]) == 1


def test_malformed_set_flag_returns_1(config_file, capsys):
    assert main(["invert", "--config", str(config_file), "--set", "zeta"]) == 1
    assert "--set expects" in capsys.readouterr().err


def test_usage_error_returns_1(capsys):
    assert main(["invert"]) == 1  # --config is required


def test_runtime_failure_returns_2(config_file, tmp_path, capsys):
    code = main(["invert", "--config", str(config_file), "--set", "dt=0.004"])
    assert code == 2
    assert "runtime error:" in capsys.readouterr().err
    assert (tmp_path / "out" / "manifest.json").exists()


def test_metrics_verb_prints_and_writes(tmp_path, capsys):
    truth = np.linspace(2000.0, 2400.0, 64).reshape(8, 8)
    rec = truth + 10.0
    t_path = tmp_path / "t.npy"
    r_path = tmp_path / "r.npy"
    npy_write(t_path, truth)
    npy_write(r_path, rec)
    out_csv = tmp_path / "m.csv"
    code = main(["metrics", "--rec", str(r_path), "--true", str(t_path), "--out", str(out_csv)])
    assert code == 0
    printed = capsys.readouterr().out
    assert printed.startswith("e_l2=")
    assert "psnr=" in printed and "ssim=" in printed
    body = out_csv.read_text().strip().splitlines()
    assert body[0] == "e_l2,psnr,ssim"
    e_l2 = float(body[1].split(",")[0])
    assert e_l2 == pytest.approx(float(printed.split()[0].split("=")[1]), abs=1e-6)


def test_metrics_shape_mismatch_returns_1(tmp_path, capsys):
    a = tmp_path / "a.npy"
    b = tmp_path / "b.npy"
    npy_write(a, np.ones((4, 4)))
    npy_write(b, np.ones((5, 5)))
    assert main(["metrics", "--rec", str(a), "--true", str(b)]) == 1


def test_render_verb_writes_pgm(tmp_path, capsys):
    field = tmp_path / "f.npy"
    npy_write(field, np.linspace(0.0, 1.0, 24).reshape(4, 6))
    out = tmp_path / "f.pgm"
    assert main(["render", "--field", str(field), "--out", str(out)]) == 0
    img = read_pgm(out)
    assert img.shape == (6, 4)
    assert img.min() == 0 and img.max() == 255


def test_render_rejects_3d_field(tmp_path, capsys):
    field = tmp_path / "f3.npy"
    npy_write(field, np.zeros((2, 4, 4)))
    assert main(["render", "--field", str(field), "--out", str(tmp_path / "x.pgm")]) == 1


def test_render_corrupt_npy_returns_2(tmp_path, capsys):
    bad = tmp_path / "junk.npy"
    bad.write_bytes(b"definitely not an array")
    assert main(["render", "--field", str(bad), "--out", str(tmp_path / "x.pgm")]) == 2


def test_train_prior_verb(tmp_path, capsys):
    rng = np.random.default_rng(9)
    npy_write(tmp_path / "stack.npy", 2100.0 + 100.0 * rng.random((4, 6, 6)))
    out = tmp_path / "prior.ckpt"
    code = main(
        [
            "train-prior",
            "--dataset", str(tmp_path / "stack.npy"),
            "--output", str(out),
            "--epochs", "1",
            "--seed", "3",
            "--width", "4",
            "--emb-dim", "4",
            "--batch-size", "4",
            "--steps", "10",
        ]
    )
    assert code == 0
    model, scaler = load_checkpoint(out)
    assert model.schedule.n == 10
    assert scaler.v_min < scaler.v_max

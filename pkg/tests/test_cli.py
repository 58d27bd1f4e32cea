import csv
import os

import numpy as np
import pytest

from rldiffusion import cli
from rldiffusion.image import load_image, load_ppm, save_image
from rldiffusion.net import NetConfig, init_params, load_params, save_params
from rldiffusion.trainer import load_checkpoint

TINY = ["--trunk-layers", "1", "--trunk-channels", "4", "--batch-size", "2", "--patch-size", "8"]


@pytest.fixture
def corpus(tmp_path):
    root = tmp_path / "imgs"
    assert cli.main(["gen-corpus", "--out", str(root), "--count", "3", "--size", "16", "--seed", "1"]) == 0
    return root


def test_gen_corpus(corpus):
    names = sorted(os.listdir(corpus))
    assert len(names) == 3 and all(n.endswith(".pgm") for n in names)
    assert load_image(str(corpus / names[0])).shape == (16, 16)


def test_noise_clamps_and_is_seeded(tmp_path, corpus):
    src = str(sorted(corpus.iterdir())[0])
    a, b = str(tmp_path / "a.pgm"), str(tmp_path / "b.pgm")
    assert cli.main(["noise", "--input", src, "--output", a, "--kind", "gaussian", "--sigma", "50", "--seed", "3"]) == 0
    assert cli.main(["noise", "--input", src, "--output", b, "--kind", "gaussian", "--sigma", "50", "--seed", "3"]) == 0
    assert open(a, "rb").read() == open(b, "rb").read()
    img = load_image(a)
    assert img.min() >= 0 and img.max() <= 1


def test_noise_missing_input(tmp_path):
    out = tmp_path / "o.pgm"
    assert cli.main(["noise", "--input", str(tmp_path / "nope.pgm"), "--output", str(out)]) == 1
    assert not out.exists()


def test_train_zero_episodes_saves_initial(tmp_path, corpus):
    ck = str(tmp_path / "ck.bin")
    rc = cli.main(["train", "--corpus", str(corpus), "--episodes", "0", "--seed", "7", "--out", ck] + TINY)
    assert rc == 0
    got = load_params(ck)
    ref = init_params(NetConfig(trunk_layers=1, trunk_channels=4))
    for k in ref.arrays:
        np.testing.assert_array_equal(got.arrays[k], ref.arrays[k])


def test_train_then_denoise_with_dumps(tmp_path, corpus):
    ck = str(tmp_path / "ck.bin")
    log = str(tmp_path / "log.csv")
    rc = cli.main(["train", "--corpus", str(corpus), "--noise", "gaussian", "--sigma", "25", "--episodes", "3",
                   "--seed", "7", "--out", ck, "--log", log] + TINY)
    assert rc == 0
    with open(log) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3
    ckd = load_checkpoint(ck)
    assert ckd["episode"] == 3 and ckd["stage"] == 1

    noisy = str(tmp_path / "n.pgm")
    src = str(sorted(corpus.iterdir())[0])
    assert cli.main(["noise", "--input", src, "--output", noisy, "--sigma", "25", "--seed", "2"]) == 0
    out = str(tmp_path / "d.pgm")
    dump = tmp_path / "actions"
    kdir = tmp_path / "kernels"
    rc = cli.main(["denoise", "--checkpoint", ck, "--input", noisy, "--output", out, "--T", "5",
                   "--dump-actions", str(dump), "--dump-kernels", "3,4;0,0", "--kernel-dir", str(kdir)])
    assert rc == 0
    g, d = load_image(noisy), load_image(out)
    assert d.shape == g.shape
    assert d.min() >= g.min() - 1 / 510 and d.max() <= g.max() + 1 / 510
    ppms = sorted(p for p in os.listdir(dump) if p.endswith(".ppm"))
    assert len(ppms) == 5
    assert load_ppm(str(dump / ppms[0])).shape == (16, 16, 3)
    assert sorted(os.listdir(kdir)) == ["kernel_0_0.pgm", "kernel_3_4.pgm"]


def test_stage2_requires_checkpoint(tmp_path, corpus):
    ck = tmp_path / "ck.bin"
    rc = cli.main(["train", "--corpus", str(corpus), "--stage", "2", "--episodes", "1", "--out", str(ck)] + TINY)
    assert rc == 1
    assert not ck.exists()


def test_stage2_resume(tmp_path, corpus):
    ck1, ck2 = str(tmp_path / "s1.bin"), str(tmp_path / "s2.bin")
    assert cli.main(["train", "--corpus", str(corpus), "--episodes", "2", "--out", ck1] + TINY) == 0
    assert cli.main(["train", "--corpus", str(corpus), "--episodes", "2", "--stage", "2",
                     "--resume", ck1, "--out", ck2] + TINY) == 0
    ck = load_checkpoint(ck2)
    assert ck["stage"] == 2
    assert not np.array_equal(ck["omega"], load_checkpoint(ck1)["omega"])


def test_train_bad_corpus(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert cli.main(["train", "--corpus", str(empty), "--out", str(tmp_path / "c.bin")]) == 1
    assert cli.main(["train", "--corpus", str(tmp_path / "missing"), "--out", str(tmp_path / "c.bin")]) == 1


def test_evaluate_csv(tmp_path, corpus):
    ck = str(tmp_path / "p.bin")
    save_params(init_params(NetConfig(trunk_layers=1, trunk_channels=2)), ck)
    out = str(tmp_path / "eval.csv")
    rc = cli.main(["evaluate", "--checkpoint", ck, "--corpus", str(corpus), "--sigma", "25",
                   "--seed", "10", "--out", out, "--baseline", "pm"])
    assert rc == 0
    with open(out) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["image", "noisy_psnr", "denoised_psnr", "pm_psnr"]
    assert len(rows) == 5 and rows[-1][0] == "mean"
    body = np.array([[float(v) for v in r[1:]] for r in rows[1:4]])
    # untrained network does nothing, so denoised equals the clipped noisy image
    np.testing.assert_allclose(body[:, 0], body[:, 1])
    np.testing.assert_allclose([float(v) for v in rows[-1][1:]], body.mean(0))


def test_baseline_pm(tmp_path, corpus):
    src = str(sorted(corpus.iterdir())[0])
    out = str(tmp_path / "pm.pgm")
    assert cli.main(["baseline-pm", "--input", src, "--output", out]) == 0
    assert load_image(out).shape == (16, 16)
    assert cli.main(["baseline-pm", "--input", src, "--output", out, "--kappa", "0.3"]) == 1


def test_config_file_and_override(tmp_path, corpus, capsys):
    src = str(sorted(corpus.iterdir())[0])
    cfg = tmp_path / "noise.cfg"
    cfg.write_text(f"# noise settings\ninput = {src}\nsigma = 40\nseed = 5\n")
    a, b = str(tmp_path / "a.pgm"), str(tmp_path / "b.pgm")
    assert cli.main(["noise", "--config", str(cfg), "--output", a]) == 0
    assert cli.main(["noise", "--input", src, "--sigma", "40", "--seed", "5", "--output", b]) == 0
    assert open(a, "rb").read() == open(b, "rb").read()
    assert cli.main(["noise", "--config", str(cfg), "--output", a, "--sigma", "10"]) == 0
    assert "sigma = 10.0" in capsys.readouterr().err

    cfg.write_text("sigmaa = 3\n")
    assert cli.main(["noise", "--config", str(cfg), "--input", src, "--output", a]) == 2


def test_bool_config_value(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("texture = maybe\n")
    assert cli.main(["gen-corpus", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2
    cfg.write_text("texture = true\ncount = 1\nsize = 16\n")
    assert cli.main(["gen-corpus", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 0
    assert len(os.listdir(tmp_path / "x")) == 1


def test_unknown_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["noise", "--bogus"])
    assert exc.value.code == 2


def test_save_image_used(tmp_path):
    # denoise output on a plain constant image is that image
    p = str(tmp_path / "c.pgm")
    save_image(np.full((5, 5), 0.4), p)
    ck = str(tmp_path / "p.bin")
    save_params(init_params(NetConfig(trunk_layers=1, trunk_channels=2)), ck)
    out = str(tmp_path / "o.pgm")
    assert cli.main(["denoise", "--checkpoint", ck, "--input", p, "--output", out]) == 0
    assert open(out, "rb").read() == open(p, "rb").read()


def test_noise_examples(tmp_path, corpus):
    src = str(sorted(corpus.iterdir())[0])
    out = str(tmp_path / "n.pgm")
    assert cli.main(["noise", "--input", src, "--output", out, "--kind", "gaussian", "--sigma", "0.0001"]) == 0
    assert np.max(np.abs(load_image(out) - load_image(src))) < 2 / 255
    assert cli.main(["noise", "--input", src, "--output", out, "--kind", "salt_pepper", "--density", "1.0"]) == 0
    raw = np.round(load_image(out) * 255)
    assert set(np.unique(raw)) <= {0.0, 255.0}
    assert cli.main(["noise", "--input", src, "--output", out, "--kind", "salt_pepper", "--density", "1.5"]) == 1

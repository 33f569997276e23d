import csv

import numpy as np
import pytest

from stvae import cli
from stvae.enhancer import EnhanceOptions, init_enhancement, wiener_estimate
from stvae.genmodel import autoencode, load_checkpoint
from stvae.metrics import spectrogram_snr
from stvae.signal import StftConfig, interior, istft, read_wav, stft

SMALL = ["--window-len", "64", "--hop", "16", "--latent-dim", "2", "--hidden", "8",
         "--clip-seconds", "0.3", "--n-train", "8", "--n-valid", "2", "--n-test", "2",
         "--test-snrs", "0", "--max-epochs", "4", "--learning-rate", "1e-3", "--seed", "3"]


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main([*SMALL, "synth", str(root / "c")]) == 0
    assert cli.main([*SMALL, "train", "--manifest", str(root / "c/train_outlier.tsv"),
                     "--valid", str(root / "c/valid.tsv"), "--model", "stvae",
                     "--out", str(root / "m.ckpt")]) == 0
    return root


def test_print_config_defaults(capsys):
    code, out, _ = run(capsys, "--print-config")
    assert code == 0
    values = dict(line.split(" = ") for line in out.splitlines())
    expected = {"window_len": "1024", "hop": "256", "latent_dim": "32", "hidden": "128",
                "learning_rate": "0.0001", "batch_size": "128", "patience": "20",
                "alpha": "100.0", "beta": "100.0", "nmf_rank": "8", "em_iters": "100",
                "estep_lr": "0.005", "estep_iters": "10", "seed": "0"}
    for key, value in expected.items():
        assert values[key] == value


def test_config_file_and_flag_precedence(tmp_path, capsys):
    (tmp_path / "run.cfg").write_text("# settings\nem_iters = 7\nnmf_rank = 3\nlearn_prior = yes\n")
    code, out, _ = run(capsys, "--config", str(tmp_path / "run.cfg"), "--nmf-rank", "5", "--print-config")
    assert code == 0
    assert "em_iters = 7\n" in out and "nmf_rank = 5\n" in out and "learn_prior = true\n" in out
    (tmp_path / "bad.cfg").write_text("no_such_key = 1\n")
    assert run(capsys, "--config", str(tmp_path / "bad.cfg"), "--print-config")[0] == 2
    assert run(capsys, "--nmf-rank", "0", "--print-config")[0] == 2


def test_usage_errors(tmp_path, capsys):
    assert run(capsys)[0] == 2
    code, _, err = run(capsys, "train", "--manifest", str(tmp_path / "none.tsv"), "--valid",
                       str(tmp_path / "none.tsv"), "--out", str(tmp_path / "m.ckpt"))
    assert code == 2 and "not found" in err
    with pytest.raises(SystemExit) as info:
        cli.main(["train", "--model", "gan"])
    assert info.value.code == 2
    code, _, _ = run(capsys, "autoencode", "--checkpoint", str(tmp_path / "x.ckpt"), "a.wav", "b.wav")
    assert code == 2


def test_train_writes_loss_log(workspace):
    rows = list(csv.reader(open(workspace / "m.ckpt.loss.csv")))
    assert rows[0] == ["epoch", "train_loss", "valid_loss"]
    assert len(rows) - 1 == 4
    model = load_checkpoint(workspace / "m.ckpt")
    assert model.stft_config == StftConfig(64, 16) and model.latent_dim == 2


def test_train_is_deterministic(workspace, capsys):
    argv = [*SMALL, "train", "--manifest", str(workspace / "c/train.tsv"), "--valid",
            str(workspace / "c/valid.tsv"), "--model", "vae"]
    assert run(capsys, *argv, "--out", str(workspace / "a.ckpt"))[0] == 0
    assert run(capsys, *argv, "--out", str(workspace / "b.ckpt"))[0] == 0
    assert (workspace / "a.ckpt").read_bytes() == (workspace / "b.ckpt").read_bytes()


def test_autoencode_snr_and_duration(workspace, capsys):
    clean = workspace / "c/test/speech_0000.wav"
    code, out, _ = run(capsys, "autoencode", "--checkpoint", str(workspace / "m.ckpt"),
                       str(clean), str(workspace / "ae.wav"))
    assert code == 0
    printed = float(out.split("\t")[1])
    model = load_checkpoint(workspace / "m.ckpt")
    spec = stft(read_wav(clean), model.stft_config)
    assert printed == spectrogram_snr(spec, autoencode(model, spec))
    n = len(istft(spec))
    assert len(read_wav(workspace / "ae.wav")) == n - 2 * 64
    run(capsys, "autoencode", "--checkpoint", str(workspace / "m.ckpt"), str(clean), str(workspace / "ae2.wav"))
    assert (workspace / "ae.wav").read_bytes() == (workspace / "ae2.wav").read_bytes()


def test_enhance_trace_and_zero_iterations(workspace, capsys):
    noisy = workspace / "c/mix/mix_white_+0dB_0000.wav"
    ckpt = str(workspace / "m.ckpt")
    code, _, _ = run(capsys, "enhance", "--checkpoint", ckpt, "--em-iters", "6", "--seed", "1",
                     str(noisy), str(workspace / "e.wav"), "--trace", str(workspace / "t.csv"))
    assert code == 0
    rows = list(csv.reader(open(workspace / "t.csv")))
    assert rows[0] == ["iter", "loglik"] and len(rows) == 7

    assert run(capsys, "enhance", "--checkpoint", ckpt, "--em-iters", "0", "--seed", "1",
               str(noisy), str(workspace / "e0.wav"))[0] == 0
    model = load_checkpoint(ckpt)
    spec = stft(read_wav(noisy), model.stft_config)
    state, nmf = init_enhancement(model, spec, 8, np.random.default_rng(1))
    expected = interior(istft(wiener_estimate(model, spec, state, nmf)), model.stft_config)
    np.testing.assert_allclose(read_wav(workspace / "e0.wav").samples, expected, atol=0.6 / 32768)


def test_baseline_flag_changes_output(workspace, capsys):
    noisy = str(workspace / "c/mix/mix_white_+0dB_0001.wav")
    ckpt = str(workspace / "m.ckpt")
    run(capsys, "enhance", "--checkpoint", ckpt, "--em-iters", "3", noisy, str(workspace / "w.wav"))
    run(capsys, "enhance", "--checkpoint", ckpt, "--em-iters", "3", "--baseline", noisy,
        str(workspace / "b.wav"))
    assert (workspace / "w.wav").read_bytes() != (workspace / "b.wav").read_bytes()


def test_batch_enhance_and_eval(workspace, capsys):
    pairs = str(workspace / "c/test_pairs.tsv")
    out_dir = workspace / "enh"
    code, _, _ = run(capsys, "enhance", "--checkpoint", str(workspace / "m.ckpt"), "--em-iters", "3",
                     "--pairs", pairs, "--out-dir", str(out_dir))
    assert code == 0
    assert len(list(out_dir.glob("*.wav"))) == 4
    assert len(list(out_dir.glob("*.trace.csv"))) == 4
    code, out, _ = run(capsys, *SMALL, "eval", "--pairs", pairs, "--enhanced-dir", str(out_dir),
                       "--report", str(workspace / "r.txt"))
    assert code == 0
    assert out == (workspace / "r.txt").read_text()
    run(capsys, *SMALL, "eval", "--pairs", pairs, "--enhanced-dir", str(out_dir), "--report",
        str(workspace / "r2.txt"))
    assert (workspace / "r.txt").read_bytes() == (workspace / "r2.txt").read_bytes()
    inputs = [float(line.split("\t")[4]) for line in out.splitlines()
              if line.startswith("utt\t") and "\twhite\t" in line]
    assert all(abs(v) < 1.0 for v in inputs)


def test_eval_errors(workspace, tmp_path, capsys):
    (tmp_path / "empty.tsv").write_text("")
    assert run(capsys, "eval", "--pairs", str(tmp_path / "empty.tsv"))[0] == 2
    pairs = str(workspace / "c/test_pairs.tsv")
    assert run(capsys, "eval", "--pairs", pairs)[0] == 2
    assert run(capsys, "eval", "--pairs", pairs, "--enhanced-dir", str(tmp_path))[0] == 2


def test_synth_is_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        assert run(capsys, *SMALL, "synth", str(tmp_path / name))[0] == 0
    for f in sorted((tmp_path / "a").rglob("*.wav")):
        assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()

import hashlib
import subprocess
import sys

import numpy as np
import pytest

from flowood import data
from flowood.cli import build_parser, main
from flowood.training import load_checkpoint, param_groups


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--kind", "smooth", "-n", "24", "--size", "8", "--seed", "1",
                 "--out", str(root / "smooth")]) == 0
    assert main(["synth", "--kind", "stripes", "-n", "12", "--size", "8", "--seed", "2",
                 "--out", str(root / "stripes")]) == 0
    common = ["--data", root / "smooth", "--image-size", "8", "--epochs", "2", "--batch-size", "8",
              "--hidden-channels", "8", "--flows-per-level", "2", "--seed", "0"]
    assert main([str(a) for a in ["train", "--model", "glow", "--levels", "2", "--out", root / "glow.ckpt",
                                  *common]]) == 0
    assert main([str(a) for a in ["train", "--model", "waveletflow", "--out", root / "wf.ckpt", *common]]) == 0
    return root


def test_help_lists_every_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["score", "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for flag in ("--ckpt", "--data", "--split-label", "--sigma", "--per-level", "--threads", "--out"):
        assert flag in out


def test_unknown_flag_is_an_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["roc", "--in", "a", "--out", "b", "--bogus"])
    assert exc.value.code == 2


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "flowood.cli", "roc", "--in", str(tmp_path / "x.csv"),
                           "--out", str(tmp_path / "y.csv")], capture_output=True, text=True)
    assert proc.returncode == 2 and "x.csv" in proc.stderr


def test_train_writes_checkpoint_and_history(workspace):
    lines = (workspace / "glow.ckpt.history.csv").read_text().splitlines()
    assert lines[0] == "epoch,split,mean_bpd,mean_nll" and len(lines) == 1 + 2 * 2
    _, cfg, state = load_checkpoint(workspace / "glow.ckpt")
    assert (cfg.levels, cfg.flows_per_level, cfg.hidden_channels, state.epoch) == (2, 2, 8, 2)


def test_missing_data_dir_exit_2(capsys, tmp_path):
    code, _, err = run(capsys, "train", "--model", "glow", "--data", tmp_path / "nowhere", "--out", tmp_path / "m")
    assert code == 2 and "nowhere" in err


def test_preset_loads_table_values(capsys, tmp_path, workspace):
    code, _, _ = run(capsys, "train", "--model", "glow", "--preset", "channel-wise", "--epochs", "0",
                     "--image-size", "8", "--levels", "2", "--flows-per-level", "1", "--hidden-channels", "4",
                     "--data", workspace / "smooth", "--out", tmp_path / "p.ckpt")
    assert code == 0
    _, cfg, _ = load_checkpoint(tmp_path / "p.ckpt")
    assert (cfg.batch_size, cfg.learning_rate, cfg.weight_decay, cfg.mask_scheme) == (16, 5e-4, 1e-3, "channel_wise")


def test_config_file_and_bad_config(capsys, tmp_path, workspace):
    (tmp_path / "ok.cfg").write_text("epochs = 1\nimage_size = 8\nlevels = 1\nflows_per_level = 1\n"
                                     "hidden_channels = 4\n")
    code, _, _ = run(capsys, "train", "--model", "glow", "--config", tmp_path / "ok.cfg",
                     "--data", workspace / "smooth", "--out", tmp_path / "c.ckpt")
    assert code == 0 and load_checkpoint(tmp_path / "c.ckpt")[1].levels == 1
    (tmp_path / "bad.cfg").write_text("epochs = 1\nwidth = 3\n")
    code, _, err = run(capsys, "train", "--model", "glow", "--config", tmp_path / "bad.cfg",
                       "--data", workspace / "smooth", "--out", tmp_path / "d.ckpt")
    assert code == 2 and "width" in err


def test_level_flag_isolates_other_levels(capsys, tmp_path, workspace):
    before, _, _ = load_checkpoint(workspace / "wf.ckpt")
    code, _, _ = run(capsys, "train", "--model", "waveletflow", "--resume", workspace / "wf.ckpt",
                     "--epochs", "4", "--level", "2", "--data", workspace / "smooth", "--out", tmp_path / "l.ckpt")
    assert code == 0
    after, _, _ = load_checkpoint(tmp_path / "l.ckpt")
    for name, group in param_groups(before).items():
        new = dict(param_groups(after)[name])
        same = all(np.array_equal(p.data, new[n].data) for n, p in group)
        assert same == (name != "level2"), name


def test_level_flag_rejected_for_glow(capsys, tmp_path, workspace):
    code, _, err = run(capsys, "train", "--model", "glow", "--level", "1", "--data", workspace / "smooth",
                       "--out", tmp_path / "g.ckpt")
    assert code == 2 and "waveletflow" in err


def test_score_sigma_zero_equals_no_flag(capsys, tmp_path, workspace):
    base = ["score", "--ckpt", workspace / "glow.ckpt", "--data", workspace / "smooth",
            "--split-label", "test", "--seed", "3"]
    assert run(capsys, *base, "--out", tmp_path / "a")[0] == 0
    assert run(capsys, *base, "--sigma", "0", "--out", tmp_path / "b")[0] == 0
    assert (tmp_path / "a/scores.csv").read_bytes() == (tmp_path / "b/scores.csv").read_bytes()
    assert run(capsys, *base, "--sigma", "0.1", "--out", tmp_path / "c")[0] == 0
    assert (tmp_path / "a/scores.csv").read_bytes() != (tmp_path / "c/scores.csv").read_bytes()


def test_score_skips_corrupt_image(capsys, tmp_path, workspace):
    imgs = data.smooth_gradients(3, 8, 3, seed=5)
    data.save_dataset(tmp_path / "mixed", imgs)
    (tmp_path / "mixed/zz_broken.png").write_bytes(b"\x89PNG garbage")
    code, out, err = run(capsys, "score", "--ckpt", workspace / "glow.ckpt", "--data", tmp_path / "mixed",
                         "--split-label", "test", "--out", tmp_path / "s")
    assert code == 0 and "warnings 1" in out and "zz_broken.png" in err
    assert len((tmp_path / "s/scores.csv").read_text().splitlines()) == 4


def test_score_rejects_bad_checkpoint(capsys, tmp_path, workspace):
    (tmp_path / "bad.ckpt").write_bytes(b"NFCK" + bytes(20))
    code, _, err = run(capsys, "score", "--ckpt", tmp_path / "bad.ckpt", "--data", workspace / "smooth",
                       "--split-label", "test", "--out", tmp_path / "s")
    assert code == 2 and "bad.ckpt" in err
    code, _, _ = run(capsys, "score", "--ckpt", workspace / "glow.ckpt", "--data", workspace / "smooth",
                     "--split-label", "test", "--per-level", "--out", tmp_path / "s")
    assert code == 2


def test_score_then_roc_pipeline(capsys, tmp_path, workspace):
    for split, d in (("test", "smooth"), ("ood", "stripes")):
        code, out, _ = run(capsys, "score", "--ckpt", workspace / "glow.ckpt", "--data", workspace / d,
                           "--split-label", split, "--out", tmp_path / split)
        assert code == 0 and out.startswith("scored")
    code, out, _ = run(capsys, "roc", "--in", tmp_path / "test/scores.csv", "--out", tmp_path / "ood/scores.csv",
                       "--dest", tmp_path / "roc.csv")
    assert code == 0 and out.startswith("auc=")
    assert (tmp_path / "roc.csv").read_text().splitlines()[-1].startswith("# auc=")


def test_roc_worked_example(capsys, tmp_path):
    # scores are -nll: in = {2, 3, 0}, out = {1}
    (tmp_path / "in.csv").write_text("id,split,nll_nats,bpd\na,test,-2,0\nb,test,-3,0\nc,test,0,0\n")
    (tmp_path / "out.csv").write_text("id,split,nll_nats,bpd\nd,ood,-1,0\n")
    code, out, _ = run(capsys, "roc", "--in", tmp_path / "in.csv", "--out", tmp_path / "out.csv",
                       "--dest", tmp_path / "roc.csv")
    assert code == 0 and out.strip() == "auc=0.6667"


def test_roc_malformed_csv_names_line(capsys, tmp_path):
    (tmp_path / "in.csv").write_text("id,split,nll_nats,bpd\na,test,1,0\nb,test,oops,0\n")
    (tmp_path / "out.csv").write_text("id,split,nll_nats,bpd\nd,ood,-1,0\n")
    code, _, err = run(capsys, "roc", "--in", tmp_path / "in.csv", "--out", tmp_path / "out.csv",
                       "--dest", tmp_path / "roc.csv")
    assert code == 2 and "line 3" in err


def test_per_level_levels_csv(capsys, tmp_path, workspace):
    code, _, _ = run(capsys, "score", "--ckpt", workspace / "wf.ckpt", "--data", workspace / "smooth",
                     "--split-label", "test", "--per-level", "--sigmas", "0,0.1", "--bins", "5",
                     "--out", tmp_path / "p")
    assert code == 0
    lines = (tmp_path / "p/levels.csv").read_text().splitlines()
    assert lines[0] == "level,sigma,bin_left,bin_right,count"
    # 4 levels x 2 sigmas x 5 bins
    assert len(lines) == 1 + 4 * 2 * 5


def test_psd_constant_images(capsys, tmp_path):
    data.save_dataset(tmp_path / "flat", np.full((3, 3, 8, 8), 128, np.uint8))
    code, _, _ = run(capsys, "psd", "--data", tmp_path / "flat", "--out", tmp_path / "psd.csv")
    assert code == 0
    rows = [l.split(",") for l in (tmp_path / "psd.csv").read_text().splitlines()[1:] if not l.startswith("#")]
    assert float(rows[0][1]) > 0 and all(float(p) == 0.0 for _, p in rows[1:])


def test_psd_mixed_sizes_needs_resample(capsys, tmp_path):
    data.save_dataset(tmp_path / "mixed", np.zeros((1, 3, 8, 8), np.uint8), prefix="a")
    data.save_dataset(tmp_path / "mixed", np.zeros((1, 3, 16, 16), np.uint8), prefix="b")
    assert run(capsys, "psd", "--data", tmp_path / "mixed", "--out", tmp_path / "p.csv")[0] == 2
    assert run(capsys, "psd", "--data", tmp_path / "mixed", "--size", "8", "--out", tmp_path / "p.csv")[0] == 0


def test_sample_determinism(capsys, tmp_path, workspace):
    for d in ("a", "b"):
        assert run(capsys, "sample", "--ckpt", workspace / "wf.ckpt", "-n", "3", "--temperature", "0.7",
                   "--seed", "4", "--out", tmp_path / d)[0] == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == ["sample_00000.png", "sample_00001.png", "sample_00002.png"]
    assert all(sha(tmp_path / "a" / n) == sha(tmp_path / "b" / n) for n in names)
    assert run(capsys, "sample", "--ckpt", workspace / "wf.ckpt", "--temperature", "0", "--out", tmp_path / "c")[0] == 2


def test_seed_falls_back_to_environment(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("FLOWOOD_SEED", "7")
    assert run(capsys, "synth", "--kind", "noise", "-n", "2", "--out", tmp_path / "env")[0] == 0
    assert run(capsys, "synth", "--kind", "noise", "-n", "2", "--seed", "7", "--out", tmp_path / "flag")[0] == 0
    assert sha(tmp_path / "env/noise_00000.png") == sha(tmp_path / "flag/noise_00000.png")
    monkeypatch.setenv("FLOWOOD_SEED", "x")
    assert run(capsys, "synth", "--kind", "noise", "-n", "2", "--out", tmp_path / "bad")[0] == 2


def test_parser_builds():
    assert build_parser().prog == "flowood"

import json

import pytest

from sketret.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from sketret.config import load_config
from sketret.losses import TERMS

SMALL = """
generator.n_classes = 5
generator.images_per_class = 20
generator.sketches_per_class = 20
generator.grid = 3
generator.channels = 2
generator.sem_dim = 4
generator.n_superclusters = 2
generator.unseen_fraction = 0.2
train.epochs = 3
train.triplets_per_epoch = 32
train.batch_size = 16
model.latent_dim = 8
model.hidden_dim = 8
model.codec_dim = 4
model.sem_hidden = 8
model.gcn_dim = 4
eval.hubness_k = 3
"""


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "small.txt"
    path.write_text(SMALL)
    return path


def run(cfg_path, out, *args):
    return main([args[0], "--config", str(cfg_path), "--out", str(out), *args[1:]])


def _hash(cfg_path):
    return load_config(cfg_path).config_hash


def test_generate_refuses_overwrite(cfg_path, tmp_path, capsys):
    out = tmp_path / "out"
    assert run(cfg_path, out, "generate", "--seeds", "0,1") == EXIT_OK
    assert "5 classes" in capsys.readouterr().out
    first = (out / "seed_0" / "dataset.bdas").read_bytes()
    assert run(cfg_path, out, "generate", "--seed", "0") == EXIT_RUNTIME
    assert run(cfg_path, out, "generate", "--seed", "0", "--force") == EXIT_OK
    assert (out / "seed_0" / "dataset.bdas").read_bytes() == first


def test_train_eval_theory_plot(cfg_path, tmp_path):
    out = tmp_path / "out"
    h = _hash(cfg_path)
    assert run(cfg_path, out, "train", "--seeds", "0,1") == EXIT_OK
    history = (out / "seed_0" / "history.csv").read_text().splitlines()
    assert history[0] == f"# config_hash={h}"
    assert history[1].split(",") == ["epoch", *TERMS, "total"]
    assert len(history) == 2 + 3

    assert run(cfg_path, out, "eval", "--seeds", "0,1", "--mode", "both") == EXIT_OK
    for mode in ("zs", "gzs"):
        doc = json.loads((out / "seed_1" / f"metrics_{mode}.json").read_text())
        assert doc["config_hash"] == h and doc["mode"] == mode.upper()
        assert {"map_all", "map_at_200", "p_at_100", "p_at_200", "per_class_ap", "hubness"} <= set(doc)
        per_class = list(doc["per_class_ap"].values())
        assert abs(sum(per_class) / len(per_class) - doc["map_all"]) < 1e-9
        assert (out / "seed_1" / f"hubness_{mode}.csv").read_text().startswith(f"# config_hash={h}")

    assert run(cfg_path, out, "theory", "--seeds", "0,1") == EXIT_OK
    summary = json.loads((out / "theory_summary.json").read_text())
    assert summary["config_hash"] == h
    assert summary["pass_fraction"] == summary["pass_count"] / 2
    assert json.loads((out / "seed_0" / "bound_report.json").read_text())["config_hash"] == h

    assert main(["plot", str(out), "--config", str(cfg_path), "--seed", "0"]) == EXIT_OK
    plots = out / "plots" / "seed_0"
    names = ("similarity_original.csv", "similarity_projected.csv", "loss_curves.csv")
    before = {n: ((plots / n).read_bytes(), (plots / n).stat().st_mtime_ns) for n in names}
    assert main(["plot", str(out), "--config", str(cfg_path), "--seed", "0"]) == EXIT_OK
    after = {n: ((plots / n).read_bytes(), (plots / n).stat().st_mtime_ns) for n in names}
    assert before == after
    rows = (plots / "similarity_original.csv").read_text().splitlines()
    assert len(rows) == 2 + 4  # hash, header, 4 seen classes


def test_rerun_reproduces_outputs(cfg_path, tmp_path):
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert run(cfg_path, out, "train", "--seed", "2") == EXIT_OK
        assert run(cfg_path, out, "eval", "--seed", "2") == EXIT_OK
    for name in ("checkpoint.bdas", "history.csv", "metrics_zs.json", "rankings_zs.csv"):
        assert (outs[0] / "seed_2" / name).read_bytes() == (outs[1] / "seed_2" / name).read_bytes()


def test_parallel_matches_serial(cfg_path, tmp_path):
    for out, jobs in ((tmp_path / "serial", "1"), (tmp_path / "par", "2")):
        assert run(cfg_path, out, "train", "--seeds", "0,1", "--jobs", jobs) == EXIT_OK
    for s in (0, 1):
        name = f"seed_{s}/checkpoint.bdas"
        assert (tmp_path / "serial" / name).read_bytes() == (tmp_path / "par" / name).read_bytes()


def test_ablate_losses_only(cfg_path, tmp_path, capsys):
    out = tmp_path / "out"
    assert run(cfg_path, out, "ablate", "--seeds", "0,1", "--losses-only",
               "--set", "train.epochs=1") == EXIT_OK
    lines = (out / "ablation.csv").read_text().splitlines()
    assert len(lines) == 2 + 9 * 2
    summary = (out / "ablation_summary.csv").read_text().splitlines()
    assert len(summary) == 2 + 9
    assert "full" in capsys.readouterr().out


def test_missing_checkpoint_is_runtime_error(cfg_path, tmp_path, capsys):
    assert run(cfg_path, tmp_path / "empty", "theory", "--seed", "0") == EXIT_RUNTIME
    assert "no checkpoint" in capsys.readouterr().err
    assert run(cfg_path, tmp_path / "empty", "eval", "--seed", "0") == EXIT_RUNTIME


def test_config_errors_exit_2(cfg_path, tmp_path):
    assert run(cfg_path, tmp_path, "train", "--set", "nope=1") == EXIT_CONFIG
    assert run(cfg_path, tmp_path, "train", "--set", "train.epochs=-3") == EXIT_CONFIG
    assert main(["train", "--config", str(tmp_path / "missing.txt")]) == EXIT_CONFIG


def test_divergence_exit_3(cfg_path, tmp_path, monkeypatch):
    import torch
    from sketret import losses
    monkeypatch.setattr(losses, "semantic_loss", lambda *a, **k: torch.tensor(float("inf")))
    assert run(cfg_path, tmp_path, "train", "--seed", "0") == EXIT_RUNTIME


def test_env_output_dir(cfg_path, tmp_path, monkeypatch):
    monkeypatch.setenv("SKETRET_OUT", str(tmp_path / "envout"))
    assert main(["generate", "--config", str(cfg_path), "--seed", "0"]) == EXIT_OK
    assert (tmp_path / "envout" / "seed_0" / "dataset.bdas").exists()
    assert (tmp_path / "envout" / "config.txt").read_text().startswith("# config_hash=")

import json

import pytest

from app.main import main
from core.services.report_service import load_report


def test_no_command_is_a_usage_error():
    assert main([]) == 1


def test_unknown_option_is_a_usage_error(capsys):
    assert main(["train", "x.cfg", "--bogus"]) == 1
    assert "unrecognized arguments" in capsys.readouterr().err


def test_help_exits_cleanly():
    assert main(["--help"]) == 0


def test_missing_config_file(tmp_path):
    assert main(["train", str(tmp_path / "absent.cfg")]) == 1


def test_corrupt_checkpoint_exits_with_data_code(tmp_path):
    bad = tmp_path / "bad.tqc"
    bad.write_bytes(b"not a checkpoint")
    assert main(["eval-clean", str(bad)]) == 2


def test_craft_pool_needs_a_source_model(tiny_config_path, tmp_path):
    assert main(["craft-pool", str(tiny_config_path), "--out", str(tmp_path / "pool")]) == 1


def test_train_writes_checkpoint_config_and_pool(tiny_config_path, tmp_path):
    out = tmp_path / "run"
    assert main(["--no-progress", "--seed", "5", "train", str(tiny_config_path), "--out", str(out)]) == 0
    assert (out / "checkpoint.tqc").exists()
    assert (out / "metrics.ndjson").exists()
    assert "seed = 5" in (out / "config.cfg").read_text()
    manifest = json.loads((out / "train_pool" / "manifest.json").read_text())
    assert [e["seen"] for e in manifest["patches"]] == [True]


def test_eval_clean_report(trained_run, tmp_path):
    code = main(["--no-progress", "eval-clean", str(trained_run["ckpt_path"]), "--bits", "2,32",
                 "--out", str(tmp_path)])
    assert code == 0
    doc = load_report(tmp_path / "clean_accuracy.json")
    assert [r["bits"] for r in doc["rows"]] == [32, 2]


def test_eval_clean_rejects_uncalibrated_bits(trained_run, tmp_path):
    assert main(["eval-clean", str(trained_run["ckpt_path"]), "--bits", "4", "--out", str(tmp_path)]) == 1


def test_craft_pool_then_transfer(trained_run, tmp_path):
    pool = tmp_path / "pool"
    code = main(["--no-progress", "craft-pool", str(trained_run["cfg_path"]), "--out", str(pool),
                 "--ckpt", str(trained_run["ckpt_path"])])
    assert code == 0
    manifest = json.loads((pool / "manifest.json").read_text())
    assert [e["seen"] for e in manifest["patches"]] == [True, False]

    assert main(["transfer", str(trained_run["ckpt_path"]), "--pool", str(pool), "--out", str(tmp_path)]) == 0
    doc = load_report(tmp_path / "transfer.json")
    assert len(doc["rows"]) == 2 * 2
    assert doc["extra"]["targeted"] is True


def test_transfer_with_missing_pool(trained_run, tmp_path):
    code = main(["transfer", str(trained_run["ckpt_path"]), "--pool", str(tmp_path / "nowhere"),
                 "--out", str(tmp_path)])
    assert code == 2


def test_align_writes_report_and_heatmaps(trained_run, tmp_path):
    assert main(["align", str(trained_run["ckpt_path"]), "--out", str(tmp_path)]) == 0
    doc = load_report(tmp_path / "alignment.json")
    assert len(doc["rows"]) == (3 + 1) * 5
    assert (tmp_path / "heatmaps" / "gradients-input-cosine.png").exists()


@pytest.mark.slow
def test_ablate_writes_the_ablation_report(tiny_config_path, tmp_path):
    assert main(["--no-progress", "ablate", str(tiny_config_path), "--out", str(tmp_path)]) == 0
    assert len(load_report(tmp_path / "ablation.json")["rows"]) == 6


def test_align_with_missing_patch_exits_with_data_code(trained_run, tmp_path):
    code = main(["align", str(trained_run["ckpt_path"]), "--patch", str(tmp_path / "missing.tqp"),
                 "--out", str(tmp_path)])
    assert code == 2
    assert not (tmp_path / "alignment.json").exists()

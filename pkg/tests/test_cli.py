import json

import pytest

from skelalign.cli import main
from skelalign.data import load_dataset
from skelalign.evaluate import load_scores_csv, top1_accuracy
from skelalign.textbank import load_bank

TINY_SPEC = {
    "skeleton": "toy10", "frames": 16, "train_per_class": 8, "test_per_class": 4,
    "noise_sigma": 0.1, "seed": 13,
    "classes": [
        {"name": "wave hands", "active_parts": ["hands"], "frequency": 3.0, "amplitude": 0.3},
        {"name": "stomp legs", "active_parts": ["legs"], "frequency": 3.0, "amplitude": 0.3},
        {"name": "nod head", "active_parts": ["head"], "frequency": 3.0, "amplitude": 0.3},
    ],
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """gen-data + embed once; train/eval tests build on the same files."""
    root = tmp_path_factory.mktemp("cli")
    spec_path = root / "spec.json"
    spec_path.write_text(json.dumps(TINY_SPEC))
    assert main(["gen-data", "--spec", str(spec_path), "--out", str(root / "data")]) == 0
    assert main(["embed", "--corpus", str(root / "data" / "corpus.json"),
                 "--prompt-type", "synonym_plus_parts", "--partition", "four_part",
                 "--skeleton", "toy10", "--dim", "32",
                 "--out", str(root / "bank")]) == 0
    return root


def _train_config(root, mode, out_name, **train_overrides):
    train = {"epochs": 4, "batch_size": 8, "warmup_epochs": 2, "decay_epochs": [3],
             "seed": 9, "mode": mode}
    train.update(train_overrides)
    doc = {
        "data_dir": str(root / "data"),
        "bank_dir": str(root / "bank"),
        "out_dir": str(root / out_name),
        "modality": "joint",
        "partition": "four_part",
        "model": {"channels": [8, 8], "strides": [1, 2], "text_dim": 32},
        "train": train,
    }
    path = root / f"{out_name}.json"
    path.write_text(json.dumps(doc))
    return path


def test_gen_data_files_round_trip(workspace):
    batch, meta = load_dataset(workspace / "data" / "train")
    assert batch.data.shape == (24, 3, 16, 10)
    assert meta["generator"]["split"] == "train"
    assert (workspace / "data" / "corpus.json").exists()


def test_gen_data_same_seed_byte_identical(workspace, tmp_path):
    spec_path = workspace / "spec.json"
    assert main(["gen-data", "--spec", str(spec_path), "--out", str(tmp_path / "again")]) == 0
    original = (workspace / "data" / "train" / "data.f32").read_bytes()
    again = (tmp_path / "again" / "train" / "data.f32").read_bytes()
    assert original == again


def test_gen_data_invalid_spec_exit_2(tmp_path, capsys):
    bad = dict(TINY_SPEC)
    bad["classes"] = [{"name": "x", "active_parts": ["wings"], "frequency": 1, "amplitude": 1}]
    spec_path = tmp_path / "bad.json"
    spec_path.write_text(json.dumps(bad))
    assert main(["gen-data", "--spec", str(spec_path), "--out", str(tmp_path / "o")]) == 2
    assert "wings" in capsys.readouterr().err


def test_embed_bank_layout(workspace):
    bank = load_bank(workspace / "bank")
    assert bank.num_classes == 3
    assert bank.num_slots == 5
    for c in range(3):
        assert len(bank.variants(c, 4)) == 10   # synonyms on the global slot
        assert len(bank.variants(c, 0)) == 1    # part description per part slot


def test_train_baseline_writes_artifacts(workspace):
    cfg = _train_config(workspace, "baseline", "run_base")
    assert main(["train", "--config", str(cfg)]) == 0
    summary = json.loads((workspace / "run_base" / "summary.json").read_text())
    assert "final_test_acc" in summary and summary["mode"] == "baseline"
    report = (workspace / "run_base" / "report.csv").read_text().splitlines()
    assert report[0] == "epoch,loss,ce,con,acc,lr"
    assert (workspace / "run_base" / "checkpoint" / "model.json").exists()


def test_train_gap_reports_both_loss_columns(workspace):
    cfg = _train_config(workspace, "gap", "run_gap")
    assert main(["train", "--config", str(cfg)]) == 0
    rows = (workspace / "run_gap" / "report.csv").read_text().splitlines()
    header = rows[0].split(",")
    ce_col, con_col = header.index("ce"), header.index("con")
    first = rows[1].split(",")
    assert float(first[ce_col]) > 0 and float(first[con_col]) > 0


def test_train_accepts_loss_section_keys(workspace):
    cfg_path = _train_config(workspace, "gap", "run_losskeys")
    doc = json.loads(cfg_path.read_text())
    doc["loss"] = {"variant": "jsd", "lambda": 0.5, "tau": 0.2}
    cfg_path.write_text(json.dumps(doc))
    assert main(["train", "--config", str(cfg_path)]) == 0
    summary = json.loads((workspace / "run_losskeys" / "summary.json").read_text())
    assert summary["loss_variant"] == "jsd"
    assert summary["lambda"] == 0.5


def test_train_gap_without_bank_exit_2(workspace):
    cfg_path = _train_config(workspace, "gap", "run_nobank")
    doc = json.loads(cfg_path.read_text())
    del doc["bank_dir"]
    cfg_path.write_text(json.dumps(doc))
    assert main(["train", "--config", str(cfg_path)]) == 2


def test_train_missing_config_exit_3(workspace):
    assert main(["train", "--config", str(workspace / "missing.json")]) == 3


def test_train_idempotent_given_seed(workspace):
    cfg_a = _train_config(workspace, "baseline", "rerun_a")
    cfg_b = _train_config(workspace, "baseline", "rerun_b")
    assert main(["train", "--config", str(cfg_a)]) == 0
    assert main(["train", "--config", str(cfg_b)]) == 0
    weights_a = (workspace / "rerun_a" / "checkpoint" / "weights.f32").read_bytes()
    weights_b = (workspace / "rerun_b" / "checkpoint" / "weights.f32").read_bytes()
    assert weights_a == weights_b
    report_a = (workspace / "rerun_a" / "report.csv").read_bytes()
    report_b = (workspace / "rerun_b" / "report.csv").read_bytes()
    assert report_a == report_b  # wall time lives only in summary.json


def test_eval_matches_summary_on_train_split(workspace):
    cfg = _train_config(workspace, "baseline", "run_eval")
    assert main(["train", "--config", str(cfg)]) == 0
    out_csv = workspace / "train_scores.csv"
    assert main(["eval", "--checkpoint", str(workspace / "run_eval" / "checkpoint"),
                 "--dataset", str(workspace / "data" / "train"),
                 "--modality", "joint", "--out", str(out_csv)]) == 0
    table = load_scores_csv(out_csv)
    summary = json.loads((workspace / "run_eval" / "summary.json").read_text())
    assert top1_accuracy(table) == pytest.approx(summary["final_train_acc"], abs=1e-6)
    assert table.scores.shape[0] == 24


def test_eval_all_modalities(workspace):
    for modality in ("joint", "bone", "joint_motion", "bone_motion"):
        out = workspace / f"scores_{modality}.csv"
        code = main(["eval", "--checkpoint", str(workspace / "run_eval" / "checkpoint"),
                     "--dataset", str(workspace / "data" / "test"),
                     "--modality", modality, "--out", str(out)])
        assert code == 0
        assert load_scores_csv(out).scores.shape == (12, 3)


def test_eval_missing_checkpoint_exit_3(workspace):
    assert main(["eval", "--checkpoint", str(workspace / "nothere"),
                 "--dataset", str(workspace / "data" / "test")]) == 3


def test_ensemble_single_csv_equals_own_accuracy(workspace, capsys):
    csv = workspace / "scores_joint.csv"
    assert main(["ensemble", str(csv)]) == 0
    out = capsys.readouterr().out
    lines = [l for l in out.splitlines() if "top1=" in l]
    single = lines[0].split("top1=")[1].split()[0]
    fused = lines[-1].split("top1=")[1].split()[0]
    assert single == fused


def test_ensemble_first_only_weights(workspace, capsys):
    csvs = [str(workspace / f"scores_{m}.csv")
            for m in ("joint", "bone", "joint_motion", "bone_motion")]
    assert main(["ensemble", *csvs, "--weights", "1", "0", "0", "0"]) == 0
    out = capsys.readouterr().out
    lines = [l for l in out.splitlines() if "top1=" in l]
    assert lines[0].split("top1=")[1].split()[0] == lines[-1].split("top1=")[1].split()[0]


def test_ensemble_mismatched_labels_exit_2(workspace, tmp_path):
    csv_a = workspace / "scores_joint.csv"
    text = csv_a.read_text().splitlines()
    header, first = text[0], text[1].split(",")
    first[-2] = str((int(first[-2]) + 1) % 3)
    clone = tmp_path / "tampered.csv"
    clone.write_text("\n".join([header, ",".join(first)] + text[2:]))
    assert main(["ensemble", str(csv_a), str(clone)]) == 2


def test_text_sim_diagonal_one(workspace, tmp_path):
    out = tmp_path / "sim.csv"
    assert main(["text-sim", "--bank", str(workspace / "bank"),
                 "--slot", "0", "--out", str(out)]) == 0
    rows = out.read_text().strip().splitlines()
    for i, line in enumerate(rows[1:]):
        diag = float(line.split(",")[1 + i])
        assert diag == pytest.approx(1.0, abs=1e-6)


def test_gradcheck_cli_smoke():
    assert main(["gradcheck", "--seeds", "1"]) == 0

import csv
import json

import pytest

from src.cli import EXIT_CONFIG, EXIT_OK, build_parser, main
from src.models import ExperimentConfig, ModelConfig, SyntheticTaskSpec

CFG = ExperimentConfig(
    model=ModelConfig(num_layers=2, experts_per_layer=3, input_dim=4, hidden_dim=6, expert_dim=5, output_dim=3),
    clients=2,
    rounds=1,
    lr=0.05,
    data=SyntheticTaskSpec(num_classes=3, input_dim=4, samples_per_client=30, global_test_samples=30),
)


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "experiment.json"
    path.write_text(CFG.model_dump_json(by_alias=True), encoding="utf-8")
    return path


def test_run_writes_outputs(config_file, tmp_path):
    """run exits 0 and leaves metrics and a checkpoint behind."""
    out = tmp_path / "out"
    assert main(["run", "--config", str(config_file), "--out", str(out)]) == EXIT_OK
    assert (out / "metrics.csv").exists()
    assert (out / "checkpoint.json").exists()
    assert json.loads((out / "config.json").read_text(encoding="utf-8"))["clients"] == 2


def test_run_with_overrides(config_file, tmp_path):
    """--seed and --mode override the document."""
    out = tmp_path / "out"
    assert main(["run", "--config", str(config_file), "--out", str(out), "--seed", "3", "--mode", "fedavg"]) == EXIT_OK
    written = json.loads((out / "config.json").read_text(encoding="utf-8"))
    assert written["seed"] == 3
    assert written["policy"]["mode"] == "fedavg"


def test_missing_config_file(tmp_path):
    """A config path that does not exist is a configuration error."""
    assert main(["run", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_invalid_config(tmp_path):
    """Routing more experts than a layer has is rejected before any work."""
    doc = json.loads(CFG.model_dump_json(by_alias=True))
    doc["model"]["top_k"] = 4
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "out")]) == EXIT_CONFIG
    assert not (tmp_path / "out" / "metrics.csv").exists()


def test_sweep_command(config_file, tmp_path):
    """sweep writes one summary row per value."""
    out = tmp_path / "sweep"
    code = main(["sweep", "--config", str(config_file), "--param", "importance.beta",
                 "--values", "0.0,0.5", "--out", str(out)])
    assert code == EXIT_OK
    with open(out / "sweep.csv", newline="", encoding="utf-8") as handle:
        rows = list(csv.DictReader(handle))
    assert [r["value"] for r in rows] == ["0.0", "0.5"]


def test_compare_defaults():
    """compare runs every mode on seed 0 unless told otherwise."""
    args = build_parser().parse_args(["compare", "--config", "x.json"])
    assert args.seeds == "0"
    assert set(args.modes.split(",")) == {"hfedmoe", "fedavg", "random_drop", "freq_prune"}

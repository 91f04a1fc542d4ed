import csv
import json
import os
from unittest.mock import patch

import pytest

from diffkit import load_checkpoint, params_digest, save_checkpoint
from experiment_cli import (
    EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, TRANSFER_COLUMNS, cmd_gradcheck, cmd_plot, cmd_reevaluate,
    cmd_train, cmd_transfer, main, transfer_task_seed,
)
from experiment_config import config_from_dict
from graph_world import Prototype
from train_loop import METRICS_COLUMNS

TINY = {
    "model": "devi",
    "train_prototypes": ["Ring"],
    "transfer_prototypes": ["Ring", "Tree"],
    "burn_in": 40,
    "minibatch_size": 8,
    "total_minibatches": 3,
    "store_size": 4,
    "sweeps": 2,
    "replay_capacity": 100,
    "eval_every": 0,
    "eval_episodes": 2,
    "transfer_attempts": 2,
    "samples_per_pair": 1,
    "seeds": [1, 2],
    "log_every": 1,
}


@pytest.fixture(autouse=True)
def small_glyphs(library):
    with patch("experiment_cli._library", return_value=library):
        yield


def write_config(tmp_path, **overrides):
    path = tmp_path / "exp.json"
    path.write_text(json.dumps({**TINY, **overrides}))
    return str(path)


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


def read_bytes(path):
    with open(path, "rb") as f:
        return f.read()


class TestTrain:

    def test_writes_checkpoint_and_metrics_per_seed(self, tmp_path):
        out = tmp_path / "runs"
        assert main(["train", "--config", write_config(tmp_path), "--out", str(out)]) == EXIT_OK
        for seed in (1, 2):
            tensors, metadata = load_checkpoint(str(out / f"devi-seed{seed}.ckpt"))
            assert metadata["kind"] == "devi" and metadata["seed"] == seed
            assert metadata["sha256"] == params_digest(tensors)
            assert (out / f"metrics_devi-seed{seed}.csv").exists()
            assert len(read_csv(out / f"horizons_devi-seed{seed}.csv")) == 1 + 3 * 2
        rows = read_csv(out / "metrics.csv")
        assert rows[0] == METRICS_COLUMNS
        assert [(r[0], r[2]) for r in rows[1:]] == [("devi-seed1", "1"), ("devi-seed1", "2"), ("devi-seed1", "3"),
                                                    ("devi-seed2", "1"), ("devi-seed2", "2"), ("devi-seed2", "3")]
        provenance = json.loads((out / "provenance.json").read_text())
        assert provenance["command"] == "train" and provenance["seeds"] == [1, 2]

    def test_reruns_are_bit_identical(self, tmp_path):
        config = config_from_dict(TINY)
        first = cmd_train(config, str(tmp_path / "a"))
        second = cmd_train(config, str(tmp_path / "b"), parallel=2)
        assert first["success"] and second["success"]
        for name in ("metrics.csv", "devi-seed1.ckpt", "devi-seed2.ckpt", "provenance.json"):
            assert read_bytes(tmp_path / "a" / name) == read_bytes(tmp_path / "b" / name)

    def test_seed_override(self, tmp_path):
        result = cmd_train(config_from_dict(TINY), str(tmp_path), seed_override=9)
        assert [r["seed"] for r in result["runs"]] == [9]
        assert (tmp_path / "devi-seed9.ckpt").exists()

    def test_dqn_checkpoint(self, tmp_path):
        result = cmd_train(config_from_dict({**TINY, "model": "dqn", "seeds": [3]}), str(tmp_path))
        assert result["exit_code"] == EXIT_OK
        _, metadata = load_checkpoint(str(tmp_path / "dqn-seed3.ckpt"))
        assert metadata["kind"] == "dqn"
        assert "task" in metadata

    def test_invalid_prototype_exits_with_config_error(self, tmp_path):
        out = tmp_path / "runs"
        code = main(["train", "--config", write_config(tmp_path, train_prototypes=["Pentagon"]), "--out", str(out)])
        assert code == EXIT_CONFIG
        assert not out.exists()

    def test_missing_config_file(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "nope.json")]) == EXIT_CONFIG

    def test_bad_parallel(self, tmp_path):
        assert main(["train", "--config", write_config(tmp_path), "--parallel", "0"]) == EXIT_CONFIG

    def test_worker_failure_is_runtime_error(self, tmp_path):
        with patch("experiment_cli.train_devi", side_effect=RuntimeError("boom")):
            result = cmd_train(config_from_dict(TINY), str(tmp_path), parallel=2)
        assert result["exit_code"] == EXIT_RUNTIME
        assert "boom" in result["error"]


class TestTransfer:

    @pytest.fixture
    def trained(self, tmp_path):
        out = tmp_path / "runs"
        result = cmd_train(config_from_dict(TINY), str(out))
        return out, result["checkpoints"]

    def test_rows_per_checkpoint_prototype_attempt(self, trained):
        out, checkpoints = trained
        result = cmd_transfer(config_from_dict(TINY), checkpoints, str(out))
        assert result["success"] and result["evaluations"] == 2 * 2 * 2
        rows = read_csv(out / "transfer.csv")
        assert rows[0] == METRICS_COLUMNS + TRANSFER_COLUMNS
        body = [dict(zip(rows[0], r)) for r in rows[1:]]
        transfer = [r for r in body if r["phase"] == "transfer"]
        summary = [r for r in body if r["phase"] == "transfer_summary"]
        assert len(transfer) == 8 and len(summary) == 2
        assert all(r["in_distribution"] == "False" for r in transfer)
        assert all(r["gradient_updates"] == "0" for r in transfer)
        assert {r["task_prototype"] for r in summary} == {"Ring", "Tree"}

    def test_weights_unchanged_on_disk(self, trained):
        out, checkpoints = trained
        before = [read_bytes(p) for p in checkpoints]
        cmd_transfer(config_from_dict(TINY), checkpoints, str(out))
        assert [read_bytes(p) for p in checkpoints] == before

    def test_in_distribution_on_train_split(self, trained):
        out, checkpoints = trained
        config = config_from_dict({**TINY, "transfer_split": "train", "transfer_prototypes": ["Ring"],
                                   "transfer_attempts": 1})
        cmd_transfer(config, checkpoints[:1], str(out))
        rows = read_csv(out / "transfer.csv")
        transfer = [dict(zip(rows[0], r)) for r in rows[1:] if r[1] == "transfer"]
        assert [r["in_distribution"] for r in transfer] == ["True"]

    def test_default_checkpoints_from_output_dir(self, trained, tmp_path):
        out, _ = trained
        code = main(["transfer", "--config", write_config(tmp_path, transfer_prototypes=["Ring"],
                                                          transfer_attempts=1), "--out", str(out)])
        assert code == EXIT_OK
        assert len([r for r in read_csv(out / "transfer.csv")[1:] if r[1] == "transfer"]) == 2

    def test_devi_attempts_leave_store_snapshots(self, trained):
        out, checkpoints = trained
        result = cmd_transfer(config_from_dict(TINY), checkpoints, str(out))
        assert len(result["store_snapshots"]) == 8
        assert all(os.path.exists(p) for p in result["store_snapshots"])
        rows = read_csv(out / "transfer.csv")
        transfer = [dict(zip(rows[0], r)) for r in rows[1:] if r[1] == "transfer"]
        assert sorted(r["store_snapshot"] for r in transfer) == sorted(
            os.path.basename(p) for p in result["store_snapshots"])
        provenance = json.loads((out / "provenance.json").read_text())
        assert len(provenance["store_snapshots"]) == 8
        assert "store_devi-seed1_Ring_0.store" in provenance["outputs"]
        tensors, metadata = load_checkpoint(str(out / "store_devi-seed1_Ring_0.store"))
        assert metadata["kind"] == "store" and metadata["attempt"] == 0
        assert metadata["checkpoint_sha256"] == params_digest(load_checkpoint(checkpoints[0])[0])
        assert "store.a0.origins" in tensors and "store.a1.origin_states" in tensors

    def test_snapshot_reproduces_transfer_row(self, trained, tmp_path):
        out, checkpoints = trained
        cmd_transfer(config_from_dict(TINY), checkpoints, str(out))
        rows = read_csv(out / "transfer.csv")
        original = {r[-1]: r for r in rows[1:] if r[1] == "transfer"}
        snapshot = str(out / "store_devi-seed2_Tree_1.store")
        replay_dir = tmp_path / "replay"
        code = main(["reevaluate", "--config", write_config(tmp_path), "--out", str(replay_dir),
                     "--snapshots", snapshot])
        assert code == EXIT_OK
        replayed = read_csv(replay_dir / "reevaluation.csv")
        assert replayed[0] == rows[0]
        assert replayed[1] == original["store_devi-seed2_Tree_1.store"]

    def test_reevaluate_defaults_to_every_snapshot(self, trained, tmp_path):
        out, checkpoints = trained
        cmd_transfer(config_from_dict(TINY), checkpoints, str(out))
        code = main(["reevaluate", "--config", write_config(tmp_path), "--out", str(out)])
        assert code == EXIT_OK
        transfer = sorted(r for r in read_csv(out / "transfer.csv")[1:] if r[1] == "transfer")
        assert sorted(read_csv(out / "reevaluation.csv")[1:]) == transfer

    def test_snapshot_of_changed_checkpoint_is_refused(self, trained):
        out, checkpoints = trained
        cmd_transfer(config_from_dict(TINY), checkpoints[:1], str(out))
        tensors, metadata = load_checkpoint(checkpoints[0])
        name = sorted(tensors)[0]
        tensors[name] = tensors[name] + 1.0
        save_checkpoint(checkpoints[0], tensors, {**metadata, "sha256": params_digest(tensors)})
        result = cmd_reevaluate(config_from_dict(TINY), [str(out / "store_devi-seed1_Ring_0.store")],
                                str(out))
        assert result["exit_code"] == EXIT_RUNTIME
        assert "changed since the snapshot" in result["error"]

    def test_reevaluate_needs_snapshots(self, tmp_path):
        assert cmd_reevaluate(config_from_dict(TINY), [], str(tmp_path))["exit_code"] == EXIT_CONFIG
        missing = cmd_reevaluate(config_from_dict(TINY), [str(tmp_path / "gone.store")], str(tmp_path))
        assert missing["exit_code"] == EXIT_CONFIG

    def test_missing_checkpoint(self, tmp_path):
        result = cmd_transfer(config_from_dict(TINY), [str(tmp_path / "gone.ckpt")], str(tmp_path))
        assert result["exit_code"] == EXIT_CONFIG
        assert not (tmp_path / "transfer.csv").exists()

    def test_task_seeds_differ_per_attempt(self):
        seeds = {transfer_task_seed(1, attempt, Prototype.RING) for attempt in range(5)}
        assert len(seeds) == 5
        assert transfer_task_seed(1, 0, Prototype.RING) != transfer_task_seed(2, 0, Prototype.RING)


class TestOracleDump:

    def test_one_table_per_prototype_and_seed(self, tmp_path):
        code = main(["oracle-dump", "--config", write_config(tmp_path), "--out", str(tmp_path / "o")])
        assert code == EXIT_OK
        names = sorted(os.listdir(tmp_path / "o"))
        assert "oracle_Ring_seed1.csv" in names and "oracle_Tree_seed2.csv" in names
        assert "task_Ring_seed2.json" in names
        assert len(read_csv(tmp_path / "o" / "oracle_Tree_seed1.csv")) == 1 + 63 * 2


class TestGradcheck:

    def test_passes(self, tmp_path):
        result = cmd_gradcheck(config_from_dict(TINY), str(tmp_path))
        assert result["exit_code"] == EXIT_OK
        report = json.loads((tmp_path / "gradcheck.json").read_text())
        assert report["devi"]["passed"] and report["dqn"]["passed"]
        assert report["devi"]["n_coordinates"] == 200

    def test_broken_relu_gradient_fails(self, tmp_path):
        with patch("diffkit._relu_backward", lambda x, grad: (grad,)):
            result = cmd_gradcheck(config_from_dict(TINY), str(tmp_path))
        assert result["exit_code"] == EXIT_RUNTIME
        assert "Gradient check failed" in result["error"]

    def test_parameterless_encoder(self, tmp_path):
        result = cmd_gradcheck(config_from_dict({**TINY, "encoder": "identity"}), str(tmp_path))
        assert result["exit_code"] == EXIT_CONFIG
        assert result["key"] == "encoder"


class TestPlot:

    def test_svg_is_deterministic(self, tmp_path):
        out = tmp_path / "runs"
        cmd_train(config_from_dict({**TINY, "seeds": [1, 2, 3, 4, 5], "total_minibatches": 2}), str(out))
        metrics = str(out / "metrics.csv")
        assert main(["plot", metrics, "--out", str(tmp_path / "a.svg")]) == EXIT_OK
        assert main(["plot", metrics, "--out", str(tmp_path / "b.svg")]) == EXIT_OK
        svg = (tmp_path / "a.svg").read_text()
        assert svg == (tmp_path / "b.svg").read_text()
        assert svg.count('class="run"') == 5
        assert svg.count('class="mean"') == 1
        assert "minibatches" in svg

    def test_header_only_csv_writes_nothing(self, tmp_path):
        empty = tmp_path / "empty.csv"
        empty.write_text(",".join(METRICS_COLUMNS) + "\n")
        result = cmd_plot([str(empty)], str(tmp_path / "out.svg"))
        assert result["exit_code"] == EXIT_RUNTIME
        assert not (tmp_path / "out.svg").exists()

    def test_wrong_schema(self, tmp_path):
        other = tmp_path / "other.csv"
        other.write_text("a,b\n1,2\n")
        assert main(["plot", str(other), "--out", str(tmp_path / "x.svg")]) == EXIT_RUNTIME
        assert not (tmp_path / "x.svg").exists()

    def test_transfer_csv_panel(self, tmp_path):
        path = tmp_path / "transfer.csv"
        lines = [",".join(METRICS_COLUMNS)]
        for attempt in range(3):
            lines.append(f"devi-seed1-Ring,transfer,{attempt},Ring,5,,0.5,0.1,0.{attempt + 6},0")
        path.write_text("\n".join(lines) + "\n")
        info = cmd_plot([str(path)], str(tmp_path / "t.svg"))
        assert info["panels"] == 1
        assert "transfer attempt" in (tmp_path / "t.svg").read_text()

import json

import numpy as np
import pytest

from ncopt import bench
from ncopt.bench import PRESETS, evaluate, generate_dataset, oracle_dataset, render_svg, search_config_for
from ncopt.cli import main
from ncopt.io import read_csv
from ncopt.policy import PointerNetwork
from ncopt.problems import TspInstance, generate_knapsack, read_instances
from ncopt.search import SearchConfig


@pytest.fixture
def tsp8(tmp_path):
    path = tmp_path / "tsp8.txt"
    generate_dataset(path, "tsp", 8, 12, seed=7)
    return path


class TestGenerate:
    def test_manifest_and_bit_exact_regeneration(self, tmp_path):
        m = generate_dataset(tmp_path / "a.txt", "tsp", 20, 1000, seed=7)
        again = generate_dataset(tmp_path / "b.txt", m["problem"], m["n"], m["count"], m["seed"])
        assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
        assert m["sha256"] == again["sha256"]
        doc = json.loads((tmp_path / "a.txt.manifest.json").read_text())
        assert doc["schema_version"] == 1 and "config_hash" in doc and "code_version" in doc

    def test_knapsack_capacity_in_header(self, tmp_path):
        generate_dataset(tmp_path / "k.txt", "knapsack", 100, 3, seed=1)
        header, _ = read_instances(tmp_path / "k.txt")
        assert header["capacity"] == 25.0

    def test_zero_count_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            generate_dataset(tmp_path / "z.txt", "tsp", 5, 0, seed=0)

    def test_existing_file_needs_overwrite(self, tsp8):
        with pytest.raises(FileExistsError):
            generate_dataset(tsp8, "tsp", 8, 12, seed=7)
        generate_dataset(tsp8, "tsp", 8, 12, seed=7, overwrite=True)


class TestOracle:
    def test_cache_hit(self, tmp_path):
        path = tmp_path / "t.txt"
        generate_dataset(path, "tsp", 14, 30, seed=3)
        first = oracle_dataset(path)
        second = oracle_dataset(path)
        assert not first.cached and second.cached
        np.testing.assert_array_equal(first.objectives, second.objectives)
        assert first.exact.all()

    def test_cache_keyed_by_content(self, tsp8):
        oracle_dataset(tsp8)
        generate_dataset(tsp8, "tsp", 8, 12, seed=8, overwrite=True)
        assert not oracle_dataset(tsp8).cached

    def test_tampered_dataset_rejected(self, tsp8):
        text = tsp8.read_text().replace("0.", "0.1", 1)
        tsp8.write_text(text)
        with pytest.raises(bench.DataError):
            oracle_dataset(tsp8)

    def test_large_tsp_gets_error_rows_and_heuristic_reference(self, tmp_path):
        path = tmp_path / "t25.txt"
        generate_dataset(path, "tsp", 25, 2, seed=0)
        table = oracle_dataset(path)
        assert [r["method"] for r in table.rows] == ["two_opt", "two_opt"]
        assert all("held_karp" in r["error"] for r in table.rows)
        assert not table.exact.any()


class TestEval:
    def test_rows_ratios_and_aggregate(self, tsp8, tmp_path):
        net = PointerNetwork(d=8, seed=0)
        rep = evaluate(tsp8, [net], SearchConfig("sampling", budget=64, batch_size=32), tmp_path / "out")
        ratios = np.array([r[5] for r in rep.rows])
        assert np.all(ratios >= 1 - 1e-12)
        assert rep.aggregate["mean_objective"] == pytest.approx(np.mean([r[3] for r in rep.rows]), rel=1e-15)
        assert list(rep.aggregate["milestones"]) == ["32", "64"]
        rows = read_csv(tmp_path / "out" / "instances.csv")
        assert list(rows[0]) == list(bench.EVAL_HEADER)
        curve = read_csv(tmp_path / "out" / "sorted_ratios.csv")
        assert [float(r["ratio"]) for r in curve] == sorted(ratios.tolist())

    def test_optimal_solver_has_flat_curve(self, tsp8, tmp_path):
        opt = oracle_dataset(tsp8).objectives
        ref = tmp_path / "ref.csv"
        ref.write_text("instance_id,objective\n" + "".join(f"{i},{float(v)!r}\n" for i, v in enumerate(opt)))
        assert np.all(np.array([bench.ratio_to_optimal("tsp", v, r) for v, r in zip(opt, bench.read_reference(ref))]) == 1.0)

    def test_missing_oracle_and_reference(self, tsp8):
        with pytest.raises(bench.DataError):
            evaluate(tsp8, [PointerNetwork(d=8)], SearchConfig("greedy"), use_oracle=False)

    def test_knapsack_ratio_direction(self):
        assert bench.ratio_to_optimal("knapsack", 18.0, 20.0) == pytest.approx(20 / 18)


class TestRender:
    def test_square(self):
        svg = render_svg(TspInstance([[0, 0], [0, 1], [1, 1], [1, 0]]), [0, 1, 2, 3])
        assert svg.count("<circle") == 4
        poly = svg.split("<polygon points=\"")[1].split("\"")[0]
        assert len(poly.split()) == 4
        assert "length 4.0000" in svg

    def test_byte_identical(self, tmp_path):
        inst = TspInstance(np.random.default_rng(0).uniform(size=(10, 2)))
        render_svg(inst, range(10), tmp_path / "a.svg")
        render_svg(inst, range(10), tmp_path / "b.svg")
        assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()

    def test_knapsack_rejected(self):
        with pytest.raises(ValueError):
            render_svg(generate_knapsack(5, 1, 0)[0], [0])

    def test_size_mismatch(self):
        with pytest.raises(ValueError):
            render_svg(TspInstance([[0, 0], [1, 1], [0, 1]]), [0, 1])


class TestPresets:
    def test_table_flags(self):
        assert PRESETS["rl-greedy"].flags == (True, False, False)
        assert PRESETS["active-search"].flags == (False, True, True)
        assert PRESETS["rl-sampling"].flags == (True, True, False)
        assert PRESETS["rl-active-search"].flags == (True, True, True)

    def test_precedence_flags_over_file_over_preset(self):
        cfg = search_config_for("rl-sampling", {"budget": 7}, {"budget": 99, "temperature": 2.0})
        assert (cfg.strategy, cfg.budget, cfg.temperature) == ("sampling", 7, 2.0)
        cfg = search_config_for("rl-sampling", {}, {"budget": 99})
        assert cfg.budget == 99
        assert search_config_for("rl-sampling").budget == 12_800

    def test_pretrained_active_search_lr(self):
        assert search_config_for("rl-active-search").lr == 1e-5


class TestCommandLine:
    def test_end_to_end(self, tmp_path, capsys):
        data = tmp_path / "d.txt"
        assert main(["generate", "--problem", "tsp", "--n", "6", "--count", "5", "--seed", "1", "--out", str(data)]) == 0
        run = tmp_path / "run"
        args = ["train", "--problem", "tsp", "--n", "6", "--steps", "4", "--batch-size", "4", "--d", "8", "--seed", "0", "--out", str(run), "--checkpoint-every", "2"]
        assert main(args) == 0
        assert len(read_csv(run / "metrics.csv")) == 4
        assert (run / "step0000002.ckpt").exists()
        assert main(["train", "--resume", str(run / "step0000002.ckpt"), "--steps", "6", "--out", str(run)]) == 0
        assert len(read_csv(run / "metrics.csv")) == 8
        assert main(["oracle", "--dataset", str(data)]) == 0
        assert main(["eval", "--dataset", str(data), "--checkpoint", str(run / "final.ckpt"), "--preset", "rl-greedy", "--out", str(tmp_path / "ev")]) == 0
        assert main(["search", "--dataset", str(data), "--index", "2", "--checkpoint", str(run / "final.ckpt"), "--strategy", "sampling", "--budget", "16", "--seed", "0"]) == 0
        assert main(["render", "--dataset", str(data), "--checkpoint", str(run / "final.ckpt"), "--out", str(tmp_path / "t.svg")]) == 0
        assert main(["bench", "--dataset", str(data), "--out", str(tmp_path / "b.csv")]) == 0
        assert main(["eval", "--dataset", str(data), "--preset", "active-search", "--budget", "8", "--batch-size", "4", "--d", "8", "--seed", "0", "--out", str(tmp_path / "as")]) == 0
        capsys.readouterr()

    def test_exit_codes(self, tmp_path, capsys):
        assert main(["frobnicate"]) == 1
        assert main(["train", "--out", str(tmp_path / "r")]) == 1  # no seed
        assert main(["oracle", "--dataset", str(tmp_path / "missing.txt")]) == 2
        kn = tmp_path / "k.txt"
        generate_dataset(kn, "knapsack", 5, 2, seed=0)
        assert main(["render", "--dataset", str(kn), "--tour", "0 1", "--out", str(tmp_path / "x.svg")]) == 1
        assert main(["generate", "--problem", "tsp", "--n", "5", "--count", "0", "--seed", "1", "--out", str(tmp_path / "z.txt")]) == 2
        capsys.readouterr()

    def test_numeric_failure_exit_code(self, monkeypatch, tmp_path, capsys):
        from ncopt import trainer

        def boom(self):
            raise trainer.NumericError("nan")

        monkeypatch.setattr(trainer.Trainer, "train_step", boom)
        args = ["train", "--n", "5", "--steps", "1", "--seed", "0", "--d", "8", "--out", str(tmp_path / "r")]
        assert main(args) == 3
        capsys.readouterr()

    def test_resume_rejects_arch_mismatch(self, tmp_path):
        from ncopt.checkpoint import CheckpointError
        from ncopt.trainer import TrainConfig, Trainer

        Trainer(TrainConfig(n=5, d=8, batch_size=2)).save(tmp_path / "c.ckpt")
        with pytest.raises(CheckpointError):
            Trainer.resume(tmp_path / "c.ckpt", TrainConfig(n=5, d=16, batch_size=2))

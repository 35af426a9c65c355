import json

import numpy as np
import pytest

from unrollspace import experiments
from unrollspace.experiments import (
    Cell,
    ExperimentReport,
    ExperimentSpec,
    build_problem,
    emit_report,
    pruning_study,
    report_from_json,
    resolve_genome,
    run_experiment,
)
from unrollspace.unrollnet import genome_lista, genome_to_json

BG = {"kind": "bernoulli_gauss", "p": 0.1}
NONE = {"kind": "none"}

FAST_CFG = {"steps_per_stage": 8, "batch_size": 64, "val_interval": 0, "test_mode": True}


def tiny_spec(**overrides) -> ExperimentSpec:
    base = dict(
        name="tiny",
        dict_spec={"kind": "gaussian", "m": 16, "n": 32, "seed": 0},
        k_layers=3,
        train_size=256,
        val_size=64,
        test_size=64,
        signal_spec=BG,
        train_noise=NONE,
        genomes=["lista"],
        train_cfg=dict(FAST_CFG),
        seeds=[0, 1],
        data_seed=7,
    )
    base.update(overrides)
    return ExperimentSpec(**base)


class TestResolveGenome:
    def test_presets(self):
        g = resolve_genome("lista", 4)
        assert g == genome_lista(4)

    def test_file_reference(self, tmp_path):
        g = genome_lista(5)
        path = tmp_path / "g.json"
        path.write_text(genome_to_json(g))
        assert resolve_genome(f"file:{path}", 99) == g

    def test_missing_file(self):
        with pytest.raises(ValueError, match="not found"):
            resolve_genome("file:/nope/missing.json", 4)

    def test_unknown_name(self):
        with pytest.raises(ValueError):
            resolve_genome("nonsense", 4)


class TestBuildProblem:
    def test_split_sizes_honored_exactly(self):
        spec = tiny_spec(train_size=300, val_size=77, test_size=41)
        _, train_ds, val_ds, test_ds = build_problem(spec)
        assert train_ds.count == 300
        assert val_ds.count == 77
        assert test_ds.count == 41

    def test_splits_disjoint_streams(self):
        _, train_ds, val_ds, _ = build_problem(tiny_spec())
        assert train_ds.seed != val_ds.seed

    def test_perturbed_dictionary_only_on_test(self):
        spec = tiny_spec(perturb_test_dict={"scale": 1e-3, "seed": 5})
        D, train_ds, _, test_ds = build_problem(spec)
        assert train_ds.dict_id == D.content_hash()
        assert test_ds.dict_id != D.content_hash()
        # test measurements come from the perturbed, re-normalized dictionary
        norms = np.linalg.norm(test_ds.dictionary.data, axis=0)
        np.testing.assert_allclose(norms, 1.0, atol=1e-12)
        np.testing.assert_array_equal(test_ds.b, test_ds.dictionary.data @ test_ds.x_true)

    def test_mismatched_test_noise(self):
        spec = tiny_spec(test_noise={"kind": "gaussian", "snr_db": 20.0})
        _, train_ds, _, test_ds = build_problem(spec)
        assert train_ds.noise_spec == NONE
        assert test_ds.noise_spec["kind"] == "gaussian"


class TestRunExperiment:
    def test_cells_and_aggregation(self):
        report = run_experiment(tiny_spec())
        assert len(report.cells) == 2
        assert all(c.status == "ok" for c in report.cells)
        stats = report.per_genome["lista"]
        values = [c.nmse_db for c in report.cells]
        assert stats["mean_db"] == pytest.approx(np.mean(values))
        assert stats["std_db"] == pytest.approx(np.std(values))
        assert stats["count"] == 2

    def test_train_isolation_under_mismatch(self):
        clean = run_experiment(tiny_spec())
        noisy = run_experiment(tiny_spec(test_noise={"kind": "gaussian", "snr_db": 20.0}))
        assert clean.meta["train_inputs_hash"] == noisy.meta["train_inputs_hash"]
        assert clean.meta["test_inputs_hash"] != noisy.meta["test_inputs_hash"]

    def test_matches_direct_evaluation(self):
        from unrollspace import trainer as trainer_mod
        from unrollspace.trainer import TrainConfig, nmse_db
        from unrollspace.unrollnet import forward

        spec = tiny_spec(seeds=[3])
        report = run_experiment(spec)
        D, train_ds, val_ds, test_ds = build_problem(spec)
        cfg = TrainConfig.from_dict({**spec.train_cfg, "seed": 3})
        tr = trainer_mod.train(genome_lista(3), D, train_ds, val_ds, cfg)
        direct = nmse_db(forward(genome_lista(3), tr.final_params, test_ds.b).layer_outputs[-1],
                         test_ds.x_true)
        assert report.cells[0].nmse_db == pytest.approx(direct, abs=1e-12)

    def test_rerun_reproduces_bitwise(self):
        a = run_experiment(tiny_spec())
        b = run_experiment(tiny_spec())
        for ca, cb in zip(a.cells, b.cells):
            assert ca.nmse_db == cb.nmse_db


class TestPruningStudy:
    def test_row_count_and_pairing(self):
        base = genome_lista(3)
        report = pruning_study(base, samples=3, spec=tiny_spec(), seed=1)
        assert len(report.rows) == 3
        assert 0.0 <= report.fraction_improved <= 1.0
        for row in report.rows:
            assert row.side_gates[0] is True
            assert row.delta_db == pytest.approx(
                row.reconnected_nmse_db - row.pruned_nmse_db
            )

    def test_all_true_pattern_is_neutral(self):
        # a pattern identical to the base trains identically under the paired seed
        from unrollspace import trainer as trainer_mod
        from unrollspace.trainer import TrainConfig

        spec = tiny_spec()
        D, train_ds, val_ds, _ = build_problem(spec)
        g = genome_lista(3)
        cfg = TrainConfig.from_dict({**spec.train_cfg, "seed": 11})
        r1 = trainer_mod.train(g, D, train_ds, val_ds, cfg)
        r2 = trainer_mod.train(g, D, train_ds, val_ds, cfg)
        assert r1.val_nmse_db == r2.val_nmse_db

    def test_invalid_samples(self):
        with pytest.raises(ValueError):
            pruning_study(genome_lista(3), samples=0, spec=tiny_spec(), seed=0)


class TestEmitReport:
    def test_empty_report_header_only(self, tmp_path):
        report = ExperimentReport("empty", [], {}, {})
        path = tmp_path / "r.csv"
        emit_report(report, "csv", path)
        assert path.read_text().strip() == "experiment,genome,seed,nmse_db,status"

    def test_json_round_trip(self, tmp_path):
        report = run_experiment(tiny_spec())
        path = tmp_path / "r.json"
        emit_report(report, "json", path)
        back = report_from_json(path)
        assert back.name == report.name
        assert [c.nmse_db for c in back.cells] == [c.nmse_db for c in report.cells]
        assert back.per_genome == report.per_genome

    def test_identical_bytes(self, tmp_path):
        report = run_experiment(tiny_spec())
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        emit_report(report, "csv", p1)
        emit_report(report, "csv", p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_failed_cell_serialized(self, tmp_path):
        report = ExperimentReport(
            "x", [Cell("lista", 0, None, "failed: divergence")],
            {"lista": {"mean_db": None, "std_db": None, "count": 0}}, {})
        path = tmp_path / "r.csv"
        emit_report(report, "csv", path)
        line = path.read_text().strip().splitlines()[1]
        assert "failed: divergence" in line

    def test_spec_json_round_trip(self, tmp_path):
        spec = tiny_spec(test_noise={"kind": "salt_pepper", "density": 0.01})
        path = tmp_path / "spec.json"
        path.write_text(json.dumps(spec.to_dict()))
        back = ExperimentSpec.from_json_file(path)
        assert back == spec

"""Desk-scale study matrix: train/test runs per genome and seed, mismatch
transfers (noise type, perturbed dictionary, limited data), side-connection
pruning studies, and deterministic CSV/JSON reports."""

from __future__ import annotations

import csv
import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from . import fileio, trainer, unrollnet
from .synthgen import (
    Dictionary,
    make_dataset,
    make_rng,
    perturb_dictionary,
    sample_dictionary,
    sample_lowrank_dictionary,
)
from .trainer import DivergenceError, TrainConfig, nmse_db
from .unrollnet import Genome, forward, genome_from_json, preset_genome

_SPLIT_TAGS = {"train": 0, "val": 1, "test": 2}


def _derive_seed(base: int, label: str) -> int:
    digest = hashlib.sha256(f"{base}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2 ** 62)


@dataclass
class ExperimentSpec:
    """One row family of the study matrix.

    Mismatch experiments set test_noise / test_signal / perturb_test_dict;
    training always sees the clean train_noise side.
    """

    name: str
    dict_spec: dict
    k_layers: int
    train_size: int
    val_size: int
    test_size: int
    signal_spec: dict
    train_noise: dict
    genomes: list
    train_cfg: dict
    seeds: list
    fusion: str = unrollnet.LWA
    test_noise: dict | None = None
    test_signal: dict | None = None
    perturb_test_dict: dict | None = None
    data_seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        return cls(**d)

    @classmethod
    def from_json_file(cls, path) -> "ExperimentSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def build_dictionary(dict_spec: dict) -> Dictionary:
    kind = dict_spec.get("kind", "gaussian")
    if kind == "gaussian":
        return sample_dictionary(dict_spec["m"], dict_spec["n"], dict_spec.get("seed", 0))
    if kind == "lowrank":
        return sample_lowrank_dictionary(
            dict_spec["m"], dict_spec["rank"], dict_spec["n"], dict_spec.get("seed", 0)
        )
    raise ValueError(f"unknown dictionary spec kind {kind!r}")


def resolve_genome(ref: str, k_layers: int, fusion: str = unrollnet.LWA) -> Genome:
    """Map a preset name or ``file:<path>`` reference to a genome."""
    if ref in unrollnet.PRESET_BUILDERS:
        return preset_genome(ref, k_layers, fusion)
    if ref.startswith("file:"):
        path = ref[len("file:"):]
        if not os.path.exists(path):
            raise ValueError(f"genome file not found: {path}")
        with open(path, encoding="utf-8") as fh:
            return genome_from_json(fh.read())
    raise ValueError(f"unknown genome reference {ref!r}")


@dataclass
class Cell:
    genome_name: str
    seed: int
    nmse_db: float | None
    status: str


@dataclass
class ExperimentReport:
    name: str
    cells: list
    per_genome: dict
    meta: dict

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "cells": [asdict(c) for c in self.cells],
            "per_genome": self.per_genome,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        return cls(
            name=d["name"],
            cells=[Cell(**c) for c in d["cells"]],
            per_genome=d["per_genome"],
            meta=d["meta"],
        )


def build_problem(spec: ExperimentSpec):
    """Dictionary and train/val/test datasets for a spec.

    Splits use disjoint derived seeds.  The test split may come from a
    perturbed dictionary and/or a mismatched noise or signal spec.
    """
    D = build_dictionary(spec.dict_spec)
    D_test = D
    if spec.perturb_test_dict is not None:
        D_test = perturb_dictionary(
            D, spec.perturb_test_dict["scale"], spec.perturb_test_dict.get("seed", 0)
        )
    train_ds = make_dataset(D, spec.train_size, spec.signal_spec, spec.train_noise,
                            _derive_seed(spec.data_seed, "train"), split="train")
    val_ds = make_dataset(D, spec.val_size, spec.signal_spec, spec.train_noise,
                          _derive_seed(spec.data_seed, "val"), split="val")
    test_ds = make_dataset(
        D_test, spec.test_size,
        spec.test_signal or spec.signal_spec,
        spec.test_noise or spec.train_noise,
        _derive_seed(spec.data_seed, "test"), split="test",
    )
    return D, train_ds, val_ds, test_ds


def _aggregate(cells) -> dict:
    per_genome = {}
    names = []
    for c in cells:
        if c.genome_name not in names:
            names.append(c.genome_name)
    for name in names:
        vals = [c.nmse_db for c in cells if c.genome_name == name and c.status == "ok"]
        if vals:
            arr = np.asarray(vals)
            per_genome[name] = {
                "mean_db": float(np.mean(arr)),
                "std_db": float(np.std(arr)),
                "count": len(vals),
            }
        else:
            per_genome[name] = {"mean_db": None, "std_db": None, "count": 0}
    return per_genome


def run_experiment(spec: ExperimentSpec, threads: int = 1) -> ExperimentReport:
    """Train every (genome, seed) cell on the clean side and score it on the
    (possibly mismatched) test side."""
    genomes = {ref: resolve_genome(ref, spec.k_layers, spec.fusion) for ref in spec.genomes}
    D, train_ds, val_ds, test_ds = build_problem(spec)

    def run_cell(item) -> Cell:
        ref, seed = item
        cfg_dict = dict(spec.train_cfg)
        cfg_dict["seed"] = seed
        cfg = TrainConfig.from_dict(cfg_dict)
        try:
            report = trainer.train(genomes[ref], D, train_ds, val_ds, cfg)
            trace = forward(genomes[ref], report.final_params, test_ds.b)
            value = nmse_db(trace.layer_outputs[-1], test_ds.x_true)
            return Cell(ref, seed, value, "ok")
        except DivergenceError as exc:
            return Cell(ref, seed, None, f"failed: {exc}")

    jobs = [(ref, seed) for ref in spec.genomes for seed in spec.seeds]
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            cells = list(pool.map(run_cell, jobs))
    else:
        cells = [run_cell(j) for j in jobs]

    train_hash = hashlib.sha256(fileio.canonical_json({
        "dict": D.content_hash(),
        "train": train_ds.meta_hash(),
        "val": val_ds.meta_hash(),
        "cfg": {k: v for k, v in spec.train_cfg.items()},
    }).encode()).hexdigest()
    test_hash = hashlib.sha256(fileio.canonical_json({
        "test": test_ds.meta_hash(),
    }).encode()).hexdigest()
    meta = {
        "spec": spec.to_dict(),
        "train_inputs_hash": train_hash,
        "test_inputs_hash": test_hash,
    }
    return ExperimentReport(spec.name, cells, _aggregate(cells), meta)


@dataclass
class PruningRow:
    side_gates: list
    seed: int
    pruned_nmse_db: float
    reconnected_nmse_db: float
    delta_db: float  # reconnected - pruned; negative means reconnection helped


@dataclass
class PruningReport:
    name: str
    rows: list
    fraction_improved: float


def pruning_study(base: Genome, samples: int, spec: ExperimentSpec, seed: int,
                  threads: int = 1) -> PruningReport:
    """Paired comparison: random side-gate prunings of ``base`` versus the same
    architecture with every side connection restored, trained with the same
    seed per pair."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    D, train_ds, val_ds, test_ds = build_problem(spec)
    rng = make_rng(seed, 300)
    full = unrollnet.make_genome(base.k_layers, base.fusion, base.skip_gates,
                                 (True,) * base.k_layers, base.neurons)
    jobs = []
    for _ in range(samples):
        side = (True,) + tuple(bool(v) for v in rng.random(base.k_layers - 1) < 0.5)
        pair_seed = int(rng.integers(2 ** 62))
        jobs.append((side, pair_seed))

    def run_pair(job):
        side, pair_seed = job
        pruned = unrollnet.make_genome(base.k_layers, base.fusion, base.skip_gates,
                                       side, base.neurons)
        cfg_dict = dict(spec.train_cfg)
        cfg_dict["seed"] = pair_seed
        cfg = TrainConfig.from_dict(cfg_dict)
        out = []
        for g in (pruned, full):
            report = trainer.train(g, D, train_ds, val_ds, cfg)
            trace = forward(g, report.final_params, test_ds.b)
            out.append(nmse_db(trace.layer_outputs[-1], test_ds.x_true))
        return PruningRow(
            side_gates=list(side),
            seed=pair_seed,
            pruned_nmse_db=out[0],
            reconnected_nmse_db=out[1],
            delta_db=out[1] - out[0],
        )

    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(run_pair, jobs))
    else:
        rows = [run_pair(j) for j in jobs]
    improved = sum(row.delta_db < 0.0 for row in rows)
    return PruningReport(name=spec.name, rows=rows,
                         fraction_improved=improved / len(rows))


def emit_report(report: ExperimentReport, fmt: str, path) -> None:
    """Deterministic byte output; CSV columns (experiment, genome, seed,
    nmse_db, status)."""
    if fmt == "csv":
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["experiment", "genome", "seed", "nmse_db", "status"])
            for c in report.cells:
                value = "" if c.nmse_db is None else repr(c.nmse_db)
                writer.writerow([report.name, c.genome_name, c.seed, value, c.status])
    elif fmt == "json":
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(fileio.canonical_json(report.to_dict()))
    else:
        raise ValueError(f"unknown report format {fmt!r}")


def report_from_json(path) -> ExperimentReport:
    with open(path, encoding="utf-8") as fh:
        return ExperimentReport.from_dict(json.load(fh))

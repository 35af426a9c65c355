"""Command-line front end: gen, train, search, avg, experiment, report.

Exit codes: 0 success, 2 user/config error, 3 I/O error, 4 numeric failure.
Heavy imports happen inside handlers so --test-mode can pin the BLAS thread
count before numpy is loaded.
"""

from __future__ import annotations

import argparse
import json
import os
import sys


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=0, help="global seed")
    p.add_argument("--threads", type=int, default=1, help="worker pool size")
    p.add_argument("--out-dir", default=".", help="output directory")
    p.add_argument("--test-mode", action="store_true",
                   help="deterministic single-threaded reductions, zeroed wall times")
    p.add_argument("--config", default=None,
                   help="JSON config file; flags override file values")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unrollspace",
        description="Unrolled sparse-recovery networks: data, training, search, experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset file")
    _add_common(p)
    p.add_argument("--m", type=int, required=True, help="measurement dimension")
    p.add_argument("--n", type=int, required=True, help="signal dimension")
    p.add_argument("--count", type=int, required=True, help="number of samples")
    p.add_argument("--signal", default="bernoulli:0.1",
                   help="bernoulli:P | gamma:ALPHA,BETA")
    p.add_argument("--noise", default="none",
                   help="none | gaussian:SNR_DB | saltpepper:DENSITY")
    p.add_argument("--dict", dest="dict_kind", default="gaussian",
                   help="gaussian | lowrank:R")
    p.add_argument("--dict-seed", type=int, default=None,
                   help="dictionary seed (defaults to --seed)")
    p.add_argument("--split", default="train", choices=("train", "val", "test"))
    p.add_argument("--out", default=None, help="output file (default dataset.usrd)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one genome on a dataset")
    _add_common(p)
    p.add_argument("--genome", required=True, help="lista|lfista|dense|file:PATH")
    p.add_argument("--data", required=True, help="training dataset file")
    p.add_argument("--val", default=None, help="validation dataset file")
    p.add_argument("--val-frac", type=float, default=0.1,
                   help="fraction of --data carved off for validation when --val is absent")
    p.add_argument("--k", type=int, default=8, help="depth for preset genomes")
    p.add_argument("--fusion", default="lwa", choices=("lwa", "na", "mm"))
    p.add_argument("--lam", type=float, default=None)
    p.add_argument("--lr0", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--steps-per-stage", type=int, default=None)
    p.add_argument("--val-interval", type=int, default=None)
    p.add_argument("--stem", default="train", help="output file prefix")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("search", help="explore the architecture space")
    _add_common(p)
    p.add_argument("--strategy", required=True,
                   choices=("random", "evolution", "exhaustive"))
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--fusion", default="lwa", choices=("lwa", "na", "mm"))
    p.add_argument("--neurons", action="store_true", help="search neuron types")
    p.add_argument("--pruning", action="store_true", help="search side-gate pruning")
    p.add_argument("--presets", action="store_true", help="always include presets")
    p.add_argument("--budget", type=int, default=None, help="random-search budget")
    p.add_argument("--population", type=int, default=None)
    p.add_argument("--sample", type=int, default=None)
    p.add_argument("--cycles", type=int, default=None)
    p.add_argument("--m", type=int, default=None)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--train-count", type=int, default=None)
    p.add_argument("--val-count", type=int, default=None)
    p.add_argument("--signal", default=None)
    p.add_argument("--noise", default=None)
    p.add_argument("--data-seed", type=int, default=None)
    p.add_argument("--lam", type=float, default=None)
    p.add_argument("--lr0", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--steps-per-stage", type=int, default=None)
    p.add_argument("--val-interval", type=int, default=None)
    p.add_argument("--name", default="search", help="result directory name")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("avg", help="average architecture from a search result")
    _add_common(p)
    p.add_argument("--results", required=True, help="search result directory")
    p.add_argument("--top", type=int, default=None,
                   help="top-k size (default: min(50, 20%% of budget))")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--diff", default=None,
                   help="genome JSON to report a gate-difference count against")
    p.set_defaults(func=cmd_avg)

    p = sub.add_parser("experiment", help="run a study-matrix or pruning spec")
    _add_common(p)
    p.add_argument("--spec", required=True, help="experiment spec JSON file")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("report", help="re-emit a saved experiment report")
    _add_common(p)
    p.add_argument("--in", dest="input", required=True, help="report JSON file")
    p.add_argument("--format", default="csv", choices=("csv", "json"))
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def _apply_config(args):
    if not getattr(args, "config", None):
        return
    with open(args.config, encoding="utf-8") as fh:
        table = json.load(fh)
    section = table.get(args.command, {})
    for key, value in section.items():
        attr = key.replace("-", "_")
        if getattr(args, attr, None) is None:
            setattr(args, attr, value)


def _write_manifest(args, extra=None):
    from . import fileio

    os.makedirs(args.out_dir, exist_ok=True)
    skip = {"func", "config", "out_dir"}
    body = {
        "command": args.command,
        "args": {k: v for k, v in vars(args).items()
                 if k not in skip and not callable(v) and v is not None},
    }
    if extra:
        body["inputs"] = extra
    path = os.path.join(args.out_dir, f"{args.command}_manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(fileio.canonical_json(body))


def parse_signal_spec(text: str) -> dict:
    kind, _, rest = text.partition(":")
    if kind in ("bernoulli", "bernoulli_gauss"):
        return {"kind": "bernoulli_gauss", "p": float(rest or 0.1)}
    if kind == "gamma":
        alpha, beta = (float(v) for v in rest.split(","))
        return {"kind": "gamma", "alpha": alpha, "beta": beta}
    raise ValueError(f"cannot parse signal spec {text!r}")


def parse_noise_spec(text: str) -> dict:
    kind, _, rest = text.partition(":")
    if kind == "none":
        return {"kind": "none"}
    if kind == "gaussian":
        return {"kind": "gaussian", "snr_db": float(rest)}
    if kind in ("saltpepper", "salt_pepper"):
        return {"kind": "salt_pepper", "density": float(rest)}
    raise ValueError(f"cannot parse noise spec {text!r}")


def _make_dictionary(kind_text: str, m: int, n: int, seed: int):
    from . import synthgen

    kind, _, rest = kind_text.partition(":")
    if kind == "gaussian":
        return synthgen.sample_dictionary(m, n, seed)
    if kind == "lowrank":
        return synthgen.sample_lowrank_dictionary(m, int(rest), n, seed)
    raise ValueError(f"cannot parse dictionary kind {kind_text!r}")


def cmd_gen(args) -> int:
    from . import synthgen

    dict_seed = args.seed if args.dict_seed is None else args.dict_seed
    D = _make_dictionary(args.dict_kind, args.m, args.n, dict_seed)
    ds = synthgen.make_dataset(
        D, args.count,
        parse_signal_spec(args.signal),
        parse_noise_spec(args.noise),
        args.seed, split=args.split,
    )
    os.makedirs(args.out_dir, exist_ok=True)
    out = args.out or os.path.join(args.out_dir, "dataset.usrd")
    synthgen.write_dataset(ds, out)
    _write_manifest(args, {"dataset": ds.meta_hash(), "dictionary": D.content_hash()})
    print(f"wrote {out} ({ds.count} samples, dict {D.m}x{D.n})")
    return 0


def _carve_validation(ds, frac: float):
    from .synthgen import Dataset

    n_val = max(1, int(round(ds.count * frac)))
    if n_val >= ds.count:
        raise ValueError("validation fraction leaves no training data")
    cut = ds.count - n_val
    train = Dataset(ds.dict_id, ds.x_true[:, :cut], ds.b[:, :cut], ds.signal_spec,
                    ds.noise_spec, ds.seed, "train", ds.dictionary)
    val = Dataset(ds.dict_id, ds.x_true[:, cut:], ds.b[:, cut:], ds.signal_spec,
                  ds.noise_spec, ds.seed, "val", ds.dictionary)
    return train, val


def _train_config(args, seed: int):
    from .trainer import TrainConfig

    cfg = TrainConfig(seed=seed, test_mode=args.test_mode)
    for attr in ("lam", "lr0", "batch_size", "steps_per_stage", "val_interval"):
        value = getattr(args, attr, None)
        if value is not None:
            setattr(cfg, attr, value)
    return cfg


def cmd_train(args) -> int:
    from . import synthgen, trainer
    from .experiments import resolve_genome
    from .unrollnet import validate_genome

    genome = resolve_genome(args.genome, args.k, args.fusion)
    violations = validate_genome(genome)
    if violations:
        raise ValueError("invalid genome:\n  " + "\n  ".join(violations))
    train_ds = synthgen.read_dataset(args.data)
    if train_ds.dictionary is None:
        raise ValueError(f"{args.data} does not embed its dictionary")
    D = train_ds.dictionary
    if args.val:
        val_ds = synthgen.read_dataset(args.val)
    else:
        train_ds, val_ds = _carve_validation(train_ds, args.val_frac)
    cfg = _train_config(args, args.seed)
    report = trainer.train(genome, D, train_ds, val_ds, cfg)
    paths = trainer.save_report(report, genome, args.out_dir, stem=args.stem)
    _write_manifest(args, {"config_hash": report.config_hash})
    print(f"val NMSE {report.val_nmse_db:.2f} dB -> {paths['report']}")
    return 0


def cmd_search(args) -> int:
    from . import search, synthgen, trainer

    defaults = {"m": 32, "n": 64, "train_count": 4096, "val_count": 512,
                "signal": "bernoulli:0.1", "noise": "none", "data_seed": 0,
                "budget": 32, "population": 64, "sample": 16, "cycles": 200}
    for key, value in defaults.items():
        if getattr(args, key) is None:
            setattr(args, key, value)
    space = search.SearchSpace(
        k_layers=args.k, fusion=args.fusion,
        search_neurons=args.neurons, search_pruning=args.pruning,
        include_presets=args.presets,
    )
    D = synthgen.sample_dictionary(args.m, args.n, args.data_seed)
    signal = parse_signal_spec(args.signal)
    noise = parse_noise_spec(args.noise)
    train_ds = synthgen.make_dataset(D, args.train_count, signal, noise,
                                     args.data_seed, split="train")
    val_ds = synthgen.make_dataset(D, args.val_count, signal, noise,
                                   args.data_seed + 1, split="val")

    def evaluator(genome, train_seed):
        cfg = _train_config(args, train_seed)
        return trainer.train(genome, D, train_ds, val_ds, cfg).val_nmse_db

    if args.strategy == "random":
        result = search.random_search(space, args.budget, evaluator, args.seed,
                                      threads=args.threads)
    elif args.strategy == "evolution":
        config = search.EvolutionConfig(population=args.population,
                                        sample_size=args.sample, cycles=args.cycles)
        result = search.evolve(space, config, evaluator, args.seed)
    else:
        result = search.exhaustive_search(space, evaluator, seed=args.seed,
                                          threads=args.threads)
    out = os.path.join(args.out_dir, args.name)
    search.save_search_result(result, out)
    _write_manifest(args, {"dictionary": D.content_hash()})
    best = result.best()
    print(f"{result.budget_used} evaluations; best {best.val_nmse_db:.2f} dB -> {out}")
    return 0


def cmd_avg(args) -> int:
    from . import search
    from .unrollnet import genome_from_json, genome_to_json

    result = search.load_search_result(args.results)
    top = args.top if args.top is not None else search.default_top_k(result.budget_used)
    if top < 1 or top > len(result.ranked):
        raise ValueError(f"--top {top} out of range (1..{len(result.ranked)})")
    genomes = [rec.genome for rec in result.ranked[:top]]
    averaged = search.average_architecture(genomes, threshold=args.threshold)
    fm = search.fraction_map(genomes)
    os.makedirs(args.out_dir, exist_ok=True)
    genome_path = os.path.join(args.out_dir, "average_genome.json")
    with open(genome_path, "w", encoding="utf-8") as fh:
        fh.write(genome_to_json(averaged))
    search.write_fraction_csv(fm, os.path.join(args.out_dir, "fractions.csv"))
    _write_manifest(args, {"top": top})
    print(f"averaged top-{top}: {len(averaged.skip_gates)} extra connections -> {genome_path}")
    if args.diff:
        with open(args.diff, encoding="utf-8") as fh:
            other = genome_from_json(fh.read())
        print(f"gate difference vs {args.diff}: {search.genome_distance(averaged, other)}")
    return 0


def cmd_experiment(args) -> int:
    from . import experiments

    with open(args.spec, encoding="utf-8") as fh:
        raw = json.load(fh)
    os.makedirs(args.out_dir, exist_ok=True)
    if raw.get("mode") == "pruning":
        spec = experiments.ExperimentSpec.from_dict(raw["spec"])
        base = experiments.resolve_genome(raw["base_genome"], spec.k_layers, spec.fusion)
        report = experiments.pruning_study(base, int(raw["samples"]), spec,
                                           args.seed, threads=args.threads)
        out = os.path.join(args.out_dir, "pruning_report.json")
        from . import fileio
        from dataclasses import asdict
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(fileio.canonical_json({
                "name": report.name,
                "fraction_improved": report.fraction_improved,
                "rows": [asdict(r) for r in report.rows],
            }))
        print(f"fraction improved by reconnection: {report.fraction_improved:.2f} -> {out}")
    else:
        spec = experiments.ExperimentSpec.from_dict(raw)
        # fail fast on bad genome references before any training starts
        for ref in spec.genomes:
            experiments.resolve_genome(ref, spec.k_layers, spec.fusion)
        report = experiments.run_experiment(spec, threads=args.threads)
        experiments.emit_report(report, "csv", os.path.join(args.out_dir, "report.csv"))
        experiments.emit_report(report, "json", os.path.join(args.out_dir, "report.json"))
        for name, stats in report.per_genome.items():
            mean = stats["mean_db"]
            shown = "failed" if mean is None else f"{mean:.2f} dB"
            print(f"{name}: {shown} over {stats['count']} seeds")
    _write_manifest(args)
    return 0


def cmd_report(args) -> int:
    from . import experiments

    report = experiments.report_from_json(args.input)
    out = args.out or os.path.join(args.out_dir, f"report.{args.format}")
    os.makedirs(args.out_dir, exist_ok=True)
    experiments.emit_report(report, args.format, out)
    print(f"wrote {out}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "test_mode", False):
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, "1")
    try:
        _apply_config(args)
        return args.func(args)
    except (ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 3
    except ArithmeticError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

"""Architecture search over the genome space.

Strategies: uniform random sampling with dedup, aging (regularized)
evolution with single-gene mutations, and an exhaustive oracle for tiny
spaces.  Every candidate is trained from scratch by the supplied evaluator;
the training seed is derived from (search seed, genome hash) so rankings are
reproducible and shared across strategies.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import os
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

from . import fileio
from .numerics import NEURON_TAGS, SOFT_THRESHOLD
from .synthgen import make_rng
from .unrollnet import (
    LWA,
    Genome,
    all_skip_pairs,
    count_extra,
    design_space_size,
    genome_from_dict,
    genome_hash,
    genome_to_dict,
    make_genome,
    preset_genome,
    validate_genome,
)

_TAG_SAMPLE = 200
_TAG_MUTATE = 201
_TAG_EVOLVE = 202

PRESET_NAMES = ("lista", "lfista", "dense")


@dataclass(frozen=True)
class SearchSpace:
    k_layers: int
    fusion: str = LWA
    search_neurons: bool = False
    search_pruning: bool = False
    include_presets: bool = False


def space_cardinality(space: SearchSpace) -> int:
    return design_space_size(space.k_layers, space.search_neurons, space.search_pruning)


@dataclass
class SearchRecord:
    genome: Genome
    val_nmse_db: float
    train_seed: int


@dataclass
class SearchResult:
    ranked: list
    budget_used: int
    space: SearchSpace
    strategy: str = ""
    seed: int = 0
    config: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)

    def best(self) -> SearchRecord:
        return self.ranked[0]


@dataclass
class EvolutionConfig:
    population: int = 64
    sample_size: int = 16
    cycles: int = 200

    def validate(self):
        if not (self.population >= self.sample_size >= 2):
            raise ValueError("need population >= sample_size >= 2")
        if self.cycles < 0:
            raise ValueError("cycles must be >= 0")


def derive_train_seed(search_seed: int, ghash: str) -> int:
    digest = hashlib.sha256(f"{search_seed}:{ghash}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2 ** 62)


def sample_genome(space: SearchSpace, seed: int) -> Genome:
    """Uniform draw: each skip gate Bernoulli(0.5); neurons uniform over the
    three types and side gates Bernoulli(0.5) only when searched."""
    rng = make_rng(seed, _TAG_SAMPLE)
    pairs = all_skip_pairs(space.k_layers)
    bits = rng.random(len(pairs)) < 0.5
    skips = [p for p, on in zip(pairs, bits) if on]
    if space.search_neurons:
        neurons = tuple(NEURON_TAGS[i] for i in rng.integers(0, 3, size=space.k_layers))
    else:
        neurons = (SOFT_THRESHOLD,) * space.k_layers
    if space.search_pruning:
        side = (True,) + tuple(bool(v) for v in rng.random(space.k_layers - 1) < 0.5)
    else:
        side = (True,) * space.k_layers
    return make_genome(space.k_layers, space.fusion, skips, side, neurons)


def _gene_list(space: SearchSpace) -> list:
    genes = [("skip", p) for p in all_skip_pairs(space.k_layers)]
    if space.search_neurons:
        genes.extend(("neuron", k) for k in range(1, space.k_layers + 1))
    if space.search_pruning:
        genes.extend(("side", k) for k in range(2, space.k_layers + 1))
    return genes


def mutate(genome: Genome, space: SearchSpace, seed: int) -> Genome:
    """Change exactly one searchable gene, chosen uniformly."""
    rng = make_rng(seed, _TAG_MUTATE)
    genes = _gene_list(space)
    kind, where = genes[int(rng.integers(len(genes)))]
    if kind == "skip":
        skips = set(genome.skip_gates)
        skips.symmetric_difference_update({where})
        return make_genome(genome.k_layers, genome.fusion, skips,
                           genome.side_gates, genome.neurons)
    if kind == "neuron":
        current = genome.neurons[where - 1].tag
        options = [t for t in NEURON_TAGS if t != current]
        new_tag = options[int(rng.integers(len(options)))]
        neurons = list(t.tag for t in genome.neurons)
        neurons[where - 1] = new_tag
        return make_genome(genome.k_layers, genome.fusion, genome.skip_gates,
                           genome.side_gates, neurons)
    side = list(genome.side_gates)
    side[where - 1] = not side[where - 1]
    return make_genome(genome.k_layers, genome.fusion, genome.skip_gates,
                       side, genome.neurons)


def genome_distance(a: Genome, b: Genome) -> int:
    """Hamming distance over the gene encoding."""
    d = len(a.skip_gates.symmetric_difference(b.skip_gates))
    d += sum(x.tag != y.tag for x, y in zip(a.neurons, b.neurons))
    d += sum(x != y for x, y in zip(a.side_gates, b.side_gates))
    return d


class _EvalCache:
    """Deduplicates evaluator calls by genome hash and records failures."""

    def __init__(self, evaluator, search_seed: int):
        self.evaluator = evaluator
        self.search_seed = search_seed
        self.records = {}
        self.failures = []
        self.calls = 0

    def evaluate(self, genome: Genome):
        ghash = genome_hash(genome)
        if ghash in self.records:
            return self.records[ghash]
        train_seed = derive_train_seed(self.search_seed, ghash)
        self.calls += 1
        try:
            nmse = float(self.evaluator(genome, train_seed))
        except Exception as exc:  # evaluator failure is recorded, not fatal
            self.failures.append((ghash, f"{type(exc).__name__}: {exc}"))
            return None
        record = SearchRecord(genome=genome, val_nmse_db=nmse, train_seed=train_seed)
        self.records[ghash] = record
        return record

    def evaluate_many(self, genomes, threads: int = 1):
        fresh = []
        seen = set()
        for g in genomes:
            h = genome_hash(g)
            if h not in self.records and h not in seen:
                seen.add(h)
                fresh.append(g)
        if threads > 1 and len(fresh) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                list(pool.map(self.evaluate, fresh))
        else:
            for g in fresh:
                self.evaluate(g)


def _ranked(cache: _EvalCache) -> list:
    # ties: prefer fewer extra connections, then the lexicographic hash
    return sorted(
        cache.records.values(),
        key=lambda r: (r.val_nmse_db, count_extra(r.genome), genome_hash(r.genome)),
    )


def _preset_genomes(space: SearchSpace) -> list:
    return [preset_genome(name, space.k_layers, space.fusion) for name in PRESET_NAMES]


def random_search(space: SearchSpace, budget: int, evaluator, seed: int,
                  threads: int = 1) -> SearchResult:
    """Evaluate ``budget`` unique genomes drawn uniformly (hash dedup,
    collisions resampled); presets go first when the space includes them."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    cache = _EvalCache(evaluator, seed)
    rng = make_rng(seed, _TAG_SAMPLE, 1)
    pending = []
    seen = set()
    if space.include_presets:
        for g in _preset_genomes(space):
            h = genome_hash(g)
            if h not in seen and len(pending) < budget:
                seen.add(h)
                pending.append(g)
    attempts = 0
    cap = max(10_000, 500 * budget)
    while len(pending) < budget and attempts < cap:
        g = sample_genome(space, int(rng.integers(2 ** 62)))
        attempts += 1
        h = genome_hash(g)
        if h in seen:
            continue
        seen.add(h)
        pending.append(g)
    cache.evaluate_many(pending, threads=threads)
    return SearchResult(
        ranked=_ranked(cache),
        budget_used=cache.calls,
        space=space,
        strategy="random",
        seed=seed,
        config={"budget": budget},
        failures=cache.failures,
    )


def evolve(space: SearchSpace, config: EvolutionConfig, evaluator, seed: int) -> SearchResult:
    """Aging evolution: mutate the best of a uniform sample, drop the oldest.

    Returns every evaluated genome ranked.  Cycle order is preserved (each
    child is evaluated before the queue advances), matching the aging
    invariant even though repeated genomes hit the evaluation cache.
    """
    config.validate()
    cache = _EvalCache(evaluator, seed)
    rng = make_rng(seed, _TAG_EVOLVE)
    population = deque()
    while len(population) < config.population:
        g = sample_genome(space, int(rng.integers(2 ** 62)))
        rec = cache.evaluate(g)
        if rec is not None:
            population.append((g, rec.val_nmse_db))
    for _ in range(config.cycles):
        picks = rng.choice(len(population), size=config.sample_size, replace=False)
        parent = min((population[int(i)] for i in picks), key=lambda t: t[1])[0]
        child = mutate(parent, space, int(rng.integers(2 ** 62)))
        rec = cache.evaluate(child)
        if rec is None:
            continue
        population.append((child, rec.val_nmse_db))
        population.popleft()
    return SearchResult(
        ranked=_ranked(cache),
        budget_used=cache.calls,
        space=space,
        strategy="evolution",
        seed=seed,
        config=asdict(config),
        failures=cache.failures,
    )


def enumerate_space(space: SearchSpace):
    pairs = all_skip_pairs(space.k_layers)
    neuron_choices = (
        itertools.product(NEURON_TAGS, repeat=space.k_layers)
        if space.search_neurons else [(SOFT_THRESHOLD,) * space.k_layers]
    )
    for neurons in neuron_choices:
        side_choices = (
            itertools.product((True, False), repeat=space.k_layers - 1)
            if space.search_pruning else [(True,) * (space.k_layers - 1)]
        )
        for tail in side_choices:
            for bits in itertools.product((False, True), repeat=len(pairs)):
                skips = [p for p, on in zip(pairs, bits) if on]
                yield make_genome(space.k_layers, space.fusion, skips,
                                  (True,) + tail, neurons)


def exhaustive_search(space: SearchSpace, evaluator, seed: int = 0,
                      cap: int = 4096, threads: int = 1) -> SearchResult:
    """Evaluate every genome once; refuses spaces larger than ``cap``."""
    size = space_cardinality(space)
    if size > cap:
        raise ValueError(f"space of {size} genomes exceeds the exhaustive cap {cap}")
    cache = _EvalCache(evaluator, seed)
    cache.evaluate_many(list(enumerate_space(space)), threads=threads)
    return SearchResult(
        ranked=_ranked(cache),
        budget_used=cache.calls,
        space=space,
        strategy="exhaustive",
        seed=seed,
        config={"cap": cap},
        failures=cache.failures,
    )


@dataclass
class FractionMap:
    """Per-connection activation fractions over a genome set, plus per-layer
    neuron histograms and default-connection (side) fractions."""

    k_layers: int
    skip_fractions: dict
    side_fractions: list
    neuron_fractions: list


def fraction_map(genomes) -> FractionMap:
    genomes = list(genomes)
    if not genomes:
        raise ValueError("need at least one genome")
    K = genomes[0].k_layers
    fusion = genomes[0].fusion
    for g in genomes:
        if g.k_layers != K or g.fusion != fusion:
            raise ValueError("genomes must share depth and fusion mode")
    total = len(genomes)
    skip_fractions = {
        p: sum(p in g.skip_gates for g in genomes) / total for p in all_skip_pairs(K)
    }
    side_fractions = [
        sum(g.side_gates[k] for g in genomes) / total for k in range(K)
    ]
    neuron_fractions = []
    for k in range(K):
        counts = {tag: 0 for tag in NEURON_TAGS}
        for g in genomes:
            counts[g.neurons[k].tag] += 1
        neuron_fractions.append({tag: counts[tag] / total for tag in NEURON_TAGS})
    return FractionMap(K, skip_fractions, side_fractions, neuron_fractions)


def average_architecture(genomes, threshold: float = 0.5) -> Genome:
    """Threshold the fraction map: a gate survives iff its fraction >= threshold;
    neurons go to the per-layer majority with ties broken toward soft-thresholding."""
    genomes = list(genomes)
    fm = fraction_map(genomes)
    K = fm.k_layers
    skips = [p for p in all_skip_pairs(K) if fm.skip_fractions[p] >= threshold]
    side = (True,) + tuple(fm.side_fractions[k] >= threshold for k in range(1, K))
    neurons = []
    for hist in fm.neuron_fractions:
        best = max(NEURON_TAGS, key=lambda t: (hist[t], -NEURON_TAGS.index(t)))
        neurons.append(best)
    return make_genome(K, genomes[0].fusion, skips, side, neurons)


def default_top_k(budget: int) -> int:
    """Paper-sized top list, scaled down for small budgets."""
    return max(1, min(50, round(0.2 * budget)))


def save_search_result(result: SearchResult, out_dir) -> None:
    os.makedirs(os.path.join(out_dir, "records"), exist_ok=True)
    manifest = {
        "space": asdict(result.space),
        "strategy": result.strategy,
        "seed": result.seed,
        "config": result.config,
        "budget_used": result.budget_used,
        "failures": result.failures,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        fh.write(fileio.canonical_json(manifest))
    with open(os.path.join(out_dir, "rankings.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "genome_hash", "nmse_db", "extra_connections"])
        for rank, rec in enumerate(result.ranked, start=1):
            writer.writerow([rank, genome_hash(rec.genome), repr(rec.val_nmse_db),
                             count_extra(rec.genome)])
    for rec in result.ranked:
        path = os.path.join(out_dir, "records", f"{genome_hash(rec.genome)}.json")
        body = {
            "genome": genome_to_dict(rec.genome),
            "val_nmse_db": rec.val_nmse_db,
            "train_seed": rec.train_seed,
        }
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(fileio.canonical_json(body))


def load_search_result(out_dir) -> SearchResult:
    with open(os.path.join(out_dir, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    records = {}
    rec_dir = os.path.join(out_dir, "records")
    for name in os.listdir(rec_dir):
        with open(os.path.join(rec_dir, name), encoding="utf-8") as fh:
            body = json.load(fh)
        genome = genome_from_dict(body["genome"])
        records[genome_hash(genome)] = SearchRecord(
            genome=genome,
            val_nmse_db=body["val_nmse_db"],
            train_seed=body["train_seed"],
        )
    ranked = []
    with open(os.path.join(out_dir, "rankings.csv"), encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            ranked.append(records[row["genome_hash"]])
    return SearchResult(
        ranked=ranked,
        budget_used=manifest["budget_used"],
        space=SearchSpace(**manifest["space"]),
        strategy=manifest["strategy"],
        seed=manifest["seed"],
        config=manifest["config"],
        failures=[tuple(f) for f in manifest.get("failures", [])],
    )


def write_fraction_csv(fm: FractionMap, path) -> None:
    """Connection-fraction matrix: rows = destination layer, columns = origin
    layer; the (k, k-1) diagonal holds the default-connection fraction."""
    K = fm.k_layers
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dest\\origin"] + [str(i) for i in range(0, K)])
        for k in range(1, K + 1):
            row = [str(k)]
            for i in range(0, K):
                if i == k - 1:
                    row.append(repr(fm.side_fractions[k - 1]))
                elif (i, k) in fm.skip_fractions:
                    row.append(repr(fm.skip_fractions[(i, k)]))
                else:
                    row.append("")
            writer.writerow(row)


def genomes_valid(result: SearchResult) -> bool:
    return all(not validate_genome(rec.genome) for rec in result.ranked)

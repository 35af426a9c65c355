"""Synthetic problem generation: dictionaries, sparse signals, measurements.

All sampling is a pure function of (spec, seed) through a named counter-based
generator (Philox), so datasets are reproducible bit for bit.  Datasets and
dictionaries persist through the checksummed "USRD" container.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import fileio

RNG_NAME = "philox4x64"
DATASET_MAGIC = b"USRD"

# fixed sub-stream tags so distinct sampling roles never share a stream
_TAG_DICT = 0
_TAG_SIGNALS = 1
_TAG_NOISE = 2
_TAG_PERTURB = 3

COLUMN_NORM_TOL = 1e-12


def make_rng(seed: int, *tags: int) -> np.random.Generator:
    """Philox generator keyed by (seed, tags); the toolkit-wide RNG recipe."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(t) for t in tags))
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class Dictionary:
    """A column-normalized measurement matrix with generation provenance."""

    m: int
    n: int
    data: np.ndarray
    gen_spec: dict
    seed: int

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(fileio.canonical_json(
            {"m": self.m, "n": self.n, "gen_spec": self.gen_spec, "seed": self.seed}
        ).encode())
        h.update(np.ascontiguousarray(self.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def validate(self):
        if self.m < 1 or self.n < 1:
            raise ValueError("dictionary dimensions must be >= 1")
        if self.data.shape != (self.m, self.n):
            raise ValueError("dictionary data shape inconsistent with (m, n)")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("dictionary contains non-finite entries")
        norms = np.linalg.norm(self.data, axis=0)
        if np.max(np.abs(norms - 1.0)) > COLUMN_NORM_TOL:
            raise ValueError("dictionary columns are not unit-normalized")


@dataclass
class Dataset:
    """Paired ground truths and measurements plus the recipe that made them."""

    dict_id: str
    x_true: np.ndarray
    b: np.ndarray
    signal_spec: dict
    noise_spec: dict
    seed: int
    split: str
    dictionary: Dictionary | None = field(default=None, repr=False)

    @property
    def count(self) -> int:
        return self.x_true.shape[1]

    def meta_hash(self) -> str:
        meta = {
            "dict_id": self.dict_id,
            "signal_spec": self.signal_spec,
            "noise_spec": self.noise_spec,
            "seed": self.seed,
            "split": self.split,
            "shape_x": list(self.x_true.shape),
            "shape_b": list(self.b.shape),
        }
        return hashlib.sha256(fileio.canonical_json(meta).encode()).hexdigest()


def _normalize_columns(data: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(data, axis=0)
    if np.any(norms == 0.0):
        raise ValueError("cannot normalize a zero column")
    return data / norms


def sample_dictionary(m: int, n: int, seed: int) -> Dictionary:
    """Gaussian dictionary: entries i.i.d. N(0, 1/m), columns scaled to unit norm."""
    if m < 1 or n < 1:
        raise ValueError(f"invalid dimensions ({m}, {n})")
    rng = make_rng(seed, _TAG_DICT)
    data = rng.normal(0.0, 1.0 / np.sqrt(m), size=(m, n))
    return Dictionary(m, n, _normalize_columns(data), {"kind": "gaussian"}, seed)


def sample_lowrank_dictionary(m: int, r: int, n: int, seed: int) -> Dictionary:
    """Ill-conditioned dictionary D = U V with U (m x r), V (r x n) Gaussian."""
    if not (1 <= r <= min(m, n)):
        raise ValueError(f"rank {r} must satisfy 1 <= r <= min({m}, {n})")
    rng = make_rng(seed, _TAG_DICT)
    U = rng.normal(0.0, 1.0 / np.sqrt(m), size=(m, r))
    V = rng.normal(0.0, 1.0 / np.sqrt(r), size=(r, n))
    return Dictionary(m, n, _normalize_columns(U @ V), {"kind": "lowrank", "rank": r}, seed)


def perturb_dictionary(base: Dictionary, scale: float, seed: int) -> Dictionary:
    """Add i.i.d. Laplace(0, scale) noise to ``base`` and re-normalize columns."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    rng = make_rng(seed, _TAG_PERTURB)
    delta = rng.laplace(0.0, scale, size=base.data.shape)
    spec = {"kind": "perturbed", "base_id": base.content_hash(), "scale": scale}
    return Dictionary(base.m, base.n, _normalize_columns(base.data + delta), spec, seed)


def validate_signal_spec(spec: dict):
    kind = spec.get("kind")
    if kind == "bernoulli_gauss":
        p = spec["p"]
        if not (0.0 < p <= 1.0):
            raise ValueError(f"bernoulli_gauss p must lie in (0, 1], got {p}")
    elif kind == "gamma":
        if spec["alpha"] <= 0 or spec["beta"] <= 0:
            raise ValueError("gamma parameters must be positive")
    else:
        raise ValueError(f"unknown signal spec kind {kind!r}")


def validate_noise_spec(spec: dict):
    kind = spec.get("kind")
    if kind == "none":
        return
    if kind == "gaussian":
        float(spec["snr_db"])
    elif kind == "salt_pepper":
        d = spec["density"]
        if not (0.0 <= d <= 1.0):
            raise ValueError(f"salt_pepper density must lie in [0, 1], got {d}")
    else:
        raise ValueError(f"unknown noise spec kind {kind!r}")


def sample_signals(n: int, count: int, spec: dict, seed: int) -> np.ndarray:
    """Ground-truth matrix (n x count) per the signal spec.

    bernoulli_gauss(p): each entry nonzero with probability p, nonzero values
    i.i.d. N(0, 1).  gamma(alpha, beta): every entry Gamma(shape=alpha,
    scale=beta), nonnegative and not exactly sparse.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    validate_signal_spec(spec)
    rng = make_rng(seed, _TAG_SIGNALS)
    if spec["kind"] == "bernoulli_gauss":
        mask = rng.random(size=(n, count)) < spec["p"]
        values = rng.normal(0.0, 1.0, size=(n, count))
        return np.where(mask, values, 0.0)
    return rng.gamma(shape=spec["alpha"], scale=spec["beta"], size=(n, count))


def synthesize_measurements(D: Dictionary, X: np.ndarray, noise: dict, seed: int) -> np.ndarray:
    """B = D X + E with E determined by the noise spec.

    gaussian(snr_db): i.i.d. Gaussian noise whose variance is set from the
    empirical signal energy so that 10 log10(E||DX||^2 / E||E||^2) = snr_db.
    salt_pepper(density): exactly round(density*m*count) entries, drawn
    uniformly without replacement, are replaced half by +A and half by -A
    where A = max |(DX)_ij| over the clean measurements.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != D.n:
        raise ValueError(f"signal shape {X.shape} incompatible with dictionary ({D.m}, {D.n})")
    validate_noise_spec(noise)
    clean = D.data @ X
    kind = noise["kind"]
    if kind == "none":
        return clean
    rng = make_rng(seed, _TAG_NOISE)
    if kind == "gaussian":
        sig_power = float(np.mean(clean * clean))
        sigma = np.sqrt(sig_power / (10.0 ** (noise["snr_db"] / 10.0)))
        return clean + rng.normal(0.0, sigma, size=clean.shape)
    # salt & pepper
    total = int(round(noise["density"] * clean.size))
    out = clean.copy()
    if total > 0:
        amp = float(np.max(np.abs(clean)))
        idx = rng.choice(clean.size, size=total, replace=False)
        n_salt = (total + 1) // 2
        out.flat[idx[:n_salt]] = amp
        out.flat[idx[n_salt:]] = -amp
    return out


def make_dataset(D: Dictionary, count: int, signal_spec: dict, noise_spec: dict,
                 seed: int, split: str = "train", embed_dictionary: bool = True) -> Dataset:
    """Sample a full (x_true, b) dataset; signals and noise get disjoint sub-streams."""
    x = sample_signals(D.n, count, signal_spec, seed)
    b = synthesize_measurements(D, x, noise_spec, seed)
    return Dataset(
        dict_id=D.content_hash(),
        x_true=x,
        b=b,
        signal_spec=dict(signal_spec),
        noise_spec=dict(noise_spec),
        seed=seed,
        split=split,
        dictionary=D if embed_dictionary else None,
    )


def write_dataset(ds: Dataset, path) -> None:
    """Persist a dataset; round-trips are bit-exact for all floats and metadata."""
    header = {
        "kind": "dataset",
        "rng": RNG_NAME,
        "dict_id": ds.dict_id,
        "signal_spec": ds.signal_spec,
        "noise_spec": ds.noise_spec,
        "seed": ds.seed,
        "split": ds.split,
    }
    arrays = [("x_true", ds.x_true), ("b", ds.b)]
    if ds.dictionary is not None:
        header["dictionary"] = {
            "m": ds.dictionary.m,
            "n": ds.dictionary.n,
            "gen_spec": ds.dictionary.gen_spec,
            "seed": ds.dictionary.seed,
        }
        arrays.append(("dictionary", ds.dictionary.data))
    fileio.write_container(path, DATASET_MAGIC, header, arrays)


def read_dataset(path) -> Dataset:
    header, arrays = fileio.read_container(path, DATASET_MAGIC)
    if header.get("kind") != "dataset":
        raise fileio.FileFormatError(f"{path}: not a dataset container")
    dictionary = None
    if "dictionary" in header:
        meta = header["dictionary"]
        dictionary = Dictionary(
            m=meta["m"], n=meta["n"], data=arrays["dictionary"],
            gen_spec=meta["gen_spec"], seed=meta["seed"],
        )
    return Dataset(
        dict_id=header["dict_id"],
        x_true=arrays["x_true"],
        b=arrays["b"],
        signal_spec=header["signal_spec"],
        noise_spec=header["noise_spec"],
        seed=header["seed"],
        split=header["split"],
        dictionary=dictionary,
    )

"""Stage-wise end-to-end training of (genome, params) pairs, NMSE evaluation,
and the finite-difference gradient check.

Training follows the layer-progressive recipe: for each depth k the layer's
new scalars are trained first at the base learning rate, then all parameters
of layers <= k are fine-tuned at the decayed rates, with the depth-k output
in the loss.  The returned parameters are the best-on-validation ones.
"""

from __future__ import annotations

import csv
import hashlib
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import fileio, unrollnet
from .numerics import finite_diff_grad
from .synthgen import Dataset, Dictionary, make_rng, sample_signals
from .unrollnet import Genome, NetParams, forward, backward, init_params, mse_loss

NMSE_FLOOR_DB = -150.0

_TAG_BATCHES = 100
_TAG_GRADCHECK = 101


class DivergenceError(ArithmeticError):
    """Training loss went non-finite; carries the stage where it happened."""

    def __init__(self, stage: str, message: str = ""):
        super().__init__(f"divergence at stage {stage}" + (f": {message}" if message else ""))
        self.stage = stage


@dataclass
class AdamSpec:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TrainConfig:
    batch_size: int = 128
    lr0: float = 5e-4
    stage_multipliers: tuple = (1.0, 0.2, 0.02)
    steps_per_stage: int | None = None  # None: one epoch per sub-stage
    max_epochs_guard: int = 100
    lam: float = 0.4
    seed: int = 0
    optimizer: AdamSpec = field(default_factory=AdamSpec)
    val_interval: int = 50
    patience: int = 5
    min_improve_db: float = 0.01
    test_mode: bool = False

    def validate(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        mults = tuple(self.stage_multipliers)
        if not mults or any(m <= 0 for m in mults):
            raise ValueError("stage_multipliers must be positive")
        if any(b > a for a, b in zip(mults, mults[1:])):
            raise ValueError("stage_multipliers must be non-increasing")
        if self.steps_per_stage is not None and self.steps_per_stage < 0:
            raise ValueError("steps_per_stage must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_multipliers"] = list(self.stage_multipliers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "optimizer" in d and isinstance(d["optimizer"], dict):
            d["optimizer"] = AdamSpec(**d["optimizer"])
        if "stage_multipliers" in d:
            d["stage_multipliers"] = tuple(d["stage_multipliers"])
        return cls(**d)


@dataclass
class TrainReport:
    final_params: NetParams
    loss_curve: list  # rows (step, stage, loss)
    val_curve: list   # rows (step, stage, depth, val_nmse_db)
    val_nmse_db: float
    wall_time: float
    config_hash: str


def nmse_db(x_hat: np.ndarray, x_star: np.ndarray) -> float:
    """10 log10( sum ||x_hat - x*||^2 / sum ||x*||^2 ), clamped at -150 dB."""
    x_hat = np.asarray(x_hat, dtype=np.float64)
    x_star = np.asarray(x_star, dtype=np.float64)
    if x_hat.shape != x_star.shape:
        raise ValueError(f"shape mismatch {x_hat.shape} vs {x_star.shape}")
    denom = float(np.sum(x_star * x_star))
    if denom == 0.0:
        raise ValueError("x_star is identically zero")
    err = float(np.sum((x_hat - x_star) ** 2))
    if err == 0.0:
        return NMSE_FLOOR_DB
    return max(10.0 * math.log10(err / denom), NMSE_FLOOR_DB)


class _Adam:
    """Per-array Adam with bias correction; moments reset per sub-stage."""

    def __init__(self, params: NetParams, spec: AdamSpec):
        self.spec = spec
        self.m = {name: np.zeros_like(a) for name, a in params.named_arrays()}
        self.v = {name: np.zeros_like(a) for name, a in params.named_arrays()}
        self.t = 0

    def step(self, params: NetParams, grads: dict, masks: dict, lr: float):
        self.t += 1
        s = self.spec
        bc1 = 1.0 - s.beta1 ** self.t
        bc2 = 1.0 - s.beta2 ** self.t
        for name, arr in params.named_arrays():
            g = grads[name] * masks[name]
            m = self.m[name]
            v = self.v[name]
            m *= s.beta1
            m += (1.0 - s.beta1) * g
            v *= s.beta2
            v += (1.0 - s.beta2) * g * g
            arr -= lr * (m / bc1) / (np.sqrt(v / bc2) + s.eps)
            if name == "theta":
                # thresholds are constrained nonnegative; project back
                np.maximum(arr, 0.0, out=arr)


def _pair_dests(genome: Genome) -> np.ndarray:
    return np.array([k for _, k in genome.conn_pairs()], dtype=int)


def _new_scalar_masks(genome: Genome, params: NetParams, k: int) -> dict:
    """Sub-stage (a): only the depth-k scalars are trainable."""
    masks = {name: np.zeros_like(a, dtype=bool) for name, a in params.named_arrays()}
    masks["theta"][k - 1] = True
    dests = _pair_dests(genome)
    if genome.fusion in (unrollnet.LWA, unrollnet.NA):
        masks["alpha"][k - 1] = True
        if genome.fusion == unrollnet.LWA:
            masks["conn_coef"][dests == k] = True
    else:
        masks["alpha"][dests == k] = True
    return masks


def _stage_masks(genome: Genome, params: NetParams, k: int) -> dict:
    """Sub-stages (b): everything belonging to layers <= k, shared matrices included."""
    masks = {}
    dests = _pair_dests(genome)
    for name, a in params.named_arrays():
        if name == "theta":
            m = np.zeros_like(a, dtype=bool)
            m[:k] = True
        elif name == "alpha":
            if genome.fusion == unrollnet.MM:
                m = dests <= k
            else:
                m = np.zeros_like(a, dtype=bool)
                m[:k] = True
        elif name == "conn_coef":
            m = dests <= k
        else:
            m = np.ones_like(a, dtype=bool)
        masks[name] = m
    return masks


def _val_nmse(genome: Genome, params: NetParams, ds: Dataset, depth: int) -> float:
    trace = forward(genome, params, ds.b, depth=depth)
    return nmse_db(trace.layer_outputs[-1], ds.x_true)


def _config_hash(cfg: TrainConfig, genome: Genome, D: Dictionary,
                 train_ds: Dataset, val_ds: Dataset) -> str:
    payload = fileio.canonical_json({
        "cfg": cfg.to_dict(),
        "genome": unrollnet.genome_to_dict(genome),
        "dict": D.content_hash(),
        "train": train_ds.meta_hash(),
        "val": val_ds.meta_hash(),
    })
    return hashlib.sha256(payload.encode()).hexdigest()


def train(genome: Genome, D: Dictionary, train_ds: Dataset, val_ds: Dataset,
          cfg: TrainConfig) -> TrainReport:
    """Stage-wise training; deterministic given cfg.seed and thread mode.

    Raises DivergenceError if the loss goes non-finite, ValueError when the
    genome is invalid or the datasets do not belong to ``D``.
    """
    cfg.validate()
    violations = unrollnet.validate_genome(genome)
    if violations:
        raise ValueError("invalid genome: " + "; ".join(violations))
    dict_id = D.content_hash()
    for ds, name in ((train_ds, "train"), (val_ds, "val")):
        if ds.dict_id != dict_id:
            raise ValueError(f"{name} dataset was not generated from this dictionary")

    t_start = time.perf_counter()
    K = genome.k_layers
    params = init_params(genome, D, cfg.lam)
    count = train_ds.count
    batch_size = min(cfg.batch_size, count)
    batches_per_epoch = max(1, math.ceil(count / batch_size))
    steps_per_stage = cfg.steps_per_stage
    if steps_per_stage is None:
        steps_per_stage = batches_per_epoch
    steps_per_stage = min(steps_per_stage, cfg.max_epochs_guard * batches_per_epoch)

    rng = make_rng(cfg.seed, _TAG_BATCHES)

    def batch_stream():
        while True:
            perm = rng.permutation(count)
            for s in range(0, count - batch_size + 1, batch_size):
                yield perm[s : s + batch_size]

    batches = batch_stream()
    loss_curve = []
    val_curve = []

    best_nmse = _val_nmse(genome, params, val_ds, depth=K)
    best_params = params.copy()
    val_curve.append((0, "init", K, best_nmse))

    step = 0
    for k in range(1, K + 1):
        stage_best = math.inf
        bad = 0
        abort_stage = False
        for s, mult in enumerate(cfg.stage_multipliers):
            stage = f"{k}:{s + 1}"
            lr = cfg.lr0 * mult
            masks = _new_scalar_masks(genome, params, k) if s == 0 else _stage_masks(genome, params, k)
            opt = _Adam(params, cfg.optimizer)
            for _ in range(steps_per_stage):
                idx = next(batches)
                b = train_ds.b[:, idx]
                x_star = train_ds.x_true[:, idx]
                try:
                    trace = forward(genome, params, b, depth=k)
                except ArithmeticError as exc:
                    raise DivergenceError(stage, str(exc)) from exc
                loss = mse_loss(trace.layer_outputs[-1], x_star)
                if not math.isfinite(loss):
                    raise DivergenceError(stage, f"loss={loss}")
                grads = backward(genome, params, b, x_star, depth=k, trace=trace)
                opt.step(params, grads, masks, lr)
                step += 1
                loss_curve.append((step, stage, loss))
                if cfg.val_interval and step % cfg.val_interval == 0:
                    vn = _val_nmse(genome, params, val_ds, depth=k)
                    val_curve.append((step, stage, k, vn))
                    if k == K and vn < best_nmse:
                        best_nmse = vn
                        best_params = params.copy()
                    if vn < stage_best - cfg.min_improve_db:
                        stage_best = vn
                        bad = 0
                    else:
                        bad += 1
                        if bad >= cfg.patience:
                            abort_stage = True
                            break
            if abort_stage:
                break
        # end-of-stage validation keeps the guard and best tracking current
        vn = _val_nmse(genome, params, val_ds, depth=k)
        val_curve.append((step, f"{k}:end", k, vn))
        if k == K and vn < best_nmse:
            best_nmse = vn
            best_params = params.copy()

    wall = 0.0 if cfg.test_mode else time.perf_counter() - t_start
    return TrainReport(
        final_params=best_params,
        loss_curve=loss_curve,
        val_curve=val_curve,
        val_nmse_db=best_nmse,
        wall_time=wall,
        config_hash=_config_hash(cfg, genome, D, train_ds, val_ds),
    )


def grad_check(genome: Genome, D: Dictionary, sample=None, eps: float = 1e-6,
               seed: int = 0, lam: float = 0.4, kink_tol: float = 1e-3,
               max_resamples: int = 20, batch: int = 3) -> float:
    """Max relative error between the analytic backward pass and central
    finite differences over every parameter coordinate.

    The evaluation point avoids activation kinks: samples whose
    pre-activations come within ``kink_tol`` of a threshold are redrawn.
    Coordinates are compared relative to max(|analytic|, |numeric|, 1e-3).
    """
    rng = make_rng(seed, _TAG_GRADCHECK)
    params = init_params(genome, D, lam)
    # break the symmetric initialization so every parameter has generic effect
    for name, arr in params.named_arrays():
        if name == "theta":
            arr *= 1.0 + 0.2 * rng.random(arr.shape)
        else:
            arr += 0.05 * rng.standard_normal(arr.shape)

    def kink_margin(trace):
        margin = math.inf
        for k, u in enumerate(trace.pre_activations):
            tag = genome.neurons[k].tag
            if tag == "soft_threshold":
                margin = min(margin, float(np.min(np.abs(np.abs(u) - params.theta[k]))))
            else:
                margin = min(margin, float(np.min(np.abs(u))))
        return margin

    def draw():
        x = sample_signals(D.n, batch, {"kind": "bernoulli_gauss", "p": 0.3},
                           int(rng.integers(2 ** 62)))
        return D.data @ x, x

    if sample is not None:
        b, x_star = sample
    else:
        b, x_star = draw()
    for _ in range(max_resamples + 1):
        trace = forward(genome, params, b)
        if kink_margin(trace) > kink_tol:
            break
        b, x_star = draw()
    else:
        raise ArithmeticError("could not find a kink-avoiding sample")

    grads = backward(genome, params, b, x_star, trace=trace)
    analytic = np.concatenate([grads[name].ravel() for name, _ in params.named_arrays()])

    def objective(vec):
        p = params.unpack(vec)
        return mse_loss(forward(genome, p, b).layer_outputs[-1], x_star)

    numeric = finite_diff_grad(objective, params.pack(), eps)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3)
    return float(np.max(np.abs(analytic - numeric) / scale))


def save_report(report: TrainReport, genome: Genome, out_dir, stem: str = "train") -> dict:
    """Write report JSON, parameter blob and loss CSV; returns the paths."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "report": os.path.join(out_dir, f"{stem}_report.json"),
        "params": os.path.join(out_dir, f"{stem}_params.usrp"),
        "loss": os.path.join(out_dir, f"{stem}_loss.csv"),
    }
    body = {
        "val_nmse_db": report.val_nmse_db,
        "wall_time": report.wall_time,
        "config_hash": report.config_hash,
        "genome": unrollnet.genome_to_dict(genome),
        "val_curve": [list(row) for row in report.val_curve],
    }
    with open(paths["report"], "w", encoding="utf-8") as fh:
        fh.write(fileio.canonical_json(body))
    unrollnet.write_params(paths["params"], genome, report.final_params)
    with open(paths["loss"], "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "stage"])
        for step, stage, loss in report.loss_curve:
            writer.writerow([step, repr(loss), stage])
    return paths

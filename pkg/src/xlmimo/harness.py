"""Dataset generation, training, NMSE evaluation and the three sweep experiments."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import channel as ch
from .channel import ArrayConfig, ChannelConfig, SignalConfig
from .estimators import build_dictionary, default_rings, fit_covariance, lmmse_estimate, omp_estimate
from .formats import Dataset
from .models import MatCenet, MatCenetConfig, Xlcnet, XlcnetConfig, build_model
from .nn import Adam

log = logging.getLogger(__name__)

ESTIMATORS = ("ls", "lmmse", "omp", "hyomp", "xlcnet", "matcenet")


# ---------------------------------------------------------------------------
# seeding


def stream(seed: int, tag: str, *index: int) -> np.random.Generator:
    """Independent generator for ``(seed, tag, index...)``.

    Named tags ("train", "val", "test", "init", "shuffle", ...) give
    disjoint streams; the per-sample index makes sample ``i`` independent of
    how many samples are drawn or in which order.
    """
    key = (zlib.crc32(tag.encode()),) + tuple(int(i) for i in index)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def config_hash(obj) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def near_field_range(array: ArrayConfig, full_size_range=(10.0, 80.0)) -> tuple[float, float]:
    """Distance range for near-field scatterers.

    The full-size geometry (M=256, lambda=1 cm) uses 10..80 m directly;
    other arrays use 0.1..0.8 of their Rayleigh distance so the scatterers
    stay inside the near-field region.
    """
    if array.M == 256 and array.lam == 0.01 and array.d == array.lam / 2:
        return full_size_range
    d_ray = ch.rayleigh_distance(array)
    return (0.1 * d_ray, 0.8 * d_ray)


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class SnrPolicy:
    """Fixed SNR, or per-sample SNR uniform on ``[low_db, high_db]``."""

    low_db: float
    high_db: float | None = None
    noiseless: bool = False

    @classmethod
    def fixed(cls, snr_db: float) -> "SnrPolicy":
        return cls(snr_db, snr_db)

    @classmethod
    def uniform(cls, low_db: float = -10.0, high_db: float = 20.0) -> "SnrPolicy":
        return cls(low_db, high_db)

    @classmethod
    def none(cls) -> "SnrPolicy":
        return cls(math.inf, math.inf, noiseless=True)

    @property
    def is_fixed(self) -> bool:
        return self.high_db is None or self.high_db == self.low_db

    def header_snr(self) -> float:
        return float(self.low_db) if self.is_fixed and not self.noiseless else math.nan

    def draw(self, rng: np.random.Generator) -> SignalConfig:
        if self.noiseless:
            return SignalConfig(1.0, 0.0)
        if self.is_fixed:
            return SignalConfig.from_snr_db(self.low_db)
        return SignalConfig.from_snr_db(rng.uniform(self.low_db, self.high_db))


def generate_sample(cfg: ChannelConfig, snr: SnrPolicy, seed: int, tag: str, index: int):
    rng = stream(seed, tag, index)
    h = ch.draw_channel(cfg, rng)
    sig = snr.draw(rng)
    y = ch.received_signal(h, sig, rng)
    return ch.ls_estimate(y, sig), h


def generate_dataset(cfg: ChannelConfig, snr: SnrPolicy, n: int, seed: int, tag: str = "train") -> Dataset:
    """``n`` (LS estimate, channel) pairs; sample ``i`` depends only on ``(seed, tag, i)``."""
    M = cfg.array.M
    h_ls = np.empty((n, M), dtype=complex)
    h = np.empty((n, M), dtype=complex)
    for i in range(n):
        h_ls[i], h[i] = generate_sample(cfg, snr, seed, tag, i)
    return Dataset(h_ls, h, snr.header_snr())


def draw_channels(cfg: ChannelConfig, n: int, seed: int, tag: str) -> np.ndarray:
    return np.stack([ch.draw_channel(cfg, stream(seed, tag, i)) for i in range(n)])


# ---------------------------------------------------------------------------
# loss and metrics


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch mean of squared Frobenius errors and its gradient w.r.t. ``pred``."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    n = pred.shape[0]
    loss = float(np.sum(diff.astype(np.float64) ** 2) / n)
    return loss, (2.0 / n) * diff


def nmse_per_sample(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    n = target.shape[0]
    err = np.sum(np.abs(pred - target).reshape(n, -1) ** 2, axis=1)
    ref = np.sum(np.abs(target).reshape(n, -1) ** 2, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return err / ref


def nmse(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean of per-sample ``||pred - target||^2 / ||target||^2``.

    Zero-energy targets are skipped with a warning.
    """
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape or target.shape[0] == 0:
        raise ValueError(f"need matching non-empty sets, got {pred.shape} / {target.shape}")
    ratio = nmse_per_sample(pred, target)
    ok = np.isfinite(ratio)
    if not ok.all():
        log.warning("nmse: %d zero-norm targets excluded", int((~ok).sum()))
    return float(ratio[ok].mean())


def nmse_ratio_of_sums(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.sum(np.abs(pred - target) ** 2) / np.sum(np.abs(target) ** 2))


def to_db(x: float) -> float:
    return 10 * math.log10(x) if x > 0 else -math.inf


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    n_train: int = 9000
    n_val: int = 1000
    batch_size: int = 128
    n_epochs: int = 200
    learning_rate: float = 1e-3
    train_L: int = 6
    train_L0: int = 1
    snr_low_db: float = -10.0
    snr_high_db: float = 20.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_train", "n_val", "batch_size", "n_epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.batch_size > self.n_train:
            raise ValueError("batch_size exceeds the training set size")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch, self.loss = epoch, batch, loss


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_nmse_db: float
    wall_seconds: float


@dataclass
class TrainResult:
    history: list[EpochRecord]
    best_epoch: int
    best_val_nmse_db: float
    init_val_nmse_db: float
    optimizer: Adam
    last_epoch: int


def predict(model, h_ls: np.ndarray, batch_size: int = 256, dtype=None) -> np.ndarray:
    """Run ``model`` (infer mode) on complex LS estimates ``(n, M)``."""
    dtype = dtype or model.parameters()[0].data.dtype
    out = np.empty(h_ls.shape, dtype=complex)
    for start in range(0, h_ls.shape[0], batch_size):
        x = ch.pack_real(h_ls[start:start + batch_size]).astype(dtype)
        out[start:start + batch_size] = ch.unpack_real(model.forward(x, train=False))
    return out


def snapshot(model) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in model.state().items()}


def restore(model, state: dict[str, np.ndarray]) -> None:
    live = model.state()
    for name, arr in state.items():
        live[name].data = arr.astype(live[name].data.dtype, copy=True)


def train(model, train_set: Dataset, val_set: Dataset, cfg: TrainConfig, *,
          optimizer: Adam | None = None, start_epoch: int = 0, on_epoch=None) -> TrainResult:
    """Fixed-epoch Adam training on the real-tensor MSE; the model ends at its best-val weights.

    Batches are drawn from a seeded shuffle. The weights at entry count as a
    candidate, so the returned model is never worse on validation than at
    initialisation.
    """
    if train_set.M != val_set.M or train_set.M != model.cfg.M:
        raise ValueError(f"dataset M={train_set.M}/{val_set.M} does not match model M={model.cfg.M}")
    dtype = model.parameters()[0].data.dtype
    x_all = ch.pack_real(train_set.h_ls).astype(dtype)
    y_all = ch.pack_real(train_set.h).astype(dtype)
    opt = optimizer or Adam(dict(model.named_parameters()), lr=cfg.learning_rate)

    def val_db():
        return to_db(nmse(predict(model, val_set.h_ls, dtype=dtype), val_set.h))

    best_db = init_db = val_db()
    best_state, best_epoch = snapshot(model), start_epoch
    history = []
    n = len(train_set)
    t0 = time.perf_counter()
    epoch = start_epoch
    for epoch in range(start_epoch + 1, start_epoch + cfg.n_epochs + 1):
        order = stream(cfg.seed, "shuffle", epoch).permutation(n)
        total, count = 0.0, 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            opt.zero_grad()
            pred = model.forward(x_all[idx], train=True)
            loss, grad = mse_loss(pred, y_all[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch, b, loss)
            model.backward(grad)
            opt.step()
            total += loss * idx.size
            count += idx.size
        vdb = val_db()
        rec = EpochRecord(epoch, total / max(count, 1), vdb, time.perf_counter() - t0)
        history.append(rec)
        log.info("epoch %d loss %.5f val %.3f dB", epoch, rec.train_loss, vdb)
        if vdb < best_db:
            best_db, best_epoch, best_state = vdb, epoch, snapshot(model)
        if on_epoch is not None:
            on_epoch(rec)
    restore(model, best_state)
    return TrainResult(history, best_epoch, best_db, init_db, opt, epoch)


def history_csv(history: list[EpochRecord], wall_time: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "val_nmse_db", "wall_seconds"])
    for r in history:
        w.writerow([r.epoch, repr(r.train_loss), repr(r.val_nmse_db),
                    f"{r.wall_seconds:.3f}" if wall_time else ""])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# experiments

SNR_GRID = (-10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0)
SCENARIOS = ("near_only", "far_only", "hybrid", "hybrid_L0_sweep")


@dataclass
class ExperimentConfig:
    """One figure's worth of evaluation.

    ``near_only``, ``far_only`` and ``hybrid`` (``L0`` far paths) sweep
    ``snr_grid`` with ``L`` paths; ``hybrid_L0_sweep`` holds ``sweep_snr_db``
    and sweeps L0 = 0..L.
    """

    scenario: str = "near_only"
    M: int = 64
    lam: float = 0.01
    L: int = 6
    L0: int = 1
    snr_grid: tuple[float, ...] = SNR_GRID
    sweep_snr_db: float = 10.0
    n_test: int = 10000
    estimators: tuple[str, ...] = ("ls",)
    checkpoints: dict[str, str] = field(default_factory=dict)
    r_range: tuple[float, float] | None = None
    n_cov: int = 10000
    omp_angles: int | None = None
    omp_rings: int = 7
    seed: int = 0

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if not self.estimators:
            raise ValueError("estimator list is empty")
        for e in self.estimators:
            if e not in ESTIMATORS:
                raise ValueError(f"unknown estimator {e!r}; choose from {', '.join(ESTIMATORS)}")
        if self.scenario != "hybrid_L0_sweep" and not self.snr_grid:
            raise ValueError("SNR grid is empty")
        if self.n_test <= 0:
            raise ValueError("n_test must be positive")
        if self.L <= 0 or not 0 <= self.L0 <= self.L:
            raise ValueError(f"need L > 0 and 0 <= L0 <= L, got L={self.L}, L0={self.L0}")
        self.snr_grid = tuple(float(s) for s in self.snr_grid)
        self.estimators = tuple(self.estimators)

    @property
    def array(self) -> ArrayConfig:
        return ArrayConfig(self.M, self.lam)

    def resolved_r_range(self) -> tuple[float, float]:
        return tuple(self.r_range) if self.r_range else near_field_range(self.array)

    def points(self) -> list[tuple[float, ChannelConfig]]:
        """(x value, channel config) per grid point; x is SNR dB or L0."""
        r_range = self.resolved_r_range()
        if self.scenario == "hybrid_L0_sweep":
            return [(float(l0), ChannelConfig(self.array, self.L, l0, r_range=r_range))
                    for l0 in range(self.L + 1)]
        l0 = {"near_only": 0, "far_only": self.L, "hybrid": self.L0}[self.scenario]
        cfg = ChannelConfig(self.array, self.L, l0, r_range=r_range)
        return [(snr, cfg) for snr in self.snr_grid]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["r_range"] = list(self.resolved_r_range())
        return d


@dataclass
class NmseRow:
    scenario: str
    estimator: str
    x_name: str
    x: float
    nmse_linear: float
    nmse_db: float
    nmse_ratio_of_sums: float
    n_samples: int
    ci95_halfwidth_db: float


@dataclass
class NmseReport:
    rows: list[NmseRow]
    seed: int
    config_hash: str
    metadata: dict = field(default_factory=dict)

    def lookup(self, estimator: str, x: float) -> NmseRow:
        for r in self.rows:
            if r.estimator == estimator and r.x == x:
                return r
        raise KeyError((estimator, x))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scenario", "estimator", "snr_db", "L0", "nmse_linear", "nmse_db",
                    "nmse_ratio_of_sums", "n_samples", "ci95_halfwidth_db", "seed", "config_hash"])
        for r in self.rows:
            snr = repr(r.x) if r.x_name == "snr_db" else ""
            l0 = str(int(r.x)) if r.x_name == "L0" else ""
            w.writerow([r.scenario, r.estimator, snr, l0, repr(r.nmse_linear), repr(r.nmse_db),
                        repr(r.nmse_ratio_of_sums), r.n_samples, repr(r.ci95_halfwidth_db),
                        self.seed, self.config_hash])
        return buf.getvalue()


def _row(exp, estimator, x_name, x, est, truth) -> NmseRow:
    ratios = nmse_per_sample(est, truth)
    ratios = ratios[np.isfinite(ratios)]
    mean = float(ratios.mean())
    half = 1.96 * float(ratios.std(ddof=1)) / math.sqrt(ratios.size) if ratios.size > 1 else math.nan
    half_db = 10 * math.log10(1 + half / mean) if mean > 0 and math.isfinite(half) else math.nan
    return NmseRow(exp.scenario, estimator, x_name, x, mean, to_db(mean),
                   nmse_ratio_of_sums(est, truth), int(ratios.size), half_db)


def run_experiment(exp: ExperimentConfig, models: dict | None = None) -> NmseReport:
    """Evaluate every configured estimator on one shared test set per grid point.

    ``models`` maps "xlcnet"/"matcenet" to loaded networks; otherwise the
    paths in ``exp.checkpoints`` are loaded.
    """
    from .checkpoint import load_model

    models = dict(models or {})
    for name in ("xlcnet", "matcenet"):
        if name in exp.estimators and name not in models:
            if name not in exp.checkpoints:
                raise FileNotFoundError(f"estimator {name!r} needs a checkpoint")
            models[name] = load_model(exp.checkpoints[name])
        if name in models and models[name].cfg.M != exp.M:
            raise ValueError(f"{name} checkpoint has M={models[name].cfg.M}, experiment has M={exp.M}")

    x_name = "L0" if exp.scenario == "hybrid_L0_sweep" else "snr_db"
    n_angles = exp.omp_angles or exp.M
    rows = []
    dictionaries = {}
    for point, (x, ccfg) in enumerate(exp.points()):
        snr_db = exp.sweep_snr_db if x_name == "L0" else x
        sig = SignalConfig.from_snr_db(snr_db)
        tag = f"test/{exp.scenario}/{point}"
        truth = draw_channels(ccfg, exp.n_test, exp.seed, tag + "/h")
        noise = np.stack([ch.complex_normal(stream(exp.seed, tag + "/noise", i), exp.M, sig.noise_variance)
                          for i in range(exp.n_test)])
        y = math.sqrt(sig.pilot_power) * truth + noise
        for name in exp.estimators:
            if name == "ls":
                est = ch.ls_estimate(y, sig)
            elif name == "lmmse":
                cov = fit_covariance(draw_channels(ccfg, exp.n_cov, exp.seed, tag + "/cov"))
                est = lmmse_estimate(y, sig, cov)
            elif name in ("omp", "hyomp"):
                if name not in dictionaries:
                    rings = default_rings(ccfg.r_range, exp.omp_rings) if name == "hyomp" else None
                    dictionaries[name] = build_dictionary(ccfg.array, n_angles, rings)
                k_near = ccfg.L - ccfg.L0 if name == "hyomp" else 0
                est = omp_estimate(y, sig, dictionaries[name], ccfg.L, k_near)
            else:
                est = predict(models[name], ch.ls_estimate(y, sig))
            rows.append(_row(exp, name, x_name, x, est, truth))
    meta = {"omp": f"HY-OMP (reimpl.), {n_angles} angles x {exp.omp_rings} geometric rings",
            "lmmse": f"empirical covariance from {exp.n_cov} matched-scenario channels"}
    for name, m in models.items():
        meta[f"model.{name}"] = m.cfg.descriptor()
    return NmseReport(rows, exp.seed, config_hash(exp.to_dict()), meta)


def desk_model_configs(M: int = 64, F: int = 32) -> tuple[MatCenetConfig, XlcnetConfig]:
    return MatCenetConfig(M=M, F=F, n_heads=4), XlcnetConfig(M=M, F=64)


def init_model(cfg, seed: int, dtype=np.float32):
    return build_model(cfg, stream(seed, "init"), dtype)


def train_channel_config(M: int, cfg: TrainConfig, lam: float = 0.01) -> ChannelConfig:
    array = ArrayConfig(M, lam)
    return ChannelConfig(array, cfg.train_L, cfg.train_L0, r_range=near_field_range(array))


def make_training_sets(M: int, cfg: TrainConfig, lam: float = 0.01) -> tuple[Dataset, Dataset]:
    ccfg = train_channel_config(M, cfg, lam)
    snr = SnrPolicy.uniform(cfg.snr_low_db, cfg.snr_high_db)
    return (generate_dataset(ccfg, snr, cfg.n_train, cfg.seed, "train"),
            generate_dataset(ccfg, snr, cfg.n_val, cfg.seed, "val"))


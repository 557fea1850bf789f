"""Training the MP kernel machine.

Gradients are propagated analytically through both MP stages (scores and
normalization) with the support-set subgradient of :func:`mp.mp_gradient`.
The loss is logistic on the bounded readout ``p``; ``gamma1`` follows a
non-increasing annealing schedule.  Quantization-aware mode runs the forward
pass on quantized parameters and applies the gradient straight through.
"""

from __future__ import annotations

import io
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import LabeledDataset
from .filterbank import (
    DEFAULT_GAMMA_F,
    FilterBankModel,
    StandardizationStats,
    accumulated_energies,
    fit_standardization,
    standardize,
)
from .fixedpoint.arith import FixedPointFormat, SaturationWarning
from .kernel_machine import GAMMA_N, TrainedModel, decide_batch, score_multisets
from .mp import mp_exact_batch

log = logging.getLogger(__name__)

__all__ = [
    "TrainingError",
    "TrainConfig",
    "TrainResult",
    "geometric_schedule",
    "gamma_at",
    "pack",
    "unpack",
    "forward",
    "loss_and_grad",
    "kink_distance",
    "fit_classifier",
    "compute_energies",
    "train",
    "quantize_params",
    "quantize_model",
    "round_significant",
    "predict",
    "accuracy",
    "evaluate",
    "bitwidth_sweep",
]


class TrainingError(RuntimeError):
    pass


def geometric_schedule(start: float, end: float, epochs: int) -> list[tuple[int, float]]:
    """One ``(epoch, gamma)`` pair per epoch, decaying geometrically."""
    if epochs == 1:
        return [(0, float(end))]
    ratio = (end / start) ** (1.0 / (epochs - 1))
    return [(e, float(start * ratio**e)) for e in range(epochs)]


def gamma_at(schedule, epoch: int) -> float:
    """Value of the last schedule entry at or before ``epoch``."""
    g = schedule[0][1]
    for e, v in schedule:
        if e > epoch:
            break
        g = v
    return g


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 150
    batch_size: int = 16
    gamma1_schedule: tuple | None = None  # default: 2.0 -> 0.5 geometric
    gamma_f: float = DEFAULT_GAMMA_F
    seed: int = 0
    quant_aware: bool = False
    bits: int = 8
    momentum: float = 0.9
    temperature: float = 0.25
    init_scale: float = 0.1
    feature_mode: str = "mp"
    jobs: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainingError("epochs must be >= 1")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise TrainingError("learning_rate must be positive")
        if self.gamma1_schedule is None:
            object.__setattr__(self, "gamma1_schedule", tuple(geometric_schedule(2.0, 0.5, self.epochs)))
        sched = tuple((int(e), float(g)) for e, g in self.gamma1_schedule)
        if not sched:
            raise TrainingError("gamma1_schedule is empty")
        gs = [g for _, g in sched]
        es = [e for e, _ in sched]
        if any(g <= 0 for g in gs):
            raise TrainingError("gamma1_schedule values must be positive")
        if any(b > a for a, b in zip(gs, gs[1:])):
            raise TrainingError("gamma1_schedule must be non-increasing")
        if any(b <= a for a, b in zip(es, es[1:])):
            raise TrainingError("gamma1_schedule epochs must be strictly increasing")
        object.__setattr__(self, "gamma1_schedule", sched)
        if self.feature_mode not in ("exact", "mp"):
            raise TrainingError("feature_mode must be 'exact' or 'mp'")
        if not 2 <= self.bits <= 32:
            raise TrainingError("bits must be in [2, 32]")

    @property
    def final_gamma1(self) -> float:
        return self.gamma1_schedule[-1][1]


def pack(w_plus, w_minus, b_plus, b_minus) -> np.ndarray:
    return np.concatenate([w_plus, w_minus, [b_plus, b_minus]]).astype(float)


def unpack(theta):
    P = (theta.size - 2) // 2
    return theta[:P], theta[P : 2 * P], theta[2 * P], theta[2 * P + 1]


def forward(theta, Phi, gamma1, gamma_n=GAMMA_N):
    """Readout ``p`` per row of ``Phi`` for packed parameters ``theta``."""
    zp, zm = _scores(theta, Phi, gamma1)
    return decide_batch(zp, zm, gamma_n)[0]


def _scores(theta, Phi, gamma1, support=False):
    wp, wm, bp, bm = unpack(theta)
    plus_set, minus_set = score_multisets(Phi, wp, wm, bp, bm)
    return mp_exact_batch(plus_set, gamma1, support), mp_exact_batch(minus_set, gamma1, support)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def loss_and_grad(theta, Phi, labels, gamma1, temperature=0.25, gamma_n=GAMMA_N):
    """Mean logistic loss on ``p`` and its gradient w.r.t. packed parameters.

    ``labels`` are 0/1.  The gradient chains the MP subgradients of the
    normalization stage and of both score stages.
    """
    Phi = np.atleast_2d(np.asarray(Phi, dtype=float))
    B, P = Phi.shape
    y = 2.0 * np.asarray(labels, dtype=float) - 1.0
    (zp, Sp), (zm, Sm) = _scores(theta, Phi, gamma1, support=True)
    zz = np.stack([zp, zm], axis=1)
    z, S2 = mp_exact_batch(zz, gamma_n, return_support=True)
    g2 = S2 / S2.sum(axis=1, keepdims=True)
    a_plus = ((zp - z) > 0).astype(float)
    a_minus = ((zm - z) > 0).astype(float)
    p = np.maximum(zp - z, 0.0) - np.maximum(zm - z, 0.0)

    margin = -y * p / temperature
    loss = float(np.mean(_softplus(margin)))
    dl_dp = -y / temperature * _sigmoid(margin) / B

    dp_dzp = a_plus * (1.0 - g2[:, 0]) + a_minus * g2[:, 0]
    dp_dzm = -a_plus * g2[:, 1] - a_minus * (1.0 - g2[:, 1])
    cp = (dl_dp * dp_dzp)[:, None] * (Sp / Sp.sum(axis=1, keepdims=True))
    cm = (dl_dp * dp_dzm)[:, None] * (Sm / Sm.sum(axis=1, keepdims=True))
    grad = np.empty(2 * P + 2)
    grad[:P] = cp[:, :P].sum(0) + cm[:, :P].sum(0)
    grad[P : 2 * P] = cp[:, P : 2 * P].sum(0) + cm[:, P : 2 * P].sum(0)
    grad[2 * P] = cp[:, 2 * P].sum()
    grad[2 * P + 1] = cm[:, 2 * P].sum()
    return loss, grad


def kink_distance(theta, Phi, gamma1, gamma_n=GAMMA_N) -> np.ndarray:
    """Per-row distance to the nearest non-differentiable point of the loss."""
    Phi = np.atleast_2d(Phi)
    wp, wm, bp, bm = unpack(theta)
    plus_set, minus_set = score_multisets(Phi, wp, wm, bp, bm)
    zp = mp_exact_batch(plus_set, gamma1)
    zm = mp_exact_batch(minus_set, gamma1)
    z = mp_exact_batch(np.stack([zp, zm], 1), gamma_n)
    d = np.minimum(np.abs(plus_set - zp[:, None]).min(1), np.abs(minus_set - zm[:, None]).min(1))
    d = np.minimum(d, np.abs(zp - z))
    return np.minimum(d, np.abs(zm - z))


def quantize_params(theta, bits: int) -> tuple[np.ndarray, FixedPointFormat]:
    """Weights and biases on one shared per-tensor binary point."""
    fmt = FixedPointFormat.fit(theta, bits)
    return fmt.round_trip(theta, warn=False), fmt


@dataclass
class TrainResult:
    theta: np.ndarray
    log: list = field(default_factory=list)  # (epoch, loss, train_acc, gamma1)
    best_epoch: int = 0

    def log_csv(self) -> str:
        buf = io.StringIO()
        buf.write("epoch,loss,train_acc,gamma1\n")
        for e, loss, acc, g in self.log:
            buf.write(f"{e},{float(loss)!r},{float(acc)!r},{float(g)!r}\n")
        return buf.getvalue()


def fit_classifier(Phi, labels, cfg: TrainConfig, init=None) -> TrainResult:
    """Minibatch SGD with momentum on a kernel matrix ``Phi`` (clips x P).

    Returns the parameters with the lowest end-of-epoch training loss.
    """
    Phi = np.asarray(Phi, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if Phi.ndim != 2 or Phi.shape[0] == 0:
        raise TrainingError("empty training split")
    if Phi.shape[0] != labels.size:
        raise TrainingError("Phi and labels disagree in length")
    bad = np.flatnonzero(~np.all(np.isfinite(Phi), axis=1))
    if bad.size:
        raise TrainingError(f"non-finite kernel values in {bad.size} row(s), first at row {bad[0]}")
    n, P = Phi.shape
    rng = np.random.default_rng(cfg.seed)
    if init is None:
        theta = rng.uniform(-cfg.init_scale, cfg.init_scale, 2 * P + 2)
    else:
        theta = np.array(init, dtype=float)
        if theta.size != 2 * P + 2:
            raise TrainingError(f"init has {theta.size} parameters, expected {2 * P + 2}")
    velocity = np.zeros_like(theta)
    result = TrainResult(theta.copy())
    best = math.inf

    for epoch in range(cfg.epochs):
        gamma1 = gamma_at(cfg.gamma1_schedule, epoch)
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            th = quantize_params(theta, cfg.bits)[0] if cfg.quant_aware else theta
            loss, grad = loss_and_grad(th, Phi[idx], labels[idx], gamma1, cfg.temperature)
            if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
                raise TrainingError(
                    f"non-finite loss/gradient at epoch {epoch} (loss={loss}, |theta|max={np.max(np.abs(theta))})"
                )
            velocity = cfg.momentum * velocity - cfg.learning_rate * grad
            theta = theta + velocity
        th = quantize_params(theta, cfg.bits)[0] if cfg.quant_aware else theta
        loss, _ = loss_and_grad(th, Phi, labels, gamma1, cfg.temperature)
        acc = float(np.mean((forward(th, Phi, gamma1) > 0) == (labels == 1)))
        result.log.append((epoch, loss, acc, gamma1))
        if loss <= best:
            best = loss
            result.theta = th.copy()
            result.best_epoch = epoch
    return result


def _energies_one(args):
    x, bank, mode, gamma_f = args
    return accumulated_energies(x, bank, mode, gamma_f)


def compute_energies(clips, bank: FilterBankModel, mode="mp", gamma_f=DEFAULT_GAMMA_F, jobs: int = 1) -> np.ndarray:
    """Accumulated filter energies ``s_p`` for every clip (rows in input order)."""
    work = [(c.samples if hasattr(c, "samples") else c, bank, mode, gamma_f) for c in clips]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            rows = list(ex.map(_energies_one, work, chunksize=4))
    else:
        rows = [_energies_one(w) for w in work]
    return np.array(rows).reshape(len(work), bank.num_filters)


def train(dataset: LabeledDataset, bank: FilterBankModel, cfg: TrainConfig = TrainConfig(), energies=None):
    """Fit standardization on the training split, then the classifier.

    Kernels are extracted in ``cfg.feature_mode`` so the classifier sees the
    same approximation error it will meet at inference.  ``energies`` may
    carry precomputed ``s_p`` rows for the whole dataset.  Returns
    ``(TrainedModel, TrainResult)``.
    """
    tr = dataset.indices("train")
    if tr.size < 2:
        raise TrainingError("training split needs at least two clips")
    if energies is None:
        energies = compute_energies([dataset.clips[i] for i in tr], bank, cfg.feature_mode, cfg.gamma_f, cfg.jobs)
    else:
        energies = np.asarray(energies)[tr]
    stats = fit_standardization(energies)
    Phi = standardize(energies, stats)
    result = fit_classifier(Phi, dataset.labels[tr], cfg)
    wp, wm, bp, bm = unpack(result.theta)
    quant = quantize_params(result.theta, cfg.bits)[1] if cfg.quant_aware else None
    model = TrainedModel(
        wp, wm, bp, bm,
        gamma1=cfg.final_gamma1,
        stats=stats,
        bank=bank,
        gamma_f=cfg.gamma_f,
        quant=quant,
        feature_mode=cfg.feature_mode,
        meta={"best_epoch": result.best_epoch, "seed": cfg.seed},
    )
    return model, result


def _round_tensor(values, bits, fmt=None):
    values = np.asarray(values, dtype=float)
    fmt = fmt or FixedPointFormat.fit(values, bits)
    return fmt.round_trip(values, warn=True), fmt


def round_significant(values, bits: int) -> np.ndarray:
    """Round each entry to ``bits`` signed bits on its own power-of-two scale."""
    v = np.asarray(values, dtype=float)
    out = np.zeros_like(v)
    nz = v != 0
    e = np.floor(np.log2(np.abs(v[nz]))) - (bits - 2)
    out[nz] = np.ldexp(np.round(np.ldexp(v[nz], (-e).astype(int))), e.astype(int))
    return out


def quantize_model(model: TrainedModel, fmt: FixedPointFormat | int, per_tensor: bool = True) -> TrainedModel:
    """Round weights, biases, statistics and filter taps to ``fmt.word_bits``.

    Weights/biases and each tap tensor get their own power-of-two binary
    point (the finest that covers the range); statistics are rounded per
    filter.  With ``per_tensor=False`` weights and biases use ``fmt``
    exactly and out-of-range values saturate with a warning.
    """
    if isinstance(fmt, int):
        fmt = FixedPointFormat(fmt, fmt - 1)
    bits = fmt.word_bits
    theta = pack(model.w_plus, model.w_minus, model.b_plus, model.b_minus)
    if per_tensor:
        theta_q, wfmt = _round_tensor(theta, bits)
    else:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", SaturationWarning)
            theta_q = fmt.round_trip(theta)
        for w in caught:
            log.warning("quantize_model: %s", w.message)
            warnings.warn(str(w.message), SaturationWarning, stacklevel=2)
        wfmt = fmt
    wp, wm, bp, bm = unpack(theta_q)
    # Energies span orders of magnitude across filters; each gets its own scale.
    mu = round_significant(model.stats.mu, bits)
    sigma = round_significant(model.stats.sigma, bits)
    bank = model.bank
    qbank = replace(
        bank,
        bp_coeffs=_round_tensor(bank.bp_coeffs, bits)[0],
        lp_coeffs=_round_tensor(bank.lp_coeffs, bits)[0] if bank.lp_coeffs.size else bank.lp_coeffs,
    )
    return replace(
        model,
        w_plus=wp,
        w_minus=wm,
        b_plus=bp,
        b_minus=bm,
        stats=StandardizationStats(mu, np.abs(sigma)),
        bank=qbank,
        quant=wfmt,
    )


def predict(model: TrainedModel, energies) -> np.ndarray:
    """Readout ``p`` for rows of accumulated energies."""
    Phi = standardize(energies, model.stats)
    theta = pack(model.w_plus, model.w_minus, model.b_plus, model.b_minus)
    return forward(theta, Phi, model.gamma1, model.gamma_n)


def accuracy(p, labels) -> float:
    return float(np.mean((np.asarray(p) > 0) == (np.asarray(labels) == 1)))


def evaluate(model: TrainedModel, dataset: LabeledDataset, mode=None, energies=None, jobs=1) -> dict:
    """Train/test accuracy in float arithmetic (``exact`` or ``mp`` filtering)."""
    mode = mode or model.feature_mode
    if energies is None:
        energies = compute_energies(dataset.clips, model.bank, mode, model.gamma_f, jobs)
    p = predict(model, energies)
    out = {"p": p}
    for part in ("train", "test"):
        idx = dataset.indices(part)
        out[part] = accuracy(p[idx], dataset.labels[idx]) if idx.size else float("nan")
    return out


def bitwidth_sweep(dataset: LabeledDataset, bank: FilterBankModel, cfg: TrainConfig, widths, model=None, jobs=None):
    """Accuracy table over parameter word lengths.

    Without quantization-aware training one float model is trained and then
    quantized per width; with it, the model is retrained at each width.
    Evaluation re-extracts kernels with the quantized filter taps.
    Returns ``(rows, csv_text)`` with rows ``(width, train_acc, test_acc)``.
    """
    jobs = cfg.jobs if jobs is None else jobs
    if model is None and not cfg.quant_aware:
        model, _ = train(dataset, bank, cfg)
    rows = []
    for width in widths:
        if cfg.quant_aware:
            base, _ = train(dataset, bank, replace(cfg, bits=int(width)))
        else:
            base = model
        qm = quantize_model(base, int(width))
        res = evaluate(qm, dataset, jobs=jobs)
        rows.append((int(width), res["train"], res["test"]))
        log.info("width %d: train %.3f test %.3f", width, res["train"], res["test"])
    text = "width,train_acc,test_acc\n" + "".join(f"{w},{float(a)!r},{float(b)!r}\n" for w, a, b in rows)
    return rows, text

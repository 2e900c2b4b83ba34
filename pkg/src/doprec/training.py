"""Training loop, error metrics, evaluation protocol, and tuning.

The loss minimized during training is the per-record mean squared error

    MSEL = (1/N) sum_j |pred_j - target_j|^2_{l2},

and the reported figure of merit is the test error

    TE = (1/N) sum_j max_i |pred_{j,i} - target_{j,i}|,

stated relative to the base doping level C0 of each record.  Evaluation
always computes both the plain errors and the mean-removed variant, where
the per-record average is subtracted from prediction and reference alike
before taking the maximum.

Training is plain mini-batch SGD (no momentum) on standardized signals and
dopings; the four scalar standardization constants are frozen from the
training set onto the model so checkpoints stay self-contained.  The tuner
is a successive-halving scheduler: trials train to rung epochs, and at each
rung only the top 1/reduction-factor by validation test error continues.
Single-worker execution is deterministic given the seeds.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import kernels as K
from . import models as M
from .datagen import Dataset, as_matrix
from .models import InvalidConfig

__all__ = [
    "NonFiniteLoss", "TrainOptions", "TunerSpec", "TrialRecord",
    "ErrorSummary", "ErrorReport",
    "msel", "test_error", "remove_mean", "nearest_rank",
    "standardize_constants", "msel_loss",
    "train", "evaluate", "tune", "export_report",
]


class NonFiniteLoss(RuntimeError):
    """Training produced a non-finite loss; the partial trace is attached
    as the `trace` attribute."""


@dataclass(frozen=True, slots=True)
class TrainOptions:
    """Mini-batch SGD settings.

    rung_epochs lists the epochs (strictly increasing, within the budget)
    at which train() reports a validation score to its callback.
    """

    lr: float
    batch_size: int = 64
    epochs: int = 1
    weight_decay: float = 0.0
    clip_norm: float | None = None
    seed: int = 0
    rung_epochs: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not (math.isfinite(self.lr) and self.lr > 0.0):
            raise InvalidConfig("learning rate must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise InvalidConfig("batch size and epochs must be at least 1")
        if self.weight_decay < 0.0:
            raise InvalidConfig("weight decay must be nonnegative")
        if self.clip_norm is not None and not self.clip_norm > 0.0:
            raise InvalidConfig("clip norm must be positive")
        rungs = tuple(int(e) for e in self.rung_epochs)
        if any(b <= a for a, b in zip(rungs, rungs[1:])) or \
                any(e < 1 or e > self.epochs for e in rungs):
            raise InvalidConfig("rung epochs must increase within the "
                                "epoch budget")
        object.__setattr__(self, "rung_epochs", rungs)


@dataclass(frozen=True, slots=True)
class TunerSpec:
    """Successive-halving schedule.

    budget            number of sampled trials
    rungs             epoch checkpoints, strictly increasing
    reduction_factor  fraction kept per rung is 1/reduction_factor
    seed              master seed for sampling and shuffling
    """

    budget: int
    rungs: tuple[int, ...]
    reduction_factor: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.budget < 1:
            raise InvalidConfig("tuner budget must be at least 1")
        rungs = tuple(int(e) for e in self.rungs)
        if not rungs or any(e < 1 for e in rungs) or \
                any(b <= a for a, b in zip(rungs, rungs[1:])):
            raise InvalidConfig("rungs must be strictly increasing epochs")
        if self.reduction_factor < 2:
            raise InvalidConfig("reduction factor must be at least 2")
        object.__setattr__(self, "rungs", rungs)


# ---------------------------------------------------------------------------
# metrics


def _as_records(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1:
        return arr[:, None]
    if arr.ndim == 2:
        return arr
    raise K.ShapeMismatch("expected a vector or an (n, N) record matrix")


def msel(predictions, targets) -> float:
    """Mean over records of the squared l2 prediction error.

    Records are columns of (n, N) matrices (a single vector counts as one
    record), matching the dataset layout.
    """
    p = _as_records(predictions)
    t = _as_records(targets)
    if p.shape != t.shape:
        raise K.ShapeMismatch(f"msel: {p.shape} vs {t.shape}")
    diff = p - t
    return float(np.mean(np.sum(diff * diff, axis=0)))


def test_error(predictions, targets, c0=None) -> float:
    """Mean over records of the max-norm prediction error.

    When c0 is given (scalar or one value per record) each record's error
    is stated relative to it.
    """
    p = _as_records(predictions)
    t = _as_records(targets)
    if p.shape != t.shape:
        raise K.ShapeMismatch(f"test_error: {p.shape} vs {t.shape}")
    errors = np.max(np.abs(p - t), axis=0)
    if c0 is not None:
        errors = errors / np.asarray(c0, dtype=np.float64)
    return float(np.mean(errors))


def remove_mean(values) -> np.ndarray:
    """Subtract each record's average over the probe points (mean -> 0).

    Vectors are treated as one record; in an (n, N) matrix every column is
    centered independently.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1:
        return arr - arr.mean()
    if arr.ndim == 2:
        return arr - arr.mean(axis=0, keepdims=True)
    raise K.ShapeMismatch("expected a vector or an (n, N) record matrix")


def nearest_rank(values, percentile: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * N)-th smallest value."""
    arr = np.sort(np.asarray(values, dtype=np.float64))
    if arr.size == 0:
        raise ValueError("percentile of an empty sample")
    rank = math.ceil(percentile / 100.0 * arr.size)
    return float(arr[min(max(rank, 1), arr.size) - 1])


# ---------------------------------------------------------------------------
# standardization and the differentiable loss


def standardize_constants(dataset: Dataset) -> np.ndarray:
    """(u_mean, u_std, c_mean, c_std) over all entries of the training set.

    Population standard deviations; a zero spread falls back to 1 so that
    constant channels pass through unscaled.
    """
    if len(dataset) == 0:
        raise M.DegenerateData("cannot standardize an empty dataset")
    u = as_matrix(dataset, "u")
    c = as_matrix(dataset, "doping")
    u_std = float(u.std()) or 1.0
    c_std = float(c.std()) or 1.0
    return np.array([float(u.mean()), u_std, float(c.mean()), c_std])


def msel_loss(pred: K.Tensor, target: np.ndarray,
              tape: K.Tape | None = None) -> K.Tensor:
    """Differentiable MSEL on a (B, n) batch of row records."""
    tv = np.asarray(target, dtype=np.float64)
    if pred.values.ndim != 2 or tv.shape != pred.values.shape:
        raise K.ShapeMismatch(f"msel_loss: {pred.values.shape} vs {tv.shape}")
    diff = pred.values - tv
    batch = diff.shape[0]
    out = K.Tensor(np.sum(diff * diff) / batch)
    if tape is not None:
        def pullback(dy):
            return (dy * (2.0 / batch) * diff,)

        tape.record(out, (pred,), pullback)
    return out


# ---------------------------------------------------------------------------
# training


def _standardized_rows(dataset: Dataset, constants: np.ndarray):
    u_mean, u_std, c_mean, c_std = constants
    x = (as_matrix(dataset, "u").T - u_mean) / u_std
    y = (as_matrix(dataset, "doping").T - c_mean) / c_std
    return np.ascontiguousarray(x), np.ascontiguousarray(y)


def _run_epochs(model, x: np.ndarray, y: np.ndarray, opts: TrainOptions,
                rng: np.random.Generator, n_epochs: int) -> list[float]:
    """Shuffled mini-batch SGD for n_epochs; returns per-epoch MSEL."""
    n_records = x.shape[0]
    trace: list[float] = []
    for _ in range(n_epochs):
        perm = rng.permutation(n_records)
        total = 0.0
        seen = 0
        for start in range(0, n_records, opts.batch_size):
            idx = perm[start:start + opts.batch_size]
            if idx.size == 1 and n_records > 1:
                continue  # batch statistics are undefined on one record
            tape = K.Tape()
            pred = model.forward(x[idx], mode="train", tape=tape)
            loss = msel_loss(pred, y[idx], tape)
            value = float(loss.values)
            if not math.isfinite(value):
                exc = NonFiniteLoss(
                    f"loss became non-finite after {len(trace)} epochs")
                exc.trace = trace
                raise exc
            K.backward(tape, loss)
            K.sgd_step(model.store, opts.lr, opts.weight_decay,
                       opts.clip_norm)
            model.store.zero_grad()
            total += value * idx.size
            seen += idx.size
        trace.append(total / max(seen, 1))
    return trace


def _validation_score(model, dataset: Dataset) -> float:
    pred = M.infer(model, as_matrix(dataset, "u"))
    c0 = np.array([r.spec.c0 for r in dataset.records])
    return test_error(pred, as_matrix(dataset, "doping"), c0)


def train(model, train_set: Dataset, opts: TrainOptions, rung_callback=None,
          val_set: Dataset | None = None):
    """Train a network model in place; returns (model, loss trace).

    Standardization constants are computed from train_set and stored on the
    model before the first step.  At each epoch listed in opts.rung_epochs
    the validation test error (on val_set, falling back to train_set) is
    passed to rung_callback(epoch, score); returning False stops training
    early.  Identical seeds and data reproduce the run bit for bit.
    """
    if not hasattr(model, "store"):
        raise TypeError("train expects a network model")
    if len(train_set) == 0:
        raise M.DegenerateData("cannot train on an empty dataset")
    constants = standardize_constants(train_set)
    model.standardization = constants
    x, y = _standardized_rows(train_set, constants)
    rng = np.random.default_rng(opts.seed)
    scoring_set = val_set if val_set is not None else train_set

    trace: list[float] = []
    epoch = 0
    stops = list(opts.rung_epochs)
    if not stops or stops[-1] != opts.epochs:
        stops.append(opts.epochs)
    for stop in stops:
        try:
            trace.extend(_run_epochs(model, x, y, opts, rng, stop - epoch))
        except NonFiniteLoss as exc:
            exc.trace = trace + exc.trace
            raise
        epoch = stop
        if epoch in opts.rung_epochs and rung_callback is not None:
            score = _validation_score(model, scoring_set)
            if rung_callback(epoch, score) is False:
                break
    return model, trace


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True, slots=True)
class ErrorSummary:
    """Per-record errors with their mean and nearest-rank quartiles."""

    errors: np.ndarray
    mean: float
    p25: float
    p50: float
    p75: float

    @classmethod
    def from_errors(cls, errors: np.ndarray) -> "ErrorSummary":
        errors = np.asarray(errors, dtype=np.float64)
        errors.setflags(write=False)
        return cls(errors=errors, mean=float(errors.mean()),
                   p25=nearest_rank(errors, 25.0),
                   p50=nearest_rank(errors, 50.0),
                   p75=nearest_rank(errors, 75.0))


@dataclass(frozen=True, slots=True)
class ErrorReport:
    """Evaluation result holding both error variants.

    `selected` names the variant ("with_mean" or "mean_removed") whose
    numbers the convenience properties expose.
    """

    with_mean: ErrorSummary
    mean_removed: ErrorSummary
    selected: str

    @property
    def active(self) -> ErrorSummary:
        return getattr(self, self.selected)

    @property
    def errors(self) -> np.ndarray:
        return self.active.errors

    @property
    def mean(self) -> float:
        return self.active.mean

    @property
    def p25(self) -> float:
        return self.active.p25

    @property
    def p50(self) -> float:
        return self.active.p50

    @property
    def p75(self) -> float:
        return self.active.p75


def evaluate(model, test_set: Dataset, mean_removed: bool = False,
             ) -> ErrorReport:
    """Per-record max-norm errors relative to each record's base level C0.

    Both variants are always computed; the flag picks which one the
    report's summary properties expose.  Mean removal subtracts each
    record's average from prediction and reference alike.
    """
    if len(test_set) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    u = as_matrix(test_set, "u")
    c = as_matrix(test_set, "doping")
    pred = M.infer(model, u)
    c0 = np.array([r.spec.c0 for r in test_set.records])
    plain = np.max(np.abs(pred - c), axis=0) / c0
    centered = np.max(np.abs(remove_mean(pred) - remove_mean(c)), axis=0) / c0
    return ErrorReport(
        with_mean=ErrorSummary.from_errors(plain),
        mean_removed=ErrorSummary.from_errors(centered),
        selected="mean_removed" if mean_removed else "with_mean")


# ---------------------------------------------------------------------------
# tuning


@dataclass(frozen=True, slots=True)
class TrialRecord:
    """Leaderboard row: one sampled trial and its rung scores."""

    index: int
    options: TrainOptions
    rung_scores: tuple[tuple[int, float], ...]
    status: str  # "completed" | "stopped" | "failed"
    score: float


class _Trial:
    __slots__ = ("index", "model", "opts", "rng", "scores", "status",
                 "epochs_done")

    def __init__(self, index, model, opts, rng):
        self.index = index
        self.model = model
        self.opts = opts
        self.rng = rng
        self.scores: list[tuple[int, float]] = []
        self.status = "running"
        self.epochs_done = 0


def tune(sampler, train_set: Dataset, val_set: Dataset, spec: TunerSpec):
    """Successive halving over sampled trials; returns (best model,
    leaderboard).

    sampler(rng) must return a fresh (model, TrainOptions) pair.  All
    trials train to the first rung; at every rung the top
    1/reduction_factor by validation test error (ties broken by trial
    order) continue to the next, and the rest stop.  A trial whose
    training fails scores infinity and never continues.  The winner is the
    completed trial with the lowest final-rung score.  Execution is
    serial and fully deterministic for a given spec.
    """
    if len(val_set) == 0 or len(train_set) == 0:
        raise M.DegenerateData("tuning needs nonempty train and "
                               "validation sets")
    constants = standardize_constants(train_set)
    x, y = _standardized_rows(train_set, constants)
    children = np.random.SeedSequence(spec.seed).spawn(spec.budget + 1)
    sampler_rng = np.random.default_rng(children[0])

    trials: list[_Trial] = []
    for i in range(spec.budget):
        model, opts = sampler(sampler_rng)
        if not hasattr(model, "store"):
            raise TypeError("sampler must return a network model")
        model.standardization = constants.copy()
        trials.append(_Trial(i, model, opts,
                             np.random.default_rng(children[i + 1])))

    def advance(trial: _Trial, target_epoch: int) -> None:
        try:
            _run_epochs(trial.model, x, y, trial.opts, trial.rng,
                        target_epoch - trial.epochs_done)
            trial.epochs_done = target_epoch
            score = _validation_score(trial.model, val_set)
            if not math.isfinite(score):
                raise NonFiniteLoss("non-finite validation score")
        except (NonFiniteLoss, K.DegenerateBatch, FloatingPointError):
            trial.status = "failed"
            score = math.inf
        trial.scores.append((target_epoch, score))

    alive = list(trials)
    for level, epochs in enumerate(spec.rungs):
        for trial in alive:
            if trial.status == "running":
                advance(trial, epochs)
        if level == len(spec.rungs) - 1:
            break
        ranked = sorted(alive, key=lambda t: (t.scores[-1][1], t.index))
        keep = math.ceil(len(alive) / spec.reduction_factor)
        survivors = []
        for rank, trial in enumerate(ranked):
            promoted = (rank < keep and trial.status == "running"
                        and math.isfinite(trial.scores[-1][1]))
            if promoted:
                survivors.append(trial)
            elif trial.status == "running":
                trial.status = "stopped"
        survivors.sort(key=lambda t: t.index)
        alive = survivors
        if not alive:
            break

    completed = []
    for trial in trials:
        if trial.status == "running":
            trial.status = "completed"
            completed.append(trial)
    if not completed:
        raise NonFiniteLoss("every tuning trial failed before the "
                            "final rung")
    best = min(completed, key=lambda t: (t.scores[-1][1], t.index))

    leaderboard = [
        TrialRecord(index=t.index, options=t.opts,
                    rung_scores=tuple(t.scores), status=t.status,
                    score=t.scores[-1][1] if t.status == "completed"
                    else math.inf)
        for t in trials
    ]
    leaderboard.sort(key=lambda r: (r.score, -len(r.rung_scores),
                                    r.rung_scores[-1][1] if r.rung_scores
                                    else math.inf, r.index))
    return best.model, leaderboard


# ---------------------------------------------------------------------------
# report export


def _histogram_svg(errors: np.ndarray, path, bins: int = 10) -> None:
    """Render the error histogram as deterministic vector graphics."""
    import matplotlib
    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt
    with matplotlib.rc_context({"svg.hashsalt": "doprec"}):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        ax.hist(errors, bins=bins, color="#4878a8", edgecolor="black")
        ax.set_xlabel("relative max-norm error")
        ax.set_ylabel("records")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def export_report(report: ErrorReport, base_path, histogram: bool = False,
                  ) -> list[str]:
    """Write per-record errors and the summary as CSV files.

    Produces {base}.errors.csv and {base}.summary.csv; with histogram=True
    an SVG of the selected variant's error distribution is added as
    {base}.hist.svg.  Returns the written paths.  Float columns carry the
    full shortest-repr precision, so re-importing reproduces the summary
    exactly.
    """
    base = str(base_path)
    written = []

    errors_path = base + ".errors.csv"
    with open(errors_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["record", "with_mean", "mean_removed"])
        for i, (ew, er) in enumerate(zip(report.with_mean.errors,
                                         report.mean_removed.errors)):
            writer.writerow([i, repr(float(ew)), repr(float(er))])
    written.append(errors_path)

    summary_path = base + ".summary.csv"
    with open(summary_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "selected", "mean", "p25", "p50", "p75"])
        for name in ("with_mean", "mean_removed"):
            s: ErrorSummary = getattr(report, name)
            writer.writerow([name, int(name == report.selected),
                             repr(s.mean), repr(s.p25), repr(s.p50),
                             repr(s.p75)])
    written.append(summary_path)

    if histogram:
        hist_path = base + ".hist.svg"
        _histogram_svg(report.active.errors, hist_path)
        written.append(hist_path)
    return written

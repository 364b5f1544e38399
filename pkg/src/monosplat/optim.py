"""Photometric losses, image metrics, training loop, and gradient checking."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .numerics.tensor import DTYPE, Parameter, check_finite

PSNR_CAP_DB = 99.0


@dataclass
class LossConfig:
    lambda_lpips: float = 0.05
    perceptual: str = "off"          # "off" or "plugin"
    plugin: object = None            # callable(pred, gt) -> float when "plugin"

    def __post_init__(self):
        if self.lambda_lpips < 0:
            raise ValueError("lambda_lpips must be >= 0")
        if self.perceptual not in ("off", "plugin"):
            raise ValueError(f"unknown perceptual mode {self.perceptual!r}")
        if self.perceptual == "plugin" and not callable(self.plugin):
            raise ValueError("perceptual='plugin' needs a callable plugin")


def loss(pred: np.ndarray, gt: np.ndarray, cfg: LossConfig | None = None) -> float:
    """Mean squared error plus an optional weighted perceptual plugin term."""
    cfg = cfg or LossConfig()
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    diff = pred.astype(np.float64) - gt.astype(np.float64)
    value = float(np.mean(diff * diff))
    if cfg.perceptual == "plugin":
        value += cfg.lambda_lpips * float(cfg.plugin(pred, gt))
    return value


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0,1] images, capped at 99."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    diff = pred.astype(np.float64) - gt.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse < 1e-10:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB)


def _gaussian_kernel1d(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    xs = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(xs * xs) / (2 * sigma * sigma))
    return k / k.sum()


def _filter_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation of a 2D float64 image."""
    n = len(k)
    h, w = img.shape
    rows = np.zeros((h, w - n + 1))
    for j in range(n):
        rows += k[j] * img[:, j : j + w - n + 1]
    out = np.zeros((h - n + 1, w - n + 1))
    for i in range(n):
        out += k[i] * rows[i : i + h - n + 1, :]
    return out


def ssim(pred: np.ndarray, gt: np.ndarray, window: int = 11, sigma: float = 1.5) -> float:
    """Structural similarity with a Gaussian window, channels averaged."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if pred.ndim == 2:
        pred = pred[..., None]
        gt = gt[..., None]
    k = _gaussian_kernel1d(window, sigma)
    c1 = (0.01) ** 2
    c2 = (0.03) ** 2
    scores = []
    for ch in range(pred.shape[2]):
        a = pred[..., ch].astype(np.float64)
        b = gt[..., ch].astype(np.float64)
        mu_a = _filter_valid(a, k)
        mu_b = _filter_valid(b, k)
        aa = _filter_valid(a * a, k) - mu_a * mu_a
        bb = _filter_valid(b * b, k) - mu_b * mu_b
        ab = _filter_valid(a * b, k) - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * ab + c2)
        den = (mu_a * mu_a + mu_b * mu_b + c1) * (aa + bb + c2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    worst: list = field(default_factory=list)   # (param_name, flat_index, analytic, numeric)
    checked: int = 0
    excluded: int = 0

    def ok(self, tol: float) -> bool:
        return self.max_rel_err < tol and self.checked > 0


def _fd_estimate(fn, flat, i, orig, step):
    flat[i] = orig + step
    hi = float(flat[i])  # actual float32 step after rounding
    f_plus = float(fn())
    flat[i] = orig - step
    lo = float(flat[i])
    f_minus = float(fn())
    flat[i] = orig
    return (f_plus - f_minus) / (hi - lo)


def grad_check(
    fn,
    params: list[Parameter],
    h: float = 1e-3,
    tol: float = 1e-3,
    samples_per_param: int | None = None,
    rng: np.random.Generator | None = None,
    exclude_kinks: bool = True,
) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    ``fn()`` re-evaluates the scalar forward value; analytic gradients must
    already sit in ``param.grad``. When ``samples_per_param`` is None every
    element is checked, otherwise a random subset per parameter.

    Non-differentiable points (relu/clamp kink crossings inside the
    perturbation interval) make central differences meaningless; with
    ``exclude_kinks`` these are detected by comparing the full-step and
    half-step estimates and skipped (counted in ``excluded``). A wrong
    analytic gradient stays detected: the two estimates agree with each
    other, not with the analytic value. At most 25% of samples may be
    excluded before the check fails outright.

    Relative error uses max(|analytic|, |numeric|, floor) with floor tied to
    the largest sampled gradient magnitude, so negligible components do not
    dominate the report.
    """
    rng = rng or np.random.default_rng(0)
    entries = []  # (param, flat_idx, analytic)
    for p in params:
        flat_grad = p.grad.reshape(-1)
        n = p.value.size
        if samples_per_param is None or samples_per_param >= n:
            idxs = range(n)
        else:
            idxs = rng.choice(n, size=samples_per_param, replace=False)
        for i in idxs:
            entries.append((p, int(i), float(flat_grad[i])))

    gmax = max((abs(a) for _, _, a in entries), default=0.0)
    floor = max(1e-6, 1e-3 * gmax)

    report = GradCheckReport(max_rel_err=0.0)
    for p, i, analytic in entries:
        flat = p.value.reshape(-1)
        orig = flat[i]
        step = h * max(1.0, abs(float(orig)))
        numeric = _fd_estimate(fn, flat, i, orig, step)
        if exclude_kinks:
            half = _fd_estimate(fn, flat, i, orig, step / 2)
            scale = max(abs(numeric), abs(half), floor)
            if abs(numeric - half) > 0.02 * scale:
                report.excluded += 1
                continue
            numeric = half  # half step has the smaller truncation error
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        report.checked += 1
        if rel > report.max_rel_err:
            report.max_rel_err = rel
        if rel > tol:
            report.worst.append((p.name, i, analytic, numeric))
    if report.excluded > 0.25 * max(report.checked + report.excluded, 1):
        report.max_rel_err = float("inf")
    report.worst.sort(key=lambda rec: -abs(rec[2] - rec[3]))
    report.worst = report.worst[:8]
    return report


# ---------------------------------------------------------------------------
# Optimization loop
# ---------------------------------------------------------------------------

@dataclass
class FitResult:
    losses: list
    metrics: list
    steps_run: int
    diverged: bool = False

    @property
    def initial_loss(self) -> float:
        return self.losses[0] if self.losses else float("nan")

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")


def lr_schedule(kind: str, base_lr: float, steps: int):
    """Constant or cosine learning-rate schedule."""
    if kind == "constant":
        return lambda step: base_lr
    if kind == "cosine":
        return lambda step: base_lr * 0.5 * (1.0 + math.cos(math.pi * step / max(steps, 1)))
    raise ValueError(f"unknown schedule {kind!r}")


def fit(
    trainables: list[Parameter],
    objective,
    steps: int,
    lr: float = 1e-2,
    momentum: float = 0.9,
    schedule: str = "constant",
    report_path=None,
) -> FitResult:
    """Gradient descent with momentum over ``trainables``.

    ``objective(step)`` must zero nothing itself; it computes the forward
    pass, runs whatever backward machinery applies, leaves gradients in
    ``param.grad``, and returns (loss_value, metrics_dict). Gradients are
    zeroed here before every call. Deterministic given the objective's own
    seeding. Aborts when the loss stays above 10x the initial loss for 50
    consecutive steps.
    """
    sched = lr_schedule(schedule, lr, steps)
    velocity = {id(p): np.zeros_like(p.value) for p in trainables}
    losses: list[float] = []
    metrics: list[dict] = []
    records = []
    bad_streak = 0
    diverged = False

    for step in range(steps):
        for p in trainables:
            p.zero_grad()
        value, extra = objective(step)
        value = float(value)
        losses.append(value)
        metrics.append(extra or {})
        records.append({"step": step, "loss": value, **(extra or {})})

        if losses and value > 10.0 * losses[0]:
            bad_streak += 1
            if bad_streak >= 50:
                diverged = True
                break
        else:
            bad_streak = 0

        step_lr = sched(step)
        if step_lr == 0.0:
            continue
        for p in trainables:
            if not p.trainable:
                continue
            check_finite(p.grad, f"gradient of {p.name or 'parameter'}")
            v = velocity[id(p)]
            v *= DTYPE(momentum)
            v += p.grad
            p.value -= DTYPE(step_lr) * v

    result = FitResult(losses=losses, metrics=metrics, steps_run=len(losses), diverged=diverged)
    if report_path is not None:
        with open(report_path, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
        summary = {
            "steps": result.steps_run,
            "initial_loss": result.initial_loss,
            "final_loss": result.final_loss,
            "diverged": result.diverged,
        }
        with open(str(report_path) + ".summary.json", "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2)
    return result

"""Training objectives, finite-difference gradient checking and AdamW."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import torch

from .errors import NumericError, ParameterError
from .params import ParamStore


@dataclass
class LossWeights:
    uni: float = 0.1
    con: float = 1.0
    sep: float = 0.1
    seg: float = 1.0
    weak: float = 1.0
    eps: float = 1e-8

    def __post_init__(self):
        for name in ("uni", "con", "sep", "seg", "weak"):
            if getattr(self, name) < 0:
                raise ParameterError(f"loss weight {name} must be >= 0")


@dataclass
class LossReport:
    uni: float
    attr: float
    org: float
    con: float
    sep: float
    weak: float
    seg: float
    total: float
    delta: int
    total_tensor: torch.Tensor | None = None

    def as_row(self):
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "total_tensor"}


def predicted_stats(soft_mask, hu, voxel_volume, eps=1e-8):
    """Soft volume ``sum(y) * voxel_volume`` and mass-weighted mean HU."""
    mass = soft_mask.sum()
    volume = mass * voxel_volume
    mean_hu = (soft_mask * hu).sum() / torch.clamp(mass, min=eps)
    return volume, mean_hu


def attr_loss(pred_stats, ref_stats, eps=1e-8):
    """Squared relative volume and HU errors summed over lesions.

    ``pred_stats`` and ``ref_stats`` are sequences of ``(volume, mean_hu)``.
    """
    total = torch.zeros((), dtype=torch.float64)
    for (v, mu), (v_ref, mu_ref) in zip(pred_stats, ref_stats):
        total = total + (torch.abs(v - v_ref) / (abs(v_ref) + eps)) ** 2
        total = total + (torch.abs(mu - mu_ref) / (abs(mu_ref) + eps)) ** 2
    return total


def org_loss(soft_mask, organ_mask, eps=1e-8):
    """Fraction of predicted mass falling outside the organ mask."""
    outside = (soft_mask * (1.0 - organ_mask)).sum()
    return outside / (soft_mask.sum() + eps)


def sep_loss(soft_masks, eps=1e-8):
    """Pairwise soft intersection-over-union between lesion masks."""
    total = torch.zeros((), dtype=torch.float64)
    for i in range(len(soft_masks)):
        for j in range(i + 1, len(soft_masks)):
            a, b = soft_masks[i], soft_masks[j]
            total = total + (a * b).sum() / (torch.maximum(a, b).sum() + eps)
    return total


def seg_loss(soft_mask, gt, eps=1e-6):
    """``(1 - soft Dice) + mean binary cross-entropy``."""
    gt = gt.to(soft_mask.dtype)
    dice = (2.0 * (soft_mask * gt).sum() + eps) / (soft_mask.sum() + gt.sum() + eps)
    p = torch.clamp(soft_mask, eps, 1.0 - eps)
    bce = -(gt * torch.log(p) + (1.0 - gt) * torch.log1p(-p)).mean()
    return (1.0 - dice) + bce


def _value(x):
    return float(x.detach()) if torch.is_tensor(x) else float(x)


def total_loss(terms: dict, delta: int, w: LossWeights) -> LossReport:
    """Compose the weak and supervised objectives.

    ``terms`` holds ``uni``, ``attr``, ``org``, ``sep`` and (when
    ``delta == 1``) ``seg``; values may be tensors.
    """
    if delta not in (0, 1):
        raise ParameterError(f"delta must be 0 or 1, got {delta}")
    zero = torch.zeros((), dtype=torch.float64)
    con = terms["attr"] + terms["org"]
    weak = w.uni * terms["uni"] + w.con * con + w.sep * terms["sep"]
    seg = terms.get("seg", zero) if delta else zero
    total = w.weak * weak
    if delta:
        total = w.seg * seg + total
    return LossReport(
        uni=_value(terms["uni"]),
        attr=_value(terms["attr"]),
        org=_value(terms["org"]),
        con=_value(con),
        sep=_value(terms["sep"]),
        weak=_value(weak),
        seg=_value(seg),
        total=_value(total),
        delta=delta,
        total_tensor=total,
    )


# -- gradient checking ----------------------------------------------------------

def grad_check(f, theta0, eps_fd=1e-6, analytic=None, coords=None):
    """Largest relative error between an analytic gradient and central differences.

    ``f`` maps a float64 vector to a scalar.  The analytic gradient defaults
    to autograd through ``f``.  ``coords`` restricts the finite-difference
    probes to a subset of flat coordinates.
    """
    theta0 = torch.as_tensor(theta0, dtype=torch.float64).detach().clone()
    if analytic is None:
        theta = theta0.clone().requires_grad_(True)
        value = f(theta)
        if not torch.isfinite(value):
            raise NumericError("objective is not finite at theta0")
        (analytic,) = torch.autograd.grad(value, theta, allow_unused=True)
        if analytic is None:
            analytic = torch.zeros_like(theta0)
    analytic = torch.as_tensor(analytic, dtype=torch.float64).reshape(-1)
    worst = 0.0
    with torch.no_grad():
        for j in range(theta0.numel()) if coords is None else coords:
            j = int(j)
            plus, minus = theta0.clone(), theta0.clone()
            plus.view(-1)[j] += eps_fd
            minus.view(-1)[j] -= eps_fd
            fp, fm = float(f(plus)), float(f(minus))
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError(f"objective not finite when perturbing coordinate {j}")
            g_fd = (fp - fm) / (2.0 * eps_fd)
            g_a = float(analytic[j])
            err = abs(g_a - g_fd) / max(abs(g_a), abs(g_fd), 1e-8)
            worst = max(worst, err)
    return worst


# -- optimisation ---------------------------------------------------------------

def cosine_lr(step, total_steps, base_lr):
    """Cosine annealing from ``base_lr`` at step 0 towards 0 at ``total_steps``."""
    if total_steps <= 0:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / total_steps))


class AdamW:
    """Adam with decoupled weight decay over a :class:`ParamStore`."""

    def __init__(self, params: ParamStore, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01, lr_scales=None):
        self.params = params
        # name prefix -> learning-rate multiplier; first matching prefix wins
        self.lr_scales = dict(lr_scales or {})
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: torch.zeros_like(v) for k, v in params.items()}
        self.v = {k: torch.zeros_like(v) for k, v in params.items()}

    @torch.no_grad()
    def step(self, grads: dict, lr=None):
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            self.m[k].mul_(b1).add_(g, alpha=1.0 - b1)
            self.v[k].mul_(b2).addcmul_(g, g, value=1.0 - b2)
            lr_k = lr * self.scale_for(k)
            if lr_k == 0.0:
                continue
            update = (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + self.eps)
            if self.weight_decay:
                p.mul_(1.0 - lr_k * self.weight_decay)
            p.sub_(lr_k * update)

    def scale_for(self, name):
        for prefix, scale in self.lr_scales.items():
            if name.startswith(prefix):
                return scale
        return 1.0


def clip_grad_norm(grads: dict, max_norm):
    """Global L2 norm of ``grads``; rescales them in place when it exceeds ``max_norm``."""
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values() if g is not None))
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            if g is not None:
                g.mul_(scale)
    return norm


def optimize(params: ParamStore, loss_fn, steps, lr=1e-4, weight_decay=0.01, max_grad_norm=None, callback=None):
    """Run ``steps`` AdamW updates with cosine decay.

    ``loss_fn(step, params)`` returns a scalar tensor.  Returns the per-step
    loss trace.  A non-finite loss raises :class:`NumericError` before any
    update is applied for that step.
    """
    if steps < 1:
        raise ParameterError(f"steps must be >= 1, got {steps}")
    opt = AdamW(params, lr=lr, weight_decay=weight_decay)
    trace = []
    for step in range(steps):
        params.requires_grad_(True)
        loss = loss_fn(step, params)
        value = float(loss.detach())
        if not math.isfinite(value):
            params.requires_grad_(False)
            raise NumericError(f"non-finite loss {value} at step {step}")
        names = [k for k, v in params.items()]
        grads = torch.autograd.grad(loss, [params[k] for k in names], allow_unused=True)
        params.requires_grad_(False)
        grads = {k: g for k, g in zip(names, grads)}
        clip_grad_norm(grads, max_grad_norm)
        step_lr = cosine_lr(step, steps, lr)
        opt.step(grads, step_lr)
        trace.append(value)
        if callback is not None:
            callback(step, value, step_lr)
    return trace


"""Objective terms for adversarial training, reconstruction, diversity and classification.

L1 terms are mean-reduced; classification terms are mean cross-entropy.
Every function works on batched tensors and on scalars.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

from .core import LossWeights


def _check_shapes(*pairs):
    for a, b in pairs:
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def mean_abs(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_shapes((a, b))
    return (a - b).abs().mean()


def adv_loss_d(real_logit: torch.Tensor, fake_logit: torch.Tensor) -> torch.Tensor:
    """Non-saturating logistic discriminator loss on the per-domain branch logits."""
    real_logit, fake_logit = torch.as_tensor(real_logit), torch.as_tensor(fake_logit)
    return F.softplus(-real_logit).mean() + F.softplus(fake_logit).mean()


def adv_loss_g(fake_logit: torch.Tensor) -> torch.Tensor:
    return F.softplus(-torch.as_tensor(fake_logit)).mean()


def adv_objective_saturating(real_prob: torch.Tensor, fake_prob: torch.Tensor) -> torch.Tensor:
    """Literal E[log D(x)] + E[log(1 - D(x~))] on probabilities (the value D maximizes)."""
    return torch.log(real_prob).mean() + torch.log1p(-fake_prob).mean()


def sd_rec_loss(code_target, code_rec, style_target, style_rec) -> torch.Tensor:
    _check_shapes((code_target, code_rec), (style_target, style_rec))
    return mean_abs(code_target, code_rec) + mean_abs(style_target, style_rec)


def d_rec_loss(fg_from_source, code_source, fg_from_fake, code_target) -> torch.Tensor:
    """Generator-bottleneck defect channels must agree with the encoder's codes."""
    _check_shapes((fg_from_source, code_source), (fg_from_fake, code_target))
    return mean_abs(fg_from_source, code_source) + mean_abs(fg_from_fake, code_target)


DIVERSITY_PAIRS = (
    # (c1,s2) vs (c2,s1) and (c1,s1) vs (c2,s2)
    ((0, 1), (1, 0)),
    ((0, 0), (1, 1)),
    # mixed (c_m, s_n), m != n, against unmixed (c_o, s_o)
    ((0, 1), (0, 0)),
    ((0, 1), (1, 1)),
    ((1, 0), (0, 0)),
    ((1, 0), (1, 1)),
)


def diversity_loss(images: dict, distance: Callable = mean_abs) -> torch.Tensor:
    """Sum of L1 distances over the six unordered pairs of the four mixed outputs.

    ``images[(i, j)]`` is ``G(x, c_i, s_j)`` for ``i, j in {0, 1}``.
    The loss is maximized during training.
    """
    keys = {(0, 0), (0, 1), (1, 0), (1, 1)}
    if set(images) != keys:
        raise ValueError(f"need images for exactly {sorted(keys)}")
    _check_shapes(*((images[(0, 0)], images[k]) for k in keys))
    return sum(distance(images[a], images[b]) for a, b in DIVERSITY_PAIRS)


def cycle_loss(x, x_cycled) -> torch.Tensor:
    return mean_abs(x, x_cycled)


def _cls_loss(logits: torch.Tensor, target) -> torch.Tensor:
    logits = torch.as_tensor(logits)
    squeeze = logits.ndim == 1
    if squeeze:
        logits = logits.unsqueeze(0)
    target = torch.as_tensor(getattr(target, "id", target), dtype=torch.long).reshape(-1)
    if target.numel() == 1 and logits.shape[0] > 1:
        target = target.expand(logits.shape[0])
    n = logits.shape[1]
    if int(target.min()) < 0 or int(target.max()) >= n:
        raise ValueError(f"target out of range [0, {n})")
    return F.cross_entropy(logits, target)


def fg_cls_loss(logits, target) -> torch.Tensor:
    return _cls_loss(logits, target)


def bg_cls_loss(logits, target) -> torch.Tensor:
    return _cls_loss(logits, target)


def r1_penalty(logit_fn: Callable[[torch.Tensor], torch.Tensor], real: torch.Tensor) -> torch.Tensor:
    """0.5 * batch mean of ||d logit / d x||^2 for the domain-branch logits of real images."""
    if not real.requires_grad:
        real = real.detach().requires_grad_(True)
    out = logit_fn(real)
    if not out.requires_grad:
        return real.new_zeros(())
    (grad,) = torch.autograd.grad(out.sum(), real, create_graph=True, allow_unused=True)
    if grad is None:
        return real.new_zeros(())
    return 0.5 * grad.pow(2).reshape(real.shape[0], -1).sum(1).mean()


@dataclass
class LossReport:
    adv_d: float = 0.0
    adv_g: float = 0.0
    sd_rec: float = 0.0
    d_rec: float = 0.0
    ds: float = 0.0
    cyc: float = 0.0
    fg_cls_real: float = 0.0
    fg_cls_fake: float = 0.0
    bg_cls_real: float = 0.0
    bg_cls_fake: float = 0.0
    r1: float = 0.0
    total_g: float = 0.0
    total_d: float = 0.0

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    def as_dict(self) -> dict[str, float]:
        return dataclasses.asdict(self)

    def non_finite(self) -> list[str]:
        return [k for k, v in self.as_dict().items() if not math.isfinite(v)]


def compose(parts: dict, weights: LossWeights, step: int):
    """Weighted generator and discriminator totals.

    ``parts`` maps LossReport field names to scalars (tensors or floats); missing
    terms count as zero. Returns ``(total_g, total_d)`` with the input types preserved
    so tensors stay differentiable.
    """
    w = weights
    get = lambda k: parts.get(k, 0.0)  # noqa: E731
    total_g = (get("adv_g") + w.lambda_sd * get("sd_rec") + w.lambda_d * get("d_rec")
               - w.ds_weight(step) * get("ds") + w.lambda_cyc * get("cyc")
               + w.lambda_fg * get("fg_cls_fake") + w.lambda_bg * get("bg_cls_fake"))
    total_d = (get("adv_d") + w.lambda_fg * get("fg_cls_real") + w.lambda_bg * get("bg_cls_real")
               + w.lambda_r1 * get("r1"))
    return total_g, total_d


def make_report(parts: dict, weights: LossWeights, step: int) -> LossReport:
    vals = {k: float(v) for k, v in parts.items()}
    total_g, total_d = compose(vals, weights, step)
    return LossReport(**vals, total_g=float(total_g), total_d=float(total_d))


def report_csv_header() -> str:
    return ",".join(["step"] + LossReport.columns())


def report_csv_row(step: int, report: LossReport) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="").writerow(
        [step] + [repr(float(v)) for v in report.as_dict().values()])
    return buf.getvalue()


def read_report_csv(path) -> list[tuple[int, LossReport]]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for r in reader:
            step = int(r.pop("step"))
            rows.append((step, LossReport(**{k: float(v) for k, v in r.items()})))
    return rows


def all_terms() -> Sequence[str]:
    return LossReport.columns()[:-2]

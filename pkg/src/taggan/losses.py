"""Adversarial, cycle-consistency and domain-classification losses.

Discriminator outputs are probabilities; logs are taken on values clamped to
``[EPS, 1 - EPS]`` so saturated discriminators give large but finite losses.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import NamedTuple, Optional

import torch
import torch.nn.functional as F

from .core import ConfigError, DomainError, ShapeError, subtract_map
from .model import (
    TagGANNets,
    discriminator_forward,
    generator_map_forward,
    generator_recon_forward,
)

EPS = 1e-7

LOG_FIELDS = [
    "l_fgan_d", "l_fgan_g", "l_bgan_d", "l_bgan_g", "l_cyc",
    "l_dcl_real", "l_dcl_fake", "total_g", "total_d",
]


@dataclass
class LossWeights:
    lambda_cyc: float = 10.0
    lambda_dcl: float = 1.0

    def __post_init__(self) -> None:
        for f in fields(self):
            v = float(getattr(self, f.name))
            if not (v >= 0 and v < float("inf")):
                raise ConfigError(f"{f.name} must be finite and >= 0, got {v}")
            setattr(self, f.name, v)


@dataclass
class LossReport:
    l_fgan_d: float = 0.0
    l_fgan_g: float = 0.0
    l_bgan_d: float = 0.0
    l_bgan_g: float = 0.0
    l_cyc: float = 0.0
    l_dcl_real: float = 0.0
    l_dcl_fake: float = 0.0
    total_g: float = 0.0
    total_d: float = 0.0

    def as_row(self) -> list[float]:
        return [getattr(self, k) for k in LOG_FIELDS]

    def to_dict(self) -> dict:
        return asdict(self)


class Batch(NamedTuple):
    """Abnormal images ``x`` with labels ``c``; normal images ``y`` with backward labels ``b``."""

    x: torch.Tensor
    c: torch.Tensor
    y: torch.Tensor
    b: torch.Tensor


class Fakes(NamedTuple):
    disease_map: torch.Tensor  # G_map(x, c)
    fake_normal: torch.Tensor  # x - map
    recon_abnormal: torch.Tensor  # G_recon(fake_normal, c)
    gen_abnormal: torch.Tensor  # G_recon(y, b)
    recon_normal: torch.Tensor  # gen_abnormal - G_map(gen_abnormal, b)


def _log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp(EPS, 1.0 - EPS))


def _check_scores(*scores: torch.Tensor) -> None:
    # NaN is let through: it surfaces as a non-finite loss for the divergence guard
    for s in scores:
        if s.numel() and bool(((s < 0) | (s > 1)).any()):
            raise DomainError("discriminator scores must lie in [0, 1]")


def adversarial_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor):
    """Return ``(d_term, g_term)`` for one discriminator.

    ``d_term = -mean log D(real) - mean log(1 - D(fake))`` and the
    non-saturating ``g_term = -mean log D(fake)``.
    """
    _check_scores(real_scores, fake_scores)
    d_term = -_log(real_scores).mean() - _log(1.0 - fake_scores).mean()
    g_term = -_log(fake_scores).mean()
    return d_term, g_term


def adversarial_forward_loss(dY_real: torch.Tensor, dY_fake: torch.Tensor):
    """Normal-domain discriminator on real normals vs ``x - G_map(x, c)``."""
    return adversarial_loss(dY_real, dY_fake)


def adversarial_backward_loss(dX_real: torch.Tensor, dX_fake: torch.Tensor):
    """Abnormal-domain discriminator on real abnormals vs reconstructions."""
    return adversarial_loss(dX_real, dX_fake)


def l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def generate_fakes(nets: TagGANNets, batch: Batch) -> Fakes:
    m = generator_map_forward(nets, batch.x, batch.c)
    fake_normal = subtract_map(batch.x, m, clamp=False)
    recon_abnormal = generator_recon_forward(nets, fake_normal, batch.c)
    gen_abnormal = generator_recon_forward(nets, batch.y, batch.b)
    recon_normal = subtract_map(gen_abnormal, generator_map_forward(nets, gen_abnormal, batch.b), clamp=False)
    return Fakes(m, fake_normal, recon_abnormal, gen_abnormal, recon_normal)


def cycle_terms(batch: Batch, fakes: Fakes) -> tuple[torch.Tensor, torch.Tensor]:
    """Forward (abnormal -> normal -> abnormal) and backward (normal -> abnormal -> normal) L1 terms."""
    return l1(fakes.recon_abnormal, batch.x), l1(fakes.recon_normal, batch.y)


def cycle_loss(x, c, y, b, nets: TagGANNets) -> torch.Tensor:
    batch = Batch(x, c, y, b)
    term1, term2 = cycle_terms(batch, generate_fakes(nets, batch))
    return term1 + term2


def domain_classification_loss(domain_logits: torch.Tensor, c, mode: str = "real") -> torch.Tensor:
    """Softmax cross-entropy of ``domain_logits`` (N, l) against labels ``c``.

    ``mode`` only documents provenance: ``real`` logits feed the discriminator
    objective, ``fake`` logits the generator objective.
    """
    if mode not in ("real", "fake"):
        raise ValueError(f"mode must be 'real' or 'fake', got {mode!r}")
    if domain_logits.dim() == 1:
        domain_logits = domain_logits[None]
    n, n_domains = domain_logits.shape
    c = torch.as_tensor(c, dtype=torch.long).reshape(-1)
    if c.numel() == 1 and n > 1:
        c = c.expand(n)
    if c.numel() != n:
        raise ShapeError(f"{c.numel()} labels for {n} logit rows")
    if c.min() < 0 or c.max() >= n_domains:
        raise DomainError(f"label out of range for {n_domains} domains")
    return F.cross_entropy(domain_logits, c)


def discriminator_objective(nets: TagGANNets, batch: Batch, fakes: Fakes, w: LossWeights):
    """``total_d`` and its parts. Pass detached fakes to train only the discriminators."""
    dY_real, _ = discriminator_forward(nets, batch.y, "normal")
    dY_fake, _ = discriminator_forward(nets, fakes.fake_normal, "normal")
    dX_real, logits_real = discriminator_forward(nets, batch.x, "abnormal")
    dX_fake, _ = discriminator_forward(nets, fakes.recon_abnormal, "abnormal")
    l_fgan_d, _ = adversarial_forward_loss(dY_real, dY_fake)
    l_bgan_d, _ = adversarial_backward_loss(dX_real, dX_fake)
    l_dcl_real = domain_classification_loss(logits_real, batch.c, "real")
    total_d = l_fgan_d + l_bgan_d + w.lambda_dcl * l_dcl_real
    parts = dict(l_fgan_d=l_fgan_d, l_bgan_d=l_bgan_d, l_dcl_real=l_dcl_real, total_d=total_d,
                 d_normal_real=dY_real.mean(), d_normal_fake=dY_fake.mean())
    return total_d, parts


def generator_objective(nets: TagGANNets, batch: Batch, fakes: Fakes, w: LossWeights):
    """``total_g`` and its parts, scored by the current discriminators."""
    dY_fake, _ = discriminator_forward(nets, fakes.fake_normal, "normal")
    dX_fake, logits_fake = discriminator_forward(nets, fakes.recon_abnormal, "abnormal")
    _check_scores(dY_fake, dX_fake)
    l_fgan_g = -_log(dY_fake).mean()
    l_bgan_g = -_log(dX_fake).mean()
    term1, term2 = cycle_terms(batch, fakes)
    l_cyc = term1 + term2
    l_dcl_fake = domain_classification_loss(logits_fake, batch.c, "fake")
    total_g = l_fgan_g + l_bgan_g + w.lambda_cyc * l_cyc + w.lambda_dcl * l_dcl_fake
    parts = dict(l_fgan_g=l_fgan_g, l_bgan_g=l_bgan_g, l_cyc=l_cyc, l_dcl_fake=l_dcl_fake,
                 total_g=total_g, cyc_forward=term1, cyc_backward=term2)
    return total_g, parts


def total_losses(batch: Batch, nets: TagGANNets, w: Optional[LossWeights] = None):
    """Evaluate every loss term on one batch without detaching anything.

    Returns ``(total_d, total_g, report)``; the two totals are differentiable
    with respect to all four networks.
    """
    w = w or LossWeights()
    if batch.x.shape[0] == 0 or batch.y.shape[0] == 0:
        raise ConfigError("batch must contain abnormal and normal images")
    fakes = generate_fakes(nets, batch)
    total_d, dparts = discriminator_objective(nets, batch, fakes, w)
    total_g, gparts = generator_objective(nets, batch, fakes, w)
    return total_d, total_g, make_report(dparts, gparts)


def make_report(dparts: dict, gparts: dict) -> LossReport:
    merged = {**dparts, **gparts}
    return LossReport(**{k: float(merged[k].detach()) for k in LOG_FIELDS})

"""Fidelity, diversity, memorization and downstream-utility measurements.

The Inception backbone of the usual FID is replaced by a small probe network
trained on the real data (or raw pixel moments), so absolute values are only
comparable within one probe.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.spatial.distance import cdist, pdist

from .core import ClassifierConfig, ImageSet, make_rng
from .datagen import BalancedSampler, image_hash, traditional_augment

log = logging.getLogger(__name__)


class LeakError(RuntimeError):
    """Synthetic images found in a held-out split."""


# Frechet distance -------------------------------------------------------------

def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((mat + mat.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    """||mu1 - mu2||^2 + tr(C1 + C2 - 2 (C1 C2)^(1/2)).

    The trace of the square root is taken from the eigenvalues of the
    symmetric form C1^(1/2) C2 C1^(1/2), with negative eigenvalues clamped.
    """
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, float)), np.atleast_1d(np.asarray(mu2, float))
    cov1, cov2 = np.atleast_2d(np.asarray(cov1, float)), np.atleast_2d(np.asarray(cov2, float))
    if mu1.shape != mu2.shape or cov1.shape != cov2.shape or cov1.shape != (mu1.size, mu1.size):
        raise ValueError(f"dimension mismatch: mu {mu1.shape}/{mu2.shape}, cov {cov1.shape}/{cov2.shape}")
    cov1, cov2 = (cov1 + cov1.T) / 2, (cov2 + cov2.T) / 2
    s1 = _psd_sqrt(cov1)
    inner = s1 @ cov2 @ s1
    w = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_sqrt = np.sqrt(np.clip(w, 0, None)).sum()
    diff = mu1 - mu2
    return max(0.0, float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2 * tr_sqrt))


# embeddings -------------------------------------------------------------------

class EmbeddingModel:
    tag = "abstract"
    dim = 0

    def __call__(self, images: torch.Tensor) -> np.ndarray:
        raise NotImplementedError


class PixelMomentEmbedding(EmbeddingModel):
    """Hand-made statistics: channel means/stds, gradient energy, quadrant means."""

    tag = "raw-pixel-moments"
    dim = 13

    def __call__(self, images):
        x = torch.as_tensor(images, dtype=torch.float64)
        if x.ndim == 3:
            x = x.unsqueeze(0)
        mean = x.mean(dim=(2, 3))
        std = x.std(dim=(2, 3), unbiased=False)
        gx = (x[..., 1:] - x[..., :-1]).abs().mean(dim=(2, 3))
        gy = (x[..., 1:, :] - x[..., :-1, :]).abs().mean(dim=(2, 3))
        gray = x.mean(1)
        h, w = gray.shape[1] // 2, gray.shape[2] // 2
        quads = torch.stack([gray[:, :h, :w].mean((1, 2)), gray[:, :h, w:].mean((1, 2)),
                             gray[:, h:, :w].mean((1, 2)), gray[:, h:, w:].mean((1, 2))], 1)
        return torch.cat([mean, std, gx + gy, quads], 1).numpy()


def _probe_block(c_in: int, c_out: int) -> list[nn.Module]:
    return [nn.Conv2d(c_in, c_out, 3, 1, 1, bias=False), nn.BatchNorm2d(c_out), nn.LeakyReLU(0.2)]


class ProbeNet(nn.Module):
    # Global max pooling: defects are small and local, averaging washes them out.
    def __init__(self, n_classes: int, dim: int = 16, width: int = 16):
        super().__init__()
        self.features = nn.Sequential(
            *_probe_block(3, width), *_probe_block(width, width), nn.MaxPool2d(2),
            *_probe_block(width, 2 * width), *_probe_block(2 * width, 2 * width),
            nn.AdaptiveMaxPool2d(1), nn.Flatten(),
            nn.Linear(2 * width, dim), nn.Tanh(),
        )
        self.head = nn.Linear(dim, n_classes)

    def forward(self, x):
        return self.head(self.features(x))


class ProbeEmbedding(EmbeddingModel):
    tag = "trained-probe"

    def __init__(self, net: ProbeNet, n_products: int):
        self.net = net.eval()
        self.dim = net.head.in_features
        self.n_products = n_products

    @torch.no_grad()
    def __call__(self, images):
        x = torch.as_tensor(images, dtype=torch.float32)
        if x.ndim == 3:
            x = x.unsqueeze(0)
        return torch.cat([self.net.features(c) for c in x.split(256)]).double().numpy()

    @torch.no_grad()
    def predict(self, images) -> tuple[np.ndarray, np.ndarray]:
        """(domain, product) predictions from the joint class logits."""
        x = torch.as_tensor(images, dtype=torch.float32)
        logits = torch.cat([self.net(c) for c in x.split(256)])
        probs = logits.softmax(1).view(x.shape[0], -1, self.n_products)
        return probs.sum(2).argmax(1).numpy(), probs.sum(1).argmax(1).numpy()


def train_probe(data: ImageSet, dim: int = 16, epochs: int = 8, seed: int = 0,
                n_products: Optional[int] = None, steps_per_epoch: int = 60,
                batch_size: int = 32) -> ProbeEmbedding:
    """Train a (domain x product) classifier; its penultimate layer is the embedding."""
    n_products = n_products or int(data.products.max()) + 1
    labels = data.domains * n_products + data.products
    if len(torch.unique(labels)) < 2:
        raise ValueError("probe training needs at least two classes")
    n_domains = int(data.domains.max()) + 1
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = ProbeNet(max(n_domains, 2) * n_products, dim)
    opt = torch.optim.Adam(net.parameters(), lr=2e-3)
    sampler = BalancedSampler(data.products.tolist(), data.domains.tolist(), "oversample")
    rng = np.random.default_rng([seed, 21])
    gen = make_rng(seed, 22)
    net.train()
    for _ in range(epochs * steps_per_epoch):
        idx = torch.from_numpy(sampler.draw(batch_size, rng))
        x = traditional_augment(data.images[idx], gen, flip_p=0.5, jitter=0.05)
        loss = F.cross_entropy(net(x), labels[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    return ProbeEmbedding(net, n_products)


def _moments(feats: np.ndarray):
    return feats.mean(0), np.cov(feats, rowvar=False)


def fid_proxy(real, fake, embed: EmbeddingModel) -> float:
    real_f, fake_f = embed(real), embed(fake)
    need = real_f.shape[1] + 1
    if len(real_f) < need or len(fake_f) < need:
        raise ValueError(f"too few samples for fid_proxy: need >= {need} per side, "
                         f"got {len(real_f)} real / {len(fake_f)} fake")
    return frechet_distance(*_moments(real_f), *_moments(fake_f))


def pairwise_diversity(samples, embed: Optional[EmbeddingModel] = None) -> float:
    """Mean embedded L2 distance over all unordered pairs (higher is more diverse)."""
    feats = _features(samples, embed)
    if len(feats) < 2:
        raise ValueError("pairwise_diversity needs at least two samples")
    return float(pdist(feats).mean())


def _features(images, embed):
    if embed is None:
        x = images.detach().numpy() if isinstance(images, torch.Tensor) else np.asarray(images)
        return x.reshape(len(x), -1).astype(np.float64)
    return embed(images)


@dataclass
class NNAudit:
    nearest: list[int]
    distances: list[float]
    copies: list[bool]
    min: float
    p01: float
    median: float

    @property
    def copy_fraction(self) -> float:
        return float(np.mean(self.copies)) if self.copies else 0.0

    def summary(self) -> dict:
        return {"n": len(self.nearest), "min": self.min, "p01": self.p01, "median": self.median,
                "copies": int(sum(self.copies)), "copy_fraction": self.copy_fraction}


def nn_audit(generated, train, embed: Optional[EmbeddingModel] = None, copy_tol: float = 1e-6) -> NNAudit:
    """Nearest train neighbour of every generated image; ``embed=None`` uses raw pixels."""
    g, t = _features(generated, embed), _features(train, embed)
    if len(g) == 0 or len(t) == 0:
        raise ValueError("nn_audit needs nonempty generated and train sets")
    d = cdist(g, t)
    nearest = d.argmin(1)
    dist = d[np.arange(len(g)), nearest]
    return NNAudit(nearest.tolist(), dist.tolist(), (dist < copy_tol).tolist(),
                   float(dist.min()), float(np.percentile(dist, 1)), float(np.median(dist)))


# gradient reversal ------------------------------------------------------------

class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return -ctx.lam * grad, None


def grl(features: torch.Tensor, lam: float = 1.0) -> torch.Tensor:
    """Identity forward; multiplies the incoming gradient by ``-lam`` backward."""
    if lam < 0:
        raise ValueError("GRL lambda must be >= 0")
    return _GradReverse.apply(features, float(lam))


# downstream classifier --------------------------------------------------------

class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.short = (nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))
                      if stride != 1 or cin != cout else nn.Identity())

    def forward(self, x):
        h = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.bn2(self.conv2(h)) + self.short(x))


class DefectClassifier(nn.Module):
    """Small residual classifier with an optional real-vs-synthetic head behind a GRL."""

    def __init__(self, n_classes: int = 3, depth: int = 8, width: int = 16):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(3, width, 3, 1, 1, bias=False), nn.BatchNorm2d(width), nn.ReLU())
        blocks, c = [], width
        for i in range(depth):
            stride = 2 if i in (depth // 3, 2 * depth // 3) and i > 0 else 1
            cout = c * 2 if stride == 2 else c
            blocks.append(BasicBlock(c, cout, stride))
            c = cout
        self.blocks = nn.Sequential(*blocks)
        self.feat_dim = c
        self.fc = nn.Linear(c, n_classes)
        self.domain_head = nn.Sequential(nn.Linear(c, c), nn.ReLU(), nn.Linear(c, 1))

    def features(self, x):
        return F.adaptive_avg_pool2d(self.blocks(self.stem(x)), 1).flatten(1)

    def forward(self, x):
        return self.fc(self.features(x))


@torch.no_grad()
def error_rate(model: nn.Module, data: ImageSet) -> float:
    model.eval()
    pred = torch.cat([model(x).argmax(1) for x in data.images.split(256)])
    model.train()
    return float((pred != data.domains).float().mean())


def leak_check(synthetic: Optional[ImageSet], *held_out: ImageSet) -> None:
    if synthetic is None:
        return
    held = {image_hash(x) for h in held_out for x in h.images}
    leaked = [i for i, x in enumerate(synthetic.images) if image_hash(x) in held]
    if leaked:
        raise LeakError(f"{len(leaked)} synthetic images appear in val/test (first index {leaked[0]})")


def train_defect_classifier_seed(train: ImageSet, synthetic: Optional[ImageSet], val: ImageSet,
                                 test: ImageSet, config: ClassifierConfig, seed: int,
                                 n_classes: int = 3) -> float:
    """Train one classifier; returns the test error of the best-validation epoch."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = DefectClassifier(n_classes, config.clf_depth, config.clf_width)
    opt = torch.optim.Adam(model.parameters(), lr=config.clf_lr)
    rng = np.random.default_rng([seed, 31])
    gen = make_rng(seed, 32)
    if synthetic is None:
        pool = train
        is_fake = torch.zeros(len(train))
        sampler = BalancedSampler(train.products.tolist(), train.domains.tolist(), "oversample")
    else:
        pool = ImageSet(torch.cat([train.images, synthetic.images]),
                        torch.cat([train.domains, synthetic.domains]),
                        torch.cat([train.products, synthetic.products]))
        is_fake = torch.cat([torch.zeros(len(train)), torch.ones(len(synthetic))])
        sampler = BalancedSampler(pool.products.tolist(), pool.domains.tolist(), "natural")
    total = config.clf_epochs * config.clf_steps_per_epoch
    warm = max(1, int(config.grl_warmup * total))
    best_val, best_state = math.inf, None
    model.train()
    for step in range(total):
        idx = torch.from_numpy(sampler.draw(config.clf_batch_size, rng))
        x = traditional_augment(pool.images[idx], gen)
        feats = model.features(x)
        loss = F.cross_entropy(model.fc(feats), pool.domains[idx])
        if synthetic is not None:
            lam = config.grl_lambda * min(1.0, step / warm)
            dom_logit = model.domain_head(grl(feats, lam)).squeeze(1)
            loss = loss + F.binary_cross_entropy_with_logits(dom_logit, is_fake[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if (step + 1) % config.clf_steps_per_epoch == 0:
            v = error_rate(model, val)
            if v < best_val:
                best_val, best_state = v, copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    return error_rate(model, test)


@dataclass
class ErrorRates:
    condition: str
    rates: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.rates))

    @property
    def std(self) -> float:
        return float(np.std(self.rates))

    def as_dict(self) -> dict:
        return {"condition": self.condition, "rates": self.rates, "mean": self.mean, "std": self.std}


def train_defect_classifier(train: ImageSet, synthetic: Optional[ImageSet], val: ImageSet, test: ImageSet,
                            config: ClassifierConfig, condition: str = "") -> ErrorRates:
    """Error rate per seed; real-vs-synthetic GRL head only when synthetic data is given."""
    leak_check(synthetic, val, test)
    rates = [train_defect_classifier_seed(train, synthetic, val, test, config, s) for s in config.seeds]
    return ErrorRates(condition or ("none" if synthetic is None else "synthetic"), rates)


@dataclass
class EvalReport:
    probe: str
    fid_proxy: dict = field(default_factory=dict)
    pairwise_diversity: dict = field(default_factory=dict)
    nn_audit: dict = field(default_factory=dict)
    error_rates: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    def validate(self) -> None:
        def walk(v):
            if isinstance(v, dict):
                for x in v.values():
                    walk(x)
            elif isinstance(v, (list, tuple)):
                for x in v:
                    walk(x)
            elif isinstance(v, float) and not math.isfinite(v):
                raise ValueError("EvalReport contains a non-finite value")
        walk(asdict(self))
        for row in self.error_rates:
            if not all(0.0 <= r <= 1.0 for r in row["rates"]):
                raise ValueError("error rates must lie in [0, 1]")

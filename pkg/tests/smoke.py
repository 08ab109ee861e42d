"""Desk-scale training runs shared by the trained-model and acceptance tests.

Runs are cached per process, so each seed trains once per pytest session.
"""

from __future__ import annotations

import copy
import functools
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from dtgan.core import ImageSet, load_config, make_rng, sample_latent
from dtgan.datagen import ProceduralSpec, generate_procedural
from dtgan.evaluation import ProbeEmbedding, train_probe
from dtgan.networks import Nets
from dtgan.synthesis import synth_latent
from dtgan.training import Trainer, TrainState

ROOT = Path(__file__).resolve().parents[1]
SMOKE_CONFIG = ROOT / "configs" / "smoke16.cfg"
SEEDS = (0, 1, 2)


@functools.lru_cache(maxsize=None)
def dataset() -> tuple[ImageSet, ImageSet]:
    """(train, held-out) splits of the default procedural set at 16 px."""
    samples = generate_procedural(ProceduralSpec.for_size(16))
    train = [s for s in samples if s.provenance["split"] == "train"]
    held = [s for s in samples if s.provenance["split"] != "train"]
    return ImageSet.from_samples(train), ImageSet.from_samples(held)


@functools.lru_cache(maxsize=None)
def probe() -> ProbeEmbedding:
    return train_probe(dataset()[0], dim=16, epochs=8, seed=0)


@dataclass
class SmokeRun:
    seed: int
    trainer: Trainer
    ema: Nets
    initial: Nets
    losses_before: dict
    losses_200: dict
    losses_after: dict
    seconds: float


@functools.lru_cache(maxsize=None)
def smoke_run(seed: int) -> SmokeRun:
    cfg = load_config(SMOKE_CONFIG).replace(seed=seed)
    train, _ = dataset()
    trainer = Trainer(TrainState.fresh(cfg), train)
    initial = copy.deepcopy(trainer.state.ema_nets())  # ema_nets() is a live view
    before = trainer.probe_losses()
    torch.set_flush_denormal(True)
    try:
        t0 = time.perf_counter()
        trainer.run(200)
        at_200 = trainer.probe_losses()
        trainer.run(cfg.train.total_steps)
        seconds = time.perf_counter() - t0
    finally:
        torch.set_flush_denormal(False)
    ema = trainer.state.ema_nets()
    for nets in (initial, ema):
        for m in nets.modules().values():
            m.eval()
    return SmokeRun(seed, trainer, ema, initial, before, at_200, trainer.probe_losses(), seconds)


def latent_fakes(nets: Nets, target: int, n: int = 64, seed: int = 0):
    """``n`` latent-guided translations of random train Normals; returns (images, source products)."""
    train, _ = dataset()
    normals = train.subset((train.domains == 0).nonzero()[:, 0])
    idx = torch.randint(len(normals), (n,), generator=make_rng(seed, 6, target))
    zs = sample_latent(make_rng(seed, 7, target), nets.M.cfg.latent_dim, n)
    with torch.no_grad():
        out = synth_latent(nets, normals.images[idx], target, zs, make_rng(seed, 8, target))
    return out, normals.products[idx]


@torch.no_grad()
def fg_balanced_accuracy(run: SmokeRun) -> tuple[float, list[float]]:
    """Held-out real accuracy of the discriminator's defect head, averaged over classes."""
    _, held = dataset()
    pred = run.trainer.state.nets.D(held.images).fg_logits.argmax(1)
    recalls = [float((pred[held.domains == d] == d).float().mean()) for d in range(3)]
    return float(np.mean(recalls)), recalls


@torch.no_grad()
def bg_agreement(run: SmokeRun, n: int = 64) -> float:
    """Share of synthesized images whose product the BG head recovers."""
    hits = total = 0
    for target in range(3):
        fakes, products = latent_fakes(run.ema, target, n, run.seed)
        pred = run.trainer.state.nets.D(fakes).bg_logits.argmax(1)
        hits += int((pred == products).sum())
        total += n
    return hits / total

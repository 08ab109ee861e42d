"""Inference-time defect synthesis from a trained (EMA) snapshot.

Latent guidance draws (code, style) from the mapping network; reference guidance
extracts them from one or two real images with the style-defect encoder.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .core import ANCHOR_ID, DefectDomain, LabeledSample, RunConfig, domain_schema, make_rng, sample_latent
from .datagen import save_png
from .networks import Nets

POLICIES = ("latent", "v-same", "v-others", "v-abc")


class SnapshotError(RuntimeError):
    pass


class EmptyReferencePoolError(ValueError):
    pass


def _require(nets: Optional[Nets]) -> Nets:
    if nets is None:
        raise SnapshotError("no trained snapshot loaded")
    return nets


def _as_batch(x: torch.Tensor) -> torch.Tensor:
    x = torch.as_tensor(x, dtype=torch.float32)
    return x.unsqueeze(0) if x.ndim == 3 else x


def _dom(target) -> int:
    return target.id if isinstance(target, DefectDomain) else int(target)


def load_snapshot(path: str | Path) -> tuple[Nets, RunConfig]:
    """EMA generator/mapping/encoder plus discriminator from a checkpoint."""
    from .training import load_checkpoint

    state = load_checkpoint(path)
    nets = state.ema_nets()
    for m in nets.modules().values():
        m.eval()
    return nets, state.config


@dataclass
class SynthesisRequest:
    source: torch.Tensor
    product: int
    target: int
    guidance: str = "latent"  # latent | reference
    defect_ref: Optional[torch.Tensor] = None
    style_ref: Optional[torch.Tensor] = None
    count: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.guidance not in ("latent", "reference"):
            raise ValueError(f"unknown guidance {self.guidance!r}")
        if self.guidance == "reference" and self.defect_ref is None:
            raise ValueError("reference guidance needs a defect reference")


@torch.no_grad()
def synth_latent(nets: Optional[Nets], source, target, zs, rng: Optional[torch.Generator] = None,
                 use_noise: bool = True) -> torch.Tensor:
    """One output per latent code: ``G(source, M_target(z))``."""
    nets = _require(nets)
    zs = torch.as_tensor(zs, dtype=torch.float32)
    zs = zs.unsqueeze(0) if zs.ndim == 1 else zs
    src = _as_batch(source)
    if src.shape[0] == 1:
        src = src.expand(zs.shape[0], -1, -1, -1)
    code, style = nets.M(zs, _dom(target), rng, use_noise)
    out, _ = nets.G(src, code, style)
    return out


@torch.no_grad()
def synth_reference(nets: Optional[Nets], source, target, defect_ref, style_ref=None) -> torch.Tensor:
    """Code from ``defect_ref``, style from ``style_ref`` (defaults to ``defect_ref``)."""
    nets = _require(nets)
    src, dref = _as_batch(source), _as_batch(defect_ref)
    sref = dref if style_ref is None else _as_batch(style_ref)
    t = _dom(target)
    code, _ = nets.E(dref, t)
    _, style = nets.E(sref, t)
    out, _ = nets.G(src, code, style)
    return out[0] if torch.as_tensor(source).ndim == 3 else out


@torch.no_grad()
def style_sweep(nets: Optional[Nets], source, defect_ref, target, seeds: Sequence[int]) -> torch.Tensor:
    """Fixed defect code from ``defect_ref``; one style per seed from the mapping network."""
    nets = _require(nets)
    if not seeds:
        raise ValueError("style_sweep needs at least one seed")
    t = _dom(target)
    code, _ = nets.E(_as_batch(defect_ref), t)
    latent_dim = nets.M.cfg.latent_dim
    zs = torch.stack([sample_latent(make_rng(s, 41), latent_dim) for s in seeds])
    _, styles = nets.M(zs, t, make_rng(seeds[0], 42))
    k = len(seeds)
    out, _ = nets.G(_as_batch(source).expand(k, -1, -1, -1), code.expand(k, -1, -1, -1), styles)
    return out


def run_request(nets: Optional[Nets], req: SynthesisRequest) -> torch.Tensor:
    if req.guidance == "latent":
        gen = make_rng(req.seed, 43)
        zs = sample_latent(gen, _require(nets).M.cfg.latent_dim, req.count)
        return synth_latent(nets, req.source, req.target, zs, gen)
    outs = [synth_reference(nets, req.source, req.target, req.defect_ref, req.style_ref)]
    return torch.stack(outs * req.count) if outs[0].ndim == 3 else torch.cat(outs * req.count)


def _reference_candidates(pool: Sequence[LabeledSample], target: int, product: int, policy: str):
    by_product: dict[int, list[int]] = {}
    for i, s in enumerate(pool):
        if s.domain.id != target:
            continue
        if policy == "v-same" and s.product.id != product:
            continue
        if policy == "v-others" and s.product.id == product:
            continue
        by_product.setdefault(s.product.id, []).append(i)
    return by_product


@torch.no_grad()
def augment_dataset(nets: Optional[Nets], normals: Sequence[LabeledSample], recipe: dict,
                    policy: str = "latent", reference_pool: Sequence[LabeledSample] = (),
                    seed: int = 0, chunk: int = 64) -> list[LabeledSample]:
    """Synthesize defective samples from normal sources.

    ``recipe`` maps target domain id (or DefectDomain) to a count. Reference
    policies draw a product uniformly among eligible ones, then a reference
    uniformly within it; the reference supplies both code and style.
    """
    nets = _require(nets)
    if not normals:
        raise ValueError("augment_dataset needs at least one normal source")
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}; expected one of {POLICIES}")
    rng = np.random.default_rng([seed, 51])
    domains = domain_schema(nets.G.cfg.n_domains)
    plan = []
    for target, count in sorted(((_dom(t), c) for t, c in recipe.items())):
        for _ in range(count):
            src = int(rng.integers(len(normals)))
            ref = None
            if policy != "latent":
                cands = _reference_candidates(reference_pool, target, normals[src].product.id, policy)
                if not cands:
                    raise EmptyReferencePoolError(
                        f"no {domains[target].name} references for policy {policy} "
                        f"and source product {normals[src].product.name}")
                prods = sorted(cands)
                members = cands[prods[int(rng.integers(len(prods)))]]
                ref = members[int(rng.integers(len(members)))]
            plan.append((target, src, ref))

    latent_dim = nets.M.cfg.latent_dim
    out: list[LabeledSample] = []
    for start in range(0, len(plan), chunk):
        part = plan[start:start + chunk]
        src_imgs = torch.from_numpy(np.stack([normals[s].image for _, s, _ in part]))
        targets = torch.tensor([t for t, _, _ in part])
        gen = make_rng(seed, 52, start)
        if policy == "latent":
            zs = sample_latent(gen, latent_dim, len(part))
            code, style = nets.M(zs, targets, gen)
        else:
            refs = torch.from_numpy(np.stack([reference_pool[r].image for _, _, r in part]))
            code, style = nets.E(refs, targets)
        images, _ = nets.G(src_imgs, code, style)
        for k, (target, src, ref) in enumerate(part):
            idx = start + k
            srcs = normals[src]
            prov = {"source": srcs.sample_id, "guidance": policy, "seed": seed, "index": idx}
            if ref is not None:
                prov.update(reference=reference_pool[ref].sample_id,
                            reference_product=reference_pool[ref].product.name)
            out.append(LabeledSample(images[k].numpy().astype(np.float32), domains[target], srcs.product,
                                     None, f"syn_{policy}_{domains[target].name}_{idx:05d}", prov))
    return out


def balance_recipe(samples: Sequence[LabeledSample], product: Optional[int] = None,
                   n_domains: int = 3) -> dict[int, int]:
    """Counts that lift every defect class up to the Normal count."""
    pool = [s for s in samples if product is None or s.product.id == product]
    counts = np.bincount([s.domain.id for s in pool], minlength=n_domains)
    return {d: int(max(0, counts[ANCHOR_ID] - counts[d])) for d in range(n_domains) if d != ANCHOR_ID}


def write_outputs(images: torch.Tensor, out_dir: str | Path, records: Sequence[dict]) -> list[Path]:
    """Write PNGs plus ``manifest.jsonl``; filenames carry the provenance."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    with open(out_dir / "manifest.jsonl", "w", encoding="utf-8") as fh:
        for i, (img, rec) in enumerate(zip(images, records)):
            name = f"{i:04d}_{rec['target_domain']}_{rec['product']}_{rec['guidance']}_s{rec['seed']}.png"
            save_png(img, out_dir / name)
            fh.write(json.dumps({"output": name, **rec}, sort_keys=True) + "\n")
            paths.append(out_dir / name)
    return paths

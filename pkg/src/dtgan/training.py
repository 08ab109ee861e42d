"""Alternating discriminator / generator optimization, EMA snapshots and checkpoints.

Randomness is keyed on ``(seed, step)``: every step builds its own data and
noise generators, so a run resumed from a checkpoint at step k replays step
k+1 exactly as an uninterrupted run would.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn

from . import losses as L
from .core import ImageSet, RunConfig, make_rng, sample_latent
from .datagen import BalancedSampler
from .networks import Nets, build_nets

log = logging.getLogger(__name__)

CKPT_MAGIC = b"DTGANCKPT"
CKPT_VERSION = 1
EMA_GROUPS = ("G", "E", "M")


class NonFiniteLossError(RuntimeError):
    def __init__(self, terms, step):
        super().__init__(f"non-finite loss at step {step}: {', '.join(terms)}")
        self.terms, self.step = terms, step


class CheckpointError(ValueError):
    pass


def select_target_domain(y: torch.Tensor, n_domains: int, rng: torch.Generator) -> torch.Tensor:
    """Per-sample target drawn uniformly from the domains other than ``y``."""
    if n_domains < 2:
        raise ValueError("need at least two domains to pick a different target")
    y = torch.as_tensor(y, dtype=torch.long)
    r = torch.randint(0, n_domains - 1, y.shape, generator=rng)
    return r + (r >= y).long()


@torch.no_grad()
def ema_update(shadow: nn.Module, live: nn.Module, decay: float) -> nn.Module:
    """shadow <- decay * shadow + (1 - decay) * live, elementwise."""
    for ps, pl in zip(shadow.parameters(), live.parameters()):
        if ps.shape != pl.shape:
            raise ValueError(f"shape mismatch {tuple(ps.shape)} vs {tuple(pl.shape)}")
        ps.lerp_(pl, 1.0 - decay)
    return shadow


@dataclass
class TrainState:
    config: RunConfig
    nets: Nets
    ema: dict[str, nn.Module]
    opts: dict[str, torch.optim.Optimizer]
    step: int = 0

    @classmethod
    def fresh(cls, config: RunConfig) -> "TrainState":
        nets = build_nets(config.model, seed=config.train.seed)
        t = config.train
        betas = (t.beta1, t.beta2)
        lrs = {"G": t.lr_g, "D": t.lr_d, "E": t.lr_e, "M": t.lr_m}
        opts = {k: torch.optim.Adam(m.parameters(), lr=lrs[k], betas=betas, weight_decay=0.0)
                for k, m in nets.modules().items()}
        ema = {k: copy.deepcopy(nets.modules()[k]).requires_grad_(False) for k in EMA_GROUPS}
        return cls(config, nets, ema, opts, 0)

    def ema_nets(self) -> Nets:
        """EMA generator, mapping and encoder with the live discriminator (shared modules, not a copy)."""
        return Nets(self.ema["G"], self.ema["M"], self.ema["E"], self.nets.D)


@dataclass
class Batch:
    x: torch.Tensor
    y: torch.Tensor
    p: torch.Tensor
    y_trg: torch.Tensor
    z1: torch.Tensor
    z2: torch.Tensor
    ref1: Optional[torch.Tensor] = None
    ref2: Optional[torch.Tensor] = None

    @property
    def reference_mode(self) -> bool:
        return self.ref1 is not None


class Trainer:
    def __init__(self, state: TrainState, data: ImageSet):
        self.state = state
        self.data = data
        cfg = state.config
        self.sampler = BalancedSampler(data.products.tolist(), data.domains.tolist(), cfg.train.sampling)
        self.domain_pools = {d: (data.domains == d).nonzero(as_tuple=True)[0]
                             for d in range(cfg.model.n_domains)}

    @property
    def cfg(self) -> RunConfig:
        return self.state.config

    def make_batch(self, step: int, reference: Optional[bool] = None) -> tuple[Batch, torch.Generator]:
        """Batch for ``step``; ``reference`` forces the guidance mode instead of the coin flip."""
        t, m = self.cfg.train, self.cfg.model
        np_rng = np.random.default_rng([t.seed, step, 11])
        gen = make_rng(t.seed, step, 13)
        idx = torch.from_numpy(self.sampler.draw(t.batch_size, np_rng))
        y = self.data.domains[idx]
        y_trg = select_target_domain(y, m.n_domains, gen)
        z = sample_latent(gen, m.latent_dim, 2 * t.batch_size)
        batch = Batch(self.data.images[idx], y, self.data.products[idx], y_trg,
                      z[: t.batch_size], z[t.batch_size:])
        use_ref = float(torch.rand((), generator=gen)) < t.reference_ratio
        if reference is not None:
            use_ref = reference
        if use_ref and all(len(self.domain_pools[int(d)]) for d in torch.unique(y_trg)):
            refs = []
            for _ in range(2):
                pick = [self.domain_pools[int(d)][int(np_rng.integers(len(self.domain_pools[int(d)])))]
                        for d in y_trg]
                refs.append(self.data.images[torch.stack(pick)])
            batch.ref1, batch.ref2 = refs
        return batch, gen

    def _guide(self, batch: Batch, which: int, gen: torch.Generator):
        nets = self.state.nets
        if batch.reference_mode:
            return nets.E(batch.ref1 if which == 1 else batch.ref2, batch.y_trg)
        return nets.M(batch.z1 if which == 1 else batch.z2, batch.y_trg, gen)

    def d_phase(self, batch: Batch, gen: torch.Generator) -> dict:
        nets, opts = self.state.nets, self.state.opts
        with torch.no_grad():
            c, s = self._guide(batch, 1, gen)
            x_fake, _ = nets.G(batch.x, c, s)
        x_real = batch.x.detach().requires_grad_(True)
        out_real = nets.D(x_real)
        real_logit = out_real.adv_logits.gather(1, batch.y.view(-1, 1)).squeeze(1)
        (grad,) = torch.autograd.grad(real_logit.sum(), x_real, create_graph=True)
        r1 = 0.5 * grad.pow(2).reshape(grad.shape[0], -1).sum(1).mean()
        fake_logit = nets.D(x_fake).adv_logits.gather(1, batch.y_trg.view(-1, 1)).squeeze(1)
        parts = {
            "adv_d": L.adv_loss_d(real_logit, fake_logit),
            "fg_cls_real": L.fg_cls_loss(out_real.fg_logits, batch.y),
            "bg_cls_real": L.bg_cls_loss(out_real.bg_logits, batch.p),
            "r1": r1,
        }
        _, total_d = L.compose(parts, self.cfg.train.weights, self.state.step)
        opts["D"].zero_grad(set_to_none=True)
        total_d.backward()
        opts["D"].step()
        return parts

    def generator_terms(self, batch: Batch, gen: torch.Generator) -> dict:
        G, E, D = self.state.nets.G, self.state.nets.E, self.state.nets.D
        b = batch.x.shape[0]
        c1, s1 = self._guide(batch, 1, gen)
        c2, s2 = self._guide(batch, 2, gen)
        state = G.encode(batch.x)
        rep = type(state)(state.bg_features.repeat(4, 1, 1, 1), state.fg_code_extracted.repeat(4, 1, 1, 1))
        combos = [(0, 0), (0, 1), (1, 0), (1, 1)]
        codes, styles = (c1, c2), (s1, s2)
        four = G.decode(rep, torch.cat([codes[i] for i, _ in combos]),
                        torch.cat([styles[j] for _, j in combos]))
        images = {k: four[i * b:(i + 1) * b] for i, k in enumerate(combos)}
        x_fake = images[(0, 0)]

        out = D(x_fake)
        fake_logit = out.adv_logits.gather(1, batch.y_trg.view(-1, 1)).squeeze(1)
        c_rec, s_rec = E(x_fake, batch.y_trg)
        c_src, s_src = E(batch.x, batch.y)
        x_cyc, state_fake = G(x_fake, c_src, s_src)
        parts = {
            "adv_g": L.adv_loss_g(fake_logit),
            "sd_rec": L.sd_rec_loss(c1, c_rec, s1, s_rec),
            "d_rec": L.d_rec_loss(state.fg_code_extracted, c_src, state_fake.fg_code_extracted, c_rec),
            "ds": L.diversity_loss(images),
            "cyc": L.cycle_loss(batch.x, x_cyc),
            "fg_cls_fake": L.fg_cls_loss(out.fg_logits, batch.y_trg),
            # product target is the SOURCE image's product
            "bg_cls_fake": L.bg_cls_loss(out.bg_logits, batch.p),
        }
        return parts

    def g_phase(self, batch: Batch, gen: torch.Generator) -> dict:
        opts = self.state.opts
        D = self.state.nets.D
        D.requires_grad_(False)
        try:
            parts = self.generator_terms(batch, gen)
            total_g, _ = L.compose(parts, self.cfg.train.weights, self.state.step)
            for k in ("G", "E", "M"):
                opts[k].zero_grad(set_to_none=True)
            total_g.backward()
            for k in ("G", "E", "M"):
                opts[k].step()
        finally:
            D.requires_grad_(True)
        return parts

    @torch.no_grad()
    def probe_losses(self, n_batches: int = 4, key: int = 10**9) -> dict[str, float]:
        """Generator-side terms on fixed held-aside batches, half per guidance mode; no updates."""
        acc: dict[str, float] = {}
        for k in range(n_batches):
            batch, gen = self.make_batch(key + k, reference=bool(k % 2))
            for name, v in self.generator_terms(batch, gen).items():
                acc[name] = acc.get(name, 0.0) + float(v) / n_batches
        return acc

    def train_step(self) -> L.LossReport:
        step = self.state.step
        batch, gen = self.make_batch(step)
        parts = self.d_phase(batch, gen)
        parts.update(self.g_phase(batch, gen))
        report = L.make_report({k: v.detach() for k, v in parts.items()}, self.cfg.train.weights, step)
        bad = report.non_finite()
        if bad:
            raise NonFiniteLossError(bad, step)
        decay = self.cfg.train.ema_decay
        for k in EMA_GROUPS:
            ema_update(self.state.ema[k], self.state.nets.modules()[k], decay)
        self.state.step += 1
        return report

    def run(self, until: int, out_dir: Optional[Path] = None,
            callback: Optional[Callable[[int, L.LossReport], None]] = None) -> list[L.LossReport]:
        """Train until ``state.step == until``; appends to ``out_dir/train_log.csv`` when given."""
        t = self.cfg.train
        reports = []
        log_fh = None
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            log_path = out_dir / "train_log.csv"
            fresh = not log_path.exists() or self.state.step == 0
            if not fresh:
                _truncate_log(log_path, self.state.step)
            log_fh = open(log_path, "w" if fresh else "a", encoding="utf-8")
            if fresh:
                log_fh.write(L.report_csv_header() + "\n")
        try:
            while self.state.step < until:
                step = self.state.step
                report = self.train_step()
                reports.append(report)
                if log_fh and (step % t.log_every == 0 or self.state.step == until):
                    log_fh.write(L.report_csv_row(step, report) + "\n")
                    log_fh.flush()
                if callback:
                    callback(step, report)
                if out_dir is not None and (self.state.step % t.checkpoint_every == 0
                                            or self.state.step == until):
                    path = out_dir / f"ckpt_{self.state.step:06d}.dtgan"
                    save_checkpoint(path, self.state)
                    with open(out_dir / "checkpoints.jsonl", "a", encoding="utf-8") as fh:
                        fh.write(json.dumps({"step": self.state.step, "checkpoint": path.name,
                                             "config_hash": self.cfg.digest(),
                                             "wall_clock": time.time()}, sort_keys=True) + "\n")
        finally:
            if log_fh:
                log_fh.close()
        return reports


def _truncate_log(path: Path, step: int) -> None:
    """Drop rows at or beyond ``step`` so a resumed run does not duplicate them."""
    lines = path.read_text(encoding="utf-8").splitlines(keepends=True)
    kept = lines[:1] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) < step]
    path.write_text("".join(kept), encoding="utf-8")


# checkpoints ------------------------------------------------------------------

_DTYPES = {torch.float32: "f4", torch.float64: "f8", torch.int64: "i8", torch.uint8: "u1"}
_DTYPES_INV = {v: k for k, v in _DTYPES.items()}


def _tensor_groups(state: TrainState) -> tuple[dict, dict]:
    tensors: dict[str, torch.Tensor] = {}
    meta: dict = {}
    for name, mod in state.nets.modules().items():
        for k, v in mod.state_dict().items():
            tensors[f"{name}/{k}"] = v
    for name, mod in state.ema.items():
        for k, v in mod.state_dict().items():
            tensors[f"{name}_ema/{k}"] = v
    for name, opt in state.opts.items():
        sd = opt.state_dict()
        meta[f"opt_{name}"] = sd["param_groups"]
        for pid, pstate in sd["state"].items():
            for k, v in pstate.items():
                tensors[f"opt_{name}/{pid}/{k}"] = torch.as_tensor(v)
    return tensors, meta


def checkpoint_bytes(state: TrainState) -> bytes:
    tensors, meta = _tensor_groups(state)
    index, blobs, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        raw = t.numpy().tobytes()
        index.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format": "dtgan-checkpoint", "version": CKPT_VERSION,
        "config": state.config.to_flat(), "step": state.step,
        "rng": {"scheme": "keyed-per-step", "seed": state.config.train.seed, "next_step": state.step},
        "optimizers": meta, "tensors": index,
    }
    hbytes = json.dumps(header, sort_keys=True, default=list).encode()
    body = CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(hbytes)) + hbytes + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(path: str | Path, state: TrainState) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(state))
    tmp.replace(path)


def load_checkpoint(path: str | Path, expect: Optional[RunConfig] = None) -> TrainState:
    """Parse a checkpoint into a new TrainState; never mutates existing objects."""
    data = Path(path).read_bytes()
    if len(data) < len(CKPT_MAGIC) + 12 + 32 or not data.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: not a dtgan checkpoint")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt file)")
    version, hlen = struct.unpack_from("<IQ", body, len(CKPT_MAGIC))
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {CKPT_VERSION}")
    start = len(CKPT_MAGIC) + 12
    try:
        header = json.loads(body[start:start + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: unreadable header") from exc
    blob = memoryview(body)[start + hlen:]
    config = RunConfig.from_flat(header["config"])
    if expect is not None and expect.model != config.model:
        raise CheckpointError(f"{path}: model config does not match the requested config")

    tensors = {}
    for e in header["tensors"]:
        arr = np.frombuffer(blob[e["offset"]:e["offset"] + e["nbytes"]],
                            dtype=np.dtype(e["dtype"]).newbyteorder("<")).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.copy()).to(_DTYPES_INV[e["dtype"]])

    state = TrainState.fresh(config)
    state.step = int(header["step"])
    try:
        for name, mod in list(state.nets.modules().items()) + [(f"{k}_ema", m) for k, m in state.ema.items()]:
            prefix = name + "/"
            mod.load_state_dict({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
        for name, opt in state.opts.items():
            prefix = f"opt_{name}/"
            per: dict = {}
            for k, v in tensors.items():
                if k.startswith(prefix):
                    pid, key = k[len(prefix):].split("/", 1)
                    per.setdefault(int(pid), {})[key] = v
            opt.load_state_dict({"state": per, "param_groups": header["optimizers"][f"opt_{name}"]})
    except (RuntimeError, KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: inconsistent tensors: {exc}") from exc
    return state

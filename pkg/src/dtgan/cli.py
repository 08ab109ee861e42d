"""``dtgan`` command line: make-data, train, synth, eval, augment-bench.

Exit codes
    0  success
    1  unexpected internal error
    2  invalid input (bad config/spec, missing files, insufficient samples)
    3  split leak (training asked to read val/test)
    4  non-finite loss during training
    5  unknown domain name
    6  leak check failed (synthetic image found in val/test) or provenance audit failed

Errors go to stderr as one line: ``dtgan: error code=<n> kind=<kind>: <message>``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from filelock import FileLock, Timeout

from . import __version__
from .core import (ANCHOR_ID, ConfigError, ImageSet, LabeledSample, RunConfig, UnknownDomainError,
                   domain_schema, load_config, make_rng, parse_domain, product_schema, sample_latent)
from .datagen import (ProceduralSpec, file_sha256, few_shot_subset, generate_procedural, ingest_folder,
                      load_png, load_samples, load_spec, validate_spec, write_dataset)
from .evaluation import (EvalReport, LeakError, fid_proxy, nn_audit, pairwise_diversity, train_defect_classifier,
                         train_probe)
from .synthesis import (EmptyReferencePoolError, SnapshotError, augment_dataset, balance_recipe, load_snapshot,
                        synth_latent, synth_reference, write_outputs)
from .training import CheckpointError, NonFiniteLossError, Trainer, TrainState, load_checkpoint

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT, EXIT_SPLIT, EXIT_NONFINITE, EXIT_DOMAIN, EXIT_LEAK = 0, 1, 2, 3, 4, 5, 6


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code, self.kind = code, kind


def configure_threads() -> int:
    """Single worker unless ``DTGAN_NUM_WORKERS`` says otherwise."""
    raw = os.environ.get("DTGAN_NUM_WORKERS", "1")
    try:
        n = max(1, int(raw))
    except ValueError:
        raise CliError(EXIT_INPUT, "config", f"DTGAN_NUM_WORKERS must be an integer, got {raw!r}") from None
    torch.set_num_threads(n)
    torch.set_flush_denormal(True)
    return n


# experiment manifest ----------------------------------------------------------

class ExperimentManifest:
    """Written at start (status=running) and rewritten at exit (status=ok|error)."""

    def __init__(self, path: Path, subcommand: str, config: dict, seed: int, inputs: dict):
        self.path = path
        self.data = {"subcommand": subcommand, "config": config, "seed": seed,
                     "version": __version__, "python": platform.python_version(),
                     "torch": torch.__version__, "inputs": inputs, "outputs": [],
                     "status": "running", "wall_clock": {"started": time.time()}}
        self._write()

    def _write(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, indent=1, sort_keys=True) + "\n", encoding="utf-8")

    def finalize(self, outputs: Sequence[Path], status: str = "ok", error: str = ""):
        base = self.path.parent
        self.data["outputs"] = sorted(os.path.relpath(p, base) for p in outputs)
        self.data["status"] = status
        if error:
            self.data["error"] = error
        self.data["wall_clock"]["finished"] = time.time()
        self._write()


def _hash_inputs(paths: dict) -> dict:
    out = {}
    for key, p in paths.items():
        if p is None:
            continue
        p = Path(p)
        if p.is_file():
            out[key] = {"path": str(p), "sha256": file_sha256(p)}
        elif p.is_dir():
            h = hashlib.sha256()
            for f in sorted(x for x in p.rglob("*.png")):
                h.update(str(f.relative_to(p)).encode())
                h.update(file_sha256(f).encode())
            out[key] = {"path": str(p), "sha256": h.hexdigest()}
    return out


def _need_dir(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise CliError(EXIT_INPUT, "missing-input", f"{what} {p} is not a directory")
    return p


def _need_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(EXIT_INPUT, "missing-input", f"{what} {p} does not exist")
    return p


def _load_split(data_dir: Path, split: str):
    manifest = ingest_folder(data_dir)
    samples = load_samples(manifest, split)
    if not samples:
        raise CliError(EXIT_INPUT, "data", f"{split} split under {data_dir} is empty")
    return manifest, samples


def _with_manifest(path: Path, subcommand: str, config: dict, seed: int, inputs: dict, body):
    man = ExperimentManifest(path, subcommand, config, seed, _hash_inputs(inputs))
    try:
        outputs = body()
    except BaseException as exc:
        man.finalize([], "error", str(exc).splitlines()[0] if str(exc) else type(exc).__name__)
        raise
    man.finalize(outputs)
    return outputs


# make-data ----------------------------------------------------------------------

def cmd_make_data(args) -> list[Path]:
    spec = load_spec(_need_file(args.spec, "spec file")) if args.spec else ProceduralSpec.for_size(args.image_size)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    validate_spec(spec)
    out = Path(args.out)

    def body():
        samples = generate_procedural(spec)
        manifest = write_dataset(samples, out, spec)
        for w in manifest.warnings:
            print(f"warning: {w}", file=sys.stderr)
        return [out / "manifest.json"]

    flat = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(spec).items() if k != "products"}
    return _with_manifest(out / "experiment.json", "make-data", flat, spec.seed, {"spec": args.spec}, body)


# train --------------------------------------------------------------------------

def _train_config(args, image_size: int, base: Optional[RunConfig] = None) -> RunConfig:
    if args.config:
        cfg = load_config(_need_file(args.config, "config file"))
    else:
        cfg = base or RunConfig().replace(image_size=image_size)
    overrides = {}
    if args.total_steps is not None:
        overrides["total_steps"] = args.total_steps
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = cfg.replace(**overrides) if overrides else cfg
    if cfg.model.image_size != image_size:
        raise ConfigError(f"image_size {cfg.model.image_size} does not match data ({image_size})")
    return cfg


def cmd_train(args) -> list[Path]:
    if args.split != "train":
        raise CliError(EXIT_SPLIT, "split-leak", f"GAN training may only read the train split, not {args.split!r}")
    data_dir = _need_dir(args.data, "data directory")
    manifest, samples = _load_split(data_dir, "train")
    if args.subset == "20A":
        samples = few_shot_subset(samples, product=0, cap=20)
    resumed = load_checkpoint(_need_file(args.resume, "checkpoint")) if args.resume else None
    cfg = _train_config(args, manifest.image_size, resumed.config if resumed else None)
    if resumed is not None:
        # only the step budget may change, anything else would fork the trajectory
        old, new = resumed.config.to_flat(), cfg.to_flat()
        diff = sorted(k for k in new if k != "total_steps" and old.get(k) != new[k])
        if diff:
            raise ConfigError(f"resume config differs from the checkpoint in: {', '.join(diff)}")
        resumed.config = cfg
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def body():
        state = resumed if resumed is not None else TrainState.fresh(cfg)
        trainer = Trainer(state, ImageSet.from_samples(samples))
        trainer.run(cfg.train.total_steps, out)
        outputs = sorted(out.glob("ckpt_*.dtgan")) + [out / "train_log.csv", out / "checkpoints.jsonl"]
        if args.plot:
            from .plotting import plot_loss_curves
            outputs.append(plot_loss_curves(out / "train_log.csv", out / "loss_curves.png"))
        return outputs

    try:
        with FileLock(str(out / ".lock"), timeout=0):
            return _with_manifest(out / "experiment.json", "train", cfg.to_flat(), cfg.train.seed,
                                  {"data": data_dir, "config": args.config, "resume": args.resume}, body)
    except Timeout:
        raise CliError(EXIT_INPUT, "locked", f"checkpoint directory {out} is in use by another run") from None


# synth --------------------------------------------------------------------------

def _source_images(src: Path) -> list[Path]:
    if src.is_dir():
        files = sorted(f for f in src.glob("*.png") if not f.name.endswith(".mask.png"))
        if not files:
            raise CliError(EXIT_INPUT, "missing-input", f"no PNG files in {src}")
        return files
    return [_need_file(str(src), "source image")]


def _product_of(path: Path, products: Sequence[str]) -> str:
    # dataset layout: <product>/<domain>/<split>/<file>
    parts = path.resolve().parts
    return parts[-4] if len(parts) >= 4 and parts[-4] in products else "unknown"


def cmd_synth(args) -> list[Path]:
    if args.mode == "latent" and (args.defect_ref or args.style_ref):
        raise CliError(EXIT_INPUT, "usage", "--defect-ref/--style-ref conflict with --mode latent")
    if args.count < 1:
        raise CliError(EXIT_INPUT, "usage", "--count must be >= 1")
    ckpt = _need_file(args.ckpt, "checkpoint")
    nets, cfg = load_snapshot(ckpt)
    target = parse_domain(args.target, cfg.model.n_domains)
    if args.mode == "reference" and args.defect_ref is None and not target.is_anchor:
        raise CliError(EXIT_INPUT, "usage", "--mode reference requires --defect-ref")
    sources = _source_images(Path(args.source))
    products = [p.name for p in product_schema(cfg.model.n_products)]
    out = Path(args.out)

    def body():
        images, records = [], []
        dref = load_png(_need_file(args.defect_ref, "defect reference")) if args.defect_ref else None
        sref = load_png(_need_file(args.style_ref, "style reference")) if args.style_ref else dref
        for i, path in enumerate(sources):
            src = torch.from_numpy(load_png(path))
            if src.shape[1:] != (cfg.model.image_size,) * 2:
                raise ConfigError(f"{path}: size {tuple(src.shape[1:])} != checkpoint image_size")
            base = {"source": path.name, "target_domain": target.name,
                    "product": _product_of(path, products), "guidance": args.mode, "seed": args.seed}
            if args.mode == "latent":
                gen = make_rng(args.seed, 61, i)
                zs = sample_latent(gen, cfg.model.latent_dim, args.count)
                outs = synth_latent(nets, src, target, zs, gen)
            else:
                d = src.numpy() if dref is None else dref
                s = src.numpy() if sref is None else sref
                outs = synth_reference(nets, src, target, torch.from_numpy(d), torch.from_numpy(s)).unsqueeze(0)
                if args.defect_ref:
                    base.update(defect_ref=Path(args.defect_ref).name,
                                style_ref=Path(args.style_ref or args.defect_ref).name)
                outs = outs.expand(args.count, -1, -1, -1)
            images.extend(outs)
            records.extend({**base, "sample": k} for k in range(len(outs)))
        paths = write_outputs(torch.stack(images), out, records)
        return paths + [out / "manifest.jsonl"]

    cfg_flat = {"mode": args.mode, "target": target.name, "count": args.count, "checkpoint": str(ckpt)}
    return _with_manifest(out / "experiment.json", "synth", cfg_flat, args.seed,
                          {"ckpt": ckpt, "source": args.source, "defect_ref": args.defect_ref,
                           "style_ref": args.style_ref}, body)


# eval ---------------------------------------------------------------------------

def _report_paths(report: Path, suffix: str) -> Path:
    return report.with_name(f"{report.stem}_{suffix}")


def _generate_eval_set(nets, normals: list[LabeledSample], target: int, n: int, seed: int, latent_dim: int):
    rng = np.random.default_rng([seed, 71, target])
    pick = rng.integers(0, len(normals), n)
    src = torch.from_numpy(np.stack([normals[i].image for i in pick]))
    gen = make_rng(seed, 72, target)
    zs = sample_latent(gen, latent_dim, n)
    out = synth_latent(nets, src, target, zs, gen)
    # quantize as written to disk so fakes and reals share a value grid
    return torch.round((out.clamp(-1, 1) + 1) * 127.5) / 127.5 - 1


def cmd_eval(args) -> list[Path]:
    data_dir = _need_dir(args.data, "data directory")
    report = Path(args.report)
    _, train_samples = _load_split(data_dir, "train")
    train = ImageSet.from_samples(train_samples)
    cfg = RunConfig()
    if args.config:
        cfg = load_config(_need_file(args.config, "config file"))
    ev = cfg.eval
    n_per = args.samples or ev.samples_per_domain
    seed = args.seed
    domains = domain_schema(3)

    if args.fake:
        _, fake_samples = _load_split(_need_dir(args.fake, "fake directory"), "train")
        fake = ImageSet.from_samples(fake_samples)
        fakes = {d.name: fake.images[fake.domains == d.id] for d in domains}
        source = str(args.fake)
    else:
        if not args.ckpt:
            raise CliError(EXIT_INPUT, "usage", "eval needs --ckpt or --fake")
        nets, run_cfg = load_snapshot(_need_file(args.ckpt, "checkpoint"))
        normals = [s for s in train_samples if s.domain.id == ANCHOR_ID]
        if not normals:
            raise CliError(EXIT_INPUT, "data", "train split has no Normal images to translate")
        fakes = {d.name: _generate_eval_set(nets, normals, d.id, n_per, seed, run_cfg.model.latent_dim)
                 for d in domains}
        source = "latent"

    def body():
        probe = train_probe(train, dim=ev.probe_dim, epochs=ev.probe_epochs, seed=seed)
        rep = EvalReport(probe=f"{probe.tag}(dim={probe.dim},seed={seed})")
        all_fake = []
        for d in domains:
            real_d, fake_d = train.images[train.domains == d.id], fakes[d.name]
            if len(real_d) <= probe.dim or len(fake_d) <= probe.dim:
                raise CliError(EXIT_INPUT, "insufficient-samples",
                               f"{d.name}: need more than {probe.dim} real and fake samples "
                               f"(have {len(real_d)} real, {len(fake_d)} fake)")
            rep.fid_proxy[d.name] = fid_proxy(real_d, fake_d, probe)
            rep.pairwise_diversity[d.name] = pairwise_diversity(fake_d, probe)
            all_fake.append(fake_d)
        gen_all = torch.cat(all_fake)
        audit = nn_audit(gen_all, train.images)
        rep.nn_audit = audit.summary()
        _, prod_pred = probe.predict(train.images)
        rep.extra = {"fake_source": source, "samples_per_domain": {k: int(len(v)) for k, v in fakes.items()},
                     "probe_train_product_accuracy": float((prod_pred == train.products.numpy()).mean())}
        rep.validate()
        report.parent.mkdir(parents=True, exist_ok=True)
        report.write_text(rep.to_json() + "\n", encoding="utf-8")
        from .plotting import plot_metric_bars, save_grid, save_nn_audit
        figs = [
            save_nn_audit(gen_all, train.images, audit.nearest, _report_paths(report, "nn_audit.png")),
            save_grid(torch.cat([v[:8] for v in fakes.values()]), _report_paths(report, "samples.png"),
                      cols=8, scale=2),
            plot_metric_bars(rep.fid_proxy, _report_paths(report, "fid_proxy.png"), "fid_proxy (probe)"),
        ]
        return [report] + figs

    return _with_manifest(_report_paths(report, "experiment.json"), "eval", {"samples_per_domain": n_per,
                          **{k: v for k, v in cfg.to_flat().items() if k.startswith("probe")}}, seed,
                          {"data": data_dir, "ckpt": args.ckpt, "fake": args.fake}, body)


# augment-bench ------------------------------------------------------------------

BENCH_POLICIES = ("none", "latent", "v-same", "v-others", "v-abc")
BENCH_SUBSETS = ("all", "20A")


def _csv_list(raw: str, allowed: Sequence[str], what: str) -> list[str]:
    items = [x.strip() for x in raw.split(",") if x.strip()]
    lut = {a.lower(): a for a in allowed}
    bad = [x for x in items if x.lower() not in lut]
    if bad or not items:
        raise CliError(EXIT_INPUT, "usage", f"{what} must be from {','.join(allowed)}; got {raw!r}")
    return [lut[x.lower()] for x in items]


def provenance_audit(policy: str, synthetic: Sequence[LabeledSample]) -> dict:
    """Reference-product bookkeeping; ``violations`` counts policy breaches."""
    counts: dict[str, int] = {}
    violations = 0
    for s in synthetic:
        ref = s.provenance.get("reference_product")
        if ref is None:
            continue
        counts[ref] = counts.get(ref, 0) + 1
        same = ref == s.product.name
        if (policy == "v-same" and not same) or (policy == "v-others" and same):
            violations += 1
    return {"policy": policy, "n": len(synthetic), "reference_products": dict(sorted(counts.items())),
            "violations": violations}


def subset_audit(samples: Sequence[LabeledSample]) -> dict:
    out: dict[str, int] = {}
    for s in samples:
        if not s.domain.is_anchor:
            key = f"{s.product.name}/{s.domain.name}"
            out[key] = out.get(key, 0) + 1
    return dict(sorted(out.items()))


def build_synthetic(nets, train_samples: list[LabeledSample], policy: str, seed: int) -> list[LabeledSample]:
    """Balance every (product, defect) cell up to that product's Normal count."""
    defects = [s for s in train_samples if not s.domain.is_anchor]
    out = []
    for p in sorted({s.product.id for s in train_samples}):
        normals = [s for s in train_samples if s.product.id == p and s.domain.is_anchor]
        recipe = balance_recipe(train_samples, product=p)
        if normals and sum(recipe.values()):
            out += augment_dataset(nets, normals, recipe, policy, defects, seed=seed * 1000 + p)
    return out


def cmd_augment_bench(args) -> list[Path]:
    policies = _csv_list(args.policy, BENCH_POLICIES, "--policy")
    subsets = _csv_list(args.subset, BENCH_SUBSETS, "--subset")
    if args.seeds < 1:
        raise CliError(EXIT_INPUT, "usage", "--seeds must be >= 1")
    data_dir = _need_dir(args.data, "data directory")
    report = Path(args.report)
    cfg = load_config(_need_file(args.config, "config file")) if args.config else RunConfig()
    clf = replace(cfg.classifier, seeds=tuple(range(args.seeds)))
    if args.epochs:
        clf = replace(clf, clf_epochs=args.epochs)
    _, train_all = _load_split(data_dir, "train")
    val = ImageSet.from_samples(_load_split(data_dir, "val")[1])
    test = ImageSet.from_samples(_load_split(data_dir, "test")[1])
    nets = None
    if any(p != "none" for p in policies):
        nets = load_snapshot(_need_file(args.ckpt or "", "checkpoint"))[0]

    def body():
        rows = []
        for subset in subsets:
            train_samples = few_shot_subset(train_all, 0, 20) if subset == "20A" else list(train_all)
            train = ImageSet.from_samples(train_samples)
            for policy in policies:
                synthetic, audit = None, None
                if policy != "none":
                    syn = build_synthetic(nets, train_samples, policy, args.seed)
                    audit = provenance_audit(policy, syn)
                    if audit["violations"]:
                        raise LeakError(f"provenance audit failed for {policy}: {audit['violations']} violations")
                    synthetic = ImageSet.from_samples(syn)
                rates = train_defect_classifier(train, synthetic, val, test, clf, f"{policy}/{subset}")
                rows.append({**rates.as_dict(), "policy": policy, "subset": subset,
                             "n_train": len(train), "n_synthetic": 0 if synthetic is None else len(synthetic),
                             "subset_audit": subset_audit(train_samples), "provenance_audit": audit})
                print(f"{policy:>8} {subset:>4}  error {rates.mean:.4f} +- {rates.std:.4f}", file=sys.stderr)
        report.parent.mkdir(parents=True, exist_ok=True)
        report.write_text(json.dumps({"rows": rows, "seeds": list(clf.seeds)}, indent=1, sort_keys=True) + "\n",
                          encoding="utf-8")
        csv_path = _report_paths(report, "error_rates.csv")
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["policy", "subset", "seed", "error_rate"])
            for r in rows:
                for s, e in zip(clf.seeds, r["rates"]):
                    w.writerow([r["policy"], r["subset"], s, repr(e)])
        from .plotting import plot_error_rates
        fig = plot_error_rates({f"{r['policy']}\n{r['subset']}": r["rates"] for r in rows},
                               _report_paths(report, "error_rates.png"))
        return [report, csv_path, fig]

    flat = {k: v for k, v in cfg.to_flat().items() if k.startswith(("clf_", "grl_"))}
    flat.update(policies=policies, subsets=subsets, seeds=args.seeds, clf_epochs=clf.clf_epochs)
    return _with_manifest(_report_paths(report, "experiment.json"), "augment-bench", flat, args.seed,
                          {"data": data_dir, "ckpt": args.ckpt, "config": args.config}, body)


# entry point --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dtgan", description=__doc__.split("\n")[0],
                                 formatter_class=argparse.RawDescriptionHelpFormatter,
                                 epilog=__doc__.split("\n", 2)[2])
    ap.add_argument("--version", action="version", version=f"dtgan {__version__}")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("make-data", help="render the procedural dataset")
    p.add_argument("--spec", help="key = value spec file (defaults if omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_make_data)

    p = sub.add_parser("train", help="train on the train split of a dataset folder")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--total-steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--subset", choices=BENCH_SUBSETS, default="all")
    p.add_argument("--split", default="train", help="must be 'train'; anything else is refused")
    p.add_argument("--plot", action="store_true", help="also render loss_curves.png")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("synth", help="translate source images to a target domain")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mode", choices=("latent", "reference"), required=True)
    p.add_argument("--source", required=True, help="PNG file or folder of PNGs")
    p.add_argument("--target", required=True)
    p.add_argument("--defect-ref")
    p.add_argument("--style-ref")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("eval", help="fid_proxy, diversity and nearest-neighbour audit")
    p.add_argument("--ckpt")
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--fake", help="dataset folder used as the generated set instead of --ckpt")
    p.add_argument("--config")
    p.add_argument("--samples", type=int, help="generated samples per domain")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("augment-bench", help="downstream classifier error with synthetic augmentation")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--policy", required=True, help="comma list of " + ",".join(BENCH_POLICIES))
    p.add_argument("--subset", default="all", help="comma list of " + ",".join(BENCH_SUBSETS))
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--epochs", type=int, help="override clf_epochs")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", required=True)
    p.set_defaults(fn=cmd_augment_bench)
    return ap


def _classify(exc: BaseException) -> tuple[int, str]:
    if isinstance(exc, CliError):
        return exc.code, exc.kind
    if isinstance(exc, UnknownDomainError):
        return EXIT_DOMAIN, "unknown-domain"
    if isinstance(exc, NonFiniteLossError):
        return EXIT_NONFINITE, "non-finite-loss"
    if isinstance(exc, LeakError):
        return EXIT_LEAK, "leak"
    if isinstance(exc, (ConfigError, CheckpointError)):
        return EXIT_INPUT, "config"
    if isinstance(exc, (FileNotFoundError, EmptyReferencePoolError, SnapshotError)):
        return EXIT_INPUT, "missing-input"
    if isinstance(exc, ValueError):
        return EXIT_INPUT, "invalid"
    return EXIT_INTERNAL, "internal"


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        configure_threads()
        args.fn(args)
    except Exception as exc:  # noqa: BLE001 - mapped to stable exit codes
        code, kind = _classify(exc)
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"dtgan: error code={code} kind={kind}: {msg}", file=sys.stderr)
        if code == EXIT_INTERNAL and os.environ.get("DTGAN_DEBUG"):
            raise
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""End-to-end acceptance checks; each test prints one PASS/FAIL line per criterion."""

import hashlib
import json
import shutil
import statistics
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from dtgan.cli import main
from dtgan.core import RunConfig, load_config, make_rng, sample_latent, save_config
from dtgan.evaluation import fid_proxy, nn_audit, pairwise_diversity
from dtgan.networks import build_nets

import frechet_cases
import loss_cases
import smoke

pytestmark = pytest.mark.slow


def _fmt(x: float) -> str:
    return f"{x:.4g}"


# 1 ----------------------------------------------------------------------------

def test_criterion_1_loss_units(criterion):
    t0 = time.perf_counter()
    closed = [(name, abs(got - want)) for name, got, want in loss_cases.closed_form_cases()]
    grads = loss_cases.gradient_cases()
    pairs = loss_cases.diversity_pair_calls()
    seconds = time.perf_counter() - t0
    worst_closed = max(closed, key=lambda c: c[1])
    worst_grad = max(grads, key=lambda g: g[1])
    terms = {name for name, _ in grads}
    criterion(1, {
        "closed-form <= 1e-6": (worst_closed[1] <= 1e-6, f"{len(closed)} cases, worst {_fmt(worst_closed[1])}"),
        "finite differences < 1e-4": (worst_grad[1] < 1e-4,
                                      f"{len(grads)} terms, worst {worst_grad[0]} {_fmt(worst_grad[1])}"),
        "all seven terms covered": ({"adv_d", "adv_g", "sd_rec", "d_rec", "ds", "cyc", "cls"} <= terms,
                                    ",".join(sorted(terms))),
        "diversity uses 6 distinct pairs": (len(pairs) == 6 and len({frozenset(p) for p in pairs}) == 6,
                                            f"{len(pairs)} calls"),
        "runtime < 60 s": (seconds < 60, f"{seconds:.1f}s"),
    })


# 2 ----------------------------------------------------------------------------

@torch.no_grad()
def test_criterion_2_disentanglement(criterion):
    t0 = time.perf_counter()
    nets = build_nets(RunConfig().model, seed=0)
    cfg = nets.G.cfg
    z = sample_latent(make_rng(20), cfg.latent_dim, 100) * 10
    m_code, _ = nets.M(z, 0, make_rng(21))
    x = torch.rand(100, 3, cfg.image_size, cfg.image_size, generator=make_rng(22)) * 2 - 1
    e_code, _ = nets.E(x, 0)

    src = x[:4]
    state = nets.G.encode(src)
    code = nets.E(x[4:8], 1)[0]
    bg_ref = None
    identical = True
    for k in range(20):
        style = torch.randn(4, cfg.style_dim, generator=make_rng(23, k)) * 3
        _, st = nets.G(src, code, style)
        bg_ref = st.bg_stack if bg_ref is None else bg_ref
        identical &= torch.equal(bg_ref, st.bg_stack)

    h = nets.G.from_rgb(src)
    for blk in nets.G.encoder:
        h = blk(h)
    full = nets.G.to_bottleneck(h)
    split = torch.cat([state.bg_features, state.fg_code_extracted], 1)
    seconds = time.perf_counter() - t0
    criterion(2, {
        "M Normal codes exactly zero (100 z)": (not m_code.any(), f"max |c| {float(m_code.abs().max())}"),
        "E Normal codes exactly zero (100 images)": (not e_code.any(), f"max |c| {float(e_code.abs().max())}"),
        "BG stack bit-identical over 20 styles": (bool(identical), "torch.equal"),
        "FG/BG split is a partition": (torch.equal(split, full) and split.shape[1] == cfg.bottleneck_channels,
                                       f"{state.bg_features.shape[1]}+{state.fg_code_extracted.shape[1]} channels"),
        "runtime < 60 s": (seconds < 60, f"{seconds:.1f}s"),
    })


# 3 ----------------------------------------------------------------------------

def test_criterion_3_frechet(criterion):
    t0 = time.perf_counter()
    cases = frechet_cases.cases()
    seconds = time.perf_counter() - t0
    bad = [name for name, v, e, tol in cases if not abs(v - e) < tol]
    worst = max(cases, key=lambda c: abs(c[1] - c[2]) / c[3])
    criterion(3, {
        "oracle cases within tolerance": (not bad, f"{len(cases)} cases (identical, 1-D, diagonal, symmetry), "
                                                   f"worst {worst[0]!r} err {_fmt(abs(worst[1] - worst[2]))}"
                                                   + (f", failing {bad}" if bad else "")),
        "runtime < 10 s": (seconds < 10, f"{seconds:.2f}s"),
    })


# 4 ----------------------------------------------------------------------------

def _mean_fid(nets, seed):
    train, _ = smoke.dataset()
    probe = smoke.probe()
    vals = []
    for d in range(3):
        fakes, _ = smoke.latent_fakes(nets, d, 64, seed)
        vals.append(fid_proxy(train.images[train.domains == d], fakes, probe))
    return float(np.mean(vals))


def test_criterion_4_smoke_training(criterion):
    runs = [smoke.smoke_run(s) for s in smoke.SEEDS]
    med = {term: (statistics.median(r.losses_before[term] for r in runs),
                  statistics.median(r.losses_after[term] for r in runs)) for term in ("cyc", "sd_rec")}
    fids = [(_mean_fid(r.initial, r.seed), _mean_fid(r.ema, r.seed)) for r in runs]
    fg = [smoke.fg_balanced_accuracy(r)[0] for r in runs]
    bg = [smoke.bg_agreement(r) for r in runs]
    slowest = max(r.seconds for r in runs)
    criterion(4, {
        "cyc final < initial (median of 3)": (med["cyc"][1] < med["cyc"][0],
                                             f"{_fmt(med['cyc'][0])} -> {_fmt(med['cyc'][1])}"),
        "sd_rec final < initial (median of 3)": (med["sd_rec"][1] < med["sd_rec"][0],
                                                f"{_fmt(med['sd_rec'][0])} -> {_fmt(med['sd_rec'][1])}"),
        "fid_proxy final < step-0 snapshot (every seed)": (all(b < a for a, b in fids),
                                                            " ".join(f"{a:.2f}->{b:.2f}" for a, b in fids)),
        "D FG held-out balanced accuracy >= 0.80 (median of 3)": (statistics.median(fg) >= 0.80,
                                                                   "per seed " + " ".join(f"{v:.3f}" for v in fg)),
        "BG product agreement on synthesized >= 0.90 (every seed)": (min(bg) >= 0.90,
                                                                      " ".join(f"{v:.3f}" for v in bg)),
        "<= 2000 steps, <= 30 min per run": (slowest <= 1800 and all(r.trainer.state.step <= 2000 for r in runs),
                                             f"slowest {slowest:.0f}s on {torch.get_num_threads()} thread(s)"),
    })


# 5 ----------------------------------------------------------------------------

def test_criterion_5_diversity_vs_memorization(criterion):
    run = smoke.smoke_run(0)
    t0 = time.perf_counter()
    train, _ = smoke.dataset()
    probe = smoke.probe()
    scratches, _ = smoke.latent_fakes(run.ema, 1, 64, seed=5)
    copies = scratches[:1].expand(64, -1, -1, -1)
    div, div_copies = pairwise_diversity(scratches, probe), pairwise_diversity(copies, probe)
    generated = torch.cat([smoke.latent_fakes(run.ema, d, 64, seed=5)[0] for d in range(3)])
    gen_audit = nn_audit(generated, train.images)
    dup_audit = nn_audit(train.images, train.images)
    seconds = time.perf_counter() - t0
    criterion(5, {
        "diversity(64 Scratches) > diversity(64 copies)": (div > div_copies, f"{_fmt(div)} vs {_fmt(div_copies)}"),
        "nn_audit flags 0 train copies": (not any(gen_audit.copies),
                                          f"{sum(gen_audit.copies)}/{len(generated)}, min dist {_fmt(gen_audit.min)}"),
        "duplicated train set flagged 100%": (all(dup_audit.copies), f"{sum(dup_audit.copies)}/{len(train)}"),
        "runtime < 5 min (after training)": (seconds < 300, f"{seconds:.1f}s"),
    })


# 6 and 7 share one CLI pipeline ---------------------------------------------

POLICIES = ("none", "v-same", "v-others", "v-abc")


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench")
    t0 = time.perf_counter()
    codes = [
        main(["make-data", "--image-size", "16", "--out", str(root / "data")]),
        main(["train", "--data", str(root / "data"), "--config", str(smoke.SMOKE_CONFIG), "--subset", "20A",
              "--out", str(root / "gan")]),
    ]
    ckpt = root / "gan" / "ckpt_002000.dtgan"
    codes.append(main(["augment-bench", "--data", str(root / "data"), "--ckpt", str(ckpt),
                       "--policy", ",".join(POLICIES), "--subset", "20A", "--seeds", "5",
                       "--report", str(root / "bench.json")]))
    seconds = time.perf_counter() - t0
    report = json.loads((root / "bench.json").read_text()) if (root / "bench.json").exists() else {"rows": []}
    return codes, report, seconds


def test_criterion_6_downstream_benefit(criterion, bench):
    codes, report, seconds = bench
    rows = {r["policy"]: r for r in report["rows"]}
    none, abc = rows.get("none"), rows.get("v-abc")
    ok = none is not None and abc is not None
    criterion(6, {
        "pipeline exit codes": (codes == [0, 0, 0], str(codes)),
        "5 seeds per condition": (ok and len(none["rates"]) == len(abc["rates"]) == 5,
                                  str(report.get("seeds"))),
        "mean error v-abc < none (20A)": (ok and abc["mean"] < none["mean"],
                                          f"{abc['mean']:.4f} vs {none['mean']:.4f}" if ok else "missing rows"),
        "runtime < 45 min": (seconds < 2700, f"{seconds:.0f}s"),
    })


def test_criterion_7_cross_product_transfer(criterion, bench):
    codes, report, _ = bench
    rows = {r["policy"]: r for r in report["rows"]}
    checks = {"pipeline exit codes": (codes == [0, 0, 0], str(codes))}
    for policy in ("v-same", "v-others", "v-abc"):
        audit = (rows.get(policy) or {}).get("provenance_audit")
        checks[f"{policy} audit"] = (audit is not None and audit["violations"] == 0 and audit["n"] > 0,
                                     "missing" if audit is None else
                                     f"n={audit['n']} refs={audit['reference_products']} "
                                     f"violations={audit['violations']}")
    abc = (rows.get("v-abc") or {}).get("provenance_audit") or {"reference_products": {}}
    checks["v-abc draws from every product"] = (len(abc["reference_products"]) == 3,
                                                ",".join(abc["reference_products"]))
    caps = (rows.get("none") or {}).get("subset_audit", {})
    checks["20A caps product A at 20 per defect"] = (
        bool(caps) and all(v <= 20 for k, v in caps.items() if k.startswith("A/")), str(caps))
    criterion(7, checks)


# 8 ----------------------------------------------------------------------------

def _tree(root: Path) -> dict[str, str]:
    out = {}
    for p in sorted(root.rglob("*")):
        if not p.is_file() or p.name == ".lock":
            continue
        if p.name.endswith("experiment.json"):
            data = json.loads(p.read_text())
            data.pop("wall_clock")
            blob = json.dumps(data, sort_keys=True).encode()
        elif p.name == "checkpoints.jsonl":
            rows = [json.loads(x) for x in p.read_text().splitlines()]
            blob = json.dumps([{k: v for k, v in r.items() if k != "wall_clock"} for r in rows]).encode()
        else:
            blob = p.read_bytes()
        out[str(p.relative_to(root))] = hashlib.sha256(blob).hexdigest()
    return out


def _pipeline(root: Path, cfg: Path) -> list[int]:
    root.mkdir(parents=True)
    (root / "spec.txt").write_text("image_size = 16\ncounts = 40, 32, 32\nseed = 8\n")
    data, run = root / "data", root / "run"
    ckpt = str(run / "ckpt_000030.dtgan")
    src = str(data / "A" / "Normal" / "train")
    codes = [main(["make-data", "--spec", str(root / "spec.txt"), "--out", str(data)])]
    codes.append(main(["train", "--data", str(data), "--config", str(cfg), "--total-steps", "30",
                       "--out", str(run), "--plot"]))
    spots = sorted((data / "B" / "Spots" / "train").glob("*[0-9].png"))[0]
    codes.append(main(["synth", "--ckpt", ckpt, "--mode", "latent", "--source", src, "--target", "Scratches",
                       "--count", "2", "--seed", "1", "--out", str(root / "synth_latent")]))
    codes.append(main(["synth", "--ckpt", ckpt, "--mode", "reference", "--source", src, "--target", "Spots",
                       "--defect-ref", str(spots), "--out", str(root / "synth_ref")]))
    codes.append(main(["eval", "--ckpt", ckpt, "--data", str(data), "--samples", "20",
                       "--report", str(root / "eval" / "report.json")]))
    codes.append(main(["augment-bench", "--data", str(data), "--ckpt", ckpt, "--policy", "none,v-abc",
                       "--subset", "all,20A", "--seeds", "1", "--epochs", "2",
                       "--report", str(root / "bench" / "report.json")]))
    return codes


def test_criterion_8_reproducibility(criterion, tmp_path):
    cfg = tmp_path / "cfg.txt"
    save_config(load_config(smoke.SMOKE_CONFIG).replace(total_steps=30, checkpoint_every=10), cfg)
    # identical command lines: run, move the tree aside, run again in the same place
    codes_a = _pipeline(tmp_path / "run", cfg)
    shutil.move(tmp_path / "run", tmp_path / "a")
    codes_b = _pipeline(tmp_path / "run", cfg)
    ta, tb = _tree(tmp_path / "a"), _tree(tmp_path / "run")
    differing = sorted(k for k in ta.keys() | tb.keys() if ta.get(k) != tb.get(k))

    resumed = tmp_path / "resumed"
    data = str(tmp_path / "a" / "data")
    base = ["train", "--data", data, "--config", str(cfg), "--out", str(resumed)]
    codes_r = [main(base + ["--total-steps", "10"]),
               main(base + ["--total-steps", "30", "--resume", str(resumed / "ckpt_000010.dtgan")])]
    log_a = (tmp_path / "a" / "run" / "train_log.csv").read_bytes()
    log_r = (resumed / "train_log.csv").read_bytes()
    ck_a = (tmp_path / "a" / "run" / "ckpt_000030.dtgan").read_bytes()
    ck_r = (resumed / "ckpt_000030.dtgan").read_bytes()
    subcommands = {json.loads(p.read_text())["subcommand"] for p in (tmp_path / "a").rglob("*experiment.json")}
    criterion(8, {
        "all subcommands ran": (codes_a == codes_b == [0] * 6 and len(subcommands) == 5,
                                f"{codes_a} {sorted(subcommands)}"),
        "rerun artifacts bit-identical": (not differing and len(ta) > 0,
                                          f"{len(ta)} files, differing: {differing[:5]}"),
        "resume log == uninterrupted log": (codes_r == [0, 0] and log_a == log_r, f"{len(log_a.splitlines())} lines"),
        "resume checkpoint == uninterrupted": (ck_a == ck_r, f"{len(ck_a)} bytes"),
    })

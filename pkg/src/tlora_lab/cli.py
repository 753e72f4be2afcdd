"""Command-line entry point: ``tlora-lab {train,params,analyze,compare,plot}``.

Exit codes: 0 success, 2 usage, 3 data, 4 I/O, 5 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import analysis as an
from .adapters import AdapterConfig, attach_adapters, param_count, site_label
from .data import (
    SynthSpec,
    TsvSchema,
    build_vocab,
    encoded_length,
    fingerprint,
    gen_synthetic,
    load_tsv,
    make_batch,
    write_tsv,
)
from .errors import ConfigError, IncompatibleRunsError, LabError, LabIOError, UsageError
from .model import ModelConfig, build_model, freeze_all
from .runio import INCOMPLETE, csv_text, dump_json, read_csv, read_json, write_text_atomic
from .seeding import derive_seed, make_rng
from .svg import histogram_chart, line_chart
from .training import RunWriter, TrainConfig, baseline_run, evaluate, train

METHODS = ("tlora", "lora", "frozen")


def default_seed() -> int:
    raw = os.environ.get("TLORA_LAB_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"TLORA_LAB_SEED must be an integer, got {raw!r}") from exc


def defaults() -> dict:
    model = ModelConfig(vocab_size=1).to_dict()
    model.pop("vocab_size")
    adapter = AdapterConfig().to_dict()
    adapter["lora_fixed_alpha"] = None
    return {
        "method": "tlora",
        "task": "synth",
        "seed": None,
        "model": model,
        "adapter": adapter,
        "train": TrainConfig().to_dict(),
        "synth": SynthSpec().to_dict(),
        "tsv": {"col_a": "text_a", "col_b": "text_b", "col_label": "label", "labels": ["0", "1"], "val_path": None, "val_fraction": 0.2},
    }


def _merge(base: dict, over: dict, where: str = "") -> dict:
    for key, val in over.items():
        if key not in base:
            if where == "" and key in ("tool_version", "seed_derivations", "dataset_fingerprint", "vocab_size", "max_len", "rank"):
                continue
            raise ConfigError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict) and isinstance(val, dict):
            _merge(base[key], val, f"{where}{key}.")
        else:
            base[key] = val
    return base


def resolve_config(args) -> dict:
    cfg = defaults()
    if args.config:
        _merge(cfg, read_json(Path(args.config)))
    flag_map = {
        "method": ("method",),
        "task": ("task",),
        "seed": ("seed",),
        "rank": ("adapter", "rank"),
        "dropout": ("adapter", "dropout_p"),
        "epochs": ("train", "epochs"),
        "lr": ("train", "learning_rate"),
        "batch": ("train", "batch_size"),
    }
    for flag, path in flag_map.items():
        val = getattr(args, flag, None)
        if val is None:
            continue
        node = cfg
        for p in path[:-1]:
            node = node[p]
        node[path[-1]] = val
    if cfg["seed"] is None:
        cfg["seed"] = default_seed()
    seed = int(cfg["seed"])
    cfg["train"]["seed"] = seed
    if args.config is None or "seed" not in read_json(Path(args.config)).get("synth", {}):
        cfg["synth"]["seed"] = seed
    if cfg["adapter"]["lora_fixed_alpha"] is None:
        cfg["adapter"]["lora_fixed_alpha"] = float(cfg["adapter"]["rank"])
    if cfg["method"] not in METHODS:
        raise UsageError(f"--method must be one of {METHODS}, got {cfg['method']!r}")
    task = cfg["task"]
    if not (task == "synth" or task.startswith("tsv:")):
        raise UsageError(f"--task must be 'synth' or 'tsv:PATH', got {task!r}")
    return cfg


def _load_task(cfg: dict):
    task = cfg["task"]
    if task == "synth":
        spec = SynthSpec(**cfg["synth"])
        return gen_synthetic(spec), TsvSchema()
    t = cfg["tsv"]
    schema = TsvSchema(t["col_a"], t["col_b"], t["col_label"], list(t["labels"]))
    examples = load_tsv(task[4:], schema)
    if t.get("val_path"):
        return (examples, load_tsv(t["val_path"], schema)), schema
    if len(examples) < 2:
        raise ConfigError("tsv task needs at least two rows to split train/validation")
    perm = make_rng(cfg["seed"], "tsv-split").permutation(len(examples))
    n_val = min(max(1, int(round(len(examples) * float(t["val_fraction"])))), len(examples) - 1)
    val = [examples[i] for i in sorted(perm[:n_val])]
    tr = [examples[i] for i in sorted(perm[n_val:])]
    return (tr, val), schema


def _prepare_out(out: Path) -> None:
    if out.exists():
        if not out.is_dir():
            raise LabIOError(f"--out exists and is not a directory: {out}")
        entries = list(out.iterdir())
        if entries and not ((out / "config.json").exists() or (out / INCOMPLETE).exists()):
            raise LabIOError(f"--out {out} is a non-empty directory that is not a run directory")
        for e in entries:
            if e.is_dir():
                shutil.rmtree(e)
            else:
                e.unlink()
    out.mkdir(parents=True, exist_ok=True)
    (out / INCOMPLETE).write_text("run in progress\n", encoding="utf-8")


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    seed = int(cfg["seed"])
    (train_ex, val_ex), schema = _load_task(cfg)
    vocab = build_vocab(train_ex)
    mcfg = ModelConfig(vocab_size=len(vocab), **cfg["model"]).validate()
    max_len = min(mcfg.max_seq_len, max(encoded_length(e) for e in list(train_ex) + list(val_ex)))
    train_b = make_batch(vocab, train_ex, max_len, mcfg.n_classes)
    val_b = make_batch(vocab, val_ex, max_len, mcfg.n_classes)
    # epochs = 0 is allowed here: the run records the initial snapshot only
    untrained = cfg["train"]["epochs"] == 0
    tcfg = TrainConfig(**{**cfg["train"], "epochs": max(1, int(cfg["train"]["epochs"]))}).validate()
    acfg = None
    if cfg["method"] != "frozen":
        acfg = AdapterConfig(**{**cfg["adapter"], "method": cfg["method"]}).validate()

    _prepare_out(out)
    (out / "data").mkdir()
    write_tsv(out / "data" / "train.tsv", train_ex, schema)
    write_tsv(out / "data" / "val.tsv", val_ex, schema)
    (out / "data" / "vocab.txt").write_text("\n".join(vocab.itos) + "\n", encoding="utf-8")

    model = build_model(mcfg, seed)
    freeze_all(model)
    derivations = {"model": derive_seed(seed, "model"), "dropout": derive_seed(seed, "dropout"), "shuffle/<epoch>": f"{seed} + crc32('shuffle/<epoch>')"}
    if cfg["task"] == "synth":
        derivations["synthetic"] = derive_seed(cfg["synth"]["seed"], "synthetic")
    adapted = model
    if acfg is not None:
        adapted = attach_adapters(model, acfg, seed)
        for site in adapted.adapters:
            derivations[f"adapter/{site}"] = derive_seed(seed, f"adapter/{site}")

    resolved = copy.deepcopy(cfg)
    resolved.update(
        {
            "tool_version": __version__,
            "seed_derivations": derivations,
            "dataset_fingerprint": fingerprint(train_ex, val_ex),
            "rank": cfg["adapter"]["rank"] if acfg else None,
            "vocab_size": len(vocab),
            "max_len": max_len,
        }
    )
    write_text_atomic(out / "config.json", dump_json(resolved))

    RunWriter(out, adapted).save_base(model)
    if acfg is None or untrained:
        run = baseline_run(adapted, train_b, val_b, tcfg, out)
    else:
        run = train(adapted, train_b, val_b, tcfg, out)
    final = run.snapshots[-1]
    train_eval = evaluate(adapted, train_b)
    summary = {"epochs": final.epoch, "train_acc": train_eval["accuracy"], "val_acc": final.val_acc, "val_loss": final.val_loss}
    write_text_atomic(out / "summary.json", dump_json(summary))
    (out / INCOMPLETE).unlink()
    print(f"run complete: {out}  method={cfg['method']}  val_acc={final.val_acc:.4f}  train_acc={train_eval['accuracy']:.4f}")
    return 0


# ---------------------------------------------------------------- params


def params_table(ranks, d: int, k: int, layers: int, sites_per_layer: int) -> list[dict]:
    n_sites = layers * sites_per_layer
    rows = []
    for r in ranks:
        pc = param_count("tlora", r, d, k, n_sites)
        rows.append(
            {
                "rank": r,
                "full_ft_adapted_weights": pc["full_ft_adapted_weights"],
                "lora": pc["lora"],
                "tlora": pc["tlora"],
                "improvement": pc["improvement_vs_lora"],
                "improvement_exact": pc["improvement_exact"],
            }
        )
    return rows


def cmd_params(args) -> int:
    ranks = [args.rank] if args.rank is not None else [8, 16, 32]
    for name in ("d", "k", "layers", "sites_per_layer"):
        if getattr(args, name) < 1:
            raise UsageError(f"--{name.replace('_', '-')} must be positive")
    if any(r < 1 for r in ranks):
        raise UsageError("--rank must be positive")
    rows = params_table(ranks, args.d, args.k, args.layers, args.sites_per_layer)
    if args.method != "all":
        for row in rows:
            row["trainable"] = row[args.method]
    if args.json:
        print(json.dumps({"sites": args.layers * args.sites_per_layer, "rows": rows}, indent=2, sort_keys=True))
        return 0
    print(f"{'rank':>5} {'full FT*':>14} {'LoRA':>12} {'TLoRA':>10} {'improvement':>12} {'exact':>10}")
    for row in rows:
        print(
            f"{row['rank']:>5} {row['full_ft_adapted_weights']:>14,} {row['lora']:>12,} {row['tlora']:>10,} "
            f"{str(row['improvement']) + 'x':>12} {row['improvement_exact']:>10.4f}"
        )
    print("* full FT column counts only the adapted weight matrices (d*k per site), not the whole model.")
    return 0


# ---------------------------------------------------------------- analyze


def _final_epoch(run: an.LoadedRun, epoch: int | None) -> int | None:
    if not run.epochs:
        return None
    if epoch is None:
        return run.epochs[-1]
    if epoch not in run.epochs:
        raise LabIOError(f"no snapshot for epoch {epoch} in {run.path}; available: {run.epochs}")
    return epoch


def cmd_analyze(args) -> int:
    run = an.LoadedRun.open(args.run)
    if (run.path / INCOMPLETE).exists():
        raise LabIOError(f"run {run.path} is incomplete")
    reports = run.path / "reports"
    reports.mkdir(exist_ok=True)
    epoch = _final_epoch(run, args.epoch)

    hist = {"epoch": epoch, "sites": {}}
    spectra = {"epoch": epoch, "sites": {}}
    if epoch is not None:
        w = run.weights(epoch)
        base = run.base_weights()
        deltas = run.delta_w(epoch)
        for site in run.sites:
            comps = ["A", "B", "C"] if run.site_info(site)["method"] == "tlora" else ["down", "up"]
            entry = {"W0": an.weight_histogram(base[f"{site}.weight"], args.bins, site, "W0").to_dict()}
            for c in comps:
                entry[c] = an.weight_histogram(w[f"{site}.{c}"], args.bins, site, c).to_dict()
            hist["sites"][site] = entry
            spectra["sites"][site] = an.eigen_spectrum(deltas[site], site, run.method).to_dict()
            if args.dump_matrices:
                mdir = reports / "matrices"
                mdir.mkdir(exist_ok=True)
                np.savetxt(mdir / f"{site}.delta_w.csv", deltas[site], delimiter=",", fmt="%.17g")
    write_text_atomic(reports / "histograms.json", dump_json(hist))
    write_text_atomic(reports / "spectrum.json", dump_json(spectra))

    if run.epochs:
        tl = an.norm_timeline(run)
    else:
        _, rows = read_csv(run.path / "metrics.csv")
        tl = {"epochs": [int(r["epoch"]) for r in rows], "sites": {}}
    write_text_atomic(reports / "norm_timeline.json", dump_json(tl))
    sites = list(tl["sites"])
    for key, name in (("b_norm", "norm_timeline"), ("alpha", "scaling_timeline")):
        rows = [[e] + [tl["sites"][s][key][i] for s in sites] for i, e in enumerate(tl["epochs"])]
        write_text_atomic(reports / f"{name}.csv", csv_text(["epoch"] + sites, rows))
    scaling = {"epochs": tl["epochs"], "sites": {s: tl["sites"][s]["alpha"] for s in sites}}
    write_text_atomic(reports / "scaling_timeline.json", dump_json(scaling))

    if run.method == "tlora" and run.epochs:
        for comp in ("q", "v"):
            hm = an.layer_heatmap(run, comp)
            write_text_atomic(reports / f"heatmap_{comp}.json", dump_json(hm))
            header = ["epoch", "matrix"] + [f"layer{l}" for l in hm["layers"]]
            rows = [[e, m] + hm["grid"][i][j] for i, e in enumerate(hm["epochs"]) for j, m in enumerate(hm["matrices"])]
            write_text_atomic(reports / f"heatmap_{comp}.csv", csv_text(header, rows))
    print(f"reports written to {reports}")
    return 0


# ---------------------------------------------------------------- compare


def compare_runs(run_a, run_b, force: bool = False, dump_diff: bool = False) -> dict:
    a, b = an.LoadedRun.open(run_a), an.LoadedRun.open(run_b)
    fa, fb = a.config.get("dataset_fingerprint"), b.config.get("dataset_fingerprint")
    if fa != fb and not force:
        raise IncompatibleRunsError(f"runs were trained on different datasets ({fa} vs {fb}); pass --force to compare anyway")
    if sorted(a.sites) != sorted(b.sites):
        missing = sorted(set(a.sites) ^ set(b.sites))
        raise IncompatibleRunsError(f"runs adapt different sites, e.g. {missing[0] if missing else '?'}")
    da, db = a.delta_w(), b.delta_w()
    sim = an.SimilarityReport()
    diffs = {}
    spec_a, spec_b = {}, {}
    for site in a.sites:
        if da[site].shape != db[site].shape:
            raise IncompatibleRunsError(f"site {site}: shape {da[site].shape} vs {db[site].shape}")
        layer, comp = site_label(site)
        cos = an.cosine_similarity(da[site], db[site])
        d, summary = an.elementwise_diff(da[site], db[site])
        sim.sites.append(
            an.SiteSimilarity(site, layer, comp, an.UNDEFINED if cos is None else cos, summary["max_abs"], summary["mean_abs"])
        )
        if dump_diff:
            diffs[site] = d.tolist()
        spec_a[site] = an.eigen_spectrum(da[site], site, a.method).to_dict()
        spec_b[site] = an.eigen_spectrum(db[site], site, b.method).to_dict()
    out = {
        "run_a": {"path": str(a.path), "method": a.method, "epoch": a.epochs[-1] if a.epochs else None},
        "run_b": {"path": str(b.path), "method": b.method, "epoch": b.epochs[-1] if b.epochs else None},
        "similarity": sim.to_dict(),
        "spectra_a": spec_a,
        "spectra_b": spec_b,
    }
    if dump_diff:
        out["differences"] = diffs
    return out


def cmd_compare(args) -> int:
    report = compare_runs(args.run_a, args.run_b, args.force, args.dump_diff)
    text = dump_json(report)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_text_atomic(out / "compare.json", text)
        rows = [[s["site"], s["layer"], s["component"], s["cosine"], s["max_abs_diff"], s["mean_abs_diff"]] for s in report["similarity"]["sites"]]
        write_text_atomic(out / "similarity.csv", csv_text(["site", "layer", "component", "cosine", "max_abs_diff", "mean_abs_diff"], rows))
        print(f"comparison written to {out}")
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------- plot


def _need(path: Path):
    if not path.exists():
        raise LabIOError(f"missing report {path}; run `tlora-lab analyze --run {path.parent.parent}` first")
    return read_json(path)


def cmd_plot(args) -> int:
    run_dir = Path(args.run)
    reports = run_dir / "reports"
    what = args.what
    if what == "loss":
        _, rows = read_csv(run_dir / "metrics.csv")
        ep = [float(r["epoch"]) for r in rows]
        svg = line_chart(
            "Training and validation loss",
            "epoch",
            "loss",
            [("train", ep, [float(r["train_loss"]) for r in rows]), ("validation", ep, [float(r["val_loss"]) for r in rows])],
        )
    elif what in ("norms", "alphas"):
        tl = _need(reports / "norm_timeline.json")
        key = "b_norm" if what == "norms" else "alpha"
        eps = [float(e) for e in tl["epochs"]]
        series = [(s, eps, tl["sites"][s][key]) for s in tl["sites"]]
        title = "B matrix L2 norm" if what == "norms" else "Scaling factor alpha"
        svg = line_chart(title, "epoch", key, series, empty_note="no adapted sites")
    elif what == "spectrum":
        sp = _need(reports / "spectrum.json")
        site = args.site or next(iter(sp["sites"]), None)
        rep = sp["sites"].get(site) if site else None
        pos = rep["positive"] if rep else []
        neg = rep["negative"] if rep else []
        series = []
        if pos:
            series.append(("positive", [float(i) for i in range(len(pos))], pos))
        if neg:
            series.append(("negative (magnitude)", [float(i) for i in range(len(neg))], neg))
        svg = line_chart(f"Eigenvalue magnitudes {site or ''}".strip(), "index", "|eigenvalue|", series, empty_note="no nonzero eigenvalues")
    elif what == "hist":
        hs = _need(reports / "histograms.json")
        site = args.site or next(iter(hs["sites"]), None)
        if site is None:
            raise LabIOError("histogram report has no sites (frozen run?)")
        if site not in hs["sites"]:
            raise UsageError(f"unknown site {site!r}; available: {sorted(hs['sites'])}")
        comp = args.component or ("B" if "B" in hs["sites"][site] else "up")
        h = hs["sites"][site][comp]
        svg = histogram_chart(f"{site} {comp} (epoch {hs['epoch']})", h["edges"], h["counts"])
    else:  # argparse restricts choices
        raise UsageError(f"unknown plot {what!r}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(svg, encoding="utf-8")
    print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------- main


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tlora-lab", description="TLoRA / LoRA desk-scale lab")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train adapters and write a run directory")
    t.add_argument("--method", choices=METHODS)
    t.add_argument("--rank", type=int)
    t.add_argument("--task", help="synth or tsv:PATH")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch", type=int)
    t.add_argument("--dropout", type=float)
    t.add_argument("--config", help="JSON config; flags override it")
    t.set_defaults(func=cmd_train)

    pp = sub.add_parser("params", help="trainable-parameter census")
    pp.add_argument("--method", choices=("all", "tlora", "lora"), default="all")
    pp.add_argument("--rank", type=int)
    pp.add_argument("--d", type=int, default=1024)
    pp.add_argument("--k", type=int, default=1024)
    pp.add_argument("--layers", type=int, default=24)
    pp.add_argument("--sites-per-layer", type=int, default=2)
    pp.add_argument("--json", action="store_true")
    pp.set_defaults(func=cmd_params)

    a = sub.add_parser("analyze", help="write diagnostic reports for a run")
    a.add_argument("--run", required=True)
    a.add_argument("--epoch", type=int)
    a.add_argument("--bins", type=int, default=an.DEFAULT_BINS)
    a.add_argument("--dump-matrices", action="store_true")
    a.set_defaults(func=cmd_analyze)

    c = sub.add_parser("compare", help="compare final updates of two runs")
    c.add_argument("--run-a", required=True)
    c.add_argument("--run-b", required=True)
    c.add_argument("--out")
    c.add_argument("--force", action="store_true")
    c.add_argument("--dump-diff", action="store_true")
    c.set_defaults(func=cmd_compare)

    pl = sub.add_parser("plot", help="render an SVG chart from a run's reports")
    pl.add_argument("--run", required=True)
    pl.add_argument("--what", required=True, choices=("loss", "norms", "alphas", "spectrum", "hist"))
    pl.add_argument("--out", required=True)
    pl.add_argument("--site")
    pl.add_argument("--component")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except LabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return LabIOError.exit_code


if __name__ == "__main__":
    sys.exit(main())

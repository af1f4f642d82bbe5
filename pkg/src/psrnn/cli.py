"""Batch command-line front end.

Verbs: prepare, train, eval, demo, compare-losses, ablate-units.
Common flags: --config PATH, --seed U64, --threads N, --out DIR, --oracle.

Runs are driven by plain key=value config files (one pair per line, #
comments allowed). Unknown keys are rejected, and every run writes its fully
resolved configuration next to its outputs, so feeding that file back
reproduces the run byte for byte. All randomness flows from the single run
seed through named substreams.

Exit codes: 0 success, 1 usage/config error, 2 runtime/numeric failure.

CSV schemas:
  training log: iteration,lr,train_loss,val_loss
  eval blocks:  origin_y,origin_x,n,base_mode,base_satd,base_bits,base_total,
                net_satd,net_bits,net_total,winner
  eval summary: JSON object with blocks, qp, lambda, selection_rate_pct,
                mean_cost_reduction_pct, mean_satd_*/mean_mse_* per scheme.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .errors import ConfigError, UsageError
from .hadamard import SatdConfig
from .model import (NetworkConfig, build_network, build_psrnn_plus, load_model,
                    network_forward, save_model)
from .training import (EvalConfig, Predictor, TrainConfig, ablate_units,
                       compare_losses, evaluate, train, write_training_log)
from .intra import best_mode_search, build_reference_samples, hm_lambda, predict_mode

# ---------------------------------------------------------------------------
# key=value config handling
# ---------------------------------------------------------------------------


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(t) for t in s.split(",") if t.strip())


def _strs(s: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in s.split(",") if t.strip())


def _bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"expected a boolean, got {s!r}")


SCHEMAS: dict[str, dict[str, tuple]] = {
    "prepare": {
        "manifest": (str, None),
        "out": (str, "prepare_out"),
        "scales": (_bool, True),
        "qps": (_ints, D.TRAIN_QPS),
        "seed": (int, 0),
    },
    "train": {
        "out": (str, "train_out"),
        "data": (str, "synthetic"),
        "n": (int, 8),
        "availability": (str, "three-block"),
        "loss": (str, "satd"),
        "iters": (int, 5000),
        "batch": (int, 32),
        "base_lr": (float, 0.001),
        "milestones": (_ints, ()),
        "seed": (int, 0),
        "samples": (int, 50000),
        "val_fraction": (float, 0.1),
        "selection_window": (float, 0.2),
        "partition": (int, 4),
        "epsilon": (float, 1e-8),
        "fill": (float, 0.5),
        "gate_activation": (str, "sigmoid"),
        "preproc_channels": (_ints, (8, 8)),
        "unit_hidden": (_ints, (8, 4, 4)),
        "recon_channels": (_ints, (8,)),
        "fusion_kernel": (int, 3),
        "clip_grad_norm": (float, 5.0),
        "qps": (_ints, D.TRAIN_QPS),
        "corpus_size": (int, 128),
        "corpus_kinds": (_strs, ("directional", "sinusoid")),
        "corpus_per_kind": (int, 12),
    },
    "eval": {
        "out": (str, "eval_out"),
        "models": (_strs, ()),
        "images": (str, "synthetic"),
        "qp": (int, 32),
        "block_policy": (str, "fixed"),
        "sizes": (_ints, (8,)),
        "oracle": (_bool, False),
        "ref_smoothing": (_bool, False),
        "seed": (int, 0),
        "eval_size": (int, 128),
        "eval_count": (int, 4),
        "psrnn_plus_base": (str, ""),
    },
    "demo": {
        "out": (str, "demo_out"),
        "model": (str, None),
        "kind": (str, "directional"),
        "cases": (int, 4),
        "qp": (int, 32),
        "seed": (int, 0),
    },
    "compare-losses": {
        "out": (str, "compare_out"),
        "seeds": (_ints, (1, 2, 3)),
        "n": (int, 8),
        "availability": (str, "three-block"),
        "iters": (int, 600),
        "batch": (int, 32),
        "samples": (int, 6000),
        "seed": (int, 0),
        "corpus_size": (int, 128),
    },
    "ablate-units": {
        "out": (str, "ablate_out"),
        "counts": (_ints, (1, 2, 3, 4)),
        "n": (int, 8),
        "availability": (str, "three-block"),
        "iters": (int, 400),
        "batch": (int, 32),
        "samples": (int, 6000),
        "seed": (int, 0),
        "corpus_size": (int, 128),
        "qp": (int, 32),
    },
}


def parse_config_file(path) -> dict[str, str]:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        raw[key.strip()] = value.strip()
    return raw


def resolve(command: str, raw: dict[str, str], overrides: dict) -> dict:
    schema = SCHEMAS[command]
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
    resolved = {}
    for key, (conv, default) in schema.items():
        if key in raw:
            try:
                resolved[key] = conv(raw[key])
            except (ValueError, TypeError):
                raise UsageError(f"bad value for {key}: {raw[key]!r}") from None
        else:
            resolved[key] = default
    for key, value in overrides.items():
        if value is not None:
            resolved[key] = value
    missing = [k for k, v in resolved.items() if v is None]
    if missing:
        raise UsageError(f"missing required keys for {command}: {', '.join(missing)}")
    return resolved


def write_resolved(command: str, resolved: dict, out_dir: Path) -> None:
    lines = []
    for key in SCHEMAS[command]:
        value = resolved[key]
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key}={value}")
    (out_dir / f"{command}.config").write_text("\n".join(lines) + "\n")


def _out_dir(resolved: dict) -> Path:
    out = Path(resolved["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_prepare(resolved: dict) -> int:
    paths = D.read_manifest(resolved["manifest"])
    if not paths:
        raise UsageError("no inputs in manifest")
    out = _out_dir(resolved)
    img_dir = out / "images"
    img_dir.mkdir(exist_ok=True)
    index_lines = []
    counts: dict[tuple[int, int], int] = {}
    failures = 0
    for path in paths:
        try:
            img = D.load_image(path)
            scales = D.multi_scale(img) if resolved["scales"] else [img]
        except Exception as exc:  # per-file: report and continue
            print(f"error: {path}: {exc}", file=sys.stderr)
            failures += 1
            continue
        stem = Path(path).stem
        for si, scaled in enumerate(scales):
            clean_name = f"{stem}_s{si}_clean.pgm"
            D.save_pgm(scaled, img_dir / clean_name)
            for qp in resolved["qps"]:
                deg = D.degrade(scaled, D.DegradeConfig(qp=qp))
                deg_name = f"{stem}_s{si}_qp{qp}.pgm"
                D.save_pgm(deg, img_dir / deg_name)
                index_lines.append(f"images/{clean_name}\timages/{deg_name}\t{si}\t{qp}")
                counts[(si, qp)] = counts.get((si, qp), 0) + 1
    if failures == len(paths):
        raise RuntimeError("all manifest inputs failed to load")
    (out / "index.tsv").write_text("\n".join(index_lines) + "\n")
    write_resolved("prepare", resolved, out)
    for (si, qp) in sorted(counts):
        print(f"scale {si} qp {qp}: {counts[(si, qp)]} images")
    print(f"prepared {len(index_lines)} degraded images -> {out}")
    return 0


def _network_config(resolved: dict) -> NetworkConfig:
    return NetworkConfig(
        pu_size=resolved["n"],
        preproc_channels=resolved.get("preproc_channels", (8, 8)),
        unit_hidden=resolved.get("unit_hidden", (8, 4, 4)),
        recon_channels=resolved.get("recon_channels", (8,)),
        fusion_kernel=resolved.get("fusion_kernel", 3),
        gate_activation=resolved.get("gate_activation", "sigmoid"),
        availability_mode=resolved["availability"],
        fill_value=resolved.get("fill", 0.5),
    )


def _train_config(resolved: dict) -> TrainConfig:
    return TrainConfig(
        loss=resolved.get("loss", "satd"),
        total_iters=resolved["iters"],
        milestones=resolved.get("milestones") or None,
        base_lr=resolved.get("base_lr", 0.001),
        batch_size=resolved["batch"],
        seed=resolved["seed"],
        validation_fraction=resolved.get("val_fraction", 0.1),
        selection_window=resolved.get("selection_window", 0.2),
        satd=SatdConfig(partition=resolved.get("partition", 4),
                        epsilon=resolved.get("epsilon", 1e-8)),
        block_size=resolved["n"],
        availability_mode=resolved["availability"],
        clip_grad_norm=resolved.get("clip_grad_norm", 5.0) or None,
    )


def _load_samples(resolved: dict):
    seed = resolved["seed"]
    n = resolved["n"]
    count = resolved["samples"]
    fill = resolved.get("fill", 0.5)
    availability = resolved["availability"]
    source = resolved["data"]
    if source == "synthetic":
        images = D.synthetic_corpus(resolved["corpus_size"], seed,
                                    kinds=resolved.get("corpus_kinds", ("directional", "sinusoid")),
                                    per_kind=resolved.get("corpus_per_kind", 12))
        return D.build_training_samples(images, n, count, seed,
                                        qps=resolved.get("qps", D.TRAIN_QPS),
                                        availability_mode=availability, fill=fill)
    src = Path(source)
    if src.is_dir():
        index = src / "index.tsv"
        if not index.exists():
            raise ConfigError(f"{src} has no index.tsv (not a prepared archive)")
        pairs = [line.split("\t")[:2] for line in index.read_text().splitlines() if line]
        samples = []
        per = max(1, count // max(1, len(pairs)))
        for i, (clean_rel, deg_rel) in enumerate(pairs):
            clean = D.load_image(src / clean_rel)
            deg = D.load_image(src / deg_rel)
            samples.extend(D.sample_contexts(clean, deg, n, per, seed=seed + i,
                                             fill=fill, availability_mode=availability))
        if not samples:
            raise UsageError("prepared archive produced no samples")
        return samples[:count] if len(samples) > count else samples
    images = [D.load_image(p) for p in D.read_manifest(src)]
    if not images:
        raise UsageError("no inputs in manifest")
    return D.build_training_samples(images, n, count, seed,
                                    qps=resolved.get("qps", D.TRAIN_QPS),
                                    availability_mode=availability, fill=fill)


def cmd_train(resolved: dict) -> int:
    out = _out_dir(resolved)
    cfg = _train_config(resolved)
    net = build_network(_network_config(resolved), seed=resolved["seed"])
    samples = _load_samples(resolved)
    net, rows = train(net, samples, cfg)
    model_path = out / "model.psrnn"
    save_model(net, model_path)
    write_training_log(rows, out / "train_log.csv")
    write_resolved("train", resolved, out)
    print(f"trained {cfg.total_iters} iterations; best val loss "
          f"{min(r.val_loss for r in rows)!r}; model -> {model_path}")
    return 0


def _eval_images(resolved: dict) -> list[D.GrayImage]:
    if resolved["images"] == "synthetic":
        seed = resolved["seed"] + 1013  # held out from the training corpus
        size = resolved["eval_size"]
        images = []
        kinds = ("directional", "sinusoid", "rings")
        for i in range(resolved["eval_count"]):
            kind = kinds[i % len(kinds)]
            images.append(D.synthetic_corpus(size, seed + i, kinds=(kind,), per_kind=1)[0])
        return images
    return [D.load_image(p) for p in D.read_manifest(resolved["images"])]


def cmd_eval(resolved: dict) -> int:
    out = _out_dir(resolved)
    sizes = tuple(resolved["sizes"])
    nets = None
    if resolved["models"]:
        nets = {}
        for path in resolved["models"]:
            net = load_model(path)
            nets[net.config.pu_size] = net
        if resolved["psrnn_plus_base"]:
            base = load_model(resolved["psrnn_plus_base"])
            composites = {t: build_psrnn_plus(base, t, seed=resolved["seed"])
                          for t in (16, 32) if t in sizes and t not in nets}
            nets = Predictor(nets=nets, composites=composites)
        missing = [n for n in sizes
                   if not (nets.supports(n) if hasattr(nets, "supports") else n in nets)]
        if missing and not resolved["oracle"]:
            raise ConfigError(f"no model loaded for block sizes {missing}")
    elif not resolved["oracle"]:
        print("no models given: baseline-only evaluation", file=sys.stderr)
    cfg = EvalConfig(block_sizes=sizes, policy=resolved["block_policy"],
                     oracle=resolved["oracle"], ref_smoothing=resolved["ref_smoothing"])
    report = evaluate(nets, _eval_images(resolved), resolved["qp"], cfg)
    with open(out / "eval_blocks.csv", "w") as fh:
        for row in report.csv_rows():
            fh.write(row + "\n")
    with open(out / "eval_summary.json", "w") as fh:
        json.dump(report.summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_resolved("eval", resolved, out)
    print(f"blocks: {report.summary['blocks']}")
    print(f"mean cost reduction: {report.summary['mean_cost_reduction_pct']:.3f}%")
    print(f"network selection rate: {report.summary['selection_rate_pct']:.3f}%")
    return 0


def cmd_demo(resolved: dict) -> int:
    out = _out_dir(resolved)
    net = load_model(resolved["model"])
    n = net.config.pu_size
    qp = resolved["qp"]
    lam = hm_lambda(qp)
    kind = resolved["kind"]
    for case in range(resolved["cases"]):
        seed = resolved["seed"] + case
        params = {}
        if kind == "directional":
            params = {"angle": 45.0 * case, "noise": 0.02}
        elif kind == "sinusoid":
            params = {"freq": 3.0 + 2.0 * case, "angle": 30.0 * case, "noise": 0.02}
        elif kind == "rings":
            params = {"period": 10.0 + 4.0 * case}
        elif kind == "flat":
            params = {"value": 0.2 + 0.15 * case}
        img = D.synth_texture(kind, max(8 * n, 64), seed=seed, **params)
        recon = D.degrade(img, D.DegradeConfig(qp=qp))
        origin = (2 * n, 2 * n)
        block = D.make_context(recon.pixels, img.pixels,
                               (origin[0] - n, origin[1] - n), n,
                               net.config.availability_mode, net.config.fill_value)
        pred_net = network_forward(net, block.context)
        refs = build_reference_samples(recon.pixels, origin, n)
        best = best_mode_search(refs, block.target.astype(np.float64), n, lam)
        pred_base = predict_mode(refs, best.mode, n)
        D.save_pgm(block.context, out / f"{kind}_{case}_context.pgm")
        D.save_pgm(pred_net, out / f"{kind}_{case}_psrnn.pgm")
        D.save_pgm(pred_base, out / f"{kind}_{case}_baseline.pgm")
        D.save_pgm(block.target, out / f"{kind}_{case}_truth.pgm")
    write_resolved("demo", resolved, out)
    print(f"wrote {resolved['cases']} prediction quads -> {out}")
    return 0


def cmd_compare_losses(resolved: dict) -> int:
    out = _out_dir(resolved)
    base = {**resolved, "data": "synthetic", "loss": "satd",
            "corpus_kinds": ("directional", "sinusoid"), "corpus_per_kind": 12,
            "qps": D.TRAIN_QPS}
    samples = _load_samples(base)
    cfg = _train_config({**resolved, "loss": "satd"})
    result = compare_losses(samples, cfg, resolved["seeds"])
    with open(out / "compare_losses.csv", "w") as fh:
        fh.write("seed,satd_val_satd,satd_val_mse,mse_val_satd,mse_val_mse,satd_gap\n")
        for row in result["rows"]:
            fh.write(",".join(repr(row[k]) if isinstance(row[k], float) else str(row[k])
                              for k in ("seed", "satd_val_satd", "satd_val_mse",
                                        "mse_val_satd", "mse_val_mse", "satd_gap")) + "\n")
    write_resolved("compare-losses", resolved, out)
    print(f"median val SATD, satd-trained: {result['median_satd_trained']!r}")
    print(f"median val SATD, mse-trained:  {result['median_mse_trained']!r}")
    print(f"median gap (positive favors satd): {result['median_gap']!r}")
    return 0


def cmd_ablate_units(resolved: dict) -> int:
    out = _out_dir(resolved)
    base = {**resolved, "data": "synthetic",
            "corpus_kinds": ("directional", "sinusoid"), "corpus_per_kind": 12,
            "qps": D.TRAIN_QPS}
    samples = _load_samples(base)
    cfg = _train_config({**resolved, "loss": "satd"})
    images = _eval_images({**resolved, "images": "synthetic",
                           "eval_size": resolved["corpus_size"], "eval_count": 3})
    rows = ablate_units(samples, resolved["counts"], cfg, images, qp=resolved["qp"])
    with open(out / "ablate_units.csv", "w") as fh:
        fh.write("units,final_val_loss,selection_rate_pct,cost_reduction_pct\n")
        for row in rows:
            fh.write(f"{row['units']},{row['final_val_loss']!r},"
                     f"{row['selection_rate_pct']!r},{row['cost_reduction_pct']!r}\n")
    write_resolved("ablate-units", resolved, out)
    for row in rows:
        print(f"units={row['units']} val_loss={row['final_val_loss']!r} "
              f"selection={row['selection_rate_pct']:.2f}% "
              f"reduction={row['cost_reduction_pct']:.2f}%")
    return 0


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "eval": cmd_eval,
    "demo": cmd_demo,
    "compare-losses": cmd_compare_losses,
    "ablate-units": cmd_ablate_units,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="psrnn",
        description="Recurrent intra prediction pipeline: data prep, training, "
                    "RDO-lite evaluation, ablations and demos.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--seed", type=int, help="overrides the config seed")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker bound; the pipeline runs serially for "
                             "bit-reproducibility (default 1)")
    parser.add_argument("--out", help="overrides the config output directory")
    parser.add_argument("--oracle", action="store_true",
                        help="eval only: use the ground-truth oracle predictor")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a single config key (repeatable)")
    args = parser.parse_args(argv)

    try:
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        raw = parse_config_file(args.config) if args.config else {}
        for item in args.set:
            if "=" not in item:
                raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
            key, _, value = item.partition("=")
            raw[key.strip()] = value.strip()
        overrides = {"seed": args.seed, "out": args.out}
        if args.command == "eval" and args.oracle:
            overrides["oracle"] = True
        resolved = resolve(args.command, raw, overrides)
        return COMMANDS[args.command](resolved)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RuntimeError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

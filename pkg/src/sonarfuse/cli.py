"""Command-line front end.

Subcommands: simulate, train, enhance, evaluate, ablate, bank-dump,
selftest. Runs are configured through plain `key = value` files passed
with --config (flags override where noted); there are no environment
variables. Every run is deterministic under a fixed seed in
single-thread mode, and all file outputs are written atomically.

Exit codes: 0 ok, 2 usage or config error, 3 numeric failure, 4 I/O
error.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np
import torch

from . import metrics, selftest
from .configfile import (
    Opt,
    choice_v,
    float_v,
    int_v,
    list_v,
    load_config,
    str_v,
)
from .errors import ConfigError, DataIOError, NumericError
from .fusenet import VARIANTS, load_checkpoint, save_checkpoint
from .imagecore import Image, write_image
from .metrics import ABLATION_ORDER, ablation_variant, reference_lines
from .scatterbridge import BankConfig, build_bank
from .sonarsim import (
    FanGeometry,
    Trajectory,
    gen_sequence,
    preset,
    read_dataset,
    write_dataset,
)
from .training import (
    TrainSettings,
    enhance_sequence,
    init_state,
    train,
    write_trace,
)

_TARGET_OF_KIND = {"ring": "tire", "capsule": "torpedo",
                   "trapezoid": "frustum"}

_PRESET_CYCLE = ("tire", "torpedo", "frustum")

# deterministic, collision-free stream ids for per-sequence generation
_SEQ_SEED_STRIDE = 100003


# ---------------------------------------------------------------------------
# config schemas (one per subcommand)

SIMULATE_SCHEMA = {
    "preset": Opt(choice_v("tire", "torpedo", "frustum"), "tire"),
    "frames": Opt(int_v, 16),
    "trajectory": Opt(choice_v("circular", "linear"), "circular"),
    "step": Opt(float_v, None),  # None -> 1.0 deg (circular) / 0.1 m (linear)
    "start": Opt(float_v, 0.0),
    "resolution": Opt(int_v, 128),
    "seed": Opt(int_v, 0),
    # scene overrides (unset keys keep the preset's values)
    "target_kind": Opt(choice_v("ring", "capsule", "trapezoid"), None),
    "target_size": Opt(float_v, None),
    "reflectivity": Opt(float_v, None),
    "position_x": Opt(float_v, None),
    "position_y": Opt(float_v, None),
    "background_level": Opt(float_v, None),
    # degradation overrides
    "speckle_shape": Opt(float_v, None),
    "speckle_corr": Opt(float_v, None),
    "multipath_count": Opt(int_v, None),
    "multipath_gain": Opt(float_v, None),
    "multipath_delay": Opt(int_v, None),
    "contrast_gain": Opt(float_v, None),
    # fan geometry
    "range_bins": Opt(int_v, None),
    "beam_count": Opt(int_v, None),
    "fov_deg": Opt(float_v, None),
    "max_range": Opt(float_v, None),
}

TRAIN_SCHEMA = {
    "datasets": Opt(list_v, ()),  # empty -> generate the synthetic desk set
    "preset": Opt(choice_v("mix", "tire", "torpedo", "frustum"), "mix"),
    "sequences": Opt(int_v, 4),
    "frames": Opt(int_v, 4),
    "resolution": Opt(int_v, 64),
    "step": Opt(float_v, 3.0),
    "steps": Opt(int_v, 200),
    "lr": Opt(float_v, 1e-3),
    "lambda_con": Opt(float_v, 0.1),
    "lambda_grad": Opt(float_v, 0.1),
    "c_lat": Opt(int_v, 32),
    "variant": Opt(choice_v(*VARIANTS), "wst"),
    "seed": Opt(int_v, 0),
    "bank_scales": Opt(int_v, 3),
    "bank_orientations": Opt(int_v, 6),
}

ENHANCE_SCHEMA = {
    "checkpoint": Opt(str_v),
    "dataset": Opt(str_v),
}

EVALUATE_SCHEMA = {
    "checkpoint": Opt(str_v),
    "datasets": Opt(list_v),
}

ABLATE_SCHEMA = {
    "preset": Opt(choice_v("tire", "torpedo", "frustum"), "torpedo"),
    "methods": Opt(list_v, ()),  # empty -> every ablation row
    "train_sequences": Opt(int_v, 3),
    "heldout_sequences": Opt(int_v, 2),
    "frames": Opt(int_v, 4),
    "resolution": Opt(int_v, 64),
    "step": Opt(float_v, 3.0),
    # every variant reaches a comparable train loss by 200 steps at this
    # rate; the AG ordering is meaningless on undertrained models
    "steps": Opt(int_v, 200),
    "lr": Opt(float_v, 3e-3),
    "lambda_con": Opt(float_v, 0.1),
    "lambda_grad": Opt(float_v, 0.1),
    "c_lat": Opt(int_v, 16),
    "seed": Opt(int_v, 0),
    "bank_scales": Opt(int_v, 3),
    "bank_orientations": Opt(int_v, 6),
}

BANK_DUMP_SCHEMA = {
    "bank_scales": Opt(int_v, 3),
    "bank_orientations": Opt(int_v, 6),
    "kernel_truncation": Opt(float_v, 4.0),
    "base_scale": Opt(float_v, 2.0),
    "seed": Opt(int_v, 0),
}

SELFTEST_SCHEMA = {
    "seed": Opt(int_v, 0),
}


# ---------------------------------------------------------------------------
# helpers


def _resolve_seed(args, cfg) -> int:
    return args.seed if args.seed is not None else cfg["seed"]


def _overridden(obj, cfg, keys):
    """replace() with only the config keys the user actually set."""
    updates = {k: cfg[k] for k in keys if cfg[k] is not None}
    return replace(obj, **updates) if updates else obj


def _scene_from(cfg):
    scene, degr = preset(cfg["preset"])
    scene = _overridden(scene, cfg, ("target_kind", "target_size",
                                     "reflectivity", "background_level"))
    if cfg["position_x"] is not None or cfg["position_y"] is not None:
        x = cfg["position_x"] if cfg["position_x"] is not None else scene.position[0]
        y = cfg["position_y"] if cfg["position_y"] is not None else scene.position[1]
        scene = replace(scene, position=(x, y))
    degr = _overridden(degr, cfg, ("speckle_shape", "speckle_corr",
                                   "multipath_count", "multipath_gain",
                                   "multipath_delay", "contrast_gain"))
    return scene, degr


def _geometry_from(cfg) -> FanGeometry:
    return _overridden(FanGeometry(), cfg,
                       ("range_bins", "beam_count", "fov_deg", "max_range"))


def _synthetic_sequences(cfg, seed: int, count: int, offset: int):
    """Deterministic training/held-out sequences from the presets.

    Sequence i gets its own seed stream and a golden-angle spaced start
    heading so no two sequences show the same speckle or the same views.
    """
    seqs = []
    for s in range(count):
        idx = offset + s
        name = (cfg["preset"] if cfg["preset"] != "mix"
                else _PRESET_CYCLE[idx % len(_PRESET_CYCLE)])
        scene, degr = preset(name)
        traj = Trajectory("circular", cfg["step"], start=(idx * 137.5) % 360.0)
        seqs.append(gen_sequence(scene, degr, K=cfg["frames"],
                                 trajectory=traj,
                                 seed=seed * _SEQ_SEED_STRIDE + idx,
                                 out_size=cfg["resolution"]))
    return seqs


def _target_label(meta: dict) -> str:
    kind = meta.get("target_kind", "")
    return _TARGET_OF_KIND.get(kind, kind or "unknown")


def _print_metric_rows(rows):
    for method, target, s, a in rows:
        print(f"{method:>10}  {target:<8} std={float(s)!r} ag={float(a)!r}")


def _print_reference(kind: str):
    print("# reference values (original physical-dataset study):")
    for line in reference_lines(kind):
        print(f"#   {line}")


# ---------------------------------------------------------------------------
# subcommands


def _cmd_simulate(args) -> int:
    cfg = load_config(args.config, SIMULATE_SCHEMA)
    seed = _resolve_seed(args, cfg)
    scene, degr = _scene_from(cfg)
    step = cfg["step"]
    if step is None:
        step = 1.0 if cfg["trajectory"] == "circular" else 0.1
    traj = Trajectory(cfg["trajectory"], step, cfg["start"])
    write_dataset(args.out, scene, degr, K=cfg["frames"], trajectory=traj,
                  seed=seed, geom=_geometry_from(cfg),
                  out_size=cfg["resolution"])
    print(f"wrote {cfg['frames']} frames to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = load_config(args.config, TRAIN_SCHEMA)
    seed = _resolve_seed(args, cfg)
    steps = args.steps if args.steps is not None else cfg["steps"]
    if steps < 0:
        raise ConfigError(f"steps must be >= 0, got {steps}")
    bank = BankConfig(J=cfg["bank_scales"], K=cfg["bank_orientations"])
    if cfg["datasets"]:
        seqs = [read_dataset(d)[0] for d in cfg["datasets"]]
    else:
        seqs = _synthetic_sequences(cfg, seed, cfg["sequences"], offset=0)
    state = init_state(bank, variant=cfg["variant"], c_lat=cfg["c_lat"],
                       seed=seed, sr2x=args.sr2x)
    settings = TrainSettings(steps=steps, lr=cfg["lr"],
                             lambda_con=cfg["lambda_con"],
                             lambda_grad=cfg["lambda_grad"],
                             c_lat=cfg["c_lat"], seed=seed, sr2x=args.sr2x,
                             variant=cfg["variant"])
    os.makedirs(args.out, exist_ok=True)
    final, rows = train(state, seqs, settings,
                        diag_path=os.path.join(args.out, "diagnostic.ckpt"))
    ckpt = os.path.join(args.out, "model.ckpt")
    save_checkpoint(final, ckpt)
    write_trace(os.path.join(args.out, "trace.csv"), rows)
    print(f"trained {steps} steps on {len(seqs)} sequences "
          f"(variant {cfg['variant']}, seed {seed})")
    if rows:
        print(f"loss: {rows[0][1]!r} -> {rows[-1][1]!r}")
    print(f"checkpoint: {ckpt}")
    return 0


def _cmd_enhance(args) -> int:
    cfg = load_config(args.config, ENHANCE_SCHEMA)
    state = load_checkpoint(cfg["checkpoint"])
    seq, _ = read_dataset(cfg["dataset"])
    img = enhance_sequence(state, seq)
    os.makedirs(args.out, exist_ok=True)
    out_png = os.path.join(args.out, "enhanced.png")
    write_image(img, out_png)
    print(f"enhanced: std={metrics.std_metric(img)!r} "
          f"ag={metrics.ag_metric(img)!r}")
    print(f"wrote {out_png}")
    return 0


def _cmd_evaluate(args) -> int:
    cfg = load_config(args.config, EVALUATE_SCHEMA)
    state = load_checkpoint(cfg["checkpoint"])
    raw = {}
    enhanced = {}
    order = []
    for d in cfg["datasets"]:
        seq, meta = read_dataset(d)
        target = _target_label(meta)
        if target not in order:
            order.append(target)
        raw.setdefault(target, []).extend(seq.frames)
        enhanced.setdefault(target, []).append(enhance_sequence(state, seq))
    groups = []
    for target in order:
        groups.append(("raw", target, raw[target]))
        groups.append(("enhanced", target, enhanced[target]))
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "metrics.csv")
    _, rows = metrics.evaluate(groups, csv_path=csv_path)
    _print_metric_rows(rows)
    _print_reference("enhancement")
    print(f"wrote {csv_path}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = load_config(args.config, ABLATE_SCHEMA)
    seed = _resolve_seed(args, cfg)
    methods = cfg["methods"] or ABLATION_ORDER
    for m in methods:
        ablation_variant(m)  # unknown labels die before any training
    bank = BankConfig(J=cfg["bank_scales"], K=cfg["bank_orientations"])
    train_seqs = _synthetic_sequences(cfg, seed, cfg["train_sequences"],
                                      offset=0)
    heldout = _synthetic_sequences(cfg, seed, cfg["heldout_sequences"],
                                   offset=cfg["train_sequences"])
    settings = TrainSettings(steps=cfg["steps"], lr=cfg["lr"],
                             lambda_con=cfg["lambda_con"],
                             lambda_grad=cfg["lambda_grad"],
                             c_lat=cfg["c_lat"], seed=seed, sr2x=args.sr2x)
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "ablation.csv")
    rows = metrics.ablate(train_seqs, heldout, bank, settings, kinds=methods,
                          target=cfg["preset"], csv_path=csv_path)
    _print_metric_rows(rows)
    _print_reference("ablation")
    print(f"wrote {csv_path}")
    return 0


def _cmd_bank_dump(args) -> int:
    cfg = load_config(args.config, BANK_DUMP_SCHEMA)
    bank_cfg = BankConfig(J=cfg["bank_scales"], K=cfg["bank_orientations"],
                          kernel_truncation=cfg["kernel_truncation"],
                          base_scale=cfg["base_scale"])
    bank = build_bank(bank_cfg)
    os.makedirs(args.out, exist_ok=True)
    for f, kernel in enumerate(bank.psi):
        j, k = bank_cfg.jk_of(f)
        peak = max(np.abs(kernel.real).max(), np.abs(kernel.imag).max())
        for part, vals in (("real", kernel.real), ("imag", kernel.imag)):
            img = Image(0.5 + vals / (2.0 * peak))
            write_image(img, os.path.join(args.out,
                                          f"psi_j{j}_k{k}_{part}.png"))
        print(f"psi j={j} k={k}: support {kernel.shape[0]}x{kernel.shape[1]}")
    write_image(Image(bank.phi / bank.phi.max()),
                os.path.join(args.out, "phi.png"))
    print(f"phi: support {bank.phi.shape[0]}x{bank.phi.shape[1]}")
    print(f"wrote {2 * bank_cfg.n_filters + 1} kernel images to {args.out}")
    return 0


def _cmd_selftest(args) -> int:
    load_config(args.config, SELFTEST_SCHEMA)  # accept/validate, no knobs yet

    def show(r):
        status = "PASS" if r.ok else "FAIL"
        print(f"{status} {r.name} ({r.seconds:.2f}s): {r.detail}")

    results = selftest.run_all(progress=show)
    failures = sum(not r.ok for r in results)
    print(f"{len(results) - failures}/{len(results)} checks passed")
    return 0 if failures == 0 else 3


_DISPATCH = {
    "simulate": _cmd_simulate,
    "train": _cmd_train,
    "enhance": _cmd_enhance,
    "evaluate": _cmd_evaluate,
    "ablate": _cmd_ablate,
    "bank-dump": _cmd_bank_dump,
    "selftest": _cmd_selftest,
}


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="sonarfuse",
        description="Multi-frame sonar image enhancement toolkit.")
    sub = ap.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, help_text, needs_out=True, sr2x=False, steps=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None,
                       help="key = value config file")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--threads", type=int, default=1,
                       help="CPU threads (default 1; determinism is only "
                            "guaranteed single-thread)")
        if sr2x:
            p.add_argument("--sr2x", action="store_true",
                           help="train the 2x super-resolving head")
        if steps:
            p.add_argument("--steps", type=int, default=None,
                           help="override the config step count")
        p.set_defaults(needs_out=needs_out)
        return p

    add("simulate", "generate a degraded multi-frame sonar dataset")
    add("train", "fit the fusion model and write a checkpoint",
        sr2x=True, steps=True)
    add("enhance", "run a checkpoint on one dataset")
    add("evaluate", "score raw frames vs enhanced outputs on datasets")
    add("ablate", "train and score every input-feature variant", sr2x=True)
    add("bank-dump", "write the filter kernels as images")
    add("selftest", "run the built-in verification checks", needs_out=False)
    return ap


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse handles --help and usage errors
        return 0 if exc.code in (0, None) else 2
    try:
        if args.threads < 1:
            raise ConfigError(f"--threads must be >= 1, got {args.threads}")
        torch.set_num_threads(args.threads)
        if args.needs_out and args.out is None:
            raise ConfigError(f"{args.command} requires --out")
        return _DISPATCH[args.command](args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (DataIOError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

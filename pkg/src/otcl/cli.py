"""Command-line entry points for running and inspecting experiments.

Subcommands:
  run                full multi-seed experiment from a config file and/or flags
  eval               re-evaluate a saved checkpoint on the held-out task sets
  gen-synth          write a synthetic multimodal dataset to an .npz file
  export-embeddings  dump current feature embeddings of a test set to CSV

Configuration is a JSON file whose keys mirror the run-config field names
(nested "preservation", "otmm", and "synth" blocks); any flag given on the
command line overrides the file value. Exit codes: 0 success, 1 config
error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict, fields

import numpy as np

from .autodiff import NumericsError
from .data import IdxError, SynthSpec, gen_synthetic, ring_centers
from .harness import RunConfig, evaluate_task, load_mnist_dir, load_model, run_experiment
from .losses import PreservationConfig
from .mixture import OtmmConfig


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ------------------------------------------------------------ config I/O


def _build_synth_spec(block: dict) -> SynthSpec:
    block = dict(block)
    num_classes = int(block.pop("num_classes", 2))
    modes = int(block.pop("modes_per_class", 1))
    scale = float(block.pop("mode_scale", 0.5))
    samples = int(block.pop("samples_per_class", 500))
    seed = int(block.pop("seed", 0))
    radius = float(block.pop("ring_radius", 5.0))
    dim = int(block.pop("dim", 2))
    centers = block.pop("mode_centers", None)
    if block:
        raise ValueError(f"unknown synth keys: {sorted(block)}")
    if centers is None:
        centers = ring_centers(num_classes, modes, radius=radius, dim=dim)
    else:
        centers = np.asarray(centers, dtype=np.float64)
    return SynthSpec(
        num_classes=num_classes,
        modes_per_class=modes,
        mode_centers=centers,
        mode_scale=scale,
        samples_per_class=samples,
        seed=seed,
    )


def _config_from_sources(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the config file, then explicit flags."""
    merged: dict = {}
    if args.config:
        with open(args.config) as fh:
            file_cfg = json.load(fh)
        if not isinstance(file_cfg, dict):
            raise ValueError("config file must hold a JSON object")
        known = {f.name for f in fields(RunConfig)}
        unknown = set(file_cfg) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        merged.update(file_cfg)

    flag_map = {
        "dataset": args.dataset,
        "data_dir": args.data_dir,
        "num_tasks": args.num_tasks,
        "classes_per_task": args.classes_per_task,
        "memory_size": args.memory_size,
        "batch_size": args.batch_size,
        "n_centroids": args.n_centroids,
        "feat_dim": args.feat_dim,
        "hidden_dim": args.hidden_dim,
        "out_dir": args.out_dir,
    }
    for key, val in flag_map.items():
        if val is not None:
            merged[key] = val
    if args.seeds is not None:
        merged["seeds"] = [int(s) for s in args.seeds.split(",") if s != ""]
    if args.random_insertion:
        merged["random_insertion"] = True
    if args.eval_every_batch:
        merged["eval_every_batch"] = True

    pres = dict(merged.get("preservation", {}))
    for key, val in (
        ("lr_theta", args.lr_theta),
        ("lr_proto", args.lr_proto),
        ("clip_alpha", args.clip_alpha),
        ("steps_l1", args.steps_l1),
        ("steps_l2", args.steps_l2),
    ):
        if val is not None:
            pres[key] = val
    merged["preservation"] = PreservationConfig(**pres)

    otmm = dict(merged.get("otmm", {}))
    for key, val in (
        ("epsilon", args.epsilon),
        ("tau", args.tau),
        ("n_phi_steps", args.n_phi_steps),
        ("n_mix_steps", args.n_mix_steps),
        ("n_mix_samples", args.n_mix_samples),
        ("lr_phi", args.lr_phi),
        ("lr_mix", args.lr_mix),
    ):
        if val is not None:
            otmm[key] = val
    merged["otmm"] = OtmmConfig(**otmm)

    synth = merged.get("synth")
    if synth is not None:
        merged["synth"] = _build_synth_spec(synth)
    if merged.get("seeds") is not None:
        merged["seeds"] = tuple(merged["seeds"])
    return RunConfig(**merged)


# ------------------------------------------------------------ subcommands


def _cmd_run(args: argparse.Namespace) -> int:
    try:
        cfg = _config_from_sources(args)
    except (ValueError, TypeError, KeyError, OSError) as err:
        raise CliError(1, f"config error: {err}") from err
    try:
        _, summary = run_experiment(cfg)
    except NumericsError as err:
        raise CliError(3, f"numerical failure: {err}") from err
    except (IdxError, FileNotFoundError, OSError, ValueError) as err:
        raise CliError(2, f"data error: {err}") from err
    print(json.dumps(
        {
            "mean_avg_accuracy": summary["mean_avg_accuracy"],
            "std_avg_accuracy": summary["std_avg_accuracy"],
            "mean_avg_forgetting": summary["mean_avg_forgetting"],
            "wall_clock_seconds": summary["wall_clock_seconds"],
        },
        indent=2,
    ))
    return 0


def _load_test_rows(args: argparse.Namespace):
    if args.data_dir:
        _, test = load_mnist_dir(args.data_dir)
        feats = np.stack([s.features for s in test])
        labels = np.asarray([s.label for s in test], dtype=np.int64)
        return feats, labels
    if args.synth_npz:
        with np.load(args.synth_npz) as z:
            return z["test_features"], z["test_labels"].astype(np.int64)
    raise ValueError("provide --data-dir (IDX files) or --synth-npz")


def _cmd_eval(args: argparse.Namespace) -> int:
    try:
        fe, state, _, meta = load_model(args.checkpoint)
    except FileNotFoundError as err:
        raise CliError(2, f"data error: {err}") from err
    except (ValueError, KeyError, OSError) as err:
        raise CliError(2, f"bad checkpoint: {err}") from err
    try:
        feats, labels = _load_test_rows(args)
    except (IdxError, FileNotFoundError, OSError, KeyError) as err:
        raise CliError(2, f"data error: {err}") from err
    except ValueError as err:
        raise CliError(1, f"config error: {err}") from err

    from .data import Batch  # local import keeps the module list tidy

    cpt = meta["classes_per_task"]
    num_tasks = meta["num_tasks"]
    accs = []
    for t in range(num_tasks):
        block = range(t * cpt, (t + 1) * cpt)
        mask = np.isin(labels, list(block))
        if not mask.any():
            raise CliError(2, f"data error: no test samples for task {t + 1}")
        batch = Batch(features=feats[mask], labels=labels[mask])
        accs.append(evaluate_task(batch, fe, state.mixtures))
    for t, a in enumerate(accs):
        print(f"task {t + 1}: {a:.4f}")
    print(f"average: {float(np.mean(accs)):.4f}")
    return 0


def _cmd_gen_synth(args: argparse.Namespace) -> int:
    try:
        spec = _build_synth_spec(
            {
                "num_classes": args.num_classes,
                "modes_per_class": args.modes_per_class,
                "mode_scale": args.mode_scale,
                "samples_per_class": args.samples_per_class,
                "seed": args.seed,
                "ring_radius": args.ring_radius,
                "dim": args.dim,
            }
        )
    except (ValueError, TypeError) as err:
        raise CliError(1, f"config error: {err}") from err
    train, test = gen_synthetic(spec)
    try:
        np.savez(
            args.out,
            train_features=np.stack([s.features for s in train]),
            train_labels=np.asarray([s.label for s in train], dtype=np.int64),
            test_features=np.stack([s.features for s in test]),
            test_labels=np.asarray([s.label for s in test], dtype=np.int64),
        )
    except OSError as err:
        raise CliError(2, f"data error: {err}") from err
    print(f"wrote {len(train)} train / {len(test)} test samples to {args.out}")
    return 0


def _cmd_export_embeddings(args: argparse.Namespace) -> int:
    try:
        fe, _, _, _ = load_model(args.checkpoint)
    except FileNotFoundError as err:
        raise CliError(2, f"data error: {err}") from err
    except (ValueError, KeyError, OSError) as err:
        raise CliError(2, f"bad checkpoint: {err}") from err
    try:
        feats, labels = _load_test_rows(args)
    except (IdxError, FileNotFoundError, OSError, KeyError) as err:
        raise CliError(2, f"data error: {err}") from err
    except ValueError as err:
        raise CliError(1, f"config error: {err}") from err
    emb = fe.features_np(feats)
    try:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"feat_{i}" for i in range(emb.shape[1])] + ["label"])
            for row, lab in zip(emb, labels):
                w.writerow([f"{v:.8g}" for v in row] + [int(lab)])
    except OSError as err:
        raise CliError(2, f"data error: {err}") from err
    print(f"wrote {emb.shape[0]} embeddings of width {emb.shape[1]} to {args.out}")
    return 0


# ---------------------------------------------------------------- parser


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    d_run = RunConfig.__dataclass_fields__
    d_pres = asdict(PreservationConfig())
    d_otmm = asdict(OtmmConfig())

    p.add_argument("--config", help="JSON config file mirroring the run-config fields")
    p.add_argument("--dataset", choices=["mnist", "synth"],
                   help=f"data source (default: {d_run['dataset'].default})")
    p.add_argument("--data-dir", help="directory holding the four IDX files (mnist)")
    p.add_argument("--out-dir", help="where to write metrics.csv / summary.json / checkpoints")
    p.add_argument("--num-tasks", type=int, help=f"tasks in the stream (default: {d_run['num_tasks'].default})")
    p.add_argument("--classes-per-task", type=int,
                   help=f"classes per task (default: {d_run['classes_per_task'].default})")
    p.add_argument("--memory-size", type=int,
                   help=f"replay capacity in samples (default: {d_run['memory_size'].default})")
    p.add_argument("--batch-size", type=int,
                   help=f"stream batch size (default: {d_run['batch_size'].default})")
    p.add_argument("--n-centroids", type=int,
                   help=f"mixture components per class (default: {d_run['n_centroids'].default})")
    p.add_argument("--feat-dim", type=int,
                   help=f"embedding width (default: {d_run['feat_dim'].default})")
    p.add_argument("--hidden-dim", type=int,
                   help=f"extractor hidden width (default: {d_run['hidden_dim'].default})")
    p.add_argument("--seeds", help="comma-separated run seeds (default: 0)")
    p.add_argument("--random-insertion", action="store_true",
                   help="ablation: uniform-random memory writes (default: centroid-aware)")
    p.add_argument("--eval-every-batch", action="store_true",
                   help="record an accuracy curve after every batch (default: off)")

    p.add_argument("--lr-theta", type=float,
                   help=f"extractor rate (default: {d_pres['lr_theta']})")
    p.add_argument("--lr-proto", type=float,
                   help=f"prototype rate (default: {d_pres['lr_proto']})")
    p.add_argument("--clip-alpha", type=float,
                   help=f"old-prototype gradient damping in [0,1] (default: {d_pres['clip_alpha']})")
    p.add_argument("--steps-l1", type=int,
                   help=f"separation updates per batch (default: {d_pres['steps_l1']})")
    p.add_argument("--steps-l2", type=int,
                   help=f"compression updates per batch (default: {d_pres['steps_l2']})")

    p.add_argument("--epsilon", type=float,
                   help=f"entropic rate of the transport objective (default: {d_otmm['epsilon']})")
    p.add_argument("--tau", type=float,
                   help=f"Gumbel-softmax temperature (default: {d_otmm['tau']})")
    p.add_argument("--n-phi-steps", type=int,
                   help=f"potential ascent steps per batch (default: {d_otmm['n_phi_steps']})")
    p.add_argument("--n-mix-steps", type=int,
                   help=f"mixture descent steps per batch (default: {d_otmm['n_mix_steps']})")
    p.add_argument("--n-mix-samples", type=int,
                   help="mixture draws per objective estimate (default: batch size)")
    p.add_argument("--lr-phi", type=float,
                   help=f"potential rate (default: {d_otmm['lr_phi']})")
    p.add_argument("--lr-mix", type=float,
                   help=f"mixture rate (default: {d_otmm['lr_mix']})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="otcl",
        description="Online class-incremental learning with transport-fitted class mixtures.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a full experiment")
    _add_run_flags(p_run)
    p_run.set_defaults(func=_cmd_run)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on held-out task sets")
    p_eval.add_argument("--checkpoint", required=True, help="checkpoint .npz from a run")
    p_eval.add_argument("--data-dir", help="IDX directory for the mnist test set")
    p_eval.add_argument("--synth-npz", help="dataset .npz written by gen-synth")
    p_eval.set_defaults(func=_cmd_eval)

    p_gen = sub.add_parser("gen-synth", help="write a synthetic dataset to .npz")
    p_gen.add_argument("--out", required=True, help="output .npz path")
    p_gen.add_argument("--num-classes", type=int, default=2, help="classes (default: 2)")
    p_gen.add_argument("--modes-per-class", type=int, default=1, help="modes per class (default: 1)")
    p_gen.add_argument("--mode-scale", type=float, default=0.5, help="mode std (default: 0.5)")
    p_gen.add_argument("--samples-per-class", type=int, default=500,
                       help="samples per class (default: 500)")
    p_gen.add_argument("--seed", type=int, default=0, help="generator seed (default: 0)")
    p_gen.add_argument("--ring-radius", type=float, default=5.0,
                       help="radius of the interleaved mode ring (default: 5.0)")
    p_gen.add_argument("--dim", type=int, default=2, help="feature dimension (default: 2)")
    p_gen.set_defaults(func=_cmd_gen_synth)

    p_exp = sub.add_parser("export-embeddings", help="dump test-set embeddings to CSV")
    p_exp.add_argument("--checkpoint", required=True, help="checkpoint .npz from a run")
    p_exp.add_argument("--data-dir", help="IDX directory for the mnist test set")
    p_exp.add_argument("--synth-npz", help="dataset .npz written by gen-synth")
    p_exp.add_argument("--out", required=True, help="output CSV path")
    p_exp.set_defaults(func=_cmd_export_embeddings)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on bad usage; that's a config error
        code = exc.code if isinstance(exc.code, int) else 1
        return 0 if code == 0 else 1
    try:
        return args.func(args)
    except CliError as err:
        print(str(err), file=sys.stderr)
        return err.code


if __name__ == "__main__":
    sys.exit(main())

"""Command-line pipeline driver.

    zsquant fixture      --fixture tiny3 --output-dir work
    zsquant calibrate    --model-path work/tiny3.nnqf --dataset-dir work/calib
    zsquant distill      --model-path work/tiny3.calibrated.nnqf
    zsquant sensitivity  --model-path ... --distilled-path work/distilled.tensor
    zsquant pareto       --model-path ... --sensitivity-path work/sensitivity.csv --target-avg-bits 4
    zsquant quantize     --model-path ... --assignment-path work/assignment.json
    zsquant evaluate     --model-path A --compare-model-path B --eval-dataset-dir DIR
    zsquant ablate       --model-path ... --sensitivity-path ... --target-avg-bits 4

Exit codes: 0 success, 1 internal error, 2 bad input, 3 infeasible size target.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import traceback
from dataclasses import fields
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import formats, quant
from .allocator import (dp_optimize, grouped_refinement, inverse_optimize, pareto_frontier,
                        random_assignments)
from .config import MB_BITS, PipelineConfig, build_config, load_config_file
from .distill import generate_distilled_data, initial_batch
from .errors import FormatError, InfeasibleError, NothingToDistillError, ShapeError
from .fixtures import FIXTURES, fixture_data, make_fixture
from .model import calibrate_bn_stats, output
from .quantizer import FULL
from .sensitivity import SensitivityEvaluator, SensitivityTable, build_sensitivity_table, \
    kl_divergence

EXIT_OK, EXIT_INTERNAL, EXIT_BAD_INPUT, EXIT_INFEASIBLE = 0, 1, 2, 3


class BadInput(Exception):
    pass


def _str2bool(v):
    if v.lower() in ("1", "true", "yes", "on"):
        return True
    if v.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {v!r}")


def _add_config_flags(p):
    for f in fields(PipelineConfig):
        flag = "--" + f.name.replace("_", "-")
        default = getattr(PipelineConfig(), f.name)
        if f.name == "bit_options":
            p.add_argument(flag, type=int, nargs="+", default=None, metavar="K")
        elif isinstance(default, bool):
            p.add_argument(flag, type=_str2bool, nargs="?", const=True, default=None,
                           metavar="BOOL")
        elif f.name in ("target_mb", "target_avg_bits"):
            p.add_argument(flag, type=float, default=None)
        elif f.name == "weight_bits":
            p.add_argument(flag, type=int, default=None)
        elif isinstance(default, int):
            p.add_argument(flag, type=int, default=None)
        elif isinstance(default, float):
            p.add_argument(flag, type=float, default=None)
        else:
            p.add_argument(flag, type=str, default=None)


def _need(cfg, name):
    value = getattr(cfg, name)
    if value is None:
        raise BadInput(f"--{name.replace('_', '-')} is required for this command")
    path = Path(value)
    if name.endswith("_dir"):
        if not path.is_dir():
            raise BadInput(f"{name}: directory {value} does not exist")
    elif not path.is_file():
        raise BadInput(f"{name}: file {value} does not exist")
    return path


def _out(cfg):
    d = Path(cfg.output_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_json(path, obj):
    formats.atomic_write_text(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _run_manifest(cfg, command, outputs):
    _write_json(_out(cfg) / f"{command}.manifest.json",
                {"command": command, "config_hash": cfg.config_hash(),
                 "config": cfg.to_dict(), "outputs": [str(p) for p in outputs]})


def _load_model(cfg, name="model_path"):
    return formats.load_model(_need(cfg, name))


def _stack(batches):
    return np.concatenate([np.asarray(b, dtype=np.float32) for b in batches], axis=0)


def _eval_batches(cfg):
    d = cfg.eval_dataset_dir or cfg.dataset_dir
    if d is None:
        raise BadInput("--eval-dataset-dir (or --dataset-dir) is required for this command")
    if not Path(d).is_dir():
        raise BadInput(f"dataset directory {d} does not exist")
    return formats.load_dataset(d)


def _sensitivity_data(cfg, model):
    """Evaluation batch for sensitivity and activation ranges, per data_source."""
    if cfg.data_source == "gaussian":
        return initial_batch(model, cfg.batch_size, cfg.seed)
    if cfg.data_source == "dataset":
        return _stack(formats.load_dataset(_need(cfg, "dataset_dir")))[:cfg.batch_size]
    data, _ = formats.load_tensor(_need(cfg, "distilled_path"))
    return data


# -- commands ---------------------------------------------------------------

def cmd_fixture(cfg):
    """Write a toy model, its calibration dataset and a held-out evaluation set."""
    if cfg.fixture not in FIXTURES:
        raise BadInput(f"unknown fixture {cfg.fixture!r}; choose from {', '.join(FIXTURES)}")
    out = _out(cfg)
    model, calib = make_fixture(cfg.fixture, cfg.seed)
    mpath = formats.save_model(model, out / f"{cfg.fixture}.nnqf")
    formats.save_dataset(out / "calib", calib)
    formats.save_dataset(out / "eval", fixture_data(cfg.seed, 4, 64, split="eval"))
    formats.save_dataset(out / "heldout", fixture_data(cfg.seed, 2, 32, split="heldout"))
    print(f"wrote {mpath} ({len(model.quantizable_indices)} quantizable layers, "
          f"{model.num_bn} BN layers) and datasets calib/, eval/, heldout/")
    _run_manifest(cfg, "fixture", [mpath, out / "calib", out / "eval", out / "heldout"])


def cmd_calibrate(cfg):
    model = _load_model(cfg)
    data = formats.load_dataset(_need(cfg, "dataset_dir"))
    calibrated = calibrate_bn_stats(model, data)
    path = formats.save_model(calibrated, _out(cfg) / f"{model.name}.calibrated.nnqf",
                              extra={"config_hash": cfg.config_hash()})
    for j in calibrated.bn_indices:
        bn = calibrated.layers[j]
        print(f"BN layer {j:3d}: channels={bn.channels:3d} mean(mu)={bn.mu.mean():+.4f} "
              f"mean(sigma2)={bn.sigma2.mean():.4f}")
    print(f"wrote {path}")
    _run_manifest(cfg, "calibrate", [path])


def cmd_distill(cfg):
    model = _load_model(cfg)
    result = generate_distilled_data(model, cfg.distill_config())
    out = _out(cfg)
    path = formats.save_tensor(out / "distilled.tensor", result.data, meta={
        "seed": cfg.seed, "config": cfg.distill_config().to_dict(),
        "final_loss": result.final_loss, "config_hash": cfg.config_hash()})
    loss_csv = out / "distill_loss.csv"
    with open(loss_csv, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "loss"])
        for i, loss in enumerate(result.loss_history):
            w.writerow([i, repr(loss)])
    initial = result.loss_history[0] if result.loss_history else result.final_loss
    print(f"distilled {result.data.shape[0]} samples: loss {initial:.6g} -> "
          f"{result.final_loss:.6g}")
    print(f"wrote {path} and {loss_csv}")
    _run_manifest(cfg, "distill", [path, loss_csv])


def cmd_sensitivity(cfg):
    model = _load_model(cfg)
    data = _sensitivity_data(cfg, model)
    table = build_sensitivity_table(model, data, cfg.bit_options, cfg.clip, cfg.gamma,
                                    threads=cfg.threads)
    path = _out(cfg) / "sensitivity.csv"
    table.to_csv(path)
    print(f"sensitivity over {len(table.layer_ids)} layers x {len(table.bit_options)} "
          f"bit options ({cfg.data_source} data, fingerprint {table.data_fingerprint})")
    if cfg.data_source != "dataset" and cfg.dataset_dir is not None:
        real = _stack(formats.load_dataset(_need(cfg, "dataset_dir")))
        ref = build_sensitivity_table(model, real, cfg.bit_options, cfg.clip, cfg.gamma,
                                      threads=cfg.threads)
        for c, k in enumerate(table.bit_options):
            rho = spearmanr(table.omega[:, c], ref.omega[:, c])[0]
            print(f"  spearman({cfg.data_source} vs dataset) at {k}-bit: {rho:+.4f}")
    print(f"wrote {path}")
    _run_manifest(cfg, "sensitivity", [path])


def _pinned(cfg, table):
    if not cfg.pin_edges:
        return None
    if 8 not in table.bit_options:
        raise BadInput("--pin-edges needs 8 among the bit options")
    return {0: 8, len(table.layer_ids) - 1: 8}


def _joint_scorer(cfg, model):
    ev = SensitivityEvaluator(model, _sensitivity_data(cfg, model), cfg.clip, cfg.gamma)
    return ev.joint


def cmd_pareto(cfg):
    table = SensitivityTable.from_csv(_need(cfg, "sensitivity_path"))
    target = cfg.target_bits(table.param_counts)
    pinned = _pinned(cfg, table)
    points = pareto_frontier(table, num_points=cfg.num_points, pinned=pinned)
    out = _out(cfg)
    fpath = out / "frontier.csv"
    with open(fpath, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["size_bits", "size_mb", "omega_sum", "bits_vector"])
        for p in points:
            w.writerow([p.size_bits, f"{p.size_bits / MB_BITS:.6f}", repr(p.omega_sum),
                        p.assignment.bits_vector])
    chosen = dp_optimize(table, target_bits=target, pinned=pinned)
    if cfg.grouped:
        if pinned:
            raise BadInput("--grouped cannot be combined with --pin-edges")
        model = _load_model(cfg)
        chosen = grouped_refinement(table, _joint_scorer(cfg, model), cfg.grouped_params(),
                                    target)
    apath = out / "assignment.json"
    formats.atomic_write_text(apath, chosen.to_json() + "\n")
    avg = chosen.size_bits / max(sum(table.param_counts), 1)
    print(f"target {target} bits: chose {chosen.bits_vector} "
          f"({chosen.size_bits} bits, avg {avg:.3f} bits/weight, omega_sum "
          f"{chosen.omega_sum:.6g}" + (f", omega_true {chosen.omega_true:.6g}"
                                       if chosen.omega_true is not None else "") + ")")
    print(f"wrote {fpath} ({len(points)} points) and {apath}")
    _run_manifest(cfg, "pareto", [fpath, apath])


def _read_assignment(cfg, model):
    if cfg.assignment_path is None:
        if cfg.weight_bits is None:
            raise BadInput("give --assignment-path or --weight-bits")
        return {i: cfg.weight_bits for i in model.quantizable_indices}
    raw = json.loads(_need(cfg, "assignment_path").read_text())
    return {int(k): int(v) for k, v in raw.items()}


def cmd_quantize(cfg):
    model = _load_model(cfg)
    assignment = _read_assignment(cfg, model)
    ranges = None
    if cfg.activation_bits != FULL:
        ranges = quant.capture_activation_ranges(model, _sensitivity_data(cfg, model),
                                                 cfg.clip, cfg.gamma)
    qmodel, record = quant.quantize_model(model, assignment, cfg.activation_bits, ranges,
                                          cfg.clip, cfg.gamma)
    out = _out(cfg)
    mpath = formats.save_model(qmodel, out / f"{model.name}.quantized.nnqf",
                               extra={"config_hash": cfg.config_hash()})
    rpath = out / "quant_record.json"
    formats.atomic_write_text(rpath, record.to_json() + "\n")
    print(f"quantized {len(record.weight_entries())} layers: weight size "
          f"{record.size_bits(model)} bits, activations "
          f"{'FULL' if cfg.activation_bits == FULL else cfg.activation_bits}-bit")
    print(f"wrote {mpath} and {rpath}")
    _run_manifest(cfg, "quantize", [mpath, rpath])


def evaluate_models(model_a, model_b, batches):
    hits = n = 0
    kl_total = 0.0
    for x in batches:
        ya, yb = output(model_a, x), output(model_b, x)
        hits += int(np.sum(ya.argmax(-1) == yb.argmax(-1)))
        kl_total += kl_divergence(ya, yb, probabilities=model_a.ends_with_softmax) * len(x)
        n += len(x)
    return {"n": n, "agreement": hits / n, "mean_kl": kl_total / n}


def cmd_evaluate(cfg):
    a = _load_model(cfg)
    b = _load_model(cfg, "compare_model_path")
    report = evaluate_models(a, b, _eval_batches(cfg))
    report["config_hash"] = cfg.config_hash()
    path = _out(cfg) / "evaluation.json"
    _write_json(path, report)
    print(f"n={report['n']} agreement={report['agreement']:.4f} "
          f"mean_kl={report['mean_kl']:.6g}")
    print(f"wrote {path}")
    _run_manifest(cfg, "evaluate", [path])


def ablate(model, table, target, sens_data, eval_batches, activation_bits=8, clip="minmax",
           gamma=0.001, draws=5, seed=0, pinned=None):
    """Minimize / maximize / random bit selection under one size budget."""
    ev = SensitivityEvaluator(model, sens_data, clip, gamma)
    ranges = None
    if activation_bits != FULL:
        ranges = quant.capture_activation_ranges(model, sens_data, clip, gamma)
    runs = [("minimize", dp_optimize(table, target_bits=target, pinned=pinned)),
            ("maximize", inverse_optimize(table, target_bits=target, pinned=pinned))]
    runs += [(f"random{i}", a) for i, a in
             enumerate(random_assignments(table, target_bits=target, draws=draws, seed=seed))]
    report = []
    for label, a in runs:
        qm, _ = quant.quantize_model(model, a.as_dict(), activation_bits, ranges, clip, gamma)
        report.append({"method": label, "bits": a.bits_per_layer, "size_bits": a.size_bits,
                       "omega_sum": a.omega_sum, "omega_true": ev.joint(a.as_dict()),
                       "agreement": quant.agreement(model, qm, eval_batches)})
    return report


def cmd_ablate(cfg):
    model = _load_model(cfg)
    table = SensitivityTable.from_csv(_need(cfg, "sensitivity_path"))
    target = cfg.target_bits(table.param_counts)
    report = ablate(model, table, target, _sensitivity_data(cfg, model), _eval_batches(cfg),
                    cfg.activation_bits, cfg.clip, cfg.gamma, cfg.random_draws, cfg.seed,
                    _pinned(cfg, table))
    path = _out(cfg) / "ablation.json"
    _write_json(path, {"target_bits": target, "config_hash": cfg.config_hash(),
                       "runs": report})
    for r in report:
        print(f"{r['method']:>8s}: bits {'-'.join(map(str, r['bits']))} "
              f"omega_sum {r['omega_sum']:.5g} omega_true {r['omega_true']:.5g} "
              f"agreement {r['agreement']:.4f}")
    print(f"wrote {path}")
    _run_manifest(cfg, "ablate", [path])


COMMANDS = {
    "fixture": cmd_fixture,
    "calibrate": cmd_calibrate,
    "distill": cmd_distill,
    "sensitivity": cmd_sensitivity,
    "pareto": cmd_pareto,
    "quantize": cmd_quantize,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="zsquant", description=__doc__.split("\n")[0])
    parser.add_argument("--config", help="JSON config file; flags override its fields")
    parser.add_argument("--dump-defaults", action="store_true",
                        help="print the default configuration as JSON and exit")
    sub = parser.add_subparsers(dest="command")
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or name).strip().split("\n")[0])
        p.add_argument("--config", dest="sub_config", help=argparse.SUPPRESS)
        _add_config_flags(p)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.dump_defaults:
        print(json.dumps(PipelineConfig().to_dict(), indent=1, sort_keys=True))
        return EXIT_OK
    if args.command is None:
        parser.print_help()
        return EXIT_BAD_INPUT
    try:
        config_path = getattr(args, "sub_config", None) or args.config
        file_values = load_config_file(config_path) if config_path else {}
        overrides = {f.name: getattr(args, f.name) for f in fields(PipelineConfig)}
        cfg = build_config(file_values, overrides)
        COMMANDS[args.command](cfg)
    except InfeasibleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (BadInput, FormatError, ShapeError, NothingToDistillError, FileNotFoundError,
            ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except Exception:  # noqa: BLE001
        traceback.print_exc()
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

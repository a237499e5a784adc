"""Command-line entry point: generate | train | eval | ablate | report.

Settings come from an INI-style config file (one section per command) plus
--key=value overrides; unknown keys are rejected and paths are validated
before any work starts. Every command is deterministic given its settings
and seed. Exit codes: 0 success, 1 usage/config error, 2 runtime error;
errors print one machine-parsable line on stderr.
"""

import configparser
import csv
import json
import sys
from pathlib import Path

from . import __version__, metabce, ocml
from .backbone import BackboneSpec, from_param_groups, to_param_groups
from .checkpoint import load_checkpoint, save_checkpoint
from .data import DatasetError, SyntheticSpec, generate_synthetic, load_dataset, save_dataset
from .episodes import (
    EpisodeConfig,
    MetaBceGate,
    OcmlGate,
    ThresholdGate,
    TrainSchedule,
    calibrate_threshold_baseline,
    default_schedule,
    evaluate_oneclass,
    evaluate_openset,
    run_meta_training,
)


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config schema & parsing


class Option:
    def __init__(self, default, parse=str, choices=None, required=False, help=""):
        self.default = default
        self.parse = parse
        self.choices = choices
        self.required = required
        self.help = help


def _parse_int_list(s):
    return tuple(int(tok) for tok in str(s).split(",") if tok.strip())


def _parse_split(s):
    if s == "auto":
        return None
    return tuple(int(tok) for tok in s.split("/"))


SCHEMAS = {
    "generate": {
        "out": Option(None, str, required=True, help="manifest JSON path to write"),
        "name": Option("synthetic"),
        "num_classes": Option(40, int),
        "examples_per_class": Option(60, int),
        "dim": Option(32, int),
        "separation": Option(8.0, float),
        "spread": Option(1.0, float),
        "seed": Option(0, int),
        "split": Option(None, _parse_split, help="train/val/test counts, e.g. 24/6/10"),
    },
    "train": {
        "method": Option(
            None,
            str,
            choices=("protonet", "mbce", "mbce_projected", "ocml_frozen", "ocml_joint"),
            required=True,
        ),
        "dataset": Option(None, str, required=True, help="dataset manifest path"),
        "out": Option(None, str, required=True, help="checkpoint path to write"),
        "backbone": Option("", str, help="base checkpoint (required for augmentation methods)"),
        "loss_csv": Option("", str, help="optional per-episode loss curve CSV"),
        "episodes": Option(0, int, help="0 uses the method default"),
        "n": Option(5, int),
        "k": Option(5, int),
        "q": Option(10, int),
        "optimizer": Option("auto", str, choices=("auto", "sgd", "adam")),
        "learning_rate": Option(0.0, float, help="0 uses the method default"),
        "offset_learning_rate": Option(0.0, float, help="0 uses the method default (mbce)"),
        "val_interval": Option(0, int),
        "val_episodes": Option(0, int),
        "seed": Option(0, int),
        "blocks": Option((64, 64), _parse_int_list, help="dense widths for a fresh backbone"),
        "ocml_arch": Option("1layer", str, help="1layer or mid<N> transfer module"),
    },
    "eval": {
        "task": Option(None, str, choices=("oneclass", "openset"), required=True),
        "head": Option(None, str, choices=("mbce", "ocml", "threshold"), required=True),
        "checkpoint": Option(None, str, required=True),
        "dataset": Option(None, str, required=True),
        "out": Option(None, str, required=True, help="report JSON path"),
        "episode_csv": Option("", str),
        "records_csv": Option("", str),
        "n": Option(0, int, help="0 -> 1 for oneclass, 5 for openset"),
        "k": Option(5, int),
        "q": Option(15, int),
        "n_unknown": Option(-1, int, help="-1 matches n"),
        "episodes": Option(10000, int, help="number of evaluation episodes"),
        "seed": Option(0, int),
        "partition": Option("meta_test", str, choices=("meta_val", "meta_test")),
        "workers": Option(1, int),
        "calib_episodes": Option(200, int, help="threshold calibration episodes"),
    },
    "ablate": {
        "grid": Option(
            None, str, choices=("gtheta", "kshot", "nway", "mbce_variant"), required=True
        ),
        "dataset": Option(None, str, required=True),
        "backbone": Option(None, str, required=True, help="pretrained backbone checkpoint"),
        "out_dir": Option(None, str, required=True),
        "k_values": Option((1, 2, 3, 5, 10, 20), _parse_int_list),
        "n_values": Option((2, 3, 5), _parse_int_list),
        "n": Option(5, int),
        "k": Option(5, int),
        "q": Option(15, int),
        "train_episodes": Option(0, int, help="0 uses the method default"),
        "eval_episodes": Option(200, int),
        "seed": Option(0, int),
        "workers": Option(1, int),
    },
    "report": {
        "inputs": Option(None, str, required=True, help="comma-separated report JSONs"),
        "out_csv": Option("", str),
    },
}


def _load_config_file(path, command):
    parser = configparser.ConfigParser()
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except configparser.Error as exc:
        raise UsageError(f"config file {path}: {exc}")
    if not parser.has_section(command):
        return {}
    return dict(parser.items(command))


def parse_command(command, argv):
    """Merge config-file section and --key=value overrides, validate types."""
    schema = SCHEMAS[command]
    raw = {}
    config_path = None
    overrides = {}
    for tok in argv:
        if not tok.startswith("--") or "=" not in tok:
            raise UsageError(f"expected --key=value arguments, got {tok!r}")
        key, value = tok[2:].split("=", 1)
        if key == "config":
            config_path = value
        else:
            overrides[key] = value
    if config_path:
        raw.update(_load_config_file(config_path, command))
    raw.update(overrides)

    settings = {}
    for key, value in raw.items():
        opt = schema.get(key)
        if opt is None:
            raise UsageError(f"unknown key {key!r} for command {command!r}")
        try:
            parsed = opt.parse(value)
        except ValueError as exc:
            raise UsageError(f"bad value for {key!r}: {exc}")
        if opt.choices and parsed not in opt.choices:
            raise UsageError(f"{key!r} must be one of {opt.choices}, got {parsed!r}")
        settings[key] = parsed
    for key, opt in schema.items():
        if key not in settings:
            if opt.required:
                raise UsageError(f"command {command!r} requires --{key}")
            settings[key] = opt.default
    return settings


def _require_file(path, what):
    if not Path(path).is_file():
        raise UsageError(f"{what} not found: {path}")


def _require_out_dir(path, what):
    parent = Path(path).resolve().parent
    if not parent.is_dir():
        raise UsageError(f"directory for {what} does not exist: {parent}")


# ---------------------------------------------------------------------------
# checkpoint assembly


def save_pipeline_checkpoint(path, params, heads, meta):
    """Backbone groups plus optional named head groups in one checkpoint."""
    groups = to_param_groups(params)
    head_meta = {}
    if "mbce" in heads:
        group, hm = metabce.head_to_group(heads["mbce"])
        groups.append(group)
        head_meta["mbce"] = hm
    if "ocml" in heads:
        group, hm = ocml.transfer_to_group(heads["ocml"])
        groups.append(group)
        head_meta["ocml"] = hm
    header = {
        "backbone_spec": params.spec.to_dict(),
        "heads": head_meta,
        "meta": meta,
        "fsos_version": __version__,
    }
    save_checkpoint(path, header, groups)


def load_pipeline_checkpoint(path):
    header, groups = load_checkpoint(path)
    spec = BackboneSpec.from_dict(header["backbone_spec"])
    backbone_groups = [(g, p) for g, p in groups if g not in ("mbce", "ocml")]
    params = from_param_groups(spec, backbone_groups)
    heads = {}
    by_name = dict(groups)
    head_meta = header.get("heads", {})
    if "mbce" in by_name:
        heads["mbce"] = metabce.head_from_group(by_name["mbce"], head_meta.get("mbce", {}))
    if "ocml" in by_name:
        heads["ocml"] = ocml.transfer_from_group(by_name["ocml"], head_meta.get("ocml", {}))
    return params, heads, header


# ---------------------------------------------------------------------------
# commands


def cmd_generate(settings):
    _require_out_dir(settings["out"], "the dataset manifest")
    spec = SyntheticSpec(
        num_classes=settings["num_classes"],
        examples_per_class=settings["examples_per_class"],
        dim=settings["dim"],
        separation=settings["separation"],
        spread=settings["spread"],
        seed=settings["seed"],
    )
    dataset = generate_synthetic(spec, split_counts=settings["split"], name=settings["name"])
    checksum = save_dataset(dataset, settings["out"])
    print(f"manifest={settings['out']}")
    print(f"checksum={checksum}")
    return 0


def _resolve_schedule(settings, method):
    base = default_schedule(
        "mbce" if method == "mbce_projected" else method,
        settings["episodes"] or None,
    )
    return TrainSchedule(
        episodes=base.episodes,
        learning_rate=settings["learning_rate"] or base.learning_rate,
        optimizer=base.optimizer if settings["optimizer"] == "auto" else settings["optimizer"],
        val_interval=settings["val_interval"] or base.val_interval,
        val_episodes=settings["val_episodes"] or base.val_episodes,
        offset_learning_rate=settings["offset_learning_rate"] or base.offset_learning_rate,
    )


def _parse_ocml_arch(text, embed_dim):
    if text == "1layer":
        return None
    if text.startswith("mid"):
        return int(text[3:])
    raise UsageError(f"ocml_arch must be '1layer' or 'mid<N>', got {text!r}")


def cmd_train(settings):
    _require_file(settings["dataset"], "dataset manifest")
    _require_out_dir(settings["out"], "the checkpoint")
    if settings["loss_csv"]:
        _require_out_dir(settings["loss_csv"], "the loss CSV")
    method = settings["method"]
    needs_base = method in ("mbce", "mbce_projected", "ocml_frozen")
    if needs_base and not settings["backbone"]:
        raise UsageError(f"method {method!r} augments a pretrained backbone: --backbone required")
    if settings["backbone"]:
        _require_file(settings["backbone"], "backbone checkpoint")

    dataset = load_dataset(settings["dataset"])
    base_params = None
    if settings["backbone"]:
        base_params, _, _ = load_pipeline_checkpoint(settings["backbone"])
    spec = None
    if base_params is None:
        spec = BackboneSpec(
            "vector", (dataset.dim,), tuple(("dense", w) for w in settings["blocks"])
        )

    train_method = "mbce" if method == "mbce_projected" else method
    variant = "projected" if method == "mbce_projected" else "branch"
    schedule = _resolve_schedule(settings, method)
    cfg = EpisodeConfig(n=settings["n"], k=settings["k"], q=settings["q"], n_unknown=0)
    middle = None
    if train_method in ("ocml_frozen", "ocml_joint"):
        embed_dim = base_params.embed_dim if base_params is not None else spec.embed_dim
        middle = _parse_ocml_arch(settings["ocml_arch"], embed_dim)

    result = run_meta_training(
        train_method,
        dataset,
        cfg,
        schedule,
        seed=settings["seed"],
        base_params=base_params,
        spec=spec,
        variant=variant,
        transfer_middle=middle,
    )

    heads = {}
    if train_method == "mbce":
        heads["mbce"] = result.head
    elif result.head is not None:
        heads["ocml"] = result.head
    meta = {
        "method": method,
        "seed": settings["seed"],
        "episode_config": cfg.as_dict(),
        "schedule": schedule.as_dict(),
        "dataset": {"name": dataset.name, "meta": dataset.meta},
        "best_validation": result.best_val,
    }
    save_pipeline_checkpoint(settings["out"], result.params, heads, meta)
    if settings["loss_csv"]:
        with open(settings["loss_csv"], "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["episode", "loss"])
            for i, v in enumerate(result.loss_curve):
                writer.writerow([i, repr(v)])
    print(f"checkpoint={settings['out']}")
    print(f"best_validation={result.best_val!r}")
    return 0


def _build_gate(settings, params, heads, dataset):
    head = settings["head"]
    if head == "mbce":
        if "mbce" not in heads:
            raise UsageError("checkpoint holds no mbce head group")
        return MetaBceGate(heads["mbce"]), {}
    if head == "ocml":
        if "ocml" not in heads:
            raise UsageError("checkpoint holds no ocml head group")
        return OcmlGate(heads["ocml"]), {}
    cal_cfg = EpisodeConfig(
        n=settings["n"], k=settings["k"], q=settings["q"], n_unknown=settings["n_unknown"]
    )
    baseline = calibrate_threshold_baseline(
        params, dataset, cal_cfg, settings["calib_episodes"], settings["seed"]
    )
    return ThresholdGate(baseline), {"tau": baseline.tau}


def cmd_eval(settings):
    _require_file(settings["dataset"], "dataset manifest")
    _require_file(settings["checkpoint"], "checkpoint")
    _require_out_dir(settings["out"], "the report JSON")
    for key in ("episode_csv", "records_csv"):
        if settings[key]:
            _require_out_dir(settings[key], key)
    if settings["episodes"] < 1:
        raise UsageError("episodes must be >= 1")
    if settings["n"] == 0:
        settings["n"] = 1 if settings["task"] == "oneclass" else 5
    if settings["task"] == "oneclass" and settings["n"] != 1:
        raise UsageError(f"oneclass evaluation requires n=1, got n={settings['n']}")

    dataset = load_dataset(settings["dataset"])
    params, heads, _ = load_pipeline_checkpoint(settings["checkpoint"])
    gate, extra = _build_gate(settings, params, heads, dataset)
    cfg = EpisodeConfig(
        n=settings["n"],
        k=settings["k"],
        q=settings["q"],
        n_unknown=settings["n_unknown"],
        seed=settings["seed"],
    )
    evaluate = evaluate_oneclass if settings["task"] == "oneclass" else evaluate_openset
    report = evaluate(
        params,
        gate,
        dataset,
        cfg,
        settings["episodes"],
        settings["seed"],
        partition=settings["partition"],
        workers=settings["workers"],
        collect_records=bool(settings["records_csv"]),
    )
    report.config.update(extra)
    report.config["checkpoint"] = Path(settings["checkpoint"]).name
    report.config["fsos_version"] = __version__
    report.write_json(settings["out"])
    if settings["episode_csv"]:
        report.write_episode_csv(settings["episode_csv"])
    if settings["records_csv"]:
        report.write_records_csv(settings["records_csv"])
    for name in sorted(report.metrics):
        s = report.metrics[name]
        print(f"{name}={s.mean:.4f}+-{s.ci:.4f}")
    print(f"report={settings['out']}")
    return 0


def _write_curve_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def cmd_ablate(settings):
    _require_file(settings["dataset"], "dataset manifest")
    _require_file(settings["backbone"], "backbone checkpoint")
    out_dir = Path(settings["out_dir"])
    if not out_dir.is_dir():
        raise UsageError(f"out_dir does not exist: {out_dir}")
    if not settings["k_values"] or not settings["n_values"]:
        raise UsageError("ablation grids must be non-empty")

    dataset = load_dataset(settings["dataset"])
    base_params, _, _ = load_pipeline_checkpoint(settings["backbone"])
    seed = settings["seed"]
    train_cfg = EpisodeConfig(n=settings["n"], k=settings["k"], q=10, n_unknown=0)
    grid = settings["grid"]
    m_eval = settings["eval_episodes"]
    workers = settings["workers"]
    test_size = len(dataset.split.meta_test)

    def openset_cfg(n_way, k):
        n_unknown = min(n_way, test_size - n_way)
        if n_unknown < 1:
            raise UsageError(
                f"meta_test has {test_size} classes, cannot fit {n_way}-way plus unknowns"
            )
        return EpisodeConfig(n=n_way, k=k, q=settings["q"], n_unknown=n_unknown)

    def train(method, variant="branch", middle=None):
        schedule = default_schedule(
            "mbce" if method == "mbce" else method, settings["train_episodes"] or None
        )
        return run_meta_training(
            method, dataset, train_cfg, schedule, seed=seed,
            base_params=base_params, variant=variant, transfer_middle=middle,
        )

    written = []
    if grid == "gtheta":
        menu = ocml.architecture_menu(base_params.embed_dim)
        curves = {"accuracy": [], "f1": [], "auroc": []}
        for arch_name, middle in menu:
            result = train("ocml_frozen", middle=middle)
            gate = OcmlGate(result.head)
            for k in settings["k_values"]:
                cfg = EpisodeConfig(n=1, k=k, q=settings["q"], n_unknown=1)
                rep = evaluate_oneclass(
                    base_params, gate, dataset, cfg, m_eval, seed, workers=workers
                )
                for metric in curves:
                    s = rep.metrics[metric]
                    curves[metric].append([arch_name, k, repr(s.mean), repr(s.ci)])
        for metric, rows in curves.items():
            path = out_dir / f"gtheta_{metric}.csv"
            _write_curve_csv(path, ["architecture", "k", "mean", "ci"], rows)
            written.append(path)
    elif grid in ("kshot", "nway"):
        mbce_res = train("mbce")
        ocml_res = train("ocml_frozen")
        baseline = calibrate_threshold_baseline(
            base_params, dataset,
            EpisodeConfig(n=settings["n"], k=settings["k"], q=settings["q"]),
            200, seed,
        )
        gates = [
            ("mbce", MetaBceGate(mbce_res.head), mbce_res.params),
            ("ocml", OcmlGate(ocml_res.head), base_params),
            ("threshold", ThresholdGate(baseline), base_params),
        ]
        metric_names = ["accuracy", "na", "f1_open", "auroc"]
        curves = {m: [] for m in metric_names}
        if grid == "kshot":
            points = [("k", k, settings["n"]) for k in settings["k_values"]]
        else:
            points = [("n", n, n) for n in settings["n_values"]]
        for axis, value, n_way in points:
            k = value if axis == "k" else settings["k"]
            cfg = openset_cfg(n_way, k)
            for name, gate, params in gates:
                rep = evaluate_openset(
                    params, gate, dataset, cfg, m_eval, seed, workers=workers
                )
                for metric in metric_names:
                    s = rep.metrics[metric]
                    curves[metric].append([name, value, repr(s.mean), repr(s.ci)])
        axis = "k" if grid == "kshot" else "n"
        for metric, rows in curves.items():
            path = out_dir / f"{grid}_{metric}.csv"
            _write_curve_csv(path, ["method", axis, "mean", "ci"], rows)
            written.append(path)
    else:  # mbce_variant
        rows = []
        for variant in metabce.VARIANTS:
            result = train("mbce", variant=variant)
            gate = MetaBceGate(result.head)
            cfg = openset_cfg(settings["n"], settings["k"])
            rep = evaluate_openset(
                result.params, gate, dataset, cfg, m_eval, seed, workers=workers
            )
            for metric in ("accuracy", "na", "f1_open", "auroc"):
                s = rep.metrics[metric]
                rows.append([variant, metric, repr(s.mean), repr(s.ci)])
        path = out_dir / "mbce_variant_openset.csv"
        _write_curve_csv(path, ["variant", "metric", "mean", "ci"], rows)
        written.append(path)

    for path in written:
        print(f"curve={path}")
    return 0


_SHAPE_KEYS = ("task", "n", "k", "q", "n_unknown", "m_episodes", "partition")


def cmd_report(settings):
    paths = [p for p in settings["inputs"].split(",") if p]
    if not paths:
        raise UsageError("report needs at least one input JSON")
    for p in paths:
        _require_file(p, "report JSON")
    if settings["out_csv"]:
        _require_out_dir(settings["out_csv"], "the comparison CSV")
    reports = []
    for p in paths:
        with open(p) as fh:
            reports.append((Path(p).name, json.load(fh)))
    shape0 = {k: reports[0][1]["config"].get(k) for k in _SHAPE_KEYS}
    for name, rep in reports[1:]:
        shape = {k: rep["config"].get(k) for k in _SHAPE_KEYS}
        mismatched = [k for k in _SHAPE_KEYS if shape[k] != shape0[k]]
        if mismatched:
            raise UsageError(
                f"report {name} does not share the config shape: mismatched {mismatched}"
            )
    metric_names = sorted(reports[0][1]["metrics"])
    header = ["report", "gate"] + [f"{m}" for m in metric_names]
    rows = []
    for name, rep in reports:
        row = [name, rep["config"].get("gate", "")]
        for m in metric_names:
            cell = rep["metrics"][m]
            row.append(f"{cell['mean']:.4f}+-{cell['ci']:.4f}")
        rows.append(row)
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    for r in [header] + rows:
        print("  ".join(str(c).ljust(w) for c, w in zip(r, widths)))
    if settings["out_csv"]:
        with open(settings["out_csv"], "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
        print(f"table={settings['out_csv']}")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        if not argv or argv[0] in ("-h", "--help"):
            print("usage: fsos {generate|train|eval|ablate|report} [--config=FILE] [--key=value ...]")
            return 0
        command = argv[0]
        if command not in COMMANDS:
            raise UsageError(f"unknown command {command!r}")
        settings = parse_command(command, argv[1:])
        return COMMANDS[command](settings)
    except UsageError as exc:
        print(f"error: [usage] {exc}", file=sys.stderr)
        return 1
    except (DatasetError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: [runtime] {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``rgbdfuse <subcommand> [flags]``.

Exit codes: 0 success, 1 validation failure (bad data, failed check), 2 usage
error. Option precedence is flag > ``--config`` JSON > built-in default.
Logs go to standard error; results go to files or standard output.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from contextlib import nullcontext
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ContractError, FormatError, GenerationError, RgbdFuseError, ValidationError


@dataclass(frozen=True)
class Opt:
    flag: str
    type: type
    default: object
    help: str
    choices: tuple | None = None

    @property
    def dest(self) -> str:
        return self.flag.lstrip("-").replace("-", "_")


COMMON = (
    Opt("--seed", int, 0, "root random seed; printed at startup"),
    Opt("--threads", int, 0, "cap on numeric worker threads (0 = library default)"),
    Opt("--config", str, None, "JSON file of option overrides (flags still win)"),
)

_SCENE = (
    Opt("--color-mode", str, "ambiguous", "scene colouring", ("distinct", "ambiguous")),
    Opt("--depth-mode", str, "flat", "per-object depth profile", ("flat", "gradient")),
    Opt("--height", int, 64, "image height in pixels"),
    Opt("--width", int, 64, "image width in pixels"),
    Opt("--min-instances", int, 2, "fewest instances per scene"),
    Opt("--max-instances", int, 4, "most instances per scene"),
)

_MODEL = (
    Opt("--fusion", str, "iam+cdf", "fusion kind: none|rgb|early|late|intra|inter|iam|cdf|iam+cdf (aliases rgb-only, iam-only, cdf-only)"),
    Opt("--routing", str, "C", "feature routing design", ("A", "B", "C", "D")),
    Opt("--insertion", str, "1,1,1", "fusion blocks after stages 2,3,4 as three 0/1 flags"),
    Opt("--queries", int, 8, "number of object queries"),
    Opt("--epochs", int, 60, "training epochs"),
    Opt("--lr", float, 1e-3, "initial learning rate"),
    Opt("--batch-size", int, 4, "images per optimisation step"),
    Opt("--train-size", int, 200, "synthetic training images"),
    Opt("--val-size", int, 50, "synthetic validation images"),
    Opt("--data-seed", int, 0, "seed of the synthetic train/val scenes"),
)

COMMANDS: dict[str, tuple[str, tuple[Opt, ...]]] = {
    "gen": ("generate a synthetic RGB-D dataset with COCO annotations", (
        Opt("--out", str, None, "output directory (required)"),
        Opt("--count", int, 250, "number of scenes"),
    ) + _SCENE),
    "convert": ("convert a directory of label maps to COCO JSON", (
        Opt("--in", str, None, "directory of NAME.ppm / NAME.inst.pgm / NAME.cls.pgm (required)"),
        Opt("--out", str, None, "output directory (required)"),
    )),
    "validate": ("check a COCO JSON file against every dataset invariant", (
        Opt("--in", str, None, "COCO JSON file (required)"),
    )),
    "stats": ("write dataset statistics CSVs", (
        Opt("--in", str, None, "COCO JSON file (required)"),
        Opt("--out-dir", str, None, "output directory (required)"),
        Opt("--name", str, "dataset", "dataset label in summary.csv"),
    )),
    "split": ("write seeded train/val manifests", (
        Opt("--in", str, None, "COCO JSON file (required)"),
        Opt("--out-dir", str, None, "output directory (required)"),
        Opt("--train-fraction", float, 0.8, "share of images in the training split"),
    )),
    "train": ("train the two-stream model on synthetic scenes", (
        Opt("--out", str, None, "run directory for checkpoint, trace.csv and report.json (required)"),
    ) + _MODEL + _SCENE),
    "eval": ("evaluate detections against ground truth", (
        Opt("--gt", str, None, "ground-truth COCO JSON (required)"),
        Opt("--dt", str, None, "detections JSON list (required)"),
        Opt("--out", str, None, "report JSON path (default: standard output)"),
        Opt("--table", int, 0, "also print an aligned text table to standard error (0/1)"),
    )),
    "gradcheck": ("finite-difference check of one differentiable module", (
        Opt("--module", str, "iam", "module to check", ("matmul", "softmax_rows", "conv1x1", "conv2d", "iam", "cdf", "set_loss")),
        Opt("--trials", int, 1, "number of seeded random trials"),
        Opt("--h", float, 1e-5, "central-difference step"),
        Opt("--tol", float, 1e-5, "maximum accepted relative error"),
    )),
    "bench": ("train several fusion kinds over several seeds and tabulate AP", (
        Opt("--kinds", str, "rgb,iam,iam+cdf", "comma-separated fusion kinds"),
        Opt("--seeds", int, 3, "number of seeds per kind (seed, seed+1, ...)"),
        Opt("--out", str, None, "CSV path (default: standard output)"),
    ) + tuple(o for o in _MODEL if o.flag != "--fusion") + _SCENE),
}

REQUIRED = {
    "gen": ("out",), "convert": ("in", "out"), "validate": ("in",), "stats": ("in", "out_dir"),
    "split": ("in", "out_dir"), "train": ("out",), "eval": ("gt", "dt"),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _help(o: Opt) -> str:
    return o.help if o.default is None else f"{o.help} (default: {o.default})"


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rgbdfuse", description="RGB-D fusion toolkit")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name, (desc, opts) in COMMANDS.items():
        p = sub.add_parser(name, help=desc, description=desc)
        for o in opts + COMMON:
            p.add_argument(o.flag, dest=o.dest, type=o.type, choices=o.choices,
                           default=argparse.SUPPRESS, help=_help(o))
    return parser


def resolve(command: str, given: dict) -> dict:
    """Merge defaults < config file < explicit flags."""
    opts = COMMANDS[command][1] + COMMON
    values = {o.dest: o.default for o in opts}
    cfg_path = given.get("config")
    if cfg_path:
        path = Path(cfg_path)
        if not path.is_file():
            raise UsageError(f"config file {cfg_path} does not exist")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {cfg_path} is not JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a JSON object")
        for key, val in doc.items():
            dest = key.lstrip("-").replace("-", "_")
            if dest not in values or dest == "config":
                raise UsageError(f"config file sets unknown option {key!r} for {command}")
            values[dest] = val
    values.update(given)
    missing = [d for d in REQUIRED.get(command, ()) if values.get(d) is None]
    if missing:
        raise UsageError(f"{command}: missing required option(s) " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return values


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} {path} does not exist")
    return p


# ---------------------------------------------------------------------------
# subcommands


def _scene_config(v: dict):
    from .data.scenes import SceneConfig

    return SceneConfig(height=v["height"], width=v["width"], min_instances=v["min_instances"],
                       max_instances=v["max_instances"], color_mode=v["color_mode"], depth_mode=v["depth_mode"])


def cmd_gen(v: dict) -> int:
    from .data import build_coco, generate_dataset

    samples = generate_dataset(_scene_config(v), v["count"], v["seed"])
    ds = build_coco(samples, v["out"])
    _log(f"wrote {len(ds.images)} images, {len(ds.annotations)} annotations to {v['out']}")
    return 0


def cmd_convert(v: dict) -> int:
    from .data import convert_label_maps

    ds = convert_label_maps(_existing(v["in"], "input directory"), v["out"])
    _log(f"wrote {len(ds.images)} images, {len(ds.annotations)} annotations to {v['out']}")
    return 0


def cmd_validate(v: dict) -> int:
    from .data import validate_coco

    report = validate_coco(_existing(v["in"], "input file"))
    print(str(report))
    return 0 if report.ok else 1


def cmd_stats(v: dict) -> int:
    from .data import CocoDataset
    from .stats import write_stats

    s = write_stats(CocoDataset.load(_existing(v["in"], "input file")), v["out_dir"], v["name"])
    print(f"images {s.image_count} classes {s.class_count} objects/img {s.mean_objects_per_image:.4f} "
          f"categories/img {s.mean_categories_per_image:.4f}")
    return 0


def cmd_split(v: dict) -> int:
    from .data import CocoDataset
    from .data.coco import canonical_json, split_dataset

    ds = CocoDataset.load(_existing(v["in"], "input file"))
    train, val = split_dataset(ds, v["train_fraction"], v["seed"])
    out = Path(v["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    for m in (train, val):
        (out / f"{m['split']}.json").write_text(canonical_json(m))
    print(f"train {len(train['image_ids'])} val {len(val['image_ids'])}")
    return 0


def _model_config(v: dict, kind: str, seed: int):
    from .model import ModelConfig

    try:
        flags = tuple(int(x) != 0 for x in str(v["insertion"]).split(","))
    except ValueError as exc:
        raise UsageError(f"--insertion expects three comma-separated 0/1 flags, got {v['insertion']!r}") from exc
    h, w = v["height"], v["width"]
    return ModelConfig(input_size=(h, w), fusion_kind=kind, insertion_mask=flags,
                       routing_design=v["routing"], num_queries=v["queries"], seed=seed)


def _train_config(v: dict, seed: int):
    from .train import TrainConfig

    return TrainConfig(epochs=v["epochs"], lr=v["lr"], batch_size=v["batch_size"], seed=seed)


def _synthetic_split(v: dict):
    from .data import generate_dataset

    cfg = _scene_config(v)
    train = generate_dataset(cfg, v["train_size"], v["data_seed"])
    val = generate_dataset(cfg, v["val_size"], v["data_seed"] + 1_000_003)
    return train, val


def cmd_train(v: dict) -> int:
    from .train import train

    train_s, val_s = _synthetic_split(v)
    cfg = _model_config(v, v["fusion"], v["seed"])
    res = train(cfg, train_s, val_s, _train_config(v, v["seed"]), out_dir=v["out"], log=_log)
    if res.report is not None:
        print(res.report.to_json(), end="")
    return 0


def cmd_eval(v: dict) -> int:
    from .data import CocoDataset
    from .data.coco import _parse_json
    from .evaluation import detections_from_json, evaluate

    gt = CocoDataset.load(_existing(v["gt"], "ground-truth file"))
    doc = _parse_json(_existing(v["dt"], "detections file").read_bytes())
    if not isinstance(doc, list):
        raise FormatError("detections file must hold a JSON list")
    report = evaluate(gt, detections_from_json(doc))
    if v["out"]:
        Path(v["out"]).write_text(report.to_json())
    else:
        print(report.to_json(), end="")
    if v["table"]:
        _log(report.table())
    return 0


def cmd_gradcheck(v: dict) -> int:
    from .gradcheck import check_module

    worst = max(check_module(v["module"], v["seed"] + t, h=v["h"]) for t in range(v["trials"]))
    ok = worst <= v["tol"]
    print(f"{v['module']} max relative error {worst:.3e} ({'ok' if ok else 'FAIL'}, tol {v['tol']:.0e})")
    return 0 if ok else 1


BENCH_COLUMNS = ("kind", "seed", "ap_seg", "ap_seg50", "ap_seg75", "ap_det", "ap_det50")


def bench_rows(v: dict, log=_log) -> list[list]:
    from .model import canonical_kind
    from .train import train

    kinds = [k.strip() for k in str(v["kinds"]).split(",") if k.strip()]
    try:
        for k in kinds:
            canonical_kind(k)
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from exc
    train_s, val_s = _synthetic_split(v)
    rows = []
    for kind in kinds:
        per = []
        for s in range(v["seeds"]):
            seed = v["seed"] + s
            log(f"bench: {kind} seed {seed}")
            res = train(_model_config(v, kind, seed), train_s, val_s, _train_config(v, seed), log=log)
            r = res.report
            vals = [r.segm["ap"], r.segm["ap50"], r.segm["ap75"], r.bbox["ap"], r.bbox["ap50"]]
            per.append(vals)
            rows.append([kind, seed] + vals)
        rows.append([kind, "mean"] + [float(np.mean(c)) for c in zip(*per)])
    return rows


def cmd_bench(v: dict) -> int:
    rows = bench_rows(v)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_COLUMNS)
    for r in rows:
        w.writerow([x if isinstance(x, (str, int)) else repr(float(x)) for x in r])
    if v["out"]:
        Path(v["out"]).write_text(buf.getvalue())
    else:
        print(buf.getvalue(), end="")
    return 0


HANDLERS = {
    "gen": cmd_gen, "convert": cmd_convert, "validate": cmd_validate, "stats": cmd_stats, "split": cmd_split,
    "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck, "bench": cmd_bench,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except UsageError as exc:
        _log(str(exc))
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if ns.command is None:
        parser.print_usage(sys.stderr)
        return 2
    given = {k: val for k, val in vars(ns).items() if k != "command"}
    try:
        values = resolve(ns.command, given)
    except UsageError as exc:
        _log(str(exc))
        return 2
    _log(f"seed: {values['seed']}")
    limit = nullcontext()
    if values["threads"]:
        from threadpoolctl import threadpool_limits

        limit = threadpool_limits(limits=values["threads"])
    try:
        with limit:
            return HANDLERS[ns.command](values)
    except UsageError as exc:
        _log(str(exc))
        return 2
    except ConfigurationError as exc:
        _log(f"configuration error: {exc}")
        return 2
    except ValidationError as exc:
        _log(f"validation failed: {exc}")
        for item in exc.violations:
            _log(f"  {item}")
        return 1
    except (FormatError, ContractError, GenerationError, RgbdFuseError) as exc:
        _log(f"error: {exc}")
        return 1


def main() -> None:
    sys.exit(run())


__all__ = ["COMMANDS", "COMMON", "Opt", "build_parser", "bench_rows", "resolve", "run", "main"]

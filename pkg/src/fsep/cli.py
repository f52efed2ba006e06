"""Command-line front end.

Every subcommand reads a flat JSON config (``--config``) and accepts one
flag per config key (``way`` <-> ``--way``, ``episodes_per_iter`` <->
``--episodes-per-iter``). Flags override file values, file values override
defaults.

Exit status: 0 success, 1 usage or config error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, fields

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, augment_rotations, load_image_folder, split, synth_gaussians
from .embed import EmbedderSpec, convnet4, mlp
from .episodes import count_task_classes, count_task_examples_per_class
from .errors import ConfigError, FsepError, InvalidValue, UnknownKey
from .evalreport import evaluate, report_to_csv
from .spectrum import spectrum_of_checkpoint
from .train import Trainer, TrainConfig, pretrain_then_finetune

log = logging.getLogger("fsep")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


@dataclass(frozen=True)
class Key:
    name: str
    type: str  # int | float | str | bool | list | intlist
    default: object
    help: str
    choices: tuple = ()


# one entry per config key; defaults follow the standard few-shot settings
KEYS = (
    # data source: exactly one of `data` or `synth_L`
    Key("data", "str", None, "image folder: one subdirectory of PNGs per class"),
    Key("rotations", "bool", False, "add 90/180/270 degree rotations as new classes"),
    Key("synth_L", "int", None, "synthetic source: number of classes"),
    Key("synth_H", "int", 20, "synthetic: examples per class"),
    Key("synth_dim", "int", 16, "synthetic: feature dimension"),
    Key("synth_separation", "float", 5.0, "synthetic: radius of the class means"),
    Key("synth_noise", "float", 1.0, "synthetic: per-example noise std"),
    Key("synth_seed", "int", 0, "synthetic: generator seed"),
    Key("n_train_classes", "int", 20, "synth subcommand: classes in the train split"),
    Key("n_val_classes", "int", 5, "synth subcommand: classes in the val split"),
    Key("n_test_classes", "int", 5, "synth subcommand: classes in the test split"),
    # splits
    Key("train_classes", "list", None, "comma-separated training labels (default: every class)"),
    Key("val_classes", "list", [], "comma-separated validation labels"),
    Key("test_classes", "list", [], "comma-separated test labels"),
    Key("train_on_val", "bool", False, "fold validation classes into training (no early stopping)"),
    # embedder
    Key("embedder", "str", "auto", "embedding network (auto: convnet4 for images, mlp for vectors)",
        ("auto", "convnet4", "mlp")),
    Key("width", "int", 64, "convnet4 channels per block"),
    Key("hidden", "intlist", [], "mlp hidden layer sizes, comma-separated"),
    Key("embed_dim", "int", None, "mlp output dimension (default: input dimension)"),
    # training
    Key("way", "int", 5, "classes per episode"),
    Key("shot", "int", 1, "support examples per class"),
    Key("query", "int", 15, "query examples per class during training"),
    Key("episodes_per_iter", "int", 1, "episodes per minibatch"),
    Key("distance", "str", "euclid", "metric between embeddings and prototypes", ("euclid", "cosine")),
    Key("lr0", "float", 1e-3, "initial Adam learning rate"),
    Key("schedule", "int", 1, "halve the learning rate every 2000*m iterations", (1, 3, 5)),
    Key("max_iters", "int", None, "iteration budget (default: 450000/episodes_per_iter)"),
    Key("val_every", "int", 100, "iterations between validations"),
    Key("val_episodes", "int", 100, "episodes per validation"),
    Key("patience", "int", 20, "stop after this many non-improving validations"),
    Key("seed", "int", 0, "run seed"),
    Key("dtype", "str", "float32", "parameter precision", ("float32", "float64")),
    Key("resume", "str", None, "resume training from this state checkpoint"),
    # cross-way pretraining
    Key("pretrain_way", "int", None, "pretraining way (must exceed way)"),
    Key("pretrain_query", "int", None, "pretraining queries per class (default: query)"),
    Key("pretrain_max_iters", "int", None, "pretraining budget (default: max_iters)"),
    Key("finetune", "bool", True, "fine-tune at the target way after pretraining"),
    # evaluation
    Key("test_episodes", "int", 600, "evaluation episodes"),
    Key("test_query", "int", 15, "queries per class at test time"),
    Key("eval_seed", "int", 0, "evaluation seed"),
    # hessian
    Key("hessian_k", "int", 10, "number of eigenvalues"),
    Key("hessian_tol", "float", 1e-4, "power-iteration relative tolerance"),
    Key("hessian_episodes", "int", 100, "episodes defining the analysed loss"),
    Key("hessian_max_iters", "int", 1000, "power iterations per eigenvalue"),
    Key("hessian_seed", "int", 0, "seed of the episode sample and start vectors"),
    # io
    Key("checkpoint", "str", None, "checkpoint path (default: OUT/checkpoint.fsep)"),
    Key("out", "str", "out", "output directory"),
)
KEY_INDEX = {k.name: k for k in KEYS}
COUNTS_KEYS = (
    Key("L", "int", None, "number of classes"),
    Key("K", "int", None, "way"),
    Key("H", "int", None, "examples per class"),
    Key("S", "int", None, "shot"),
)


# -- config ---------------------------------------------------------------------


def _coerce(key: Key, value):
    if value is None:
        return None
    try:
        if key.type == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError
            out = int(value)
        elif key.type == "float":
            if isinstance(value, bool):
                raise ValueError
            out = float(value)
        elif key.type == "bool":
            if isinstance(value, bool):
                out = value
            elif str(value).lower() in ("1", "true", "yes", "on"):
                out = True
            elif str(value).lower() in ("0", "false", "no", "off"):
                out = False
            else:
                raise ValueError
        elif key.type in ("list", "intlist"):
            items = value.split(",") if isinstance(value, str) else list(value)
            items = [str(x).strip() for x in items if str(x).strip()]
            out = [int(x) for x in items] if key.type == "intlist" else items
        else:
            if not isinstance(value, str):
                raise ValueError
            out = value
    except (TypeError, ValueError):
        raise InvalidValue(f"{key.name} = {value!r} is not a valid {key.type}") from None
    if key.choices and out not in key.choices:
        raise InvalidValue(f"{key.name} = {out!r} must be one of {list(key.choices)}")
    return out


def parse_config(path: str | None = None, overrides: dict | None = None) -> dict:
    """Defaults <- JSON file <- overrides, every value type-checked and validated."""
    cfg = {k.name: k.default for k in KEYS}
    sources = []
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise InvalidValue(f"config file not found: {path}") from None
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise InvalidValue(f"config {path} is not valid UTF-8 JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise InvalidValue(f"config {path} must hold a JSON object")
        sources.append(raw)
    sources.append({k: v for k, v in (overrides or {}).items() if v is not None})
    for src in sources:
        for name, value in src.items():
            if name not in KEY_INDEX:
                raise UnknownKey(f"unknown config key {name!r}")
            cfg[name] = _coerce(KEY_INDEX[name], value)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    if (cfg["data"] is None) == (cfg["synth_L"] is None):
        raise InvalidValue("exactly one dataset source is required: data or synth_L")
    if cfg["pretrain_way"] is not None and cfg["pretrain_way"] <= cfg["way"]:
        raise InvalidValue(f"pretrain_way = {cfg['pretrain_way']} must exceed way = {cfg['way']}")
    for name in ("pretrain_query", "pretrain_max_iters", "test_episodes", "test_query", "hessian_k",
                 "hessian_episodes", "hessian_max_iters", "width", "embed_dim"):
        if cfg[name] is not None and cfg[name] < 1:
            raise InvalidValue(f"{name} = {cfg[name]} must be >= 1")
    if not cfg["hessian_tol"] > 0:
        raise InvalidValue("hessian_tol must be > 0")
    train_config(cfg)  # TrainConfig invariants


def train_config(cfg: dict, **changes) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    values = {k: v for k, v in cfg.items() if k in names}
    values.update(changes)
    return TrainConfig(**values)


# -- data / model helpers ----------------------------------------------------


def load_dataset(cfg: dict) -> Dataset:
    if cfg["data"] is not None:
        d = load_image_folder(cfg["data"])
        return augment_rotations(d) if cfg["rotations"] else d
    return synth_gaussians(
        cfg["synth_L"], cfg["synth_H"], cfg["synth_dim"], cfg["synth_separation"], cfg["synth_noise"],
        cfg["synth_seed"],
    )


def _expand(d: Dataset, labels) -> list[str]:
    # a base label stands for all of its rotated copies
    have = set(d.labels)
    out = []
    for lab in labels:
        if lab in have:
            out.append(lab)
        elif f"{lab}_rot0" in have:
            out += [f"{lab}_rot{deg}" for deg in (0, 90, 180, 270)]
        else:
            out.append(lab)  # let split() report it
    return out


def splits(cfg: dict, d: Dataset) -> tuple[Dataset, Dataset | None, Dataset | None]:
    val = _expand(d, cfg["val_classes"])
    test = _expand(d, cfg["test_classes"])
    if cfg["train_classes"] is None:
        held = set(val) | set(test)
        train_labels = [lab for lab in d.labels if lab not in held]
    else:
        train_labels = _expand(d, cfg["train_classes"])
    tr, va, te = split(d, train_labels, val, test)
    if cfg["train_on_val"]:
        tr, va = Dataset(tr.classes + va.classes, d.feature_shape), None
    return tr, (va if va is not None and len(va) else None), (te if len(te) else None)


def embedder_spec(cfg: dict, d: Dataset) -> EmbedderSpec:
    kind = cfg["embedder"]
    if kind == "auto":
        kind = "convnet4" if len(d.feature_shape) == 3 else "mlp"
    if kind == "convnet4":
        return convnet4(d.feature_shape, width=cfg["width"])
    if len(d.feature_shape) != 1:
        raise InvalidValue(f"embedder = mlp needs vector features, data has shape {list(d.feature_shape)}")
    return mlp(d.feature_shape[0], hidden=cfg["hidden"], output_dim=cfg["embed_dim"])


def _out(cfg: dict, name: str) -> str:
    os.makedirs(cfg["out"], exist_ok=True)
    return os.path.join(cfg["out"], name)


def _checkpoint_path(cfg: dict) -> str:
    return cfg["checkpoint"] or os.path.join(cfg["out"], "checkpoint.fsep")


def _fresh(path: str) -> str:
    if os.path.exists(path):
        os.remove(path)
    return path


# -- commands -------------------------------------------------------------------


def cmd_train(cfg: dict) -> int:
    d = load_dataset(cfg)
    tr, va, _ = splits(cfg, d)
    spec = embedder_spec(cfg, d)
    tc = train_config(cfg)
    metrics = _out(cfg, "metrics.csv")
    if cfg["resume"]:
        trainer = Trainer.from_checkpoint(load_checkpoint(cfg["resume"]), tr, va, metrics_path=metrics)
    else:
        trainer = Trainer(tr, va, tc, spec, metrics_path=_fresh(metrics))
    trainer.run()
    save_checkpoint(trainer.best_checkpoint(), _checkpoint_path(cfg))
    save_checkpoint(trainer.state_checkpoint(), _out(cfg, "state.fsep"))
    best = trainer.best_val_loss
    print(f"trained {trainer.iteration} iterations; best val loss {best!r} at {trainer.best_iter}")
    print(f"checkpoint {_checkpoint_path(cfg)}")
    return EXIT_OK


def cmd_pretrain(cfg: dict) -> int:
    if cfg["pretrain_way"] is None:
        raise InvalidValue("pretrain needs pretrain_way")
    d = load_dataset(cfg)
    tr, va, _ = splits(cfg, d)
    spec = embedder_spec(cfg, d)
    target = train_config(cfg)
    pre = train_config(
        cfg,
        way=cfg["pretrain_way"],
        query=cfg["pretrain_query"] or cfg["query"],
        max_iters=cfg["pretrain_max_iters"] or cfg["max_iters"],
    )
    for name in ("pretrain_metrics.csv", "finetune_metrics.csv"):
        _fresh(_out(cfg, name))
    res = pretrain_then_finetune(tr, va, pre, target, spec, finetune=cfg["finetune"], metrics_dir=cfg["out"])
    save_checkpoint(res.pretrain_checkpoint, _out(cfg, "pretrain.fsep"))
    save_checkpoint(res.checkpoint, _checkpoint_path(cfg))
    print(f"pretrained at way {pre.way}; finetune={cfg['finetune']}")
    print(f"checkpoint {_checkpoint_path(cfg)}")
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    path = _checkpoint_path(cfg)
    ck = load_checkpoint(path)
    d = load_dataset(cfg)
    _, _, te = splits(cfg, d)
    if te is None:
        raise InvalidValue("eval needs test_classes")
    report = evaluate(ck, te, cfg["test_episodes"], Q=cfg["test_query"], seed=cfg["eval_seed"], way=cfg["way"],
                      shot=cfg["shot"])
    with open(_out(cfg, "eval.csv"), "w", newline="") as fh:
        fh.write(report_to_csv(report))
    print(f"accuracy {report.mean:.4f} +- {report.ci95_halfwidth:.4f} over {report.n_episodes} episodes")
    return EXIT_OK


def cmd_hessian(cfg: dict) -> int:
    ck = load_checkpoint(_checkpoint_path(cfg))
    d = load_dataset(cfg)
    tr, _, _ = splits(cfg, d)
    report = spectrum_of_checkpoint(
        ck, tr, n_episodes=cfg["hessian_episodes"], k=cfg["hessian_k"], tol=cfg["hessian_tol"],
        seed=cfg["hessian_seed"], max_power_iters=cfg["hessian_max_iters"],
    )
    with open(_out(cfg, "hessian.csv"), "w", newline="") as fh:
        fh.write(report.to_csv())
    with open(_out(cfg, "hessian_sample.json"), "w") as fh:
        json.dump(report.sample, fh, indent=2, sort_keys=True)
    print(report.to_csv(), end="")
    return EXIT_OK


def cmd_counts(args: dict) -> int:
    for name in ("L", "K", "H", "S"):
        if args[name] is None:
            raise InvalidValue(f"counts needs --{name}")
    print(count_task_classes(args["L"], args["K"]))
    print(count_task_examples_per_class(args["H"], args["S"], args["K"]))
    return EXIT_OK


def cmd_synth(cfg: dict) -> int:
    """Write a runnable config describing a synthetic dataset and its class splits."""
    L = cfg["synth_L"]
    n_tr, n_va, n_te = cfg["n_train_classes"], cfg["n_val_classes"], cfg["n_test_classes"]
    if n_tr + n_va + n_te > L:
        raise InvalidValue(f"n_train_classes + n_val_classes + n_test_classes = {n_tr + n_va + n_te} exceeds synth_L = {L}")
    labels = load_dataset(cfg).labels
    desc = {k: cfg[k] for k in ("synth_L", "synth_H", "synth_dim", "synth_separation", "synth_noise", "synth_seed")}
    desc.update(
        train_classes=labels[:n_tr],
        val_classes=labels[n_tr : n_tr + n_va],
        test_classes=labels[n_tr + n_va : n_tr + n_va + n_te],
    )
    path = _out(cfg, "synth_config.json")
    with open(path, "w") as fh:
        json.dump(desc, fh, indent=2)
        fh.write("\n")
    print(path)
    return EXIT_OK


COMMANDS = {
    "train": (cmd_train, "episodic training with validation-based early stopping"),
    "pretrain": (cmd_pretrain, "cross-way pretraining, optionally fine-tuned at the target way"),
    "eval": (cmd_eval, "episode-averaged test accuracy with a 95% interval"),
    "hessian": (cmd_hessian, "top Hessian eigenvalues of the training loss"),
    "counts": (cmd_counts, "number of task classes and task examples per task class"),
    "synth": (cmd_synth, "write a synthetic dataset description with class splits"),
}


# -- argument parsing ------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _add_key(p: argparse.ArgumentParser, key: Key) -> None:
    default = "none" if key.default is None else key.default
    if isinstance(default, list):
        default = ",".join(map(str, default)) or "empty"
    kw = {"dest": key.name, "default": None, "metavar": key.type.upper().replace("INTLIST", "LIST"),
          "help": f"{key.help} (default: {default})"}
    if key.choices:
        kw["metavar"] = "{" + ",".join(map(str, key.choices)) + "}"
    p.add_argument("--" + key.name.replace("_", "-"), **kw)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fsep", description="Prototypical-network few-shot training toolkit.")
    p.add_argument("--version", action="version", version=f"fsep {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr (default: off)")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text, description=help_text)
        if name == "counts":
            for key in COUNTS_KEYS:
                sp.add_argument(f"--{key.name}", dest=key.name, type=int, default=None, metavar="INT",
                                help=f"{key.help} (required)")
            continue
        sp.add_argument("--config", default=None, metavar="PATH", help="JSON config file (default: none)")
        for key in KEYS:
            _add_key(sp, key)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = vars(parser.parse_args(argv))
        if not args.get("command"):
            parser.print_help()
            return EXIT_CONFIG
        logging.basicConfig(level=logging.INFO if args.pop("verbose") else logging.WARNING,
                            format="%(levelname)s %(message)s")
        command = args.pop("command")
        fn = COMMANDS[command][0]
        if command == "counts":
            return fn(args)
        cfg = parse_config(args.pop("config"), args)
        return fn(cfg)
    except ConfigError as exc:
        print(f"fsep: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FsepError, OSError, ValueError) as exc:
        print(f"fsep: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

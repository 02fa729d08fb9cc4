"""``fakeloc`` command-line entry point."""
import argparse
import configparser
import logging
import sys
from dataclasses import fields
from pathlib import Path

import torch

from . import datagen, harness, metrics
from .errors import ConfigurationError, DataError, FakelocError, MissingArtifactError

log = logging.getLogger("fakeloc")

# key -> (type, default); every key may appear in the config file section of its command
GLOBAL_KEYS = {"seed": (int, 0), "out": (str, None), "jobs": (int, 1)}

TRAIN_KEYS = {
    "method": (str, "patches"), "setup": (str, "c"), "epochs": (int, 30), "lr": (float, 1e-3),
    "batch_size": (int, 32), "lambda_grid": (str, "0.1,1,10"), "preset": (str, "desk"),
    "input_size": (int, 64),
}

COMMAND_KEYS = {
    "train-generator": {
        "sources": (str, "faces-a,faces-b"), "size": (int, 64), "images_per_source": (int, 256),
        "T": (int, 50), "width": (int, 16), "steps": (int, 600), "ae_steps": (int, 300),
        "latent_steps": (int, 600), "latent": (bool, True), "batch_size": (int, 16),
    },
    "generate": {
        "generators": (str, None), "train_generators": (bool, False), "sources": (str, "faces-a,faces-b"),
        "size": (int, 64), "per_image": (int, 3), "train_identities": (int, 100),
        "val_identities": (int, 10), "test_identities": (int, 29), "other_train_identities": (int, 100),
        "other_val_identities": (int, 10), "full_train": (int, 90), "full_val": (int, 10),
        "ldm_train": (int, 30), "ldm_val": (int, 5), "ldm_test": (int, 10), "max_dilation": (int, 15),
        "batch_size": (int, 32), "generator_steps": (int, 600), "generator_images": (int, 256),
    },
    "train": {"manifest": (str, None), **TRAIN_KEYS},
    "evaluate": {"checkpoint": (str, None), "manifest": (str, None), "split": (str, "test"),
                 "oracle": (bool, False)},
    "matrix": {"manifests": (str, None), "combinations": (bool, False), **TRAIN_KEYS},
    "shift": {"same": (str, None), "different": (str, None), "setups": (str, "a,b,c"), "bins": (int, 10),
              **TRAIN_KEYS},
    "plot": {"inputs": (str, None), "labels": (str, None), "bins": (int, 10)},
}

DEFAULT_OUT = {"train-generator": "generators", "generate": "data", "train": "runs/train",
               "evaluate": "runs/eval", "matrix": "runs/matrix", "shift": "runs/shift", "plot": "figures"}


def _parse_bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"not a boolean: {text!r}")


def _convert(key, kind, value):
    try:
        return _parse_bool(value) if kind is bool else kind(value)
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {key}: {value!r}") from exc


def resolve_config(command, args):
    """Defaults < config file section < flags. Unknown keys are errors."""
    keys = {**GLOBAL_KEYS, **COMMAND_KEYS[command]}
    resolved = {k: default for k, (_, default) in keys.items()}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise MissingArtifactError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigurationError(f"{path}: {exc}") from exc
        for section in parser.sections():
            if section not in ("global", *COMMAND_KEYS):
                raise ConfigurationError(f"{path}: unknown section [{section}]")
            allowed = GLOBAL_KEYS if section == "global" else {**GLOBAL_KEYS, **COMMAND_KEYS[section]}
            for key, value in parser.items(section):
                if key not in allowed:
                    raise ConfigurationError(f"{path}: unknown key {key!r} in [{section}]")
                if section in ("global", command):
                    resolved[key] = _convert(key, allowed[key][0], value)
    for key, (kind, _) in keys.items():
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = _convert(key, kind, value)
    if resolved["out"] is None:
        resolved["out"] = DEFAULT_OUT[command]
    if resolved["jobs"] < 1:
        raise ConfigurationError("--jobs must be >= 1")
    return resolved


def write_snapshot(out, command, cfg):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser[command] = {k: str(v) for k, v in sorted(cfg.items()) if v is not None}
    with open(out / "resolved-config.ini", "w", encoding="utf-8") as fh:
        parser.write(fh)


def _csv(text):
    return [t.strip() for t in str(text).split(",") if t.strip()]


def _require(cfg, key):
    if cfg.get(key) in (None, ""):
        raise ConfigurationError(f"--{key.replace('_', '-')} is required")
    return cfg[key]


def _train_config(cfg, **over):
    values = {"method": cfg["method"], "setup": cfg["setup"], "epochs": cfg["epochs"], "lr": cfg["lr"],
              "batch_size": cfg["batch_size"], "seed": cfg["seed"], "preset": cfg["preset"],
              "input_size": cfg["input_size"]}
    try:
        values["lambda_grid"] = tuple(float(x) for x in _csv(cfg["lambda_grid"]))
    except ValueError as exc:
        raise ConfigurationError(f"bad lambda grid {cfg['lambda_grid']!r}") from exc
    values.update(over)
    return harness.TrainConfig(**values)


# ---------------------------------------------------------------- commands

def _generator_config(cfg, steps=None, images=None):
    gc = datagen.GeneratorTrainConfig(size=cfg["size"], seed=cfg["seed"])
    names = {f.name for f in fields(gc)}
    for key in ("images_per_source", "T", "width", "steps", "ae_steps", "latent_steps", "batch_size"):
        if key in cfg and key in names:
            setattr(gc, key, cfg[key])
    if steps is not None:
        gc.steps = gc.latent_steps = steps
    if images is not None:
        gc.images_per_source = images
    return gc


def cmd_train_generator(cfg):
    sources = _csv(cfg["sources"])
    unknown = set(sources) - set(datagen.STYLES)
    if unknown or not sources:
        raise ConfigurationError(f"unknown sources {sorted(unknown)}; choose from {sorted(datagen.STYLES)}")
    gens = datagen.train_generators(tuple(sources), _generator_config(cfg), latent=cfg["latent"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    gens.save(out)
    print(f"generators written to {out}")
    return 0


def dataset_config(cfg):
    sources = _csv(cfg["sources"])
    if not sources or set(sources) - set(datagen.STYLES):
        raise ConfigurationError(f"sources must be a subset of {sorted(datagen.STYLES)}")
    if cfg["per_image"] < 1:
        raise ConfigurationError("--per-image must be >= 1")
    identities = {sources[0]: {"train": cfg["train_identities"], "val": cfg["val_identities"],
                               "test": cfg["test_identities"]}}
    for other in sources[1:]:
        identities[other] = {"train": cfg["other_train_identities"], "val": cfg["other_val_identities"]}
    return datagen.DatasetConfig(
        size=cfg["size"], identities=identities, per_image=cfg["per_image"],
        full_per_split={"train": cfg["full_train"], "val": cfg["full_val"]},
        ldm_identities={"train": cfg["ldm_train"], "val": cfg["ldm_val"], "test": cfg["ldm_test"]},
        max_dilation=cfg["max_dilation"], seed=cfg["seed"], batch_size=cfg["batch_size"],
        main_source=sources[0])


def cmd_generate(cfg):
    dcfg = dataset_config(cfg)
    sources = tuple(dcfg.identities)
    gen_dir = Path(cfg["generators"] or Path(cfg["out"]) / "generators")
    latent = any(dcfg.ldm_identities.values())
    if cfg["train_generators"]:
        gc = _generator_config(cfg, cfg["generator_steps"], cfg["generator_images"])
        gens = datagen.train_generators(sources, gc, latent=latent)
        gen_dir.mkdir(parents=True, exist_ok=True)
        gens.save(gen_dir)
    else:
        gens = datagen.Generators.load(gen_dir, sources, latent=latent)
    manifests = datagen.generate_dataset(cfg["out"], gens, dcfg)
    for name, path in manifests.items():
        print(f"{name}\t{path}\t{len(datagen.load_manifest(path))} rows")
    return 0


def cmd_train(cfg):
    manifest = _require(cfg, "manifest")
    result = harness.train(_train_config(cfg), manifest, out=cfg["out"])
    if result.lam is not None:
        print(f"lambda\t{result.lam:g}")
    print(f"checkpoint\t{Path(cfg['out']) / 'checkpoint.ckpt'}")
    return 0


def _oracle_map(images, records, masks):
    return masks


def cmd_evaluate(cfg):
    ckpt = Path(_require(cfg, "checkpoint"))
    manifest = _require(cfg, "manifest")
    if not ckpt.is_file():
        raise MissingArtifactError(f"checkpoint not found: {ckpt}")
    detector = harness.Detector.load(ckpt)
    split = cfg["split"]
    if cfg["oracle"]:
        result = harness.evaluate_localization(detector, manifest, map_fn=_oracle_map, split=split)
        data = harness.ManifestData.from_path(manifest).split(split)
        if {r.label for r in data.records} == {"real", "fake"}:
            result.ap = 100.0 * harness.evaluate_detection(
                detector, data, score_fn=lambda x, recs: [float(r.is_fake) for r in recs], split=split)
    else:
        result = harness.evaluate(detector, manifest, split=split)
    path = metrics.write_results(Path(cfg["out"]) / "results.tsv", result)
    for line in result.summary_lines():
        print(line)
    print(f"results\t{path}")
    return 0


def _named_manifests(text):
    out = {}
    for item in _csv(text):
        if "=" not in item:
            raise ConfigurationError(f"manifest entries must look like name=path, got {item!r}")
        name, path = item.split("=", 1)
        if name in out:
            raise ConfigurationError(f"duplicate manifest name {name!r}")
        out[name] = path
    if not out:
        raise ConfigurationError("no manifests given")
    return out


def cmd_matrix(cfg):
    named = _named_manifests(_require(cfg, "manifests"))
    for path in named.values():
        if not Path(path).is_file():
            raise MissingArtifactError(f"manifest not found: {path}")
    spec = harness.MatrixSpec.singletons(named, combinations=cfg["combinations"])
    tc = _train_config(cfg)
    matrix = harness.cross_generator_matrix(spec, tc.method, tc.setup, tc)
    out = Path(cfg["out"])
    rows = harness.matrix_row_names(spec)
    path = harness.write_matrix(out / "matrix.tsv", matrix, rows, spec.test_sets)
    from .plots import plot_matrix
    plot_matrix(out / "matrix.png", matrix, rows, spec.test_sets)
    print(path.read_text(encoding="utf-8"), end="")
    return 0


def cmd_shift(cfg):
    setups = _csv(cfg["setups"])
    same = _named_manifests(_require(cfg, "same"))
    different = _named_manifests(_require(cfg, "different"))
    missing = [s for s in setups if s not in same or s not in different]
    if missing:
        raise ConfigurationError(f"need setup=manifest entries for setups {missing} in --same and --different")
    tc = _train_config(cfg)
    table = harness.dataset_shift_experiment(tc.method, setups, same, different, base_config=tc)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    lines = harness.shift_report_lines(table)
    (out / "shift.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    from .plots import plot_area_curves
    for setup, row in table.items():
        for column, res in row.items():
            metrics.write_results(out / f"results-{setup}-{column}.tsv", res)
        plot_area_curves(out / f"iou-vs-area-{setup}.png",
                         {c: r.per_sample for c, r in row.items()}, cfg["bins"])
    print("\n".join(lines))
    return 0


def cmd_plot(cfg):
    from .plots import plot_area_curves, plot_matrix
    inputs = _csv(_require(cfg, "inputs"))
    labels = _csv(cfg["labels"]) if cfg["labels"] else [Path(p).parent.name or Path(p).stem for p in inputs]
    if len(labels) != len(inputs):
        raise ConfigurationError("--labels must name every input")
    out = Path(cfg["out"])
    curves, written = {}, []
    for label, p in zip(labels, inputs):
        path = Path(p)
        if not path.is_file():
            raise MissingArtifactError(f"input not found: {path}")
        head = path.read_text(encoding="utf-8").split("\n", 1)[0]
        if head.startswith("train\\test"):
            matrix, rows, cols = harness.read_matrix(path)
            if matrix.size == 0:
                raise DataError(f"{path}: matrix file is empty")
            written.append(plot_matrix(out / f"matrix-{label}.png", matrix, rows, cols))
        else:
            curves[label] = metrics.read_results(path).per_sample
    if curves:
        written.append(plot_area_curves(out / "iou-vs-area.png", curves, cfg["bins"]))
    for w in written:
        print(w)
    return 0


COMMANDS = {"train-generator": cmd_train_generator, "generate": cmd_generate, "train": cmd_train,
            "evaluate": cmd_evaluate, "matrix": cmd_matrix, "shift": cmd_shift, "plot": cmd_plot}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="INI file with [global] and per-command sections")
    common.add_argument("--seed", default=argparse.SUPPRESS, help="master seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--jobs", default=argparse.SUPPRESS, help="cap on torch worker threads")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="fakeloc", parents=[common],
                                     description="Localize inpainted regions in face images.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text)
        return p

    def training_flags(p):
        p.add_argument("--method", choices=harness.METHODS)
        p.add_argument("--setup", choices=harness.SETUPS)
        p.add_argument("--epochs")
        p.add_argument("--lr")
        p.add_argument("--batch-size", dest="batch_size")
        p.add_argument("--lambda-grid", dest="lambda_grid", help="comma-separated lambda values")
        p.add_argument("--preset", choices=("desk", "paper"))
        p.add_argument("--input-size", dest="input_size")

    p = add("train-generator", "train desk diffusion generators")
    p.add_argument("--sources")
    p.add_argument("--steps")
    p.add_argument("--ae-steps", dest="ae_steps")
    p.add_argument("--latent-steps", dest="latent_steps")
    p.add_argument("--images-per-source", dest="images_per_source")
    p.add_argument("--T", dest="T")
    p.add_argument("--no-latent", dest="latent", action="store_const", const="false")

    p = add("generate", "generate a procedural dataset with manifests")
    p.add_argument("--generators", help="directory of generator checkpoints")
    p.add_argument("--train-generators", dest="train_generators", action="store_const", const="true")
    p.add_argument("--sources")
    p.add_argument("--per-image", dest="per_image")
    p.add_argument("--size")
    for split in ("train", "val", "test"):
        p.add_argument(f"--{split}-identities", dest=f"{split}_identities")
    p.add_argument("--generator-steps", dest="generator_steps")

    p = add("train", "train a localization model")
    p.add_argument("--manifest")
    training_flags(p)

    p = add("evaluate", "evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--split")
    p.add_argument("--oracle", action="store_const", const="true",
                   help="replace the model maps with the ground-truth masks")

    p = add("matrix", "cross-generator train/test IoU matrix")
    p.add_argument("--manifests", help="comma-separated name=manifest entries")
    p.add_argument("--combinations", action="store_const", const="true",
                   help="add leave-one-out training combinations")
    training_flags(p)

    p = add("shift", "dataset-shift experiment across two sources")
    p.add_argument("--same", help="setup=manifest entries trained on the test source")
    p.add_argument("--different", help="setup=manifest entries trained on the other source")
    p.add_argument("--setups")
    training_flags(p)

    p = add("plot", "render results or matrix files")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--labels")
    p.add_argument("--bins")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if isinstance(getattr(args, "inputs", None), list):
        args.inputs = ",".join(args.inputs)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    for name in ("config", "seed", "out", "jobs"):
        if not hasattr(args, name):
            setattr(args, name, None)
    try:
        cfg = resolve_config(args.command, args)
        torch.set_num_threads(cfg["jobs"])
        write_snapshot(cfg["out"], args.command, cfg)
        return COMMANDS[args.command](cfg)
    except FakelocError as exc:
        print(f"fakeloc: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"fakeloc: error: {exc}", file=sys.stderr)
        return MissingArtifactError.exit_code
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"fakeloc: internal error: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())

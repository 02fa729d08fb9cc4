"""Training and evaluation drivers for the three supervision setups, the
dataset-shift experiment, and the cross-generator train/test matrix."""
import copy
import itertools
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import datagen, metrics
from .backbone import preset_config
from .checkpoint import load_checkpoint, load_state_into, save_checkpoint, state_checksum
from .errors import ConfigurationError, DataError, DomainError
from .heads import (AttentionLossConfig, attention_loss, build_head_model, fcn_localizer_forward,
                    gradcam_map, model_from_spec, model_spec, patches_forward, supervised_loss)

log = logging.getLogger(__name__)

METHODS = ("gradcam", "patches", "attention")
SETUPS = ("a", "b", "c")


@dataclass
class TrainConfig:
    method: str = "patches"
    setup: str = "c"
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    lambda_grid: tuple = (0.1, 1.0, 10.0)
    preset: str = "desk"
    input_size: int = 64
    patches_truncation: int = 2
    gradcam_block: int = 3
    attention_insertion: int = 3

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.setup not in SETUPS:
            raise ConfigurationError(f"unknown setup {self.setup!r}; choose from {SETUPS}")
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0:
            raise ConfigurationError("epochs >= 0, batch_size >= 1 and lr > 0 are required")
        self.lambda_grid = tuple(float(x) for x in self.lambda_grid)
        if not self.lambda_grid or any(x < 0 for x in self.lambda_grid):
            raise ConfigurationError("lambda grid must be nonempty and nonnegative")

    @property
    def model_kind(self):
        if self.method == "gradcam":
            return "fcn" if self.setup == "c" else "gradcam"
        return self.method


@dataclass
class ManifestData:
    records: list
    root: Path

    @classmethod
    def from_path(cls, path):
        return cls(datagen.load_manifest(path), datagen.dataset_root(path))

    def split(self, name):
        return ManifestData([r for r in self.records if r.split == name], self.root)

    def __len__(self):
        return len(self.records)


def _as_data(manifest):
    if isinstance(manifest, ManifestData):
        return manifest
    return ManifestData.from_path(manifest)


# ----------------------------------------------------------------- detector

class Detector:
    """A trained model plus the rules that turn it into a map and a fakeness score."""

    def __init__(self, method, setup, net, gradcam_block=3, lam=None):
        self.method = method
        self.setup = setup
        self.net = net
        self.gradcam_block = gradcam_block
        self.lam = lam

    @property
    def kind(self):
        return model_spec(self.net)[0]

    def localize(self, images):
        """(N, C, H, W) -> (N, h, w) soft maps in [0, 1]."""
        self.net.eval()
        kind = self.kind
        if kind == "gradcam":
            return gradcam_map(self.net, images, self.gradcam_block).values
        with torch.no_grad():
            if kind == "patches":
                return patches_forward(self.net, images)[0].values
            if kind == "fcn":
                return fcn_localizer_forward(self.net, images).values
            return self.net(images)["mask"]

    def score(self, images):
        """(N, C, H, W) -> (N,) fakeness probabilities."""
        self.net.eval()
        with torch.no_grad():
            kind = self.kind
            if kind == "gradcam":
                return torch.sigmoid(self.net(images))
            if kind == "patches":
                return patches_forward(self.net, images)[0].values.mean(dim=(1, 2))
            if kind == "attention":
                return self.net(images)["score"]
        raise ConfigurationError("a fully-supervised FCN localizer produces no detection score")

    def checksum(self):
        return state_checksum(self.net)

    def save(self, path):
        kind, spec = model_spec(self.net)
        config = {"method": self.method, "setup": self.setup, "model": spec,
                  "gradcam_block": self.gradcam_block, "lambda": self.lam}
        return save_checkpoint(path, f"detector/{kind}", config, self.net.state_dict())

    @classmethod
    def load(cls, path):
        kind, config, arrays = load_checkpoint(path)
        if not kind.startswith("detector/"):
            raise ConfigurationError(f"{path} is not a detector checkpoint")
        net = model_from_spec(kind.split("/", 1)[1], config["model"])
        load_state_into(net, arrays)
        return cls(config["method"], config["setup"], net.eval(), config["gradcam_block"], config["lambda"])


def build_detector(config):
    bcfg = preset_config(config.preset, input_size=config.input_size)
    kind = config.model_kind
    kwargs = {}
    if kind == "patches":
        kwargs["truncation"] = config.patches_truncation
    elif kind == "fcn":
        kwargs["truncation"] = config.gradcam_block
    elif kind == "attention":
        kwargs["insertion"] = config.attention_insertion
    net = build_head_model(kind, bcfg, config.seed, **kwargs)
    return Detector(config.method, config.setup, net, config.gradcam_block)


# -------------------------------------------------------------------- data

def load_images(data, with_masks=False):
    """Read every record; returns (images (N, C, H, W), labels (N,), masks or None)."""
    images, labels, masks = [], [], []
    for r in data.records:
        images.append(datagen.read_image(data.root / r.image_path))
        labels.append(1.0 if r.is_fake else 0.0)
        if with_masks:
            if r.mask_path is None:
                raise DataError(f"{r.image_path} has no mask")
            masks.append(datagen.read_mask(data.root / r.mask_path))
    if not images:
        return None, None, None
    x = torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).contiguous()
    y = torch.tensor(labels)
    m = torch.from_numpy(np.stack(masks).astype(np.float32)) if with_masks else None
    return x, y, m


def check_training_data(config, data):
    """Setup routing rules, checked before any file is opened."""
    rows = [r for r in data.records if r.split in ("train", "val")]
    train = [r for r in rows if r.split == "train"]
    if not train:
        raise ConfigurationError("manifest has no training rows")
    if config.setup == "c":
        if any(not r.is_fake for r in rows):
            raise ConfigurationError("setup c trains on masks of fakes only; manifest has real rows")
        if any(r.mask_path is None for r in rows):
            raise ConfigurationError("setup c needs a mask for every training/validation row")
    else:
        labels = {r.label for r in train}
        if labels != {"real", "fake"}:
            raise ConfigurationError(f"setup {config.setup} needs real and fake training rows")


# ------------------------------------------------------------------ losses

def _loss(detector, config, x, y, m, lam):
    net = detector.net
    kind = detector.kind
    if config.setup == "c":
        if kind == "patches":
            pred = torch.softmax(net(x), dim=1)[:, 1]
        elif kind == "fcn":
            pred = torch.sigmoid(net(x))
        else:
            pred = net(x)["mask"]
        return supervised_loss(kind, pred, m)
    if kind == "patches":
        logits = net(x)
        target = y.long()[:, None, None].expand(-1, *logits.shape[-2:])
        return F.cross_entropy(logits, target)
    if kind == "gradcam":
        return F.binary_cross_entropy_with_logits(net(x), y)
    out = net(x)
    return attention_loss(y, out["score"], out["mask"], AttentionLossConfig(lam))


def _eval_loss(detector, config, x, y, m, lam, batch_size=128):
    detector.net.eval()
    total, n = 0.0, 0
    with torch.no_grad():
        for lo in range(0, len(x), batch_size):
            sl = slice(lo, lo + batch_size)
            loss = _loss(detector, config, x[sl], y[sl], None if m is None else m[sl], lam)
            total += float(loss) * len(x[sl])
            n += len(x[sl])
    return total / max(n, 1)


def _val_metric(detector, config, x, y, m):
    if config.setup == "c":
        maps = localize_batched(detector, x)
        return float(np.mean([metrics.evaluate_map(str(i), maps[i], m[i]).iou for i in range(len(x))]))
    if y.min() == y.max():
        return float("nan")
    scores = score_batched(detector, x)
    return 100.0 * metrics.average_precision(scores.tolist(), y.tolist())


def localize_batched(detector, x, batch_size=64):
    return torch.cat([detector.localize(x[lo:lo + batch_size]) for lo in range(0, len(x), batch_size)])


def score_batched(detector, x, batch_size=64):
    return torch.cat([detector.score(x[lo:lo + batch_size]) for lo in range(0, len(x), batch_size)])


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    detector: Detector
    log: list = field(default_factory=list)  # (epoch, train_loss, val_loss, val_metric)
    lam: float | None = None


def _train_once(config, train_xy, val_xy, lam):
    detector = build_detector(config)
    detector.lam = lam
    x, y, m = train_xy
    history = []
    if config.epochs == 0:
        return TrainResult(detector, history, lam)
    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(detector.net.parameters(), lr=config.lr)
    best = (float("inf"), None)
    for epoch in range(1, config.epochs + 1):
        detector.net.train()
        perm = torch.randperm(len(x), generator=gen)
        total = 0.0
        for lo in range(0, len(x), config.batch_size):
            idx = perm[lo:lo + config.batch_size]
            loss = _loss(detector, config, x[idx], y[idx], None if m is None else m[idx], lam)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        train_loss = total / len(x)
        detector.net.eval()
        if val_xy[0] is not None:
            val_loss = _eval_loss(detector, config, *val_xy, lam)
            val_metric = _val_metric(detector, config, *val_xy)
        else:
            val_loss, val_metric = float("nan"), float("nan")
        history.append((epoch, train_loss, val_loss, val_metric))
        log.info("epoch %d train %.4f val %.4f metric %.2f", epoch, train_loss, val_loss, val_metric)
        if val_xy[0] is None or val_loss < best[0]:
            best = (val_loss, copy.deepcopy(detector.net.state_dict()))
    detector.net.load_state_dict(best[1])
    detector.net.eval()
    return TrainResult(detector, history, lam)


def train(config, manifest, out=None):
    """Train one detector; setups a/b never read masks, setup c never reads real rows."""
    data = _as_data(manifest)
    check_training_data(config, data)
    with_masks = config.setup == "c"
    train_xy = load_images(data.split("train"), with_masks)
    val_xy = load_images(data.split("val"), with_masks)
    if config.method == "attention" and config.setup != "c":
        candidates = [_train_once(config, train_xy, val_xy, lam) for lam in config.lambda_grid]
        result = _select_lambda(candidates)
    else:
        result = _train_once(config, train_xy, val_xy, 1.0 if config.method == "attention" else None)
    if out is not None:
        write_training_outputs(out, result)
    return result


def _select_lambda(candidates):
    def final_metric(r):
        vals = [row[3] for row in r.log if not np.isnan(row[3])]
        return vals[-1] if vals else -np.inf
    # highest validation AP of the selected checkpoint; first grid entry wins ties
    scored = []
    for r in candidates:
        best_epoch = min(r.log, key=lambda row: row[2]) if r.log else None
        scored.append(best_epoch[3] if best_epoch and not np.isnan(best_epoch[3]) else final_metric(r))
    return candidates[int(np.argmax(scored))]


def write_training_outputs(out, result):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    result.detector.save(out / "checkpoint.ckpt")
    lines = ["epoch\ttrain_loss\tval_loss\tval_metric"]
    lines += [f"{e}\t{tl:.6f}\t{vl:.6f}\t{vm:.4f}" for e, tl, vl, vm in result.log]
    (out / "train_log.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out


# -------------------------------------------------------------- evaluation

def evaluate_localization(detector, manifest, map_fn=None, split="test", batch_size=64):
    """Per fake test sample: map -> resize -> binarize at 0.5 -> IoU/PBCA vs its mask.

    ``map_fn(images, records, masks)`` may replace the detector (oracle heads).
    """
    data = _as_data(manifest).split(split)
    fakes = [r for r in data.records if r.is_fake]
    if not fakes:
        raise DataError("no fake test rows to localize")
    for r in fakes:
        if r.mask_path is None:
            raise DataError(f"test fake {r.image_path} has no mask")
    per_sample = []
    for lo in range(0, len(fakes), batch_size):
        chunk = ManifestData(fakes[lo:lo + batch_size], data.root)
        x, _, m = load_images(chunk, with_masks=True)
        maps = map_fn(x, chunk.records, m) if map_fn is not None else detector.localize(x)
        for r, soft, gt in zip(chunk.records, maps, m):
            per_sample.append(metrics.evaluate_map(r.image_path, soft, gt))
    return metrics.aggregate(per_sample)


def evaluate_detection(detector, manifest, score_fn=None, split="test", batch_size=64):
    """Average precision (fraction) of the fake-vs-real ranking by fakeness score."""
    data = _as_data(manifest).split(split)
    labels = [r.is_fake for r in data.records]
    if len(set(labels)) < 2:
        raise DomainError("detection needs both real and fake test rows")
    scores = []
    for lo in range(0, len(data.records), batch_size):
        chunk = ManifestData(data.records[lo:lo + batch_size], data.root)
        x, _, _ = load_images(chunk)
        s = score_fn(x, chunk.records) if score_fn is not None else detector.score(x)
        scores += [float(v) for v in s]
    return metrics.average_precision(scores, labels)


def evaluate(detector, manifest, split="test"):
    """Localization on fakes plus AP when the split has both labels and the model scores images."""
    data = _as_data(manifest)
    result = evaluate_localization(detector, data, split=split)
    labels = {r.label for r in data.split(split).records}
    if labels == {"real", "fake"} and detector.kind != "fcn":
        result.ap = 100.0 * evaluate_detection(detector, data, split=split)
    return result


# ------------------------------------------------------------ experiments

def _with_test(train_data, test_data):
    rows = [r for r in train_data.records if r.split != "test"]
    if test_data.root != train_data.root:
        raise ConfigurationError("training and test manifests must share a dataset root")
    return ManifestData(rows + [r for r in test_data.records if r.split == "test"], train_data.root)


def dataset_shift_experiment(method, setups, same_source, other_source, test_manifest=None,
                             base_config=None):
    """Train per setup on each source; evaluate every model on one fixed test set.

    ``same_source``/``other_source`` map setup -> manifest. Returns
    ``{setup: {"same"|"different": EvalResult}}``.
    """
    base = base_config or TrainConfig(method=method)
    table = {}
    for setup in setups:
        cfg = replace(base, method=method, setup=setup)
        test = _as_data(test_manifest) if test_manifest is not None else _as_data(same_source[setup])
        table[setup] = {}
        for column, manifests in (("same", same_source), ("different", other_source)):
            data = _with_test(_as_data(manifests[setup]), test)
            detector = train(cfg, data).detector
            table[setup][column] = evaluate(detector, data)
    return table


def shift_report_lines(table):
    lines = ["setup\tsource\tIoU\tPBCA\tAP"]
    for setup, row in table.items():
        for column, res in row.items():
            ap = "-" if res.ap is None else f"{res.ap:.1f}"
            lines.append(f"{setup}\t{column}\t{res.iou:.1f}\t{res.pbca:.1f}\t{ap}")
    return lines


@dataclass
class MatrixSpec:
    manifests: dict  # name -> manifest (path or ManifestData)
    train_sets: list  # tuples of manifest names
    test_sets: list  # manifest names

    def __post_init__(self):
        seen, sets = set(), []
        for ts in self.train_sets:
            key = tuple(sorted(set((ts,) if isinstance(ts, str) else ts)))
            if key not in seen:
                seen.add(key)
                sets.append(key)
        self.train_sets = sets
        missing = {n for ts in self.train_sets for n in ts} | set(self.test_sets)
        missing -= set(self.manifests)
        if missing:
            raise ConfigurationError(f"unknown manifests in matrix: {sorted(missing)}")

    @classmethod
    def singletons(cls, manifests, combinations=False):
        names = list(manifests)
        train_sets = [(n,) for n in names]
        if combinations and len(names) > 2:
            train_sets += [tuple(c) for c in itertools.combinations(names, len(names) - 1)]
        return cls(manifests, train_sets, names)


def cross_generator_matrix(spec, method="patches", setup="c", base_config=None):
    """Train one model per train set and return the train x test IoU (%) matrix."""
    base = base_config or TrainConfig()
    cfg = replace(base, method=method, setup=setup)
    data = {n: _as_data(m) for n, m in spec.manifests.items()}
    matrix = np.zeros((len(spec.train_sets), len(spec.test_sets)))
    for i, names in enumerate(spec.train_sets):
        roots = {data[n].root for n in names}
        if len(roots) != 1:
            raise ConfigurationError("combined training manifests must share a dataset root")
        rows = [r for n in names for r in data[n].records if r.split != "test"]
        detector = train(cfg, ManifestData(rows, roots.pop())).detector
        for j, test_name in enumerate(spec.test_sets):
            matrix[i, j] = evaluate_localization(detector, data[test_name]).iou
    return matrix


def matrix_row_names(spec):
    return ["+".join(ts) for ts in spec.train_sets]


def write_matrix(path, matrix, row_names, col_names):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["train\\test\t" + "\t".join(col_names)]
    for name, row in zip(row_names, matrix):
        lines.append(name + "\t" + "\t".join(f"{v:.1f}" for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_matrix(path):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("train\\test"):
        raise DataError(f"{path}: not a matrix file")
    cols = lines[0].split("\t")[1:]
    rows, values = [], []
    for line in lines[1:]:
        parts = line.split("\t")
        rows.append(parts[0])
        values.append([float(v) for v in parts[1:]])
    return np.array(values), rows, cols

"""Desk-scale datasets: procedural faces with attribute segmentations, attribute
mask sampling, full-image synthesis, local inpainting, and manifests for the
three supervision setups."""
import itertools
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .errors import ConfigurationError, DataError, ManifestParseError, MissingArtifactError

ATTRIBUTES = ("skin", "hair", "eyes", "nose", "mouth", "glasses")
LABELS = ("real", "fake")
GENERATOR_TAGS = ("none", "p2-analogue", "repaint", "repaint-ldm", "external")
SPLITS = ("train", "val", "test")
MANIFEST_HEADER = "#fakeloc-manifest\tv1"
MANIFEST_FIELDS = ("image_path", "label", "mask_path", "generator_tag", "source_tag", "split")
SMALL_PART_FRACTION = 0.05

# Rendering styles of the two procedural "source datasets".
STYLES = {
    "faces-a": dict(
        background=((0.55, 0.62, 0.75), (0.80, 0.82, 0.88)),
        skin=((0.93, 0.78, 0.66), (0.80, 0.62, 0.50)),
        hair=((0.15, 0.10, 0.07), (0.55, 0.38, 0.20)),
        head_scale=(0.85, 1.0),
        glasses_prob=0.2,
        cfa_amplitude=0.035,
        cfa_phase=0,
        noise=0.012,
        blur=0.6,
    ),
    "faces-b": dict(
        background=((0.30, 0.45, 0.30), (0.85, 0.75, 0.55)),
        skin=((0.75, 0.55, 0.42), (0.45, 0.30, 0.22)),
        hair=((0.05, 0.05, 0.05), (0.85, 0.70, 0.40)),
        head_scale=(0.75, 1.1),
        glasses_prob=0.35,
        cfa_amplitude=0.02,
        cfa_phase=1,
        noise=0.025,
        blur=0.9,
    ),
}


@dataclass
class FaceSet:
    images: np.ndarray  # (n, H, W, 3) float32 on the 8-bit grid, in [0, 1]
    segmentation: np.ndarray  # (n, len(ATTRIBUTES), H, W) bool
    attributes: tuple = ATTRIBUTES
    style: str = "faces-a"

    def __len__(self):
        return len(self.images)

    def face_region(self):
        return self.segmentation.any(axis=1)


def _mix(lo, hi, t):
    return np.asarray(lo) + (np.asarray(hi) - np.asarray(lo)) * t


def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _render_face(size, rng, style):
    p = STYLES[style]
    c = (np.arange(size) + 0.5) / size * 2 - 1
    yy, xx = np.meshgrid(c, c, indexing="ij")

    bg0, bg1 = np.asarray(p["background"][0]), np.asarray(p["background"][1])
    angle = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(angle) * xx + np.sin(angle) * yy + 1.5) / 3
    img = bg0 + (bg1 - bg0) * ramp[..., None]
    img = img * rng.uniform(0.85, 1.1, size=3)

    scale = rng.uniform(*p["head_scale"])
    cy, cx = rng.uniform(0.0, 0.15), rng.uniform(-0.12, 0.12)
    ry, rx = 0.68 * scale, 0.52 * scale * rng.uniform(0.9, 1.1)
    face = _ellipse(yy, xx, cy, cx, ry, rx)

    hair_color = _mix(*p["hair"], rng.uniform())
    hair_cap = _ellipse(yy, xx, cy - 0.16 * ry, cx, ry * rng.uniform(1.08, 1.25), rx * rng.uniform(1.12, 1.3))
    hair = hair_cap & ~face & (yy < cy + rng.uniform(0.0, 0.5) * ry)
    fringe = _ellipse(yy, xx, cy - 0.95 * ry, cx, 0.35 * ry, 0.9 * rx) & face
    hair |= fringe
    face_skin = face & ~fringe

    skin_color = _mix(*p["skin"], rng.uniform())
    r2 = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
    shade = 1.0 - 0.18 * r2
    img = np.where(face_skin[..., None], skin_color * shade[..., None], img)
    img = np.where(hair[..., None], hair_color * (0.9 + 0.2 * (yy[..., None] + 1) / 2), img)

    ey, ex = cy - 0.12 * ry, 0.38 * rx
    ery, erx = 0.11 * ry * rng.uniform(0.9, 1.3), 0.2 * rx * rng.uniform(0.9, 1.2)
    eyes = (_ellipse(yy, xx, ey, cx - ex, ery, erx) | _ellipse(yy, xx, ey, cx + ex, ery, erx)) & face_skin
    iris = (_ellipse(yy, xx, ey, cx - ex, ery, ery) | _ellipse(yy, xx, ey, cx + ex, ery, ery)) & eyes
    img = np.where(eyes[..., None], np.array([0.95, 0.95, 0.93]), img)
    iris_color = _mix((0.15, 0.25, 0.45), (0.35, 0.22, 0.1), rng.uniform())
    img = np.where(iris[..., None], iris_color, img)

    ny = cy + 0.15 * ry
    nose = _ellipse(yy, xx, ny, cx, 0.16 * ry, 0.11 * rx * rng.uniform(0.9, 1.3)) & face_skin & ~eyes
    img = np.where(nose[..., None], skin_color * 0.78, img)

    my = cy + 0.5 * ry
    mouth = _ellipse(yy, xx, my, cx, 0.08 * ry * rng.uniform(0.8, 1.5), 0.32 * rx * rng.uniform(0.8, 1.2))
    mouth &= face_skin & ~nose
    lip = _mix((0.75, 0.25, 0.25), (0.55, 0.15, 0.2), rng.uniform())
    img = np.where(mouth[..., None], lip, img)

    glasses = np.zeros_like(face)
    if rng.uniform() < p["glasses_prob"]:
        gr = 1.6 * max(ery, erx / 1.4)
        for sx in (-1, 1):
            outer = _ellipse(yy, xx, ey, cx + sx * ex, gr * 1.15, gr * 1.45)
            inner = _ellipse(yy, xx, ey, cx + sx * ex, gr * 0.85, gr * 1.15)
            glasses |= outer & ~inner
        glasses |= (np.abs(yy - ey) < 0.03) & (np.abs(xx - cx) < ex - gr)
        glasses &= face_skin & ~eyes
        img = np.where(glasses[..., None], np.array([0.08, 0.08, 0.1]), img)

    skin = face_skin & ~eyes & ~nose & ~mouth & ~glasses
    seg = np.stack([skin, hair, eyes, nose, mouth, glasses])
    return img, seg


def _sensor(img, rng, style):
    """Optics blur, a color-filter-array style periodic gain pattern, and sensor noise."""
    p = STYLES[style]
    img = ndimage.gaussian_filter(img, sigma=(p["blur"], p["blur"], 0), mode="nearest")
    h, w = img.shape[:2]
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    phase = p["cfa_phase"]
    pattern = np.stack([
        ((yy + phase) % 2 == 0) & ((xx + phase) % 2 == 0),
        (yy + xx + phase) % 2 == 1,
        ((yy + phase) % 2 == 1) & ((xx + phase) % 2 == 1),
    ], axis=-1).astype(np.float64)
    img = img * (1 + p["cfa_amplitude"] * (2 * pattern - 1))
    img = img + rng.normal(0, p["noise"], size=img.shape)
    return np.round(np.clip(img, 0, 1) * 255) / 255


def make_procedural_faces(n, size=64, seed=0, style="faces-a", start=0):
    """``n`` procedural face images with exact per-attribute segmentations.

    Image ``i`` depends only on ``(seed, style, start + i)``.
    """
    if n < 1:
        raise ConfigurationError("n must be >= 1")
    if style not in STYLES:
        raise ConfigurationError(f"unknown style {style!r}")
    style_id = sorted(STYLES).index(style)
    images, segs = [], []
    for i in range(start, start + n):
        rng = np.random.default_rng([seed, style_id, i])
        img, seg = _render_face(size, rng, style)
        images.append(_sensor(img, rng, style))
        segs.append(seg)
    return FaceSet(np.stack(images).astype(np.float32), np.stack(segs), ATTRIBUTES, style)


# --------------------------------------------------------------- mask sampling

@dataclass
class AttributeMask:
    values: np.ndarray  # (H, W) uint8 in {0, 1}
    attribute_tag: str | None = None
    kernel: int = 1


def dilate(mask, kernel):
    """Binary dilation with a square ``kernel`` x ``kernel`` structuring element."""
    if kernel < 1 or kernel % 2 == 0:
        raise ConfigurationError("dilation kernel must be a positive odd size")
    mask = np.asarray(mask).astype(bool)
    if kernel == 1:
        return mask.astype(np.uint8)
    return ndimage.binary_dilation(mask, structure=np.ones((kernel, kernel), bool)).astype(np.uint8)


def max_dilation_for(size, max_dilation=15, reference=256):
    """The dilation cap is stated at 256 px; scale it to the working resolution."""
    return max(0, int(round(max_dilation * size / reference)))


def sample_attribute_mask(segmentation, rng, max_dilation=15, attributes=ATTRIBUTES, kernel=None):
    """Pick a random nonempty attribute; small parts get a random odd square dilation."""
    seg = np.asarray(segmentation).astype(bool)
    h, w = seg.shape[-2:]
    present = [i for i in range(len(seg)) if seg[i].any()]
    if not present:
        raise DataError("segmentation has no nonempty attribute")
    i = present[int(rng.integers(len(present)))]
    raw = seg[i]
    if kernel is None:
        kernel = 1
        if raw.mean() < SMALL_PART_FRACTION:
            d = max_dilation_for(w, max_dilation)
            kernel = 2 * int(rng.integers(0, d + 1)) + 1
    return AttributeMask(dilate(raw, kernel), attributes[i], kernel)


# --------------------------------------------------------------- records & I/O

@dataclass(frozen=True)
class SampleRecord:
    image_path: str
    label: str
    mask_path: str | None = None
    generator_tag: str = "none"
    source_tag: str = "faces-a"
    split: str = "train"

    def __post_init__(self):
        if self.label not in LABELS:
            raise DataError(f"unknown label {self.label!r}")
        if self.generator_tag not in GENERATOR_TAGS:
            raise DataError(f"unknown generator tag {self.generator_tag!r}")
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}")
        if self.label == "real" and (self.mask_path is not None or self.generator_tag != "none"):
            raise DataError("real records carry neither a mask nor a generator tag")
        if self.label == "fake" and self.generator_tag == "none":
            raise DataError("fake records need a generator tag")

    @property
    def is_fake(self):
        return self.label == "fake"

    def to_row(self):
        return "\t".join([self.image_path, self.label, self.mask_path or "-",
                          self.generator_tag, self.source_tag, self.split])


def write_manifest(path, records):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [MANIFEST_HEADER] + [r.to_row() for r in records]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_manifest(path):
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"manifest not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        return []
    if lines[0] != MANIFEST_HEADER:
        raise ManifestParseError(f"bad header {lines[0]!r}", line=1)
    records = []
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != len(MANIFEST_FIELDS):
            raise ManifestParseError(f"expected {len(MANIFEST_FIELDS)} fields, got {len(parts)}", line=n)
        image, label, mask, gen, source, split = parts
        try:
            records.append(SampleRecord(image, label, None if mask == "-" else mask, gen, source, split))
        except DataError as exc:
            raise ManifestParseError(str(exc), line=n) from exc
    return records


def dataset_root(manifest_path):
    """Manifests live in ``<root>/manifests/``; record paths are relative to ``<root>``."""
    return Path(manifest_path).resolve().parent.parent


def write_image(path, image):
    """Save an (H, W, 3) float image in [0, 1] as an 8-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.round(np.clip(np.asarray(image, dtype=np.float64), 0, 1) * 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def write_mask(path, mask):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path, format="PNG")


def read_image(path):
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"image not found: {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def read_mask(path):
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"mask not found: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    if not np.isin(arr, (0, 255)).all():
        raise DataError(f"{path}: mask values must be 0 or 255")
    return (arr > 0).astype(np.uint8)


def to_diffusion(images):
    """(N, H, W, C) images in [0, 1] -> (N, C, H, W) tensor in [-1, 1]."""
    return torch.from_numpy(np.asarray(images, dtype=np.float32)).permute(0, 3, 1, 2) * 2 - 1


def from_diffusion(x):
    return ((x.detach().permute(0, 2, 3, 1).cpu().numpy() + 1) / 2).clip(0, 1)


# ------------------------------------------------------------------ generators

@dataclass
class Generators:
    """Trained desk generators: one pixel-space noise predictor per source, and an
    autoencoder plus latent noise predictor for latent inpainting."""
    pixel: dict = field(default_factory=dict)  # source_tag -> EpsilonPredictor
    schedule: object = None
    codec: object = None
    latent: object = None  # EpsilonPredictor in latent space

    FILES = {"autoencoder": "autoencoder.ckpt", "latent": "latent-noise.ckpt"}

    @staticmethod
    def pixel_file(source):
        return f"pixel-noise-{source}.ckpt"

    def save(self, directory):
        from .diffusion import save_codec, save_predictor
        directory = Path(directory)
        for source, pred in self.pixel.items():
            save_predictor(directory / self.pixel_file(source), pred.net, pred.schedule, pred.clip_denoised)
        if self.codec is not None:
            save_codec(directory / self.FILES["autoencoder"], self.codec)
            save_predictor(directory / self.FILES["latent"], self.latent.net, self.latent.schedule,
                           self.latent.clip_denoised)
        return directory

    @classmethod
    def load(cls, directory, sources=("faces-a",), latent=True):
        from .diffusion import load_codec, load_predictor
        directory = Path(directory)
        gens = cls()
        for source in sources:
            path = directory / cls.pixel_file(source)
            if not path.is_file():
                raise MissingArtifactError(
                    f"generator checkpoint {path} is missing; run `fakeloc train-generator` first")
            gens.pixel[source], gens.schedule = load_predictor(path)
        if latent:
            ae = directory / cls.FILES["autoencoder"]
            if not ae.is_file():
                raise MissingArtifactError(
                    f"autoencoder checkpoint {ae} is missing; run `fakeloc train-generator` first")
            gens.codec = load_codec(ae)
            gens.latent, _ = load_predictor(directory / cls.FILES["latent"])
        return gens


@dataclass
class GeneratorTrainConfig:
    size: int = 64
    images_per_source: int = 256
    T: int = 50
    width: int = 16
    steps: int = 600
    ae_steps: int = 300
    latent_steps: int = 600
    latent_channels: int = 4
    f: int = 2
    batch_size: int = 16
    seed: int = 0
    # faces used to train generators are disjoint from dataset identities
    face_offset: int = 1_000_000


def train_generators(sources=("faces-a", "faces-b"), config=GeneratorTrainConfig(), latent=True):
    from .diffusion import (AutoencoderCodec, ConvAutoencoder, ConvNoiseNet, EpsilonPredictor,
                            latent_scale, linear_schedule, train_autoencoder, train_noise_predictor)
    schedule = linear_schedule(config.T)
    gens = Generators(schedule=schedule)
    data_by_source = {}
    for k, source in enumerate(sources):
        faces = make_procedural_faces(config.images_per_source, config.size, config.seed,
                                      source, start=config.face_offset)
        data = to_diffusion(faces.images)
        data_by_source[source] = data
        torch.manual_seed(config.seed + k)
        net = ConvNoiseNet(3, config.width, config.T)
        train_noise_predictor(net, data, schedule, config.steps, config.batch_size, seed=config.seed + k)
        gens.pixel[source] = EpsilonPredictor(net, schedule, clip_denoised=True)
    if latent:
        data = data_by_source[sources[0]]
        torch.manual_seed(config.seed + 100)
        ae = ConvAutoencoder(3, config.latent_channels, 32, config.f)
        train_autoencoder(ae, data, config.ae_steps, config.batch_size, seed=config.seed + 100)
        gens.codec = AutoencoderCodec(ae, latent_scale(ae, data))
        latents = gens.codec.encode(data)
        torch.manual_seed(config.seed + 101)
        lnet = ConvNoiseNet(config.latent_channels, config.width, config.T)
        train_noise_predictor(lnet, latents, schedule, config.latent_steps, config.batch_size,
                              seed=config.seed + 101)
        gens.latent = EpsilonPredictor(lnet, schedule, clip_denoised=False)
    return gens


# ------------------------------------------------------------------ synthesis

def _generators_for(seed, keys):
    return [torch.Generator().manual_seed(int(np.random.SeedSequence([seed, *k]).generate_state(1)[0]))
            for k in keys]


def synthesize_full(predictor, n, seed, root, source_tag="faces-a", split="train",
                    size=64, batch_size=32, start=0):
    """Fully generated fakes; sample ``i`` depends only on ``(seed, source_tag, split, i)``."""
    from .diffusion import ddpm_sample
    if predictor is None:
        raise ConfigurationError("full-image synthesis needs a trained generator checkpoint")
    root = Path(root)
    records = []
    tag = sorted(STYLES).index(source_tag) if source_tag in STYLES else 99
    split_id = SPLITS.index(split)
    for lo in range(start, start + n, batch_size):
        idx = list(range(lo, min(lo + batch_size, start + n)))
        rngs = _generators_for(seed, [(1, tag, split_id, i) for i in idx])
        x = ddpm_sample(predictor, predictor.schedule, (len(idx), 3, size, size), rngs)
        for i, img in zip(idx, from_diffusion(x)):
            rel = f"images/{source_tag}/p2-analogue/{split}/{i:05d}.png"
            write_image(root / rel, img)
            records.append(SampleRecord(rel, "fake", None, "p2-analogue", source_tag, split))
    return records


def identity_masks(faces, identity_ids, per_image, seed, max_dilation=15):
    """Per-identity attribute masks; depend only on ``(seed, identity, k)``, never on the method."""
    out = []
    for j, ident in enumerate(identity_ids):
        rng = np.random.default_rng([seed, 7, int(ident)])
        out.append([sample_attribute_mask(faces.segmentation[j], rng, max_dilation)
                    for _ in range(per_image)])
    return out


def inpaint_local(faces, identity_ids, method, per_image, seed, root, generators,
                  source_tag="faces-a", split="train", batch_size=32, max_dilation=15, masks=None):
    """Inpaint ``per_image`` attribute masks for each face and write image + mask files.

    Masks and diffusion noise depend only on ``(seed, identity, k)``, so two
    methods run with the same seed share masks, and with an identity codec
    produce identical outputs.
    """
    from .diffusion import IdentityCodec, repaint_inpaint, repaint_ldm_inpaint
    if method not in ("repaint", "repaint-ldm"):
        raise ConfigurationError(f"unknown inpainting method {method!r}")
    root = Path(root)
    if masks is None:
        masks = identity_masks(faces, identity_ids, per_image, seed, max_dilation)
    jobs = [(j, k) for j in range(len(identity_ids)) for k in range(per_image)]
    records = []
    predictor = generators.pixel.get(source_tag)
    if predictor is None:
        raise ConfigurationError(f"no generator for source {source_tag!r}")
    for lo in range(0, len(jobs), batch_size):
        chunk = jobs[lo:lo + batch_size]
        x0 = to_diffusion(np.stack([faces.images[j] for j, _ in chunk]))
        m = torch.from_numpy(np.stack([masks[j][k].values for j, k in chunk]).astype(np.float32))[:, None]
        rngs = _generators_for(seed, [(2, int(identity_ids[j]), k) for j, k in chunk])
        if method == "repaint":
            out = repaint_inpaint(x0, m, predictor, predictor.schedule, rngs)
        else:
            codec = generators.codec or IdentityCodec()
            latent = generators.latent if generators.codec is not None else predictor
            out = repaint_ldm_inpaint(x0, m, codec, latent, latent.schedule, rngs)
        for (j, k), img in zip(chunk, from_diffusion(out)):
            ident = int(identity_ids[j])
            name = f"{ident:05d}-{k}.png"
            mask_rel = f"masks/{source_tag}/{name}"
            img_rel = f"images/{source_tag}/{method}/{split}/{name}"
            write_mask(root / mask_rel, masks[j][k].values)
            write_image(root / img_rel, img)
            records.append(SampleRecord(img_rel, "fake", mask_rel, method, source_tag, split))
    return records


def write_reals(faces, identity_ids, root, source_tag="faces-a", split="train"):
    root = Path(root)
    records = []
    for j, ident in enumerate(identity_ids):
        rel = f"images/{source_tag}/real/{split}/{int(ident):05d}.png"
        write_image(root / rel, faces.images[j])
        records.append(SampleRecord(rel, "real", None, "none", source_tag, split))
    return records


# ------------------------------------------------------------------- setups

@dataclass
class SetupSpec:
    setup: str
    counts: dict  # split -> {"real": n, "fake": n}

    def __post_init__(self):
        if self.setup not in ("a", "b", "c"):
            raise ConfigurationError(f"unknown setup {self.setup!r}")
        if self.setup == "c" and any(c.get("real", 0) for c in self.counts.values()):
            raise ConfigurationError("setup c uses no real images")


def desk_setup_spec(setup, scale=0.01):
    """Table-1 counts scaled down (default 1/100)."""
    def n(x):
        return max(1, int(round(x * scale)))
    if setup == "c":
        counts = {"train": {"real": 0, "fake": n(30000)}, "val": {"real": 0, "fake": n(3000)},
                  "test": {"real": 0, "fake": n(8500)}}
    else:
        counts = {"train": {"real": n(9000), "fake": n(9000)}, "val": {"real": n(900), "fake": n(1000)},
                  "test": {"real": n(900), "fake": n(8500)}}
    return SetupSpec(setup, counts)


def _choose(pool, n, seed, key, what):
    if n > len(pool):
        raise DataError(f"need {n} {what} records, pool has {len(pool)}")
    rng = np.random.default_rng([seed, *key])
    idx = np.sort(rng.choice(len(pool), size=n, replace=False))
    return [pool[i] for i in idx]


def build_setup(spec, pools, seed=0):
    """Assemble a manifest for one supervision setup.

    ``pools`` maps ``real`` / ``full`` / ``local`` to split-tagged records.
    Test rows do not depend on the setup, so every setup is evaluated on the
    same data; setup b hides masks of its training and validation fakes.
    """
    out = []
    for s, split in enumerate(SPLITS):
        want = spec.counts.get(split, {})
        reals = [r for r in pools.get("real", []) if r.split == split]
        if split == "test" or spec.setup in ("b", "c"):
            fakes = [r for r in pools.get("local", []) if r.split == split]
        else:
            fakes = [r for r in pools.get("full", []) if r.split == split]
        n_real = 0 if spec.setup == "c" else want.get("real", 0)
        chosen_real = _choose(reals, n_real, seed, (s, 0), f"{split} real")
        key = (s, 1) if split == "test" or spec.setup != "a" else (s, 2)
        chosen_fake = _choose(fakes, want.get("fake", 0), seed, key, f"{split} fake")
        if spec.setup == "b" and split != "test":
            chosen_fake = [replace(r, mask_path=None) for r in chosen_fake]
        out += chosen_real + chosen_fake
    check_setup_invariants(spec.setup, out)
    return out


def check_setup_invariants(setup, records):
    """Raise DataError if ``records`` violate the rules of ``setup``."""
    seen = {}
    for r in records:
        if seen.setdefault(r.image_path, r.split) != r.split:
            raise DataError(f"{r.image_path} appears in two splits")
        if setup == "c":
            if not r.is_fake:
                raise DataError("setup c manifests contain no real images")
            if r.mask_path is None:
                raise DataError("setup c fakes need masks")
        if r.split == "test" and r.is_fake and r.mask_path is None:
            raise DataError("test fakes need masks for localization")
        if r.split != "test" and r.is_fake:
            if setup == "a" and r.generator_tag != "p2-analogue":
                raise DataError("setup a trains on fully generated fakes")
            if setup == "b" and r.mask_path is not None:
                raise DataError("setup b hides masks from training")
            if setup in ("b", "c") and r.generator_tag in ("none", "p2-analogue"):
                raise DataError(f"setup {setup} trains on locally manipulated fakes")
    return True


# ------------------------------------------------------------------ pipeline

def _default_identities():
    return {"faces-a": {"train": 100, "val": 10, "test": 29}, "faces-b": {"train": 100, "val": 10}}


def auto_counts(setup, pool):
    """Use every available row: all locals for setup c; balanced reals/fakes for a and b."""
    counts = {}
    for split in SPLITS:
        n_real = sum(1 for r in pool["real"] if r.split == split)
        n_local = sum(1 for r in pool["local"] if r.split == split)
        n_full = sum(1 for r in pool["full"] if r.split == split)
        if split == "test":
            counts[split] = {"real": 0 if setup == "c" else n_real, "fake": n_local}
        elif setup == "c":
            counts[split] = {"real": 0, "fake": n_local}
        else:
            # a and b see the same number of fakes so they differ only in fake type
            counts[split] = {"real": n_real, "fake": min(n_full, n_local)}
    return counts


@dataclass
class DatasetConfig:
    size: int = 64
    identities: dict = field(default_factory=_default_identities)
    per_image: int = 3
    full_per_split: dict = field(default_factory=lambda: {"train": 90, "val": 10})
    # faces-a identities (leading ones of each split) also inpainted with repaint-ldm
    ldm_identities: dict = field(default_factory=lambda: {"train": 30, "val": 5, "test": 10})
    setup_counts: dict | None = None  # None: derived from the generated pools
    max_dilation: int = 15
    seed: int = 0
    batch_size: int = 32
    main_source: str = "faces-a"


def _identity_ids(config, source):
    """Identity numbers per split; splits never share an identity."""
    ids, nxt = {}, 0
    for split in SPLITS:
        n = config.identities.get(source, {}).get(split, 0)
        ids[split] = np.arange(nxt, nxt + n)
        nxt += n
    return ids


def _faces(config, source, ids):
    if len(ids) == 0:
        return None
    faces = make_procedural_faces(len(ids), config.size, config.seed, source, start=int(ids[0]))
    return faces


def _subset(faces, n):
    return FaceSet(faces.images[:n], faces.segmentation[:n], faces.attributes, faces.style)


def generate_dataset(root, generators, config=DatasetConfig()):
    """Write images, masks and every manifest under ``root``; returns manifest paths.

    Manifests: ``<setup>.tsv`` for the main source, ``<setup>-<source>.tsv`` for
    other sources (test rows always from the main source), and
    ``gen-<method>.tsv`` setup-c manifests over shared images and masks.
    """
    root = Path(root)
    main = config.main_source
    pools = {}
    ldm_pool = []
    for source in config.identities:
        ids = _identity_ids(config, source)
        pool = {"real": [], "full": [], "local": []}
        for split in SPLITS:
            faces = _faces(config, source, ids[split])
            if faces is None:
                continue
            pool["real"] += write_reals(faces, ids[split], root, source, split)
            masks = identity_masks(faces, ids[split], config.per_image, config.seed, config.max_dilation)
            pool["local"] += inpaint_local(faces, ids[split], "repaint", config.per_image, config.seed,
                                           root, generators, source, split, config.batch_size,
                                           config.max_dilation, masks)
            n_full = config.full_per_split.get(split, 0)
            if n_full:
                pool["full"] += synthesize_full(generators.pixel[source], n_full, config.seed, root,
                                                source, split, config.size, config.batch_size)
            n_ldm = min(config.ldm_identities.get(split, 0), len(ids[split])) if source == main else 0
            if n_ldm and generators.codec is not None:
                ldm_pool += inpaint_local(_subset(faces, n_ldm), ids[split][:n_ldm], "repaint-ldm",
                                          config.per_image, config.seed, root, generators, source,
                                          split, config.batch_size, config.max_dilation, masks[:n_ldm])
        pools[source] = pool

    manifests = {}
    for setup in ("a", "b", "c"):
        counts = config.setup_counts[setup] if config.setup_counts else auto_counts(setup, pools[main])
        records = build_setup(SetupSpec(setup, counts), pools[main], config.seed)
        manifests[setup] = write_manifest(root / "manifests" / f"{setup}.tsv", records)
        test_rows = [r for r in records if r.split == "test"]
        for source in pools:
            if source == main:
                continue
            other_counts = auto_counts(setup, pools[source])
            if config.setup_counts:
                other_counts = {k: {c: min(v[c], config.setup_counts[setup].get(k, {}).get(c, 0))
                                    for c in v} for k, v in other_counts.items()}
            other_counts["test"] = {"real": 0, "fake": 0}
            other = build_setup(SetupSpec(setup, other_counts), pools[source], config.seed)
            name = f"{setup}-{source}"
            manifests[name] = write_manifest(root / "manifests" / f"{name}.tsv", other + test_rows)

    if ldm_pool:
        ldm_keys = {(r.mask_path, r.split) for r in ldm_pool}
        same = [r for r in pools[main]["local"] if (r.mask_path, r.split) in ldm_keys]
        for method, rows in (("repaint", same), ("repaint-ldm", ldm_pool)):
            check_setup_invariants("c", rows)
            manifests[f"gen-{method}"] = write_manifest(root / "manifests" / f"gen-{method}.tsv", rows)
    return manifests

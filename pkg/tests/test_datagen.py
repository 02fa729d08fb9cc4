import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from fakeloc import datagen
from fakeloc.datagen import SampleRecord, SetupSpec
from fakeloc.diffusion import IdentityCodec
from fakeloc.errors import ConfigurationError, DataError, ManifestParseError, MissingArtifactError


def test_faces_deterministic():
    a = datagen.make_procedural_faces(1, 64, seed=0)
    b = datagen.make_procedural_faces(1, 64, seed=0)
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(a.segmentation, b.segmentation)
    c = datagen.make_procedural_faces(1, 64, seed=1)
    assert not np.array_equal(a.images, c.images)


def test_faces_offset_matches_batch():
    batch = datagen.make_procedural_faces(3, 32, seed=2, style="faces-b")
    third = datagen.make_procedural_faces(1, 32, seed=2, style="faces-b", start=2)
    assert np.array_equal(batch.images[2], third.images[0])


def test_faces_value_grid():
    faces = datagen.make_procedural_faces(4, 64, seed=0)
    assert faces.images.dtype == np.float32 and faces.images.min() >= 0 and faces.images.max() <= 1
    assert np.allclose(faces.images * 255, np.round(faces.images * 255), atol=1e-4)


def test_attributes_inside_face_region():
    faces = datagen.make_procedural_faces(20, 64, seed=0)
    region = faces.face_region()
    for i in range(len(faces)):
        for a in range(len(datagen.ATTRIBUTES)):
            assert not (faces.segmentation[i, a] & ~region[i]).any()


@pytest.mark.parametrize("style", sorted(datagen.STYLES))
def test_attribute_coverage(style):
    faces = datagen.make_procedural_faces(100, 64, seed=0, style=style)
    union = faces.segmentation.any(axis=1)
    assert union.mean() >= 0.30


def test_faces_errors():
    with pytest.raises(ConfigurationError):
        datagen.make_procedural_faces(0)
    with pytest.raises(ConfigurationError):
        datagen.make_procedural_faces(1, style="faces-z")


def test_dilation_identity_and_block():
    seg = np.zeros((len(datagen.ATTRIBUTES), 8, 8), bool)
    seg[3, 0, 4] = True
    m = datagen.sample_attribute_mask(seg, np.random.default_rng(0), kernel=1)
    assert np.array_equal(m.values, seg[3].astype(np.uint8)) and m.attribute_tag == "nose"
    m3 = datagen.sample_attribute_mask(seg, np.random.default_rng(0), kernel=3)
    expected = np.zeros((8, 8), np.uint8)
    expected[0:2, 3:6] = 1  # clipped at the top border
    assert np.array_equal(m3.values, expected)


def test_dilation_cap():
    assert datagen.max_dilation_for(256) == 15
    assert datagen.max_dilation_for(64) == 4
    seg = np.zeros((len(datagen.ATTRIBUTES), 256, 256), bool)
    seg[2, 100:104, 100:104] = True
    rng = np.random.default_rng(0)
    kernels = {datagen.sample_attribute_mask(seg, rng).kernel for _ in range(300)}
    assert max(kernels) <= 2 * 15 + 1 and min(kernels) >= 1
    assert all(k % 2 == 1 for k in kernels)


def test_large_parts_not_dilated():
    seg = np.zeros((len(datagen.ATTRIBUTES), 32, 32), bool)
    seg[0, 4:28, 4:28] = True
    for s in range(20):
        m = datagen.sample_attribute_mask(seg, np.random.default_rng(s))
        assert m.kernel == 1


def test_empty_segmentation():
    with pytest.raises(DataError):
        datagen.sample_attribute_mask(np.zeros((6, 4, 4), bool), np.random.default_rng(0))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_sampled_masks_nonempty_and_superset(seed):
    faces = datagen.make_procedural_faces(1, 32, seed=seed % 7)
    m = datagen.sample_attribute_mask(faces.segmentation[0], np.random.default_rng(seed))
    idx = datagen.ATTRIBUTES.index(m.attribute_tag)
    assert m.values.any()
    assert (m.values >= faces.segmentation[0, idx]).all()


def test_record_invariants():
    with pytest.raises(DataError):
        SampleRecord("x.png", "real", "m.png")
    with pytest.raises(DataError):
        SampleRecord("x.png", "fake", None, "none")
    with pytest.raises(DataError):
        SampleRecord("x.png", "maybe")


def test_manifest_roundtrip(tmp_path):
    recs = [SampleRecord("images/r.png", "real"),
            SampleRecord("images/f.png", "fake", "masks/f.png", "repaint", "faces-b", "test")]
    path = datagen.write_manifest(tmp_path / "manifests" / "m.tsv", recs)
    assert datagen.load_manifest(path) == recs
    assert datagen.dataset_root(path) == tmp_path.resolve()


def test_manifest_empty_and_errors(tmp_path):
    empty = tmp_path / "e.tsv"
    empty.write_text("")
    assert datagen.load_manifest(empty) == []
    bad = tmp_path / "b.tsv"
    bad.write_text(datagen.MANIFEST_HEADER + "\nimg.png\treal\tmask.png\tnone\tfaces-a\ttrain\n")
    with pytest.raises(ManifestParseError, match="line 2"):
        datagen.load_manifest(bad)
    short = tmp_path / "s.tsv"
    short.write_text(datagen.MANIFEST_HEADER + "\nimg.png\treal\n")
    with pytest.raises(ManifestParseError):
        datagen.load_manifest(short)
    with pytest.raises(MissingArtifactError):
        datagen.load_manifest(tmp_path / "missing.tsv")


def test_image_mask_io(tmp_path):
    img = np.random.default_rng(0).random((8, 8, 3))
    datagen.write_image(tmp_path / "i.png", img)
    back = datagen.read_image(tmp_path / "i.png")
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-6
    mask = np.zeros((8, 8), np.uint8)
    mask[2:4] = 1
    datagen.write_mask(tmp_path / "m.png", mask)
    assert np.array_equal(datagen.read_mask(tmp_path / "m.png"), mask)
    datagen.write_image(tmp_path / "grey.png", np.full((4, 4, 3), 0.5))
    with pytest.raises(DataError):
        datagen.read_mask(tmp_path / "grey.png")


class Shrink:
    def __init__(self, schedule):
        self.schedule = schedule
        self.clip_denoised = True

    def __call__(self, x, t):
        from fakeloc.diffusion import NoisePredictorOutput
        return NoisePredictorOutput(0.9 * x, torch.tensor(self.schedule.posterior_variance(t), dtype=x.dtype))


def _toy_generators():
    from fakeloc.diffusion import linear_schedule
    s = linear_schedule(5)
    return datagen.Generators(pixel={"faces-a": Shrink(s)}, schedule=s)


def test_synthesize_full(tmp_path):
    gens = _toy_generators()
    assert datagen.synthesize_full(gens.pixel["faces-a"], 0, 0, tmp_path) == []
    recs = datagen.synthesize_full(gens.pixel["faces-a"], 3, 0, tmp_path, size=16)
    assert len(recs) == 3
    for r in recs:
        assert r.is_fake and r.mask_path is None and r.generator_tag == "p2-analogue"
        img = datagen.read_image(tmp_path / r.image_path)
        assert img.min() >= 0 and img.max() <= 1
    with pytest.raises(ConfigurationError):
        datagen.synthesize_full(None, 1, 0, tmp_path)


def test_inpaint_local_counts_and_reduction(tmp_path):
    gens = _toy_generators()
    faces = datagen.make_procedural_faces(10, 16, seed=0)
    ids = np.arange(10)
    a = datagen.inpaint_local(faces, ids, "repaint", 3, 5, tmp_path / "a", gens, batch_size=7)
    b = datagen.inpaint_local(faces, ids, "repaint-ldm", 3, 5, tmp_path / "b", gens, batch_size=4)
    assert len(a) == 30 and len(b) == 30
    for ra, rb in zip(a, b):
        ma = datagen.read_mask(tmp_path / "a" / ra.mask_path)
        assert ma.any()
        assert np.array_equal(ma, datagen.read_mask(tmp_path / "b" / rb.mask_path))
        # identity codec: latent inpainting is pixel inpainting
        assert (tmp_path / "a" / ra.image_path).read_bytes() == (tmp_path / "b" / rb.image_path).read_bytes()
    with pytest.raises(ConfigurationError):
        datagen.inpaint_local(faces, ids, "lama", 1, 0, tmp_path, gens)


def test_inpaint_preserves_unmasked(tmp_path):
    gens = _toy_generators()
    faces = datagen.make_procedural_faces(2, 16, seed=1)
    recs = datagen.inpaint_local(faces, np.arange(2), "repaint", 1, 0, tmp_path, gens)
    for j, r in enumerate(recs):
        img = datagen.read_image(tmp_path / r.image_path)
        mask = datagen.read_mask(tmp_path / r.mask_path).astype(bool)
        assert np.abs(img[~mask] - faces.images[j][~mask]).max() <= 1 / 255 + 1e-6


def _pools():
    pools = {"real": [], "full": [], "local": []}
    for split, n in (("train", 6), ("val", 3), ("test", 4)):
        for i in range(n):
            pools["real"].append(SampleRecord(f"r/{split}{i}.png", "real", split=split))
            pools["full"].append(SampleRecord(f"f/{split}{i}.png", "fake", None, "p2-analogue", split=split))
            for k in range(2):
                pools["local"].append(SampleRecord(f"l/{split}{i}-{k}.png", "fake", f"m/{split}{i}-{k}.png",
                                                   "repaint", split=split))
    return pools


def test_build_setup_rules():
    pools = _pools()
    counts_ab = {"train": {"real": 4, "fake": 4}, "val": {"real": 2, "fake": 2}, "test": {"real": 2, "fake": 5}}
    a = datagen.build_setup(SetupSpec("a", counts_ab), pools, seed=0)
    b = datagen.build_setup(SetupSpec("b", counts_ab), pools, seed=0)
    c = datagen.build_setup(SetupSpec("c", {"train": {"fake": 10}, "val": {"fake": 4}, "test": {"fake": 5}}),
                            pools, seed=0)
    assert not [r for r in c if not r.is_fake]
    assert all(r.mask_path is None for r in b if r.is_fake and r.split != "test")
    assert all(r.generator_tag == "p2-analogue" for r in a if r.is_fake and r.split != "test")
    for recs in (a, b, c):
        splits = {}
        for r in recs:
            assert splits.setdefault(r.image_path, r.split) == r.split
    test_fakes = [{r.image_path for r in recs if r.split == "test" and r.is_fake} for recs in (a, b, c)]
    assert test_fakes[0] == test_fakes[1] == test_fakes[2]
    with pytest.raises(ConfigurationError):
        SetupSpec("c", {"train": {"real": 1, "fake": 1}})
    with pytest.raises(DataError):
        datagen.build_setup(SetupSpec("c", {"train": {"fake": 99}}), pools, seed=0)


def test_check_invariants_rejects():
    real = SampleRecord("r.png", "real")
    with pytest.raises(DataError):
        datagen.check_setup_invariants("c", [real])
    with pytest.raises(DataError):
        datagen.check_setup_invariants("b", [SampleRecord("f.png", "fake", "m.png", "repaint")])
    with pytest.raises(DataError):
        datagen.check_setup_invariants("a", [SampleRecord("f.png", "fake", "m.png", "repaint")])
    with pytest.raises(DataError):
        datagen.check_setup_invariants("a", [real, SampleRecord("r.png", "real", split="val")])


def test_generators_missing(tmp_path):
    with pytest.raises(MissingArtifactError, match="train-generator"):
        datagen.Generators.load(tmp_path)


def test_generators_save_load(tiny_generators, tmp_path):
    tiny_generators.save(tmp_path)
    back = datagen.Generators.load(tmp_path, ("faces-a", "faces-b"))
    x = torch.randn(1, 3, 64, 64)
    assert torch.equal(back.pixel["faces-a"](x, 3).mean, tiny_generators.pixel["faces-a"](x, 3).mean)
    z = torch.randn(1, 4, 32, 32)
    assert torch.equal(back.codec.decode(z), tiny_generators.codec.decode(z))


def test_generate_dataset(tiny_dataset):
    root, manifests = tiny_dataset
    c = datagen.load_manifest(manifests["c"])
    assert c and all(r.is_fake and r.mask_path for r in c)
    datagen.check_setup_invariants("c", c)
    # 6 training identities x 2 inpaintings each
    assert sum(1 for r in c if r.split == "train") == 12
    for setup in "ab":
        recs = datagen.load_manifest(manifests[setup])
        datagen.check_setup_invariants(setup, recs)
        train = [r for r in recs if r.split == "train"]
        assert {r.label for r in train} == {"real", "fake"}
        other = datagen.load_manifest(manifests[f"{setup}-faces-b"])
        assert {r.source_tag for r in other if r.split != "test"} == {"faces-b"}
        assert {r.source_tag for r in other if r.split == "test"} == {"faces-a"}
    for r in c:
        assert (root / r.image_path).is_file() and (root / r.mask_path).is_file()
    pix = datagen.load_manifest(manifests["gen-repaint"])
    lat = datagen.load_manifest(manifests["gen-repaint-ldm"])
    assert [r.mask_path for r in pix] == [r.mask_path for r in lat]
    assert {r.generator_tag for r in lat} == {"repaint-ldm"}


def test_generate_dataset_identity_codec(tmp_path):
    """Without a trained autoencoder the latent pipeline reduces to pixel RePaint."""
    gens = _toy_generators()
    cfg = datagen.DatasetConfig(size=16, identities={"faces-a": {"train": 2, "val": 1, "test": 1}}, per_image=1,
                                full_per_split={"train": 2, "val": 1}, ldm_identities={"train": 2})
    gens.codec = IdentityCodec()
    gens.latent = gens.pixel["faces-a"]
    m = datagen.generate_dataset(tmp_path, gens, cfg)
    pix = datagen.load_manifest(m["gen-repaint"])
    lat = datagen.load_manifest(m["gen-repaint-ldm"])
    for a, b in zip(pix, lat):
        assert (tmp_path / a.image_path).read_bytes() == (tmp_path / b.image_path).read_bytes()

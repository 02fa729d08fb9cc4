import hashlib
import json
import shutil
import time
from dataclasses import asdict
from pathlib import Path

import pytest
import torch

from fakeloc import datagen

torch.set_num_threads(1)

TINY_GENERATORS = datagen.GeneratorTrainConfig(images_per_source=16, T=10, width=8, steps=20,
                                               ae_steps=10, latent_steps=20, batch_size=8)

TINY_IDENTITIES = {"faces-a": {"train": 6, "val": 3, "test": 4}, "faces-b": {"train": 6, "val": 3}}


def tiny_dataset_config(**over):
    params = dict(identities=TINY_IDENTITIES, per_image=2, full_per_split={"train": 6, "val": 3},
                  ldm_identities={"train": 2, "val": 1, "test": 2}, batch_size=16)
    params.update(over)
    return datagen.DatasetConfig(**params)


# The desk world used by the end-to-end acceptance checks: generators at their
# default budget, 100 training identities x 3 inpaintings = 300 setup-c fakes.
WORLD_GENERATORS = datagen.GeneratorTrainConfig()
WORLD_DATASET = datagen.DatasetConfig()


@pytest.fixture(scope="session")
def tiny_generators():
    return datagen.train_generators(("faces-a", "faces-b"), TINY_GENERATORS)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_generators, tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny-data")
    manifests = datagen.generate_dataset(root, tiny_generators, tiny_dataset_config())
    return root, manifests


def _world_key():
    blob = json.dumps({"gen": asdict(WORLD_GENERATORS), "data": asdict(WORLD_DATASET),
                       "version": 1}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@pytest.fixture(scope="session")
def desk_world(request):
    """Generators + dataset, cached across sessions in pytest's cache directory."""
    cache = Path(request.config.cache.mkdir("fakeloc-desk-world"))
    key = _world_key()
    root = cache / key
    stamp = root / "complete.json"
    if not stamp.is_file():
        if root.exists():
            shutil.rmtree(root)
        t0 = time.perf_counter()
        gens = datagen.train_generators(("faces-a", "faces-b"), WORLD_GENERATORS)
        gens.save(root / "generators")
        t1 = time.perf_counter()
        manifests = datagen.generate_dataset(root / "data", gens, WORLD_DATASET)
        t2 = time.perf_counter()
        stamp.write_text(json.dumps({"manifests": {k: str(v.relative_to(root)) for k, v in manifests.items()},
                                     "generator_seconds": t1 - t0, "dataset_seconds": t2 - t1}))
    info = json.loads(stamp.read_text())
    return {"root": root, "manifests": {k: root / v for k, v in info["manifests"].items()},
            "generator_seconds": info["generator_seconds"], "dataset_seconds": info["dataset_seconds"]}

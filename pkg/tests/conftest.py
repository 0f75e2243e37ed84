import numpy as np
import pytest
import torch

from sparsecell.data import load_dataset
from sparsecell.model import LevelPrediction, Prediction
from sparsecell.data import BoundingBox
from sparsecell.synth import CorpusSpec, generate_corpus

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Small rendered corpus shared across tests: 6 train / 3 test, 256x192."""
    out = tmp_path_factory.mktemp("corpus")
    spec = CorpusSpec(seed=11, n_train=6, n_test=3, image_dims=(256, 192),
                      cells_per_image=(3, 6), cell_radius=(10, 16),
                      region_fraction=0.35)
    train_path, test_path = generate_corpus(spec, out)
    return {
        "dir": out, "spec": spec,
        "train": load_dataset(train_path),
        "test": load_dataset(test_path),
        "train_path": train_path, "test_path": test_path,
    }


def random_levels(rng, image_wh=(64, 64), n_classes=4, strides=(8, 16, 32),
                  dtype=torch.float64, scale=2.0, requires_grad=False):
    """Random raw level tensors shaped for an image of image_wh."""
    W, H = image_wh
    levels = []
    for v, s in enumerate(strides):
        h, w = H // s, W // s
        obj = torch.tensor(rng.normal(0, scale, (h, w)), dtype=dtype,
                           requires_grad=requires_grad)
        cls = torch.tensor(rng.normal(0, scale, (h, w, n_classes)), dtype=dtype,
                           requires_grad=requires_grad)
        box = torch.tensor(rng.normal(0, 0.5, (h, w, 4)), dtype=dtype,
                           requires_grad=requires_grad)
        levels.append(LevelPrediction(level_index=v, stride=s, obj_logit=obj,
                                      cls_logit=cls, box_raw=box))
    return levels


def random_prediction(rng, n_classes=4, image_wh=(200, 200)):
    W, H = image_wh
    w = float(rng.uniform(4, 60))
    h = float(rng.uniform(4, 60))
    x = float(rng.uniform(0, W - w))
    y = float(rng.uniform(0, H - h))
    probs = rng.random(n_classes)
    if rng.random() < 0.3:  # sometimes nearly one-hot for low entropy
        probs = probs * 0.05
        probs[rng.integers(n_classes)] = rng.uniform(0.8, 1.0)
    obj = float(rng.random())
    box = BoundingBox(x, y, w, h)
    return Prediction(cell_class=int(np.argmax(probs)),
                      conf=float(probs.max() * obj), box=box,
                      probs=probs, objectness=obj)

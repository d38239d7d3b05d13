import numpy as np
import pytest

from calibra.tensor_core import Dataset, ImageTensor, LabelMap, LogitMap, Sample


def make_sample(logits, labels, sid="s0", image=None):
    logits = np.asarray(logits, dtype=np.float32)
    return Sample(sid, LogitMap(logits), LabelMap(np.asarray(labels), logits.shape[0]),
                  None if image is None else ImageTensor(image))


def make_dataset(pairs, split="val"):
    return Dataset([make_sample(z, s, f"{split}_{i:04d}") for i, (z, s) in enumerate(pairs)], split)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

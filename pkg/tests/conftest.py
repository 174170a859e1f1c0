import numpy as np
import pytest

from emhrnn.model import Document, ModelParams


def random_doc(rng, lengths=(5, 5), d_emb=6, n_classes=3):
    return Document([rng.standard_normal((t, d_emb)) for t in lengths], int(rng.integers(n_classes)))


def small_params(seed=0, d_emb=6, d_h=4, d_a=3, n_classes=3):
    return ModelParams.init(np.random.default_rng(seed), d_emb=d_emb, d_h=d_h, d_a=d_a, n_classes=n_classes)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

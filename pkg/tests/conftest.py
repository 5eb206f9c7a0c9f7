import numpy as np
import pytest

from sclip.synthdata import WorldSpec, make_dataset
from sclip.trainer import Batch


def batch_from(ds, n, m, seed=0):
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(ds.labeled), size=n, replace=False)
    unl = rng.choice(len(ds.unlabeled), size=m, replace=False) if m else np.array([], dtype=int)
    return Batch(
        images=ds.labeled.images[idx],
        texts=ds.labeled.texts[idx, 0, :],
        caption_keywords=[ds.labeled.caption_keywords[i][0] for i in idx],
        unpaired=ds.unlabeled.images[unl] if m else np.zeros((0, ds.labeled.images.shape[1])),
        keyword_raw=ds.keyword_raw,
    )


@pytest.fixture(scope="session")
def default_dataset():
    return make_dataset(WorldSpec(seed=0), 64, 64, 32)


@pytest.fixture(scope="session")
def tiny_dataset():
    spec = WorldSpec(num_classes=3, vocab_size=7, latent_dim=4, d_img_raw=6, d_txt_raw=6,
                     extras_per_class=3, keywords_per_caption=(1, 3), seed=1)
    return make_dataset(spec, 12, 12, 6)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mixerflow.config import RunConfig  # noqa: E402
from mixerflow.data import encode_idx_images, encode_idx_labels  # noqa: E402
from mixerflow.model import MixerFlowConfig  # noqa: E402


@pytest.fixture(scope="session")
def tiny_mnist(tmp_path_factory):
    """8x8 digit-like IDX files: 96 training and 32 test images."""
    d = tmp_path_factory.mktemp("tiny_mnist")
    rng = np.random.default_rng(0)
    for stem, n in (("train", 96), ("t10k", 32)):
        labels = rng.integers(0, 10, n)
        imgs = np.zeros((n, 8, 8), np.uint8)
        for i, y in enumerate(labels):
            imgs[i, 1 + y % 6, 1:7] = 200
            imgs[i, 1:7, 1 + y // 2] = 255
        imgs = np.clip(imgs + rng.integers(0, 20, imgs.shape), 0, 255).astype(np.uint8)
        (d / f"{stem}-images-idx3-ubyte").write_bytes(encode_idx_images(imgs))
        (d / f"{stem}-labels-idx1-ubyte").write_bytes(encode_idx_labels(labels))
    return d


def tiny_run(out_dir, data_dir, **kw) -> RunConfig:
    model = MixerFlowConfig(h=8, w=8, channels=1, p_h=2, p_w=2, n_layers=2, flows_per_stage=1,
                            hidden_dim=8, shift_every=2, seed=0)
    run = RunConfig(model=model, dataset="mnist", data_dir=str(data_dir), batch_size=16, steps=6,
                    log_every=2, out_dir=str(out_dir))
    return run.replace(**kw) if kw else run

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sava.autodiff import Tensor  # noqa: E402
from sava.data import SynthConfig, generate_synthetic_dataset  # noqa: E402
from sava.models import ClassifierSpec, init_classifier, train  # noqa: E402


@pytest.fixture(scope="session")
def meanpool_model():
    """A frame-CNN mean-pool classifier trained on a small moving-square set."""
    records = generate_synthetic_dataset(SynthConfig(num_videos=80, seed=1))
    spec = init_classifier("frame_cnn_meanpool", (16, 16, 16, 3), 4, seed=0)
    spec, history = train(spec, records, epochs=10, seed=0)
    return spec, history, records


def informative_records(seed: int, per_frame: int, T: int = 8):
    """Videos whose shape appears in exactly one frame, cycling that frame over ``range(T)``."""
    out = []
    for f in range(T):
        cfg = SynthConfig(num_videos=per_frame, T=T, informative_frames=(f,), seed=seed * 100 + f)
        out += generate_synthetic_dataset(cfg)
    return out


@pytest.fixture(scope="session")
def informative_model():
    """Mean-pool classifier trained on single-informative-frame videos (T=8)."""
    spec = init_classifier("frame_cnn_meanpool", (8, 16, 16, 3), 4, seed=0)
    spec, _ = train(spec, informative_records(1, 16), epochs=10, seed=0)
    return spec


def probe_spec(T: int, H: int, W: int, hot: tuple[int, int, int], weight: float, bias: float) -> ClassifierSpec:
    """Two-class mean-pool probe whose logit margin depends on one pixel only.

    The frame CNN is a single identity tap into one feature channel, so the
    pooled feature for pixel ``hot = (row, col, channel)`` is a fixed multiple
    of that pixel's value averaged over frames.
    """
    spec = init_classifier("frame_cnn_meanpool", (T, H, W, 1), 2, seed=0)
    conv = np.zeros((3, 3, 1, 8))
    conv[1, 1, 0, 0] = 1.0
    spec.params["conv_w"] = Tensor(conv)
    spec.params["conv_b"] = Tensor(np.zeros(8))
    feat = np.zeros(spec.params["fc_w"].shape)
    r, c, _ = hot
    # features are (H/2, W/2, 8) after 2x2 pooling, flattened row-major
    index = ((r // 2) * (W // 2) + (c // 2)) * 8
    feat[index, 1] = weight
    spec.params["fc_w"] = Tensor(feat)
    spec.params["fc_b"] = Tensor(np.array([bias, 0.0]))
    return spec

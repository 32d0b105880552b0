import numpy as np
import pytest

from csicodec.channel import Dataset
from csicodec.model import FeedbackCodec, ModelConfig


@pytest.fixture(scope="session")
def small_trained_model():
    """A lightly fitted tiny codec shared by evaluation-style tests."""
    from csicodec import pipeline
    from csicodec.autodiff import Tape, backward
    from csicodec.model import RoutingCollector
    from csicodec.optim import AdamState, adam_step

    model = FeedbackCodec(ModelConfig(
        enc_depth=1, enc_width=16, enc_heads=4, dec_depth=1, dec_width=16,
        dec_heads=4, n_shared=1, top_k=1, n_routed=4, patch=(4, 4),
        compression_ratio=1 / 32, ffn_expansion=1), seed=0)
    rng = np.random.default_rng(0)
    groups = (rng.standard_normal((6, 2, 32, 16)) +
              1j * rng.standard_normal((6, 2, 32, 16)))
    adam = AdamState()
    for _ in range(10):
        model.zero_grads()
        with Tape() as tape:
            total, _, _ = pipeline.group_loss_graph(
                model, groups, 7, 255.0, 0.01, RoutingCollector())
        backward(tape, total)
        adam_step(model.trainable_parameters(), None, adam, 1e-3)
    return model


@pytest.fixture(scope="session")
def toy_eval_dataset():
    rng = np.random.default_rng(7)
    base = rng.standard_normal((10, 1, 16, 32)) + 1j * rng.standard_normal((10, 1, 16, 32))
    pert = 0.15 * (rng.standard_normal((10, 3, 16, 32)) +
                   1j * rng.standard_normal((10, 3, 16, 32)))
    positions = rng.uniform(-60, 60, size=(10, 3, 2)).astype(np.float32)
    return Dataset(channels=(base + pert).astype(np.complex64),
                   positions=positions, dataset_id="toy-eval")

import os
import sys

import numpy as np
import pytest
import torch

sys.path.insert(0, os.path.dirname(__file__))

from crackrcnn.augment import AugmentPolicy, parse_ops  # noqa: E402
from crackrcnn.backbones import BackboneConfig  # noqa: E402
from crackrcnn.config import RunConfig  # noqa: E402
from crackrcnn.model import HeadConfig  # noqa: E402
from crackrcnn.synthetic import write_dataset  # noqa: E402

torch.set_num_threads(1)


def tiny_config(kind="a_panet", **kw) -> RunConfig:
    """A model small enough to train for a few steps inside a unit test."""
    heads = HeadConfig(rpn_batch=32, roi_batch=16, hidden=16, rpn_post_nms_train=30, rpn_post_nms_test=20,
                       max_detections=10)
    base = dict(
        backbone=BackboneConfig(kind=kind, base_channels=4, depth=1, out_channels=8,
                                attention_enabled=kind == "a_panet"),
        heads=heads,
        augment=AugmentPolicy(parse_ops("hflip:0.5, rotate90:0.5"), seed=3),
        epochs=2,
        batch_size=2,
        score_threshold=0.05,
        seed=11,
    )
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture
def make_config():
    return tiny_config


@pytest.fixture(scope="session")
def synthetic_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    split = write_dataset(str(root), n_images=6, seed=5, negatives=2)
    return root, split


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS, key=lambda l: int(l.split(":")[0].split()[1])):
        terminalreporter.write_line(line)

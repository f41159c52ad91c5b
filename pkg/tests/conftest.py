"""Shared fixtures: datasets, a trained desk-scale model, and its binarization.

Everything is seeded; the trained model is built once per session. The digit
noise level is chosen so the binarized model keeps high but not perfect
accuracy, which gives the ablation and fine-tuning checks room to move.
"""

import numpy as np
import pytest

from bwnet import data, net, pipeline

VGG_MINI_ARCH = "(2x8C3)-MP2-(2x16C3)-MP2-(2x32C3)-10FC-Softmax"
TOY2_ARCH = "(1x4C3)-MP2-10FC-Softmax"
NOISE = 0.45
TRAIN_CFG = dict(seed=0, max_iters=400, lr_decay_steps=(250, 340))


@pytest.fixture(scope="session")
def ds_train():
    return data.synthetic_digits(2048, seed=7, noise=NOISE)


@pytest.fixture(scope="session")
def ds_test():
    return data.synthetic_digits(512, seed=8, noise=NOISE)


@pytest.fixture(scope="session")
def ds_held():
    return data.synthetic_digits(256, seed=9, noise=NOISE)


@pytest.fixture(scope="session")
def vgg_net(ds_train):
    network = net.Network.random_init(VGG_MINI_ARCH, (1, 16, 16), seed=0, name="vgg_mini")
    net.train_baseline(network, ds_train, net.TrainConfig(**TRAIN_CFG))
    return network


@pytest.fixture(scope="session")
def vgg_run(vgg_net, ds_train):
    return pipeline.binarize_network(vgg_net, ds_train, pipeline.PipelineConfig(seed=42))


@pytest.fixture(scope="session")
def toy2_net(ds_train):
    network = net.Network.random_init(TOY2_ARCH, (1, 16, 16), seed=3, name="toy2")
    net.train_baseline(network, ds_train, net.TrainConfig(seed=0, max_iters=300,
                                                          lr_decay_steps=(200,)))
    return network


@pytest.fixture(scope="session")
def saved_toy2(toy2_net, tmp_path_factory):
    out = tmp_path_factory.mktemp("toy2_model")
    manifest = toy2_net.to_manifest(out)
    return manifest, out


def random_instance(s_dim, m_cols, seed, noise=0.1):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(s_dim, m_cols))
    w = rng.normal(size=s_dim)
    s = x.T @ w + noise * rng.normal(size=m_cols)
    return x, s, w

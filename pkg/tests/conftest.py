import numpy as np
import pytest
import torch

from patchvc import models, toy


@pytest.fixture(scope="session")
def mini_toy(tmp_path_factory):
    """Small synthetic two-speaker corpus shared across test modules."""
    out = tmp_path_factory.mktemp("mini_toy")
    info = toy.make_toy_corpus(out, seed=123, clips_per_speaker=4)
    info["out_dir"] = out
    return info


@pytest.fixture
def tiny_gen_cfg():
    return models.GeneratorConfig(base_channels=8, n_resnet_blocks=2)


@pytest.fixture
def tiny_proj_cfg():
    # stages for a 2-block generator: input, in-conv, 2 downsamples, 1 encoder block
    return models.ProjectionConfig(
        selected_layers=(0, 1, 2, 3, 4), patches_per_layer=16, embed_dim=32
    )


@pytest.fixture
def tiny_models(tiny_gen_cfg, tiny_proj_cfg):
    torch.manual_seed(0)
    g = models.Generator(tiny_gen_cfg)
    d = models.Discriminator(models.DiscriminatorConfig(base_channels=8))
    p = models.heads_for(g, tiny_proj_cfg)
    return g, d, p


@pytest.fixture
def rng():
    return np.random.default_rng(7)


@pytest.fixture(scope="session")
def mini_ckpt(mini_toy, tmp_path_factory):
    """One-epoch training run over the mini corpus; shared trained artifacts."""
    from patchvc import training

    out = tmp_path_factory.mktemp("mini_run")
    result = training.train(
        training.DomainPair(
            mini_toy["corpora"]["toy_m"], mini_toy["corpora"]["toy_f"]
        ),
        training.TrainConfig(
            epochs=1, seed=3, checkpoint_every_epochs=1, crop_duration_s=1.0
        ),
        models.GeneratorConfig(base_channels=8, n_resnet_blocks=2),
        models.DiscriminatorConfig(base_channels=8),
        models.ProjectionConfig(
            selected_layers=(0, 1, 2, 3, 4), patches_per_layer=16, embed_dim=32
        ),
        out,
    )
    return result

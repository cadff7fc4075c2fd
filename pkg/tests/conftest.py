import numpy as np
import pytest
import torch
import torch.nn as nn

from fewseg.data import SyntheticDomainSpec, generate_synthetic_domain
from fewseg.models import EPS_P, NetworkSpec


def make_domain(domain_id="d0", shape="disc", n=12, seed=0, size=(32, 32), role="source"):
    spec = SyntheticDomainSpec(
        domain_id=domain_id,
        image_size=size,
        blob_count_range=(1, 3),
        blob_radius_range=(3.0, 6.0),
        blob_shape=shape,
        foreground_intensity_range=(0.7, 0.95),
        background_intensity_range=(0.05, 0.2),
        noise_sigma=0.02,
        sample_count=n,
        seed=seed,
    )
    return generate_synthetic_domain(spec, role=role)


@pytest.fixture
def small_sources():
    return [
        make_domain("src_discs", "disc", seed=1),
        make_domain("src_ellipses", "ellipse", seed=2),
        make_domain("src_rings", "ring", seed=3),
    ]


@pytest.fixture
def small_target():
    return make_domain("tgt", "ellipse", seed=9, role="target")


@pytest.fixture
def tiny_spec():
    return NetworkSpec(architecture="FCRN", base_width=4, depth=2)


class ToyConvModel(nn.Module):
    """Minimal model exposing the batch-prediction interface.

    One 1x1 conv on a single channel: exactly two parameters (weight, bias).
    The latent is the pre-sigmoid conv output.
    """

    def __init__(self, weight=0.5, bias=-0.1):
        super().__init__()
        self.conv = nn.Conv2d(1, 1, 1).double()
        with torch.no_grad():
            self.conv.weight.fill_(weight)
            self.conv.bias.fill_(bias)
        self.spec = NetworkSpec(architecture="FCRN", base_width=4, depth=1)

    def predict_with_latent_batch(self, images, train):
        z = self.conv(images)
        probs = torch.clamp(torch.sigmoid(z), EPS_P, 1.0 - EPS_P)
        return probs[:, 0], z

    def predict_batch(self, images, train):
        return self.predict_with_latent_batch(images, train)[0]


class TwoLayerConvModel(nn.Module):
    """Two weighted conv layers with a ReLU; latent is the hidden activation."""

    def __init__(self, seed=0, hidden=3):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.conv1 = nn.Conv2d(1, hidden, 3, padding=1).double()
        self.conv2 = nn.Conv2d(hidden, 1, 3, padding=1).double()
        with torch.no_grad():
            for conv in (self.conv1, self.conv2):
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen, dtype=torch.float64) * 0.3)
                conv.bias.copy_(torch.randn(conv.bias.shape, generator=gen, dtype=torch.float64) * 0.1)
        self.spec = NetworkSpec(architecture="FCRN", base_width=4, depth=1)

    def predict_with_latent_batch(self, images, train):
        hidden = torch.relu(self.conv1(images))
        z = self.conv2(hidden)
        probs = torch.clamp(torch.sigmoid(z), EPS_P, 1.0 - EPS_P)
        return probs[:, 0], hidden

    def predict_batch(self, images, train):
        return self.predict_with_latent_batch(images, train)[0]


def random_batch(domain_id, k, size=8, seed=0, labeled=True):
    from fewseg.data import Sample, TaskBatch

    rng = np.random.default_rng(seed)
    samples = []
    for i in range(k):
        image = rng.uniform(0, 1, size=(size, size))
        mask = (rng.uniform(0, 1, size=(size, size)) > 0.6).astype(np.uint8) if labeled else None
        samples.append(Sample(image=image, mask=mask, id=f"{domain_id}_{i}", domain_id=domain_id))
    return TaskBatch(domain_id=domain_id, samples=tuple(samples), labeled=labeled)

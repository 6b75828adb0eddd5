import pytest

import fixtures


@pytest.fixture(scope="session")
def toy4_pretrained():
    return fixtures.cached("toy4_pretrained")


@pytest.fixture(scope="session")
def toy4_pdae():
    return fixtures.cached("toy4_pdae")


@pytest.fixture(scope="session")
def toy4_pdae_simple():
    return fixtures.cached("toy4_pdae_simple")


@pytest.fixture(scope="session")
def toy4_latent():
    return fixtures.cached("toy4_latent")


@pytest.fixture(scope="session")
def toy64_pdae():
    return fixtures.cached("toy64_pdae")


@pytest.fixture(scope="session")
def toy64_latent():
    return fixtures.cached("toy64_latent")


@pytest.fixture(scope="session")
def single_pretrained():
    return fixtures.cached("single_pretrained")


@pytest.fixture(scope="session")
def single_pdae():
    return fixtures.cached("single_pdae")


@pytest.fixture(scope="session")
def fig2_pair():
    return fixtures.cached("fig2_uncond"), fixtures.cached("fig2_cond")


@pytest.fixture(scope="session")
def stage_pretrained():
    return fixtures.cached("stage_pretrained")


@pytest.fixture(scope="session")
def stage_pdae_label():
    return fixtures.cached("stage_pdae_label")


@pytest.fixture(scope="session")
def mnist_pair():
    return fixtures.cached("mnist_pretrained"), fixtures.cached("mnist_pdae")

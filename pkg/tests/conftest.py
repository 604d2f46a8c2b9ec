import pytest

from wsisearch.archive import SynthSpec, generate_synthetic_archive


def small_spec(**kw) -> SynthSpec:
    base = dict(num_classes=3, wsis_per_class=6, patients_per_class=3, grid_w=20, grid_h=15, feature_dim=32, seed=3)
    base.update(kw)
    return SynthSpec(**base)


@pytest.fixture(scope="session")
def small_archive(tmp_path_factory):
    """18 WSIs x 300 patches, d=32."""
    out = tmp_path_factory.mktemp("small")
    return generate_synthetic_archive(small_spec(), out)

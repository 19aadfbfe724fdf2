import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fse.models import FseConfig  # noqa: E402
from fse.models.coarse import CoarseNetConfig  # noqa: E402
from fse.models.mask import MaskNetConfig  # noqa: E402
from fse.models.refine import RefineNetConfig  # noqa: E402
from fse.synth import make_clean_image, synthesize_from_seed  # noqa: E402


def tiny_config() -> FseConfig:
    return FseConfig(
        mask=MaskNetConfig(base_channels=8, num_residual_blocks=1),
        coarse=CoarseNetConfig(base_channels=4, num_experts=2),
        refine=RefineNetConfig(embed_dim=8, window_size=4, num_heads=2, irc_hidden=4),
    )


def synthetic_pairs(n: int, size: int, seed: int = 0):
    return [synthesize_from_seed(make_clean_image(size, seed + i), 1000 + seed + i, id=f"s{i:02d}")[0] for i in range(n)]


@pytest.fixture
def tiny():
    return tiny_config()

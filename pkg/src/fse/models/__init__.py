from .coarse import (
    AggBlock,
    CoarseGenNet,
    CoarseNetConfig,
    agg_block_forward,
    coarse_forward,
    coarse_init,
    dynamic_conv,
)
from .common import NamedTensorMap
from .fse import STAGES, FaceShadowEraser, FseConfig, fse_forward, fse_init, normalize_stages
from .mask import MaskGuideNet, MaskNetConfig, maskguide_forward, maskguide_init
from .refine import (
    RefineFaceNet,
    RefineNetConfig,
    ahswa_forward,
    irc_forward,
    refine_forward,
    refine_init,
    relative_position_index,
    window_partition,
    window_reverse,
)

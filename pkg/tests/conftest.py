import numpy as np
import pytest

from layerscene import ConditionToken, build_schedule
from layerscene.denoiser import GaussianDenoiser, PointMassDenoiser
from layerscene.scene import LayerSpec, box_mask, full_mask

FG_TOKEN = ConditionToken(1, "ball")
BG_TOKEN = ConditionToken(2, "sky")


def two_layer_specs(hw=(16, 16), box=(4, 4, 6, 6), movement=(3, 3), dtype=np.float32):
    x0, y0, bw, bh = box
    return [
        LayerSpec(
            mask=box_mask(hw, x0, y0, bw, bh, dtype=dtype),
            movement_range=movement,
            condition=FG_TOKEN,
        ),
        LayerSpec(mask=full_mask(hw, dtype=dtype), condition=BG_TOKEN),
    ]


def toy_denoiser(shape, kind="pointmass", fg=0.8, bg=-0.5, var=1.0, guidance=1.0,
                 dtype=np.float32):
    if kind == "pointmass":
        d = PointMassDenoiser(guidance=guidance)
    else:
        d = GaussianDenoiser(var=var, guidance=guidance)
    d.register(FG_TOKEN, np.full(shape, fg, dtype))
    d.register(BG_TOKEN, np.full(shape, bg, dtype))
    return d


@pytest.fixture
def schedule50():
    return build_schedule(50)

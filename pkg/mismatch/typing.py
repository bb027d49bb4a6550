from typing import Any
from typing import Literal
from typing import NewType

import numpy as np
from numpy.typing import NBitBase

Batch = NewType("Batch", int)
Channel = NewType("Channel", int)
Height = NewType("Height", int)
Width = NewType("Width", int)

NpFlt = np.dtype[np.floating[NBitBase]]

Float1D = np.ndarray[tuple[int], NpFlt]
Float2D = np.ndarray[tuple[Height, Width], NpFlt]
FloatND = np.ndarray[Any, NpFlt]
FeatureMap = np.ndarray[tuple[Batch, Channel, Height, Width], NpFlt]
Mask2D = np.ndarray[tuple[Height, Width], np.dtype[np.uint8]]

Activation = Literal["relu", "sigmoid", "identity"]
Resample = Literal["maxpool2", "upsample2_nearest"]
MorphOp = Literal["dilate", "erode"]
ERFMode = Literal["linearized", "as_is"]

AX_CHANNEL = -3
AX_HEIGHT = -2
AX_WIDTH = -1

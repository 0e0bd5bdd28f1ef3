"""Non-neural parts of a single-stage lesion detector for breast tomosynthesis.

Preprocessing, grid/anchor box coding, objectness losses, prediction
postprocessing and FROC evaluation, plus synthetic phantoms to test them.
"""

__version__ = "0.1.0"

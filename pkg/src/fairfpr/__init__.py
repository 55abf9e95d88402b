"""Instance-FPR penalty loss for margin-softmax metric learning.

Submodules: ``numerics``, ``synthdata``, ``encoder``, ``losses``,
``thresholding``, ``metrics``, ``trainer`` and the ``cli`` entry point.
"""

__version__ = "0.1.0"

"""Fake-image classification from first principles.

A numpy-backed autodiff core (``tensor``), a layer zoo (``layers``),
four classifier architectures (``models``), dataset tooling (``data``),
training machinery (``optim``), evaluation (``metrics``), and a CLI
(``cli``) gluing the pipeline together.
"""

from .tensor import Tensor, no_grad

__version__ = "0.1.0"
__all__ = ["Tensor", "no_grad", "__version__"]

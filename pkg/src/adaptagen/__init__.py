"""Few-shot domain-adapted text-to-image pipeline toolkit."""

__version__ = "0.1.0"

from .errors import AdaptagenError

__all__ = ["AdaptagenError", "__version__"]

"""One-shot talking-face generation from a single synthetic speaker.

Audio is turned into frame-aligned acoustic features and phoneme labels, an
audio-visual correlation transformer maps them to keypoint motion, and a
first-order motion renderer animates an arbitrary reference image.
"""

from .errors import AlignmentError, ConfigurationError, NumericError, RejectedInputError

__version__ = "0.1.0"

__all__ = [
    "AlignmentError",
    "ConfigurationError",
    "NumericError",
    "RejectedInputError",
    "__version__",
]

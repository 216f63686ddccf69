"""Self-judging reinforcement learning at desk scale.

Verifiable environments (Countdown arithmetic, antiderivatives), a pluggable
judge layer, judge-quality metrics and a GRPO loop over a toy policy.
"""
from .verdict import Verdict

__version__ = "0.1.0"

__all__ = ["Verdict", "__version__"]

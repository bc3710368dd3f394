"""canguard: CAN bus driver-authentication toolkit and anti-theft simulator.

Parses and replays candump traces, extracts behavioral features, trains
owner-profile authenticators, and runs a multi-stage anti-theft state
machine against a simulated vehicle on an in-process virtual bus.
"""

from ._codec import BACKEND as CODEC_BACKEND

__version__ = "0.1.0"

__all__ = ["CODEC_BACKEND", "__version__"]

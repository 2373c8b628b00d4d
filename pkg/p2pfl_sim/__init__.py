#!/usr/bin/env python
"""Top-level module for p2pfl_sim"""

# Import all submodules
from . import util
from . import belief
from . import learning
from . import aggregation
from . import adversary
from . import network
from . import analysis
from . import presets
from . import simulation
from . import io

__version__ = "0.1.0"

"""Random function iterations: simulation, operator regularity checks and
distances between empirical laws."""

from .operators import *  # noqa: F401,F403
from .measures import *  # noqa: F401,F403
from .engine import *  # noqa: F401,F403
from .problems import *  # noqa: F401,F403
from .diagnostics import *  # noqa: F401,F403

__version__ = "0.1.0"

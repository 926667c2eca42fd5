"""Natural primal-dual hybrid gradient solvers for PDEs and optimal transport.

Submodules are imported explicitly (``from npdg import fields``); nothing heavy
is pulled in at package import time.
"""

__version__ = "0.1.0"

"""DyRep: dynamic structural re-parameterization (python bindings)."""

try:
    from ._dyrep import *  # noqa: F401,F403
    from ._dyrep import __version__  # noqa: F401
except ImportError:  # build-tree layout: extension next to the package dir
    from _dyrep import *  # noqa: F401,F403
    from _dyrep import __version__  # noqa: F401

"""cache-enabled inference for feed-forward classifiers."""

try:
    from ._core import *  # noqa: F401,F403  (installed wheel)
except ImportError:
    from _core import *  # noqa: F401,F403  (in-tree build dir on PYTHONPATH)

"""Sequential recommender with per-token adaptive hidden states."""

try:
    from ttt4rec._ttt4rec import *  # noqa: F401,F403
    from ttt4rec._ttt4rec import __version__  # noqa: F401
except ImportError:  # build-tree layout: the extension sits on sys.path directly
    from _ttt4rec import *  # noqa: F401,F403
    from _ttt4rec import __version__  # noqa: F401

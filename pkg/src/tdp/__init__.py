"""Content-adaptive learned preprocessing for UGC video coding.

Submodules are imported on demand; ``import tdp`` alone stays light so the
stub codec subprocess starts quickly.
"""

__version__ = "0.1.0"

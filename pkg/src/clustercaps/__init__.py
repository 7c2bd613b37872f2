"""Capsule networks with non-iterative cluster routing.

``tensor`` is a small reverse-mode autodiff engine on numpy, ``routing`` the
cluster-routing layer, ``models`` the network variants, ``data`` the dataset
readers, ``training`` the SGD loop and ``cli`` the command line.
"""

__version__ = "0.1.0"

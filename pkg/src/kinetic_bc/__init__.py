"""Kinetic boundary-value toolkit: convex-domain characteristics, wall laws,
transport semigroups, linearised collision operators and decay diagnostics."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

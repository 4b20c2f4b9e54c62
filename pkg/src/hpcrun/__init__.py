"""Desk-scale HPC container runtime and image gateway.

The gateway pulls or imports container images, flattens their layer
stacks into packed read-only root trees and catalogs them for
system-wide use.  The runtime executes a cataloged image through a
staged, privilege-dropping pipeline and transparently grafts host GPU
devices and ABI-compatible MPI libraries into the container at launch.
"""

__version__ = "0.1.0"

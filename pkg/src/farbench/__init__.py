"""Workbench for rewiring-hardened binary16 linear layers.

Subpackages cover the full pipeline: bit-exact fp16 primitives (``fp16``),
toy victim models (``models``), the offline hardening compiler
(``compiler``), the functional reference (``reference``), the cycle-level
dot-product-engine simulator (``dpe``), the system timing model
(``system``), the progressive-bit-search attack harness (``attack``) and
the command line front end (``cli``).
"""

__version__ = "0.1.0"

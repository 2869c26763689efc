"""
Semi-Implicit Studio Tools Package

Numerical building blocks: the tape autodiff core, distribution families,
reference baselines and diagnostics. Import the submodules directly, e.g.
`from tools import ndcore as nd`.
"""

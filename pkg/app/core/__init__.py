"""Numerical core: meshes, bases, assembly, solvers, sampling, networks and evaluation."""

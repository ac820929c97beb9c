"""Block-sparse NN compiler and analytic timing simulator for meshes of
tensor cores with Memtile scratchpads."""

__version__ = "0.1.0"

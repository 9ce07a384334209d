"""N:M activation sparsity toolkit for transformer linear layers"""
__version__ = "1.0.0"

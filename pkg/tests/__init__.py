"""Test suite for the lynx sparsity toolkit"""

"""Pydantic models for sparsity configuration, packed formats and reports"""

"""Computation services, one per concern"""

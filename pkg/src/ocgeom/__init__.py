"""Geometric analysis of optimal control problems."""

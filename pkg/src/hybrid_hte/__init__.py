"""Hybrid two-stage heterogeneous treatment effect workflow."""

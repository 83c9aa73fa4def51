"""
Data-generating processes and Monte Carlo experiments.
"""

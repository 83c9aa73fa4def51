"""
Variance estimation and the cluster bootstrap.
"""

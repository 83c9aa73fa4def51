"""
Grouped GLM estimation: fixed effects, regularized fixed effects and multilevel models.
"""

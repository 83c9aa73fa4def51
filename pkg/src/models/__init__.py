"""
Families, the penalized IRLS engine, MLM fitting and the estimator registry.
"""

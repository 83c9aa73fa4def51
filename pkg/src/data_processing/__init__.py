"""
Grouped datasets and bias-correction augmentations.
"""

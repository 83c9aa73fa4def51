"""
Tests for the grouped GLM library.
"""

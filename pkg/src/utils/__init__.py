"""
Settings, logging, input validation and the exception hierarchy.
"""

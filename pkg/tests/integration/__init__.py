"""
Integration tests for l2d-toy.

This package contains tests that train, generate and evaluate through
several components at once, including the slow acceptance runs.
"""

"""Unit tests for l2d-toy."""

"""
Test suite for l2d-toy.

Unit tests live in ``tests/unit``; end-to-end runs of training, generation,
experiments and the CLI live in ``tests/integration``.
"""

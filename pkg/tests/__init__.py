"""
Tests for the liftmesh package.
"""

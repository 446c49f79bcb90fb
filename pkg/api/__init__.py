"""
API module for liftmesh inference.
"""

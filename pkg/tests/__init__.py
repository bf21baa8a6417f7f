"""
Tests for neuralinterp.
"""

"""FreeGibbs Test Suite"""
